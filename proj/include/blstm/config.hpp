#pragma once

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <istream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "blstm/error.hpp"
#include "blstm/trainer.hpp"

namespace blstm {

// Flat `key = value` configuration. Blank lines and lines starting with '#'
// are ignored. Every key names exactly one TrainConfig field.
// model_avg.n_copies = 0 switches model averaging off; it is listed after
// merge_every so that serialized configs read back unchanged.

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::uint64_t parse_uint(const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) {
    throw ConfigError("expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

inline double parse_real(const std::string& v) {
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size()) throw ConfigError("expected a number, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("expected true or false, got '" + v + "'");
}

inline std::string show_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string show_bool(bool v) { return v ? "true" : "false"; }

struct ConfigKey {
  std::string_view name;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

#define BLSTM_UINT_KEY(key, field)                                                         \
  ConfigKey {                                                                              \
    key, [](TrainConfig& c, const std::string& v) { c.field = parse_uint(v); },            \
        [](const TrainConfig& c) { return std::to_string(c.field); }                       \
  }
#define BLSTM_REAL_KEY(key, field)                                                         \
  ConfigKey {                                                                              \
    key, [](TrainConfig& c, const std::string& v) { c.field = parse_real(v); },            \
        [](const TrainConfig& c) { return show_real(c.field); }                            \
  }
#define BLSTM_BOOL_KEY(key, field)                                                         \
  ConfigKey {                                                                              \
    key, [](TrainConfig& c, const std::string& v) { c.field = parse_bool(v); },            \
        [](const TrainConfig& c) { return show_bool(c.field); }                            \
  }
#define BLSTM_STRING_KEY(key, field)                                                       \
  ConfigKey {                                                                              \
    key, [](TrainConfig& c, const std::string& v) { c.field = v; },                        \
        [](const TrainConfig& c) { return c.field; }                                       \
  }

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      BLSTM_STRING_KEY("data.train", train_path),
      BLSTM_STRING_KEY("data.cv", cv_path),
      BLSTM_REAL_KEY("data.cv_fraction", cv_fraction),
      BLSTM_UINT_KEY("net.input_dim", net.input_dim),
      BLSTM_UINT_KEY("net.num_classes", net.num_classes),
      BLSTM_UINT_KEY("net.num_layers", net.num_layers),
      BLSTM_UINT_KEY("net.hidden_size", net.hidden_size),
      BLSTM_BOOL_KEY("net.bidirectional", net.bidirectional),
      BLSTM_REAL_KEY("net.dropout", net.dropout),
      BLSTM_UINT_KEY("net.seed", net.seed),
      BLSTM_UINT_KEY("batching.T", batching.T),
      BLSTM_UINT_KEY("batching.t_step", batching.t_step),
      BLSTM_UINT_KEY("batching.n_chunks", batching.n_chunks),
      BLSTM_UINT_KEY("batching.shuffle_seed", batching.shuffle_seed),
      ConfigKey{"optim.method", [](TrainConfig& c, const std::string& v) { c.optim.method = parse_method(v); },
                [](const TrainConfig& c) { return std::string(to_string(c.optim.method)); }},
      BLSTM_REAL_KEY("optim.lr", optim.lr),
      BLSTM_REAL_KEY("optim.momentum", optim.momentum),
      BLSTM_REAL_KEY("optim.decay", optim.decay),
      BLSTM_REAL_KEY("optim.beta1", optim.beta1),
      BLSTM_REAL_KEY("optim.beta2", optim.beta2),
      ConfigKey{"optim.epsilon",
                [](TrainConfig& c, const std::string& v) {
                  if (v == "default") c.optim.epsilon.reset();
                  else c.optim.epsilon = parse_real(v);
                },
                [](const TrainConfig& c) {
                  return c.optim.epsilon ? show_real(*c.optim.epsilon) : std::string("default");
                }},
      BLSTM_REAL_KEY("optim.l2", optim.l2),
      ConfigKey{"optim.grad_clip",
                [](TrainConfig& c, const std::string& v) {
                  if (v == "none") c.optim.grad_clip.reset();
                  else c.optim.grad_clip = parse_real(v);
                },
                [](const TrainConfig& c) {
                  return c.optim.grad_clip ? show_real(*c.optim.grad_clip) : std::string("none");
                }},
      ConfigKey{"optim.clip_mode",
                [](TrainConfig& c, const std::string& v) {
                  if (v == "global") c.optim.clip_mode = ClipMode::global_norm;
                  else if (v == "per_tensor") c.optim.clip_mode = ClipMode::per_tensor;
                  else throw ConfigError("expected global or per_tensor, got '" + v + "'");
                },
                [](const TrainConfig& c) {
                  return std::string(c.optim.clip_mode == ClipMode::global_norm ? "global" : "per_tensor");
                }},
      BLSTM_REAL_KEY("optim.grad_noise", optim.grad_noise),
      BLSTM_UINT_KEY("optim.noise_seed", optim.noise_seed),
      ConfigKey{"model_avg.merge_every",
                [](TrainConfig& c, const std::string& v) {
                  const auto k = parse_uint(v);
                  if (!c.model_avg) c.model_avg.emplace();
                  c.model_avg->merge_every = k;
                },
                [](const TrainConfig& c) { return std::to_string(c.model_avg ? c.model_avg->merge_every : 1); }},
      ConfigKey{"model_avg.n_copies",
                [](TrainConfig& c, const std::string& v) {
                  const auto n = parse_uint(v);
                  if (n == 0) {
                    c.model_avg.reset();
                    return;
                  }
                  if (!c.model_avg) c.model_avg.emplace();
                  c.model_avg->n_copies = n;
                },
                [](const TrainConfig& c) { return std::to_string(c.model_avg ? c.model_avg->n_copies : 0); }},
      BLSTM_UINT_KEY("train.epochs", epochs),
      BLSTM_STRING_KEY("train.out", checkpoint_dir),
      BLSTM_BOOL_KEY("newbob.enabled", newbob.enabled),
      BLSTM_REAL_KEY("newbob.rel_threshold", newbob.rel_threshold),
      BLSTM_REAL_KEY("newbob.factor", newbob.factor),
      BLSTM_BOOL_KEY("pretrain.enabled", pretrain.enabled),
      ConfigKey{"pretrain.mode",
                [](TrainConfig& c, const std::string& v) {
                  if (v == "greedy") c.pretrain.mode = PretrainMode::greedy;
                  else if (v == "full") c.pretrain.mode = PretrainMode::full;
                  else throw ConfigError("expected greedy or full, got '" + v + "'");
                },
                [](const TrainConfig& c) { return std::string(to_string(c.pretrain.mode)); }},
  };
  return keys;
}

#undef BLSTM_UINT_KEY
#undef BLSTM_REAL_KEY
#undef BLSTM_BOOL_KEY
#undef BLSTM_STRING_KEY

}  // namespace detail

/// Sets one field. Unknown keys and malformed values raise ConfigError naming
/// the key.
inline void apply_setting(TrainConfig& cfg, std::string_view key, const std::string& value) {
  for (const auto& k : detail::config_keys()) {
    if (k.name != key) continue;
    try {
      k.set(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(key) + ": " + e.what());
    }
    return;
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

/// Applies `key=value` strings in order.
inline void apply_overrides(TrainConfig& cfg, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not of the form key=value");
    apply_setting(cfg, detail::trim(std::string_view(o).substr(0, eq)), detail::trim(std::string_view(o).substr(eq + 1)));
  }
}

inline TrainConfig parse_config(std::istream& in, TrainConfig cfg = {}) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string s = detail::trim(line);
    if (s.empty() || s[0] == '#') continue;
    const auto eq = s.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    try {
      apply_setting(cfg, detail::trim(std::string_view(s).substr(0, eq)), detail::trim(std::string_view(s).substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return cfg;
}

inline TrainConfig load_config(const std::string& path, TrainConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  return parse_config(in, std::move(base));
}

/// Every key with its current value, in table order.
inline std::vector<std::pair<std::string, std::string>> config_items(const TrainConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& k : detail::config_keys()) out.emplace_back(std::string(k.name), k.get(cfg));
  return out;
}

inline std::string serialize_config(const TrainConfig& cfg) {
  std::string out;
  for (const auto& [k, v] : config_items(cfg)) out += k + " = " + v + "\n";
  return out;
}

}  // namespace blstm
