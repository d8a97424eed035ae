#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "blstm/error.hpp"
#include "blstm/network.hpp"
#include "blstm/optim.hpp"

namespace blstm {

// SEQNN1 checkpoint layout:
//
//   SEQNN1
//   config net.<field> <value>          one line per NetworkConfig field
//   meta <key> <value...>               free-form trainer state, in order
//   optimizer <method> <t>              only when optimizer state is stored
//   tensor <name> <d0> [<d1> [<d2>]]    manifest, in blob order
//   end
//   <little-endian float32 blobs, concatenated in manifest order>
//
// Parameter tensors are named layer<l>.<fwd|bwd>.<W|R|b>, softmax.W and
// softmax.b; the packed 4H gate axis is ordered i, f, g, o. Optimizer slots
// follow the parameters as opt.<param name>.<slot>.

struct Checkpoint {
  NetworkConfig net;
  NetworkParams<float> params;
  std::optional<OptimizerState<float>> optimizer;
  std::vector<std::pair<std::string, std::string>> meta;

  std::optional<std::string> meta_value(const std::string& key) const {
    for (const auto& [k, v] : meta) {
      if (k == key) return v;
    }
    return std::nullopt;
  }
};

namespace detail {

inline void write_f32_le(std::ostream& out, const Tensor<float>& t) {
  std::vector<char> bytes(t.size() * 4);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(t[i]);
    for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<char>((u >> (8 * b)) & 0xFFu);
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline void read_f32_le(std::istream& in, Tensor<float>& t, const std::string& name) {
  std::vector<unsigned char> bytes(t.size() * 4);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw ValidationError("checkpoint truncated inside tensor " + name);
  }
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(bytes[i * 4 + b]) << (8 * b);
    t[i] = std::bit_cast<float>(u);
  }
}

inline std::vector<std::pair<std::string, std::string>> network_config_fields(const NetworkConfig& c) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", c.dropout);
  return {{"net.input_dim", std::to_string(c.input_dim)},
          {"net.num_classes", std::to_string(c.num_classes)},
          {"net.num_layers", std::to_string(c.num_layers)},
          {"net.hidden_size", std::to_string(c.hidden_size)},
          {"net.bidirectional", c.bidirectional ? "1" : "0"},
          {"net.dropout", buf},
          {"net.seed", std::to_string(c.seed)}};
}

inline void set_network_field(NetworkConfig& c, const std::string& key, const std::string& value) {
  try {
    if (key == "net.input_dim") c.input_dim = std::stoull(value);
    else if (key == "net.num_classes") c.num_classes = std::stoull(value);
    else if (key == "net.num_layers") c.num_layers = std::stoull(value);
    else if (key == "net.hidden_size") c.hidden_size = std::stoull(value);
    else if (key == "net.bidirectional") c.bidirectional = value == "1";
    else if (key == "net.dropout") c.dropout = std::stod(value);
    else if (key == "net.seed") c.seed = std::stoull(value);
    else throw ValidationError("checkpoint: unknown config field '" + key + "'");
  } catch (const std::logic_error&) {
    throw ValidationError("checkpoint: bad value '" + value + "' for " + key);
  }
}

}  // namespace detail

inline void write_checkpoint(const Checkpoint& ck, std::ostream& out) {
  out << "SEQNN1\n";
  for (const auto& [k, v] : detail::network_config_fields(ck.net)) out << "config " << k << ' ' << v << '\n';
  for (const auto& [k, v] : ck.meta) out << "meta " << k << ' ' << v << '\n';

  std::vector<std::pair<std::string, const Tensor<float>*>> manifest;
  ck.params.for_each([&](const std::string& name, const Tensor<float>& t) { manifest.emplace_back(name, &t); });
  if (ck.optimizer) {
    out << "optimizer " << to_string(ck.optimizer->method) << ' ' << ck.optimizer->t << '\n';
    const auto names = ck.params.names();
    for (std::size_t k = 0; k < names.size(); ++k) {
      for (std::size_t s = 0; s < ck.optimizer->slots.size(); ++s) {
        manifest.emplace_back("opt." + names[k] + "." + ck.optimizer->slots[s],
                              ck.optimizer->values[s].tensors()[k]);
      }
    }
  }
  for (const auto& [name, t] : manifest) {
    out << "tensor " << name;
    for (std::size_t d : t->shape()) out << ' ' << d;
    out << '\n';
  }
  out << "end\n";
  for (const auto& [name, t] : manifest) detail::write_f32_le(out, *t);
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write checkpoint '" + path + "'");
  write_checkpoint(ck, out);
  if (!out) throw ValidationError("failed writing checkpoint '" + path + "'");
}

inline Checkpoint read_checkpoint(std::istream& in) {
  Checkpoint ck;
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line) || line != "SEQNN1") throw ValidationError("not a SEQNN1 checkpoint");
  ++line_no;

  std::vector<std::pair<std::string, Shape>> manifest;
  std::optional<std::pair<Method, std::uint64_t>> opt_header;
  bool ended = false;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "end") {
      ended = true;
      break;
    }
    if (tag == "config") {
      std::string key, value;
      ls >> key >> value;
      detail::set_network_field(ck.net, key, value);
    } else if (tag == "meta") {
      std::string key;
      ls >> key;
      std::string value;
      std::getline(ls >> std::ws, value);
      ck.meta.emplace_back(key, value);
    } else if (tag == "optimizer") {
      std::string method;
      std::uint64_t t = 0;
      if (!(ls >> method >> t)) throw ParseError("malformed optimizer line", line_no);
      opt_header.emplace(parse_method(method), t);
    } else if (tag == "tensor") {
      std::string name;
      ls >> name;
      Shape shape;
      std::size_t d = 0;
      while (ls >> d) shape.push_back(d);
      if (name.empty() || shape.empty()) throw ParseError("malformed tensor line", line_no);
      manifest.emplace_back(name, shape);
    } else {
      throw ParseError("unknown checkpoint header line '" + tag + "'", line_no);
    }
  }
  if (!ended) throw ValidationError("checkpoint header is missing 'end'");

  std::map<std::string, Tensor<float>> tensors;
  for (const auto& [name, shape] : manifest) {
    Tensor<float> t(shape);
    detail::read_f32_le(in, t, name);
    tensors.emplace(name, std::move(t));
  }

  auto take = [&](const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ValidationError("checkpoint lacks tensor " + name);
    Tensor<float> t = std::move(it->second);
    tensors.erase(it);
    return t;
  };

  const NetworkConfig& cfg = ck.net;
  for (std::size_t l = 0;; ++l) {
    const std::string prefix = "layer" + std::to_string(l + 1) + ".";
    if (!tensors.count(prefix + "fwd.W")) break;
    LstmLayerParams<float> layer;
    for (std::size_t d = 0; d < cfg.num_directions(); ++d) {
      const std::string p = prefix + direction_name(d) + ".";
      LstmDirParams<float> dir{take(p + "W"), take(p + "R"), take(p + "b")};
      const std::size_t H = cfg.hidden_size;
      if (dir.W.shape() != Shape{cfg.layer_input_width(l), 4 * H} || dir.R.shape() != Shape{H, 4 * H} ||
          dir.b.shape() != Shape{4 * H}) {
        throw ValidationError("checkpoint tensor " + p + "* has shapes inconsistent with its config");
      }
      layer.dirs.push_back(std::move(dir));
    }
    ck.params.layers.push_back(std::move(layer));
  }
  if (ck.params.layers.empty()) throw ValidationError("checkpoint holds no LSTM layers");
  if (ck.params.depth() > cfg.num_layers) throw ValidationError("checkpoint deeper than its configured depth");
  ck.params.softmax_W = take("softmax.W");
  ck.params.softmax_b = take("softmax.b");
  if (ck.params.softmax_W.shape() != Shape{cfg.output_width(), cfg.num_classes} ||
      ck.params.softmax_b.shape() != Shape{cfg.num_classes}) {
    throw ValidationError("checkpoint softmax shapes inconsistent with its config");
  }

  if (opt_header) {
    OptimizerState<float> st = init_optimizer_state(ck.params, opt_header->first);
    st.t = opt_header->second;
    const auto names = ck.params.names();
    for (std::size_t s = 0; s < st.slots.size(); ++s) {
      auto slot_tensors = st.values[s].tensors();
      for (std::size_t k = 0; k < names.size(); ++k) {
        Tensor<float> t = take("opt." + names[k] + "." + st.slots[s]);
        if (t.shape() != slot_tensors[k]->shape()) {
          throw ValidationError("optimizer slot for " + names[k] + " has the wrong shape");
        }
        *slot_tensors[k] = std::move(t);
      }
    }
    ck.optimizer = std::move(st);
  }
  if (!tensors.empty()) throw ValidationError("checkpoint has unexpected tensor " + tensors.begin()->first);
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint '" + path + "'");
  return read_checkpoint(in);
}

}  // namespace blstm
