#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "blstm/checkpoint.hpp"
#include "blstm/data.hpp"
#include "blstm/error.hpp"
#include "blstm/network.hpp"
#include "blstm/optim.hpp"

namespace blstm {

struct NewbobConfig {
  bool enabled = true;
  double rel_threshold = 0.01;
  double factor = 0.5;

  void validate() const {
    if (!(rel_threshold > 0.0)) throw ConfigError("newbob.rel_threshold must be > 0");
    if (!(factor > 0.0 && factor < 1.0)) throw ConfigError("newbob.factor must be in (0, 1)");
  }
  friend bool operator==(const NewbobConfig&, const NewbobConfig&) = default;
};

enum class PretrainMode { greedy, full };

inline std::string_view to_string(PretrainMode m) { return m == PretrainMode::greedy ? "greedy" : "full"; }

struct PretrainConfig {
  bool enabled = false;
  PretrainMode mode = PretrainMode::full;
  friend bool operator==(const PretrainConfig&, const PretrainConfig&) = default;
};

struct TrainConfig {
  NetworkConfig net;
  BatchingConfig batching;
  OptimConfig optim;
  std::optional<ModelAverageConfig> model_avg;
  std::size_t epochs = 30;
  NewbobConfig newbob;
  PretrainConfig pretrain;
  std::string train_path;
  std::string cv_path;        // empty: hold out the last cv_fraction of the training set
  double cv_fraction = 0.05;
  std::string checkpoint_dir;  // empty: nothing is written to disk

  void validate() const {
    if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
    if (cv_path.empty() && !(cv_fraction > 0.0 && cv_fraction < 1.0)) {
      throw ConfigError("data.cv_fraction must be in (0, 1)");
    }
    net.validate();
    batching.validate();
    optim.validate();
    if (model_avg) model_avg->validate();
    newbob.validate();
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t depth = 0;
  double lr = 0.0;  // rate used during this epoch
  double train_ce = 0.0;
  double cv_ce = 0.0;
  double cv_fer = 0.0;
  double wall_seconds = 0.0;
};

enum class TrainStatus { ok, model_broken };

struct TrainReport {
  std::vector<EpochRecord> records;
  std::vector<std::size_t> saved_checkpoints;
  TrainStatus status = TrainStatus::ok;
  std::string message;
};

/// Multiplies lr by cfg.factor when the relative CV CE improvement over the
/// previous epoch is below cfg.rel_threshold.
inline double newbob_adjust(double lr, std::optional<double> prev_cv_ce, double cv_ce, const NewbobConfig& cfg) {
  if (!(lr > 0.0)) throw ValidationError("newbob: learning rate must be > 0");
  if (!std::isfinite(cv_ce)) throw ValidationError("newbob: CV CE is not finite");
  if (!prev_cv_ce) return lr;
  if (!(*prev_cv_ce > 0.0)) throw ValidationError("newbob: previous CV CE must be > 0");
  const double rel = (*prev_cv_ce - cv_ce) / *prev_cv_ce;
  return rel < cfg.rel_threshold ? lr * cfg.factor : lr;
}

// ---------------------------------------------------------------------------
// One epoch

struct EpochSettings {
  OptimConfig optim;  // lr already set for this epoch
  double dropout = 0.0;
  std::optional<ModelAverageConfig> model_avg;
  std::vector<bool> trainable;  // empty: train every tensor
  std::uint64_t dropout_seed = 0;
  std::uint64_t noise_seed = 0;
};

/// forward (train mode), backward, clip, L2, noise, update for one minibatch.
/// Returns the frame metrics seen during the forward pass.
template <class T>
FrameMetrics train_step(Replica<T>& model, const Minibatch& batch, const EpochSettings& s, Rng& dropout_rng,
                        Rng& noise_rng) {
  auto fwd = forward(model.params, batch, Mode::train, s.dropout, dropout_rng);
  const FrameMetrics m = frame_metrics(fwd.posteriors, batch);
  if (!std::isfinite(m.ce_sum)) throw DivergenceError("model broken: non-finite training loss");
  Gradients<T> grads = backward(model.params, batch, fwd.cache, fwd.posteriors);
  if (!s.trainable.empty()) {
    auto g = grads.tensors();
    for (std::size_t k = 0; k < g.size(); ++k) {
      if (!s.trainable[k]) g[k]->fill(T{0});
    }
  }
  postprocess_gradients(grads, model.params, s.optim, model.state.t + 1, noise_rng);
  apply_update(model.state, model.params, grads, s.optim, s.trainable);
  return m;
}

/// Trains over every minibatch of the stream. With model averaging the
/// batches are dealt to n copies that are merged every n*k updates.
template <class T>
FrameMetrics run_epoch(Replica<T>& model, MinibatchStream& stream, const EpochSettings& s) {
  Rng dropout_rng(s.dropout_seed);
  Rng noise_rng(s.noise_seed);
  FrameMetrics total;
  if (s.model_avg) {
    std::vector<Replica<T>> copies(s.model_avg->n_copies, model);
    model_average_step(
        copies, *s.model_avg, [&] { return stream.next(); },
        [&](Replica<T>& r, const Minibatch& b) { total += train_step(r, b, s, dropout_rng, noise_rng); });
    model = std::move(copies.front());
  } else {
    while (auto batch = stream.next()) total += train_step(model, *batch, s, dropout_rng, noise_rng);
  }
  return total;
}

/// Eval-mode metrics over whole sequences, `batch_size` sequences at a time.
/// A positive `chunk_len` instead cuts sequences into disjoint chunks.
template <class T>
FrameMetrics evaluate(const NetworkParams<T>& params, const SequenceDataset& ds, std::size_t batch_size = 40,
                      std::size_t chunk_len = 0) {
  if (ds.empty()) throw ValidationError("cannot evaluate on an empty dataset");
  if (batch_size < 1) throw ParameterError("evaluation batch size must be >= 1");
  std::vector<ChunkSpec> chunks;
  for (std::size_t i = 0; i < ds.sequences.size(); ++i) {
    const std::size_t len = ds.sequences[i].length;
    const std::size_t step = chunk_len ? chunk_len : len;
    for (std::size_t s = 0; s < len; s += step) chunks.push_back({i, s, std::min(step, len - s)});
  }
  FrameMetrics total;
  Rng unused(0);
  for (std::size_t pos = 0; pos < chunks.size(); pos += batch_size) {
    const std::size_t n = std::min(batch_size, chunks.size() - pos);
    const Minibatch mb = assemble_minibatch(ds, std::span<const ChunkSpec>(chunks).subspan(pos, n));
    const auto fwd = forward(params, mb, Mode::eval, 0.0, unused);
    total = frame_metrics(fwd.posteriors, mb, total);  // one running sum in sequence order
  }
  if (total.frames == 0) throw ValidationError("evaluation set has no counted frames");
  return total;
}

// ---------------------------------------------------------------------------
// Layer-wise construction

enum class GrowResult { grown, at_target };

/// Inserts a fresh LSTM layer below the softmax and re-initializes the softmax.
/// Existing layers are left untouched. Returns at_target without changes when
/// the network already has cfg.num_layers layers.
template <class T>
GrowResult pretrain_grow(NetworkParams<T>& params, const NetworkConfig& cfg, std::uint64_t seed) {
  if (params.depth() >= cfg.num_layers) return GrowResult::at_target;
  const std::size_t l = params.depth();
  Rng rng(mix_seed(seed, 0x20000 + l));
  params.layers.push_back(init_lstm_layer<T>(cfg, l, rng));
  init_softmax(params, cfg, rng);
  return GrowResult::grown;
}

/// Mask over the manifest order that selects the top LSTM layer and softmax.
template <class T>
std::vector<bool> top_layer_mask(const NetworkParams<T>& params) {
  const std::string top = "layer" + std::to_string(params.depth()) + ".";
  std::vector<bool> mask;
  for (const auto& name : params.names()) {
    mask.push_back(name.rfind(top, 0) == 0 || name.rfind("softmax.", 0) == 0);
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Full run

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string record_line(const EpochRecord& r) {
  std::ostringstream s;
  s << "epoch " << r.epoch << " depth " << r.depth << " lr " << format_double(r.lr) << " train_ce "
    << format_double(r.train_ce) << " cv_ce " << format_double(r.cv_ce) << " cv_fer " << format_double(r.cv_fer)
    << " secs ";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", r.wall_seconds);
  s << buf;
  return s.str();
}

inline EpochRecord parse_record_line(const std::string& line) {
  std::istringstream s(line);
  EpochRecord r;
  std::string k[7];
  if (!(s >> k[0] >> r.epoch >> k[1] >> r.depth >> k[2] >> r.lr >> k[3] >> r.train_ce >> k[4] >> r.cv_ce >> k[5] >>
        r.cv_fer >> k[6] >> r.wall_seconds) ||
      k[0] != "epoch" || k[6] != "secs") {
    throw ValidationError("malformed epoch record '" + line + "'");
  }
  return r;
}

inline std::string checkpoint_name(std::size_t epoch) { return "epoch" + std::to_string(epoch) + ".seqnn"; }

class Trainer {
 public:
  /// `metadata` is echoed into summary.json (e.g. the effective config).
  Trainer(TrainConfig cfg, SequenceDataset train, SequenceDataset cv,
          std::vector<std::pair<std::string, std::string>> metadata = {})
      : cfg_(std::move(cfg)), train_(std::move(train)), cv_(std::move(cv)), metadata_(std::move(metadata)) {
    resolve_dims();
    cfg_.validate();
    train_.validate();
    cv_.validate();
    if (train_.empty()) throw ValidationError("training set is empty");
    if (cv_.empty()) throw ValidationError("CV set is empty");
    const std::size_t depth = cfg_.pretrain.enabled ? 1 : cfg_.net.num_layers;
    model_.params = init_network<float>(cfg_.net, depth);
    model_.state = init_optimizer_state(model_.params, cfg_.optim.method);
    lr_ = cfg_.optim.lr;
  }

  /// Restores parameters, optimizer state and schedule from a checkpoint
  /// written by a run with the same configuration.
  void restore(const Checkpoint& ck) {
    if (!(ck.net == cfg_.net)) throw ConfigError("checkpoint network config differs from the run config");
    if (!ck.optimizer || ck.optimizer->method != cfg_.optim.method) {
      throw ConfigError("checkpoint lacks optimizer state for " + std::string(to_string(cfg_.optim.method)));
    }
    auto need = [&](const std::string& key) {
      auto v = ck.meta_value(key);
      if (!v) throw ValidationError("checkpoint lacks trainer field '" + key + "'");
      return *v;
    };
    model_.params = ck.params;
    model_.state = *ck.optimizer;
    epochs_done_ = std::stoull(need("epoch"));
    lr_ = std::stod(need("next_lr"));
    const std::string prev = need("prev_cv_ce");
    prev_cv_ce_ = prev == "none" ? std::nullopt : std::optional<double>(std::stod(prev));
    records_.clear();
    for (const auto& [k, v] : ck.meta) {
      if (k == "record") records_.push_back(parse_record_line(v));
    }
    if (records_.size() != epochs_done_) throw ValidationError("checkpoint record count does not match its epoch");
  }

  void restore(const std::string& checkpoint_path) { restore(load_checkpoint(checkpoint_path)); }

  TrainReport run() {
    TrainReport report;
    report.records = records_;
    const std::size_t L = cfg_.net.num_layers;
    for (std::size_t e = epochs_done_ + 1; e <= cfg_.epochs; ++e) {
      std::vector<bool> trainable;
      if (cfg_.pretrain.enabled && e > 1 && pretrain_grow(model_.params, cfg_.net, cfg_.net.seed) == GrowResult::grown) {
        model_.state = init_optimizer_state(model_.params, cfg_.optim.method);
        prev_cv_ce_.reset();
        if (cfg_.pretrain.mode == PretrainMode::greedy) trainable = top_layer_mask(model_.params);
      }

      EpochSettings s;
      s.optim = cfg_.optim;
      s.optim.lr = lr_;
      s.dropout = cfg_.net.dropout;
      s.model_avg = cfg_.model_avg;
      s.trainable = std::move(trainable);
      s.dropout_seed = mix_seed(cfg_.net.seed, 0x10000 + e);
      s.noise_seed = mix_seed(cfg_.optim.noise_seed, e);

      const auto t0 = std::chrono::steady_clock::now();
      EpochRecord rec;
      rec.epoch = e;
      rec.depth = model_.params.depth();
      rec.lr = lr_;
      try {
        MinibatchStream stream(train_, cfg_.batching, e);
        const FrameMetrics train_m = run_epoch(model_, stream, s);
        const FrameMetrics cv_m = evaluate(model_.params, cv_, cfg_.batching.n_chunks);
        rec.train_ce = train_m.ce();
        rec.cv_ce = cv_m.ce();
        rec.cv_fer = cv_m.fer();
        if (!std::isfinite(rec.cv_ce)) throw DivergenceError("model broken: non-finite CV loss");
      } catch (const DivergenceError& err) {
        report.status = TrainStatus::model_broken;
        report.message = err.what();
        break;
      }
      rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      records_.push_back(rec);
      report.records.push_back(rec);

      const bool full_depth = model_.params.depth() == L;
      if (cfg_.newbob.enabled && full_depth) {
        lr_ = newbob_adjust(lr_, prev_cv_ce_, rec.cv_ce, cfg_.newbob);
        prev_cv_ce_ = rec.cv_ce;
      }
      epochs_done_ = e;
      if (!cfg_.checkpoint_dir.empty()) {
        save_checkpoint(snapshot(), (std::filesystem::path(cfg_.checkpoint_dir) / checkpoint_name(e)).string());
        prune_checkpoints();
      }
    }
    report.saved_checkpoints = retained_epochs();
    if (!cfg_.checkpoint_dir.empty()) write_report(report);
    return report;
  }

  const NetworkParams<float>& params() const noexcept { return model_.params; }
  const OptimizerState<float>& optimizer_state() const noexcept { return model_.state; }
  const TrainConfig& config() const noexcept { return cfg_; }
  double next_lr() const noexcept { return lr_; }

  /// Checkpoint of the current state, including the schedule and records.
  Checkpoint snapshot() const {
    Checkpoint ck;
    ck.net = cfg_.net;
    ck.params = model_.params;
    ck.optimizer = model_.state;
    ck.meta.emplace_back("epoch", std::to_string(epochs_done_));
    ck.meta.emplace_back("next_lr", format_double(lr_));
    ck.meta.emplace_back("prev_cv_ce", prev_cv_ce_ ? format_double(*prev_cv_ce_) : "none");
    for (const auto& r : records_) ck.meta.emplace_back("record", record_line(r));
    return ck;
  }

  /// Epochs whose checkpoints the policy keeps: 5, 10, the latest, and the
  /// first epochs reaching the lowest CV FER and the lowest CV CE.
  std::vector<std::size_t> retained_epochs() const {
    std::set<std::size_t> keep;
    if (records_.empty()) return {};
    for (std::size_t e : {std::size_t{5}, std::size_t{10}}) {
      if (e <= records_.size()) keep.insert(e);
    }
    keep.insert(records_.back().epoch);
    const auto best_fer = std::min_element(records_.begin(), records_.end(),
                                           [](const auto& a, const auto& b) { return a.cv_fer < b.cv_fer; });
    const auto best_ce = std::min_element(records_.begin(), records_.end(),
                                          [](const auto& a, const auto& b) { return a.cv_ce < b.cv_ce; });
    keep.insert(best_fer->epoch);
    keep.insert(best_ce->epoch);
    return {keep.begin(), keep.end()};
  }

 private:
  void resolve_dims() {
    auto fill = [](std::size_t& field, std::size_t actual, const char* what) {
      if (field == 0) field = actual;
      else if (field != actual) {
        throw DimensionError(std::string("config ") + what + " " + std::to_string(field) + " does not match dataset " +
                             std::to_string(actual));
      }
    };
    fill(cfg_.net.input_dim, train_.feature_dim, "net.input_dim");
    fill(cfg_.net.num_classes, train_.num_classes, "net.num_classes");
    if (cv_.feature_dim != train_.feature_dim || cv_.num_classes != train_.num_classes) {
      throw DimensionError("CV set dims [" + std::to_string(cv_.feature_dim) + " features, " +
                           std::to_string(cv_.num_classes) + " classes] differ from training set [" +
                           std::to_string(train_.feature_dim) + ", " + std::to_string(train_.num_classes) + "]");
    }
  }

  void prune_checkpoints() const {
    const auto keep = retained_epochs();
    for (const auto& r : records_) {
      if (std::find(keep.begin(), keep.end(), r.epoch) != keep.end()) continue;
      std::error_code ec;
      std::filesystem::remove(std::filesystem::path(cfg_.checkpoint_dir) / checkpoint_name(r.epoch), ec);
    }
  }

  void write_report(const TrainReport& report) const {
    const std::filesystem::path dir(cfg_.checkpoint_dir);
    const char* status = report.status == TrainStatus::ok ? "ok" : "model_broken";
    {
      std::ofstream log(dir / "report.log");
      for (const auto& r : report.records) log << record_line(r) << '\n';
      log << "status " << status << '\n';
    }
    nlohmann::ordered_json j;
    j["status"] = status;
    if (!report.message.empty()) j["message"] = report.message;
    nlohmann::ordered_json meta = nlohmann::ordered_json::object();
    for (const auto& [k, v] : metadata_) meta[k] = v;
    j["config"] = meta;
    j["records"] = nlohmann::ordered_json::array();
    for (const auto& r : report.records) {
      j["records"].push_back({{"epoch", r.epoch},
                              {"depth", r.depth},
                              {"lr", r.lr},
                              {"train_ce", r.train_ce},
                              {"cv_ce", r.cv_ce},
                              {"cv_fer", r.cv_fer}});
    }
    j["saved_checkpoints"] = report.saved_checkpoints;
    std::ofstream out(dir / "summary.json");
    out << j.dump(2) << '\n';
  }

  TrainConfig cfg_;
  SequenceDataset train_;
  SequenceDataset cv_;
  std::vector<std::pair<std::string, std::string>> metadata_;
  Replica<float> model_;
  std::size_t epochs_done_ = 0;
  double lr_ = 0.0;
  std::optional<double> prev_cv_ce_;
  std::vector<EpochRecord> records_;
};

/// Loads the datasets named by the config (or holds out a CV split) and runs
/// a complete training.
inline TrainReport train(const TrainConfig& cfg, std::vector<std::pair<std::string, std::string>> metadata = {}) {
  if (cfg.train_path.empty()) throw ConfigError("data.train is not set");
  SequenceDataset full = load_dataset(cfg.train_path);
  SequenceDataset train_set, cv_set;
  if (cfg.cv_path.empty()) {
    std::tie(train_set, cv_set) = split_holdout(full, cfg.cv_fraction);
  } else {
    train_set = std::move(full);
    cv_set = load_dataset(cfg.cv_path);
  }
  if (!cfg.checkpoint_dir.empty()) std::filesystem::create_directories(cfg.checkpoint_dir);
  Trainer trainer(cfg, std::move(train_set), std::move(cv_set), std::move(metadata));
  return trainer.run();
}

}  // namespace blstm
