// Command-line front end: train, eval, param-count, grad-check, gen-data.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "blstm/checkpoint.hpp"
#include "blstm/config.hpp"
#include "blstm/data.hpp"
#include "blstm/grad_check.hpp"
#include "blstm/network.hpp"
#include "blstm/trainer.hpp"

namespace {

enum ExitCode { kOk = 0, kConfigError = 2, kDataError = 3, kModelBroken = 4, kGradCheckFailed = 5 };

blstm::TrainConfig load_with_overrides(const std::string& path, const std::vector<std::string>& overrides) {
  blstm::TrainConfig cfg = path.empty() ? blstm::TrainConfig{} : blstm::load_config(path);
  blstm::apply_overrides(cfg, overrides);
  return cfg;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides, const std::string& out,
              const std::string& resume) {
  blstm::TrainConfig cfg = load_with_overrides(config_path, overrides);
  if (!out.empty()) cfg.checkpoint_dir = out;
  {
    // Dimensions of 0 are inferred from the data later; check everything else up front.
    blstm::TrainConfig probe = cfg;
    if (probe.net.input_dim == 0) probe.net.input_dim = 1;
    if (probe.net.num_classes == 0) probe.net.num_classes = 1;
    probe.validate();
  }
  for (const auto& p : {cfg.train_path, cfg.cv_path}) {
    if (!p.empty() && !std::filesystem::exists(p)) throw blstm::ValidationError("dataset '" + p + "' does not exist");
  }
  if (cfg.train_path.empty()) throw blstm::ConfigError("data.train is not set");

  blstm::SequenceDataset full = blstm::load_dataset(cfg.train_path);
  blstm::SequenceDataset train_set, cv_set;
  if (cfg.cv_path.empty()) {
    std::tie(train_set, cv_set) = blstm::split_holdout(full, cfg.cv_fraction);
  } else {
    train_set = std::move(full);
    cv_set = blstm::load_dataset(cfg.cv_path);
  }
  if (!cfg.checkpoint_dir.empty()) std::filesystem::create_directories(cfg.checkpoint_dir);
  // The output location is left out so that identical runs write identical summaries.
  auto metadata = blstm::config_items(cfg);
  std::erase_if(metadata, [](const auto& kv) { return kv.first == "train.out"; });
  blstm::Trainer trainer(cfg, std::move(train_set), std::move(cv_set), std::move(metadata));
  if (!resume.empty()) trainer.restore(resume);
  const blstm::TrainReport report = trainer.run();
  for (const auto& r : report.records) std::cout << blstm::record_line(r) << '\n';
  if (report.status == blstm::TrainStatus::model_broken) {
    std::cerr << "error: " << report.message << '\n';
    return kModelBroken;
  }
  return kOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, std::size_t batch) {
  const blstm::Checkpoint ck = blstm::load_checkpoint(checkpoint);
  const blstm::SequenceDataset ds = blstm::load_dataset(data);
  if (ds.feature_dim != ck.net.input_dim || ds.num_classes != ck.net.num_classes) {
    throw blstm::DimensionError("dataset [D=" + std::to_string(ds.feature_dim) + ", C=" +
                                std::to_string(ds.num_classes) + "] does not match checkpoint [D=" +
                                std::to_string(ck.net.input_dim) + ", C=" + std::to_string(ck.net.num_classes) + "]");
  }
  const blstm::FrameMetrics m = blstm::evaluate(ck.params, ds, batch);
  std::printf("ce %.6f fer %.6f\n", m.ce(), m.fer());
  return kOk;
}

int cmd_param_count(const std::string& config_path, const std::vector<std::string>& overrides) {
  blstm::TrainConfig cfg = load_with_overrides(config_path, overrides);
  cfg.net.validate();
  const auto n = blstm::param_count(cfg.net);
  std::printf("%llu (%.1fM)\n", static_cast<unsigned long long>(n), static_cast<double>(n) / 1e6);
  return kOk;
}

int cmd_grad_check(const std::string& config_path, const std::vector<std::string>& overrides, double tolerance,
                   std::size_t batch, std::size_t steps, const std::string& corrupt) {
  blstm::TrainConfig cfg;
  cfg.net.input_dim = 3;
  cfg.net.num_classes = 4;
  cfg.net.num_layers = 2;
  cfg.net.hidden_size = 5;
  if (!config_path.empty()) cfg = blstm::load_config(config_path, cfg);
  blstm::apply_overrides(cfg, overrides);
  cfg.net.validate();
  const auto n = blstm::param_count(cfg.net);
  if (n >= 100000) {
    throw blstm::ConfigError("grad-check needs fewer than 100000 parameters, this network has " + std::to_string(n) +
                             "; reduce net.hidden_size or net.num_layers");
  }
  const auto params = blstm::init_network<double>(cfg.net);
  const auto mb = blstm::make_check_batch(cfg.net.input_dim, cfg.net.num_classes, batch, steps, cfg.net.seed);
  blstm::GradCheckOptions opt;
  opt.dropout = cfg.net.dropout;
  opt.corrupt_tensor = corrupt;
  const auto res = blstm::check_gradients(params, mb, opt);
  std::printf("checked %zu entries, max relative error %.3e in %s[%zu]\n", res.checked, res.max_rel_error,
              res.worst_tensor.c_str(), res.worst_index);
  if (!(res.max_rel_error < tolerance)) {
    std::printf("FAILED: %s exceeds tolerance %.1e\n", res.worst_tensor.c_str(), tolerance);
    return kGradCheckFailed;
  }
  std::printf("ok\n");
  return kOk;
}

int cmd_gen_data(const std::string& out, const blstm::SyntheticSpec& spec) {
  const blstm::SequenceDataset ds = blstm::generate_synthetic(spec);
  blstm::save_dataset(ds, out);
  // Re-derive every label from the written features to report the rule's own
  // error on this file. Noisy features make this nonzero.
  const blstm::SequenceDataset back = blstm::load_dataset(out);
  const auto rule = blstm::make_synthetic_rule(spec.feature_dim, spec.num_classes, spec.context_radius, spec.seed);
  std::size_t errors = 0, frames = 0;
  for (const auto& s : back.sequences) {
    const auto relabeled = rule.label_sequence(s.features, s.length);
    for (std::size_t t = 0; t < s.length; ++t) {
      if (s.labels[t] == blstm::kIgnoreLabel) continue;
      errors += relabeled[t] != s.labels[t];
      ++frames;
    }
  }
  std::printf("wrote %zu sequences, %zu frames to %s\n", back.sequences.size(), back.total_frames(), out.c_str());
  std::printf("rule_error %.6f\n", frames ? static_cast<double>(errors) / static_cast<double>(frames) : 0.0);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Frame-wise (B)LSTM trainer"};
  app.require_subcommand(1);

  std::string config_path, out, resume, checkpoint, data, corrupt;
  std::vector<std::string> overrides;
  double tolerance = 1e-4;
  std::size_t eval_batch = 40, gc_batch = 2, gc_steps = 7;
  blstm::SyntheticSpec spec;

  auto* train = app.add_subcommand("train", "train a network");
  train->add_option("--config", config_path, "config file")->required();
  train->add_option("--set", overrides, "key=value override (repeatable)");
  train->add_option("--out", out, "output directory for checkpoints and reports");
  train->add_option("--resume", resume, "checkpoint to continue from");

  auto* eval = app.add_subcommand("eval", "score a checkpoint on a dataset");
  eval->add_option("--config", config_path, "config file (ignored; the checkpoint carries the network config)");
  eval->add_option("--checkpoint", checkpoint, "SEQNN1 checkpoint")->required();
  eval->add_option("--data", data, "SEQD dataset")->required();
  eval->add_option("--batch", eval_batch, "sequences per evaluation batch");

  auto* pc = app.add_subcommand("param-count", "print the parameter count of a network");
  pc->add_option("--config", config_path, "config file");
  pc->add_option("--set", overrides, "key=value override (repeatable)");

  auto* gc = app.add_subcommand("grad-check", "compare analytic and finite-difference gradients");
  gc->add_option("--config", config_path, "config file");
  gc->add_option("--set", overrides, "key=value override (repeatable)");
  gc->add_option("--tolerance", tolerance, "maximum relative error");
  gc->add_option("--batch", gc_batch, "sequences in the check batch");
  gc->add_option("--steps", gc_steps, "frames in the longest sequence");
  gc->add_option("--corrupt-tensor", corrupt)->group("");

  auto* gen = app.add_subcommand("gen-data", "write a synthetic SEQD dataset");
  gen->add_option("--out", out, "output path")->required();
  gen->add_option("--n-seq", spec.n_seq);
  gen->add_option("--len-min", spec.len_min);
  gen->add_option("--len-max", spec.len_max);
  gen->add_option("--dim", spec.feature_dim);
  gen->add_option("--classes", spec.num_classes);
  gen->add_option("--context-radius", spec.context_radius);
  gen->add_option("--noise", spec.noise_stddev);
  gen->add_option("--seed", spec.seed);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(config_path, overrides, out, resume);
    if (*eval) return cmd_eval(checkpoint, data, eval_batch);
    if (*pc) return cmd_param_count(config_path, overrides);
    if (*gc) return cmd_grad_check(config_path, overrides, tolerance, gc_batch, gc_steps, corrupt);
    if (*gen) return cmd_gen_data(out, spec);
  } catch (const blstm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const blstm::DivergenceError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kModelBroken;
  } catch (const blstm::Error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kDataError;
  }
  return kOk;
}
