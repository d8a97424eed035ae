#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "blstm/data.hpp"
#include "blstm/network.hpp"

namespace blstm {

struct GradCheckOptions {
  double step = 1e-4;
  double min_grad = 1e-8;  // entries with a smaller analytic gradient are skipped
  double dropout = 0.0;
  std::uint64_t dropout_seed = 7;  // the same mask is drawn for every evaluation
  std::string corrupt_tensor;      // test hook: perturb this tensor's analytic gradient
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

/// Small random minibatch with ragged lengths and one ignored label.
inline Minibatch make_check_batch(std::size_t feature_dim, std::size_t num_classes, std::size_t batch,
                                  std::size_t steps, std::uint64_t seed) {
  Rng rng(seed);
  SequenceDataset ds{{}, feature_dim, num_classes};
  std::vector<ChunkSpec> chunks;
  for (std::size_t b = 0; b < batch; ++b) {
    Sequence s;
    s.id = "check" + std::to_string(b);
    s.length = std::max<std::size_t>(1, steps - std::min(steps - 1, 2 * b));
    for (std::size_t i = 0; i < s.length * feature_dim; ++i) s.features.push_back(static_cast<float>(rng.gaussian(0.0, 1.0)));
    for (std::size_t t = 0; t < s.length; ++t) s.labels.push_back(static_cast<int>(rng.below(num_classes)));
    if (b == 0 && s.length > 1) s.labels[1] = kIgnoreLabel;
    chunks.push_back({b, 0, s.length});
    ds.sequences.push_back(std::move(s));
  }
  return assemble_minibatch(ds, chunks);
}

/// Summed training CE with a freshly seeded dropout stream.
inline double check_loss(const NetworkParams<double>& params, const Minibatch& batch, const GradCheckOptions& opt) {
  Rng rng(opt.dropout_seed);
  const auto fwd = forward(params, batch, Mode::train, opt.dropout, rng);
  return frame_metrics(fwd.posteriors, batch).ce_sum;
}

/// Compares analytic gradients against a five-point central difference of the
/// summed CE for every parameter. The relative error of an entry is
/// |a - n| / max(|a|, |n|), counted only where |a| > min_grad.
inline GradCheckResult check_gradients(NetworkParams<double> params, const Minibatch& batch,
                                       const GradCheckOptions& opt = {}) {
  Rng rng(opt.dropout_seed);
  const auto fwd = forward(params, batch, Mode::train, opt.dropout, rng);
  Gradients<double> grads = backward(params, batch, fwd.cache, fwd.posteriors);

  const auto names = params.names();
  auto p = params.tensors();
  auto g = grads.tensors();
  if (!opt.corrupt_tensor.empty()) {
    bool found = false;
    for (std::size_t k = 0; k < names.size(); ++k) {
      if (names[k] != opt.corrupt_tensor) continue;
      for (double& v : g[k]->data()) v = v * 1.5 + 1e-3;
      found = true;
    }
    if (!found) throw ParameterError("no tensor named '" + opt.corrupt_tensor + "'");
  }

  GradCheckResult res;
  const double h = opt.step;
  for (std::size_t k = 0; k < p.size(); ++k) {
    for (std::size_t i = 0; i < p[k]->size(); ++i) {
      const double a = (*g[k])[i];
      if (std::abs(a) <= opt.min_grad) continue;
      const double orig = (*p[k])[i];
      auto at = [&](double delta) {
        (*p[k])[i] = orig + delta;
        return check_loss(params, batch, opt);
      };
      const double numeric = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
      (*p[k])[i] = orig;
      const double rel = std::abs(a - numeric) / std::max(std::abs(a), std::abs(numeric));
      ++res.checked;
      if (rel > res.max_rel_error || res.worst_tensor.empty()) {
        res.max_rel_error = rel;
        res.worst_tensor = names[k];
        res.worst_index = i;
      }
    }
  }
  return res;
}

}  // namespace blstm
