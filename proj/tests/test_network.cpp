#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "blstm/grad_check.hpp"
#include "blstm/network.hpp"

using namespace blstm;

namespace {

NetworkConfig small_config(std::size_t D, std::size_t C, std::size_t L, std::size_t H, bool bidi, double p = 0.0,
                           std::uint64_t seed = 1) {
  NetworkConfig c;
  c.input_dim = D;
  c.num_classes = C;
  c.num_layers = L;
  c.hidden_size = H;
  c.bidirectional = bidi;
  c.dropout = p;
  c.seed = seed;
  return c;
}

// Scalar per-element LSTM step written straight from the cell equations.
struct ScalarCell {
  std::vector<double> h, c;
};

ScalarCell scalar_step(const std::vector<double>& x, const std::vector<double>& h_prev,
                       const std::vector<double>& c_prev, const LstmDirParams<double>& p) {
  const std::size_t H = h_prev.size();
  auto pre = [&](std::size_t gate, std::size_t j) {
    double z = p.b[gate * H + j];
    for (std::size_t k = 0; k < x.size(); ++k) z += x[k] * p.W.at(k, gate * H + j);
    for (std::size_t k = 0; k < H; ++k) z += h_prev[k] * p.R.at(k, gate * H + j);
    return z;
  };
  auto sig = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };
  ScalarCell out{std::vector<double>(H), std::vector<double>(H)};
  for (std::size_t j = 0; j < H; ++j) {
    const double i = sig(pre(0, j)), f = sig(pre(1, j)), g = std::tanh(pre(2, j)), o = sig(pre(3, j));
    out.c[j] = f * c_prev[j] + i * g;
    out.h[j] = o * std::tanh(out.c[j]);
  }
  return out;
}

SequenceDataset random_dataset(std::size_t n, std::size_t len_min, std::size_t len_max, std::size_t D,
                               std::size_t C, std::uint64_t seed) {
  Rng rng(seed);
  SequenceDataset ds{{}, D, C};
  for (std::size_t i = 0; i < n; ++i) {
    Sequence s;
    s.id = "r" + std::to_string(i);
    s.length = len_min + rng.below(len_max - len_min + 1);
    for (std::size_t k = 0; k < s.length * D; ++k) s.features.push_back(static_cast<float>(rng.gaussian(0, 1)));
    for (std::size_t t = 0; t < s.length; ++t) s.labels.push_back(static_cast<int>(rng.below(C)));
    ds.sequences.push_back(std::move(s));
  }
  return ds;
}

Minibatch whole_batch(const SequenceDataset& ds) {
  std::vector<ChunkSpec> chunks;
  for (std::size_t i = 0; i < ds.sequences.size(); ++i) chunks.push_back({i, 0, ds.sequences[i].length});
  return assemble_minibatch(ds, chunks);
}

}  // namespace

TEST(Init, SameSeedIsBitIdentical) {
  const auto cfg = small_config(4, 3, 2, 6, true);
  EXPECT_EQ(init_network<float>(cfg), init_network<float>(cfg));
  auto other = cfg;
  other.seed = 2;
  EXPECT_NE(init_network<float>(cfg), init_network<float>(other));
}

TEST(Init, ShapesFollowConfig) {
  const auto cfg = small_config(50, 4498, 1, 500, true);
  const auto p = init_network<float>(cfg);
  EXPECT_EQ(p.layers[0].dirs[0].W.shape(), (Shape{50, 2000}));
  EXPECT_EQ(p.layers[0].dirs[1].R.shape(), (Shape{500, 2000}));
  EXPECT_EQ(p.softmax_W.shape(), (Shape{1000, 4498}));
  EXPECT_EQ(p.num_values(), param_count(cfg));

  const auto uni = init_network<float>(small_config(3, 4, 3, 5, false));
  EXPECT_EQ(uni.layers[1].dirs.size(), 1u);
  EXPECT_EQ(uni.layers[1].dirs[0].W.shape(), (Shape{5, 20}));
  EXPECT_EQ(uni.softmax_W.shape(), (Shape{5, 4}));
  const auto bi = init_network<float>(small_config(3, 4, 3, 5, true));
  EXPECT_EQ(bi.layers[2].dirs[1].W.shape(), (Shape{10, 20}));
}

TEST(Init, UniformMomentsAndBiases) {
  Rng rng(17);
  const auto p = init_lstm_direction<double>(500, 500, rng);
  // R is [500 x 2000]; its spread follows r / sqrt(3).
  const double r = std::sqrt(6.0 / (500.0 + 2000.0));
  double s = 0, s2 = 0, mx = 0;
  for (double v : p.R.data()) {
    s += v;
    s2 += v * v;
    mx = std::max(mx, std::abs(v));
  }
  const double n = static_cast<double>(p.R.size());
  const double sd = std::sqrt(s2 / n - (s / n) * (s / n));
  EXPECT_NEAR(sd, r / std::sqrt(3.0), 0.05 * r / std::sqrt(3.0));
  EXPECT_LE(mx, r);
  for (std::size_t j = 0; j < 2000; ++j) EXPECT_EQ(p.b[j], (j >= 500 && j < 1000) ? 1.0 : 0.0);
}

TEST(Config, Validation) {
  EXPECT_NO_THROW(small_config(1, 1, 1, 1, true).validate());
  EXPECT_THROW(small_config(1, 1, 0, 1, true).validate(), ConfigError);
  EXPECT_THROW(small_config(1, 1, 1, 0, true).validate(), ConfigError);
  EXPECT_THROW(small_config(1, 1, 1, 1, true, 1.0).validate(), ConfigError);
  EXPECT_THROW(small_config(1, 1, 1, 1, true, -0.1).validate(), ConfigError);
}

TEST(Cell, ZeroParametersClosedForm) {
  LstmDirParams<double> p{Tensor<double>({3, 8}), Tensor<double>({2, 8}), Tensor<double>({8})};
  Tensor<double> x({1, 3}, std::vector<double>{0.3, -2.0, 5.0});
  Tensor<double> h({1, 2}, std::vector<double>{0.7, -0.1});
  Tensor<double> c({1, 2}, std::vector<double>{1.5, -0.4});
  const auto out = lstm_cell_step(x, h, c, p);
  for (std::size_t j = 0; j < 2; ++j) {
    EXPECT_DOUBLE_EQ(out.gates[j], 0.5);
    EXPECT_DOUBLE_EQ(out.gates[2 + j], 0.5);
    EXPECT_DOUBLE_EQ(out.gates[4 + j], 0.0);
    EXPECT_DOUBLE_EQ(out.gates[6 + j], 0.5);
    EXPECT_DOUBLE_EQ(out.c[j], 0.5 * c[j]);
    EXPECT_DOUBLE_EQ(out.h[j], 0.5 * std::tanh(0.5 * c[j]));
  }
}

TEST(Cell, SaturatedForgetGateKeepsCell) {
  LstmDirParams<double> p{Tensor<double>({2, 4}), Tensor<double>({1, 4}), Tensor<double>({4})};
  p.b[1] = 50.0;
  Tensor<double> x({1, 2}, 0.25), h({1, 1}, 0.0), c({1, 1}, 1.0);
  EXPECT_NEAR(lstm_cell_step(x, h, c, p).c[0], 1.0, 1e-6);
}

TEST(Cell, MatchesScalarReference) {
  Rng rng(23);
  LstmDirParams<double> p{draw_uniform<double>(rng, -1, 1, {4, 12}), draw_uniform<double>(rng, -1, 1, {3, 12}),
                          draw_uniform<double>(rng, -1, 1, {12})};
  const auto x = draw_uniform<double>(rng, -2, 2, {2, 4});
  const auto h = draw_uniform<double>(rng, -1, 1, {2, 3});
  const auto c = draw_uniform<double>(rng, -1, 1, {2, 3});
  const auto out = lstm_cell_step(x, h, c, p);
  for (std::size_t b = 0; b < 2; ++b) {
    std::vector<double> xb(x.ptr() + b * 4, x.ptr() + b * 4 + 4), hb(h.ptr() + b * 3, h.ptr() + b * 3 + 3),
        cb(c.ptr() + b * 3, c.ptr() + b * 3 + 3);
    const auto ref = scalar_step(xb, hb, cb, p);
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_NEAR(out.h.at(b, j), ref.h[j], 1e-6);
      EXPECT_NEAR(out.c.at(b, j), ref.c[j], 1e-6);
    }
  }
}

TEST(Cell, ShapeMismatchThrows) {
  LstmDirParams<double> p{Tensor<double>({3, 8}), Tensor<double>({2, 8}), Tensor<double>({8})};
  Tensor<double> x({1, 4}), h({1, 2}), c({1, 2});
  EXPECT_THROW(lstm_cell_step(x, h, c, p), DimensionError);
}

TEST(Forward, UnidirectionalMatchesScalarUnroll) {
  const auto cfg = small_config(3, 4, 1, 5, false, 0.0, 9);
  const auto params = init_network<double>(cfg);
  const auto ds = random_dataset(2, 4, 6, 3, 4, 3);
  const auto mb = whole_batch(ds);
  const auto res = forward(params, mb, Mode::eval, 0.0, Rng(0));
  for (std::size_t b = 0; b < 2; ++b) {
    const auto& s = ds.sequences[b];
    std::vector<double> h(5, 0.0), c(5, 0.0);
    for (std::size_t t = 0; t < s.length; ++t) {
      std::vector<double> x(s.features.begin() + t * 3, s.features.begin() + t * 3 + 3);
      auto st = scalar_step(x, h, c, params.layers[0].dirs[0]);
      h = st.h;
      c = st.c;
      std::vector<double> z(4);
      double mx = -1e300, tot = 0;
      for (std::size_t k = 0; k < 4; ++k) {
        z[k] = params.softmax_b[k];
        for (std::size_t j = 0; j < 5; ++j) z[k] += h[j] * params.softmax_W.at(j, k);
        mx = std::max(mx, z[k]);
      }
      for (double& v : z) tot += (v = std::exp(v - mx));
      for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(res.posteriors.at(b, t, k), z[k] / tot, 1e-12);
    }
  }
}

TEST(Forward, PosteriorRowsSumToOne) {
  const auto params = init_network<float>(small_config(3, 7, 2, 6, true, 0.0, 4));
  const auto ds = random_dataset(5, 2, 12, 3, 7, 8);
  const auto mb = whole_batch(ds);
  const auto res = forward(params, mb, Mode::eval, 0.0, Rng(0));
  for (std::size_t b = 0; b < mb.batch_size; ++b) {
    for (std::size_t t = 0; t < mb.length(b); ++t) {
      double s = 0;
      for (std::size_t k = 0; k < 7; ++k) s += res.posteriors.at(b, t, k);
      EXPECT_NEAR(s, 1.0, 1e-5);
    }
  }
}

TEST(Forward, NoDropoutMeansTrainEqualsEval) {
  const auto params = init_network<float>(small_config(3, 4, 2, 5, true));
  const auto mb = whole_batch(random_dataset(3, 4, 9, 3, 4, 1));
  EXPECT_EQ(forward(params, mb, Mode::train, 0.0, Rng(5)).posteriors,
            forward(params, mb, Mode::eval, 0.0, Rng(6)).posteriors);
  // Eval mode ignores a nonzero rate entirely.
  EXPECT_EQ(forward(params, mb, Mode::eval, 0.1, Rng(5)).posteriors,
            forward(params, mb, Mode::eval, 0.0, Rng(6)).posteriors);
}

TEST(Forward, DropoutScaleIsTenNinths) {
  const auto params = init_network<double>(small_config(3, 4, 1, 8, true));
  const auto mb = whole_batch(random_dataset(2, 6, 6, 3, 4, 1));
  const auto res = forward(params, mb, Mode::train, 0.1, Rng(5));
  const auto& mask = res.cache.layers[0].dropout_mask;
  std::size_t kept = 0, dropped = 0;
  for (double m : mask.data()) {
    if (m == 0.0) ++dropped;
    else {
      EXPECT_EQ(m, 10.0 / 9.0);
      ++kept;
    }
  }
  EXPECT_GT(kept, 0u);
  EXPECT_GT(dropped, 0u);
}

TEST(Forward, DropoutExpectationMatchesEval) {
  const auto params = init_network<double>(small_config(2, 3, 1, 3, true, 0.1));
  const auto mb = whole_batch(random_dataset(1, 3, 3, 2, 3, 2));
  const auto eval_out = forward(params, mb, Mode::eval, 0.0, Rng(0)).cache.layers[0].output;
  std::vector<double> mean(eval_out.size(), 0.0);
  Rng rng(99);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    const auto out = forward(params, mb, Mode::train, 0.1, rng).cache.layers[0].output;
    for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += out[k];
  }
  for (std::size_t k = 0; k < mean.size(); ++k) {
    EXPECT_NEAR(mean[k] / draws, eval_out[k], 0.01 * std::abs(eval_out[k]));
  }
}

TEST(Forward, ReversedInputWithSwappedDirectionsReversesPosteriors) {
  const std::size_t H = 4;
  const auto cfg = small_config(3, 5, 2, H, true, 0.0, 12);
  const auto params = init_network<double>(cfg);
  auto ds = random_dataset(1, 5, 5, 3, 5, 6);
  const auto orig = forward(params, whole_batch(ds), Mode::eval, 0.0, Rng(0)).posteriors;

  auto swapped = params;
  for (auto& layer : swapped.layers) std::swap(layer.dirs[0], layer.dirs[1]);
  // Layer-2 inputs and the softmax read [fwd | bwd] halves, which trade places.
  auto swap_row_halves = [H](Tensor<double>& w) {
    for (std::size_t r = 0; r < H; ++r) {
      for (std::size_t c = 0; c < w.dim(1); ++c) std::swap(w.at(r, c), w.at(r + H, c));
    }
  };
  for (std::size_t l = 1; l < swapped.depth(); ++l) {
    for (auto& d : swapped.layers[l].dirs) swap_row_halves(d.W);
  }
  swap_row_halves(swapped.softmax_W);

  auto& s = ds.sequences[0];
  std::vector<float> rev(s.features.size());
  for (std::size_t t = 0; t < 5; ++t) std::copy_n(s.features.begin() + t * 3, 3, rev.begin() + (4 - t) * 3);
  s.features = rev;
  const auto mirrored = forward(swapped, whole_batch(ds), Mode::eval, 0.0, Rng(0)).posteriors;
  for (std::size_t t = 0; t < 5; ++t) {
    for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(mirrored.at(0, 4 - t, k), orig.at(0, t, k), 1e-12);
  }
}

TEST(Forward, ForwardDirectionIsCausalBackwardIsNot) {
  const auto params = init_network<double>(small_config(3, 4, 1, 5, true, 0.0, 3));
  auto ds = random_dataset(1, 8, 8, 3, 4, 9);
  const auto base = forward(params, whole_batch(ds), Mode::eval, 0.0, Rng(0));
  ds.sequences[0].features[5 * 3 + 1] += 0.5f;  // perturb frame 5
  const auto pert = forward(params, whole_batch(ds), Mode::eval, 0.0, Rng(0));
  const auto& hf0 = base.cache.layers[0].dirs[0].hidden;
  const auto& hf1 = pert.cache.layers[0].dirs[0].hidden;
  const auto& hb0 = base.cache.layers[0].dirs[1].hidden;
  const auto& hb1 = pert.cache.layers[0].dirs[1].hidden;
  for (std::size_t t = 0; t < 5; ++t) {
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(hf0.at(t, 0, j), hf1.at(t, 0, j));
  }
  double diff = 0;
  for (std::size_t j = 0; j < 5; ++j) diff += std::abs(hb0.at(4, 0, j) - hb1.at(4, 0, j));
  EXPECT_GT(diff, 0.0);
}

TEST(Forward, PaddingDoesNotLeakIntoRealFrames) {
  const auto params = init_network<double>(small_config(3, 4, 2, 5, true, 0.0, 3));
  const auto ds = random_dataset(3, 2, 9, 3, 4, 12);
  const auto together = forward(params, whole_batch(ds), Mode::eval, 0.0, Rng(0)).posteriors;
  for (std::size_t i = 0; i < 3; ++i) {
    SequenceDataset one{{ds.sequences[i]}, 3, 4};
    const auto alone = forward(params, whole_batch(one), Mode::eval, 0.0, Rng(0)).posteriors;
    for (std::size_t t = 0; t < ds.sequences[i].length; ++t) {
      for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(together.at(i, t, k), alone.at(0, t, k), 1e-12);
    }
  }
}

TEST(Forward, InputDimMismatchThrows) {
  const auto params = init_network<float>(small_config(3, 4, 1, 5, true));
  const auto mb = whole_batch(random_dataset(1, 3, 3, 2, 4, 1));
  EXPECT_THROW(forward(params, mb, Mode::eval, 0.0, Rng(0)), DimensionError);
}

TEST(LossAndFer, OneHotPosteriorsArePerfect) {
  Tensor<double> post({1, 3, 3});
  std::vector<int> labels{0, 2, 1};
  std::vector<unsigned char> mask{1, 1, 1};
  for (std::size_t t = 0; t < 3; ++t) post.at(0, t, static_cast<std::size_t>(labels[t])) = 1.0;
  const auto [ce, fer] = loss_and_fer(post, std::span<const int>(labels), std::span<const unsigned char>(mask));
  EXPECT_EQ(ce, 0.0);
  EXPECT_EQ(fer, 0.0);
}

TEST(LossAndFer, UniformPosteriorsGiveLogC) {
  Tensor<double> post({2, 2, 6}, 1.0 / 6.0);
  std::vector<int> labels{0, 5, 3, 1};
  std::vector<unsigned char> mask{1, 1, 1, 1};
  const auto [ce, fer] = loss_and_fer(post, std::span<const int>(labels), std::span<const unsigned char>(mask));
  EXPECT_NEAR(ce, std::log(6.0), 1e-12);
}

TEST(LossAndFer, IgnoredAndMaskedFramesExcluded) {
  Tensor<double> post({1, 4, 2}, std::vector<double>{0.8, 0.2, 0.3, 0.7, 0.6, 0.4, 0.5, 0.5});
  std::vector<int> labels{0, -1, 1, 0};
  std::vector<unsigned char> mask{1, 1, 1, 0};
  const auto [ce, fer] = loss_and_fer(post, std::span<const int>(labels), std::span<const unsigned char>(mask));
  // Counted: frame 0 (p=0.8, correct) and frame 2 (p=0.4, wrong).
  EXPECT_NEAR(ce, -(std::log(0.8) + std::log(0.4)) / 2.0, 1e-12);
  EXPECT_EQ(fer, 0.5);
}

TEST(LossAndFer, NoCountedFramesIsAnError) {
  Tensor<double> post({1, 2, 2}, 0.5);
  std::vector<int> labels{-1, 0};
  std::vector<unsigned char> mask{1, 0};
  EXPECT_THROW(loss_and_fer(post, std::span<const int>(labels), std::span<const unsigned char>(mask)),
               ValidationError);
}

TEST(Backward, AllIgnoredLabelsGiveZeroGradients) {
  const auto params = init_network<double>(small_config(3, 4, 2, 5, true));
  auto ds = random_dataset(2, 3, 6, 3, 4, 4);
  for (auto& s : ds.sequences) std::fill(s.labels.begin(), s.labels.end(), kIgnoreLabel);
  const auto mb = whole_batch(ds);
  const auto fwd = forward(params, mb, Mode::train, 0.0, Rng(0));
  const auto g = backward(params, mb, fwd.cache, fwd.posteriors);
  g.for_each([](const std::string& name, const Tensor<double>& t) {
    for (double v : t.data()) ASSERT_EQ(v, 0.0) << name;
  });
}

TEST(Backward, DefaultTinyConfigPassesFiniteDifferences) {
  const auto params = init_network<double>(small_config(3, 4, 2, 5, true));
  const auto mb = make_check_batch(3, 4, 2, 7, 1);
  const auto res = check_gradients(params, mb);
  EXPECT_GT(res.checked, 500u);
  EXPECT_LT(res.max_rel_error, 1e-4) << res.worst_tensor << "[" << res.worst_index << "]";
}

TEST(Backward, RandomSmallConfigsPassFiniteDifferences) {
  Rng rng(2718);
  struct Case { std::size_t L; bool bidi; double p; };
  const Case cases[] = {{1, false, 0.0}, {1, true, 0.0}, {2, false, 0.0}, {2, true, 0.0},
                        {1, true, 0.1}, {2, false, 0.1}, {2, true, 0.1}};
  for (const auto& c : cases) {
    const std::size_t D = 1 + rng.below(4), C = 2 + rng.below(4), H = 1 + rng.below(8);
    const std::size_t B = 1 + rng.below(3), T = 2 + rng.below(9);
    const auto params = init_network<double>(small_config(D, C, c.L, H, c.bidi, c.p, rng.next_u64()));
    const auto mb = make_check_batch(D, C, B, T, rng.next_u64());
    GradCheckOptions opt;
    opt.dropout = c.p;
    const auto res = check_gradients(params, mb, opt);
    EXPECT_LT(res.max_rel_error, 1e-4) << "L=" << c.L << " bidi=" << c.bidi << " p=" << c.p << " H=" << H
                                       << " worst " << res.worst_tensor;
  }
}

TEST(Backward, CorruptedGradientIsDetected) {
  const auto params = init_network<double>(small_config(3, 4, 2, 5, true));
  const auto mb = make_check_batch(3, 4, 2, 7, 1);
  GradCheckOptions opt;
  opt.corrupt_tensor = "layer1.bwd.R";
  const auto res = check_gradients(params, mb, opt);
  EXPECT_GT(res.max_rel_error, 1e-2);
  EXPECT_EQ(res.worst_tensor, "layer1.bwd.R");
}

TEST(Backward, DuplicatedChunkDoublesItsContribution) {
  const auto params = init_network<double>(small_config(3, 4, 2, 5, true));
  const auto ds = random_dataset(1, 6, 6, 3, 4, 21);
  const ChunkSpec c{0, 0, 6};
  const std::vector<ChunkSpec> once{c}, twice{c, c};
  auto grads_of = [&](const std::vector<ChunkSpec>& chunks) {
    const auto mb = assemble_minibatch(ds, chunks);
    const auto fwd = forward(params, mb, Mode::train, 0.0, Rng(0));
    return backward(params, mb, fwd.cache, fwd.posteriors);
  };
  const auto g1 = grads_of(once);
  const auto g2 = grads_of(twice);
  const auto a = g1.tensors();
  const auto b = g2.tensors();
  for (std::size_t k = 0; k < a.size(); ++k) {
    for (std::size_t i = 0; i < a[k]->size(); ++i) {
      EXPECT_NEAR((*b[k])[i], 2.0 * (*a[k])[i], 1e-12 * std::max(1.0, std::abs((*a[k])[i])));
    }
  }
}

TEST(ParamCount, DepthSweep) {
  const double expected[] = {6.7, 12.7, 18.7, 24.7, 30.7, 36.7, 42.7, 48.7};
  for (std::size_t L = 1; L <= 8; ++L) {
    const auto n = param_count(small_config(50, 4498, L, 500, true));
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", static_cast<double>(n) / 1e6);
    EXPECT_EQ(std::stod(buf), expected[L - 1]) << "L=" << L;
  }
  EXPECT_EQ(param_count(small_config(50, 4498, 1, 500, true)), 6706498u);
  EXPECT_EQ(param_count(small_config(50, 4498, 2, 500, true)), 12710498u);
}

TEST(ParamCount, WidthSweep) {
  const std::pair<std::size_t, double> rows[] = {{500, 30.7}, {600, 43.1}, {700, 57.6}, {800, 74.1}};
  for (const auto& [H, m] : rows) {
    const auto n = param_count(small_config(50, 4498, 5, H, true));
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", static_cast<double>(n) / 1e6);
    EXPECT_EQ(std::stod(buf), m) << "H=" << H;
  }
}

TEST(ParamCount, MatchesAllocatedValues) {
  for (bool bidi : {false, true}) {
    const auto cfg = small_config(7, 3, 3, 4, bidi);
    EXPECT_EQ(init_network<float>(cfg).num_values(), param_count(cfg));
  }
}
