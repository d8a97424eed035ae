#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "blstm/data.hpp"
#include "blstm/error.hpp"
#include "blstm/rng.hpp"
#include "blstm/tensor.hpp"

namespace blstm {

struct NetworkConfig {
  std::size_t input_dim = 0;
  std::size_t num_classes = 0;
  std::size_t num_layers = 3;
  std::size_t hidden_size = 500;  // per direction
  bool bidirectional = true;
  double dropout = 0.0;
  std::uint64_t seed = 1;

  std::size_t num_directions() const noexcept { return bidirectional ? 2 : 1; }
  std::size_t output_width() const noexcept { return hidden_size * num_directions(); }
  std::size_t layer_input_width(std::size_t layer) const noexcept {
    return layer == 0 ? input_dim : output_width();
  }

  void validate() const {
    if (input_dim < 1) throw ConfigError("net.input_dim must be >= 1");
    if (num_classes < 1) throw ConfigError("net.num_classes must be >= 1");
    if (num_layers < 1) throw ConfigError("net.num_layers must be >= 1");
    if (hidden_size < 1) throw ConfigError("net.hidden_size must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("net.dropout must be in [0, 1)");
  }

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

/// Weights of one LSTM direction. The packed 4H axis holds the gates in the
/// order input, forget, candidate, output.
template <class T>
struct LstmDirParams {
  Tensor<T> W;  // [input_width x 4H]
  Tensor<T> R;  // [H x 4H]
  Tensor<T> b;  // [4H]

  std::size_t hidden() const { return R.dim(0); }
  std::size_t input_width() const { return W.dim(0); }

  friend bool operator==(const LstmDirParams&, const LstmDirParams&) = default;
};

template <class T>
struct LstmLayerParams {
  std::vector<LstmDirParams<T>> dirs;  // forward, then backward if bidirectional

  friend bool operator==(const LstmLayerParams&, const LstmLayerParams&) = default;
};

inline const char* direction_name(std::size_t dir) { return dir == 0 ? "fwd" : "bwd"; }

template <class T>
struct NetworkParams {
  std::vector<LstmLayerParams<T>> layers;
  Tensor<T> softmax_W;  // [width x C]
  Tensor<T> softmax_b;  // [C]

  std::size_t depth() const noexcept { return layers.size(); }
  bool bidirectional() const noexcept { return !layers.empty() && layers.front().dirs.size() == 2; }

  /// Visits every tensor in checkpoint manifest order:
  /// layer<l>.<fwd|bwd>.<W|R|b> for l = 1..depth, then softmax.W, softmax.b.
  template <class F>
  void for_each(F&& f) {
    for_each_impl(*this, f);
  }
  template <class F>
  void for_each(F&& f) const {
    for_each_impl(*this, f);
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for_each([&](const std::string& name, const Tensor<T>&) { out.push_back(name); });
    return out;
  }

  std::vector<Tensor<T>*> tensors() {
    std::vector<Tensor<T>*> out;
    for_each([&](const std::string&, Tensor<T>& t) { out.push_back(&t); });
    return out;
  }
  std::vector<const Tensor<T>*> tensors() const {
    std::vector<const Tensor<T>*> out;
    for_each([&](const std::string&, const Tensor<T>& t) { out.push_back(&t); });
    return out;
  }

  std::size_t num_tensors() const { return depth() * (bidirectional() ? 6 : 3) + 2; }

  std::size_t num_values() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
    return n;
  }

  NetworkParams zeros_like() const {
    NetworkParams out = *this;
    out.for_each([](const std::string&, Tensor<T>& t) { t.fill(T{0}); });
    return out;
  }

  template <class U>
  NetworkParams<U> cast() const {
    NetworkParams<U> out;
    for (const auto& layer : layers) {
      LstmLayerParams<U> l;
      for (const auto& d : layer.dirs) l.dirs.push_back({d.W.template cast<U>(), d.R.template cast<U>(), d.b.template cast<U>()});
      out.layers.push_back(std::move(l));
    }
    out.softmax_W = softmax_W.template cast<U>();
    out.softmax_b = softmax_b.template cast<U>();
    return out;
  }

  friend bool operator==(const NetworkParams&, const NetworkParams&) = default;

 private:
  template <class Self, class F>
  static void for_each_impl(Self& self, F& f) {
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      for (std::size_t d = 0; d < self.layers[l].dirs.size(); ++d) {
        const std::string prefix = "layer" + std::to_string(l + 1) + "." + direction_name(d) + ".";
        auto& p = self.layers[l].dirs[d];
        f(prefix + "W", p.W);
        f(prefix + "R", p.R);
        f(prefix + "b", p.b);
      }
    }
    f(std::string("softmax.W"), self.softmax_W);
    f(std::string("softmax.b"), self.softmax_b);
  }
};

template <class T>
using Gradients = NetworkParams<T>;

/// Exact number of trainable values of a full-depth network.
inline std::uint64_t param_count(const NetworkConfig& cfg) {
  const std::uint64_t h = cfg.hidden_size;
  std::uint64_t total = 0;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const std::uint64_t in = cfg.layer_input_width(l);
    total += cfg.num_directions() * 4 * (in * h + h * h + h);
  }
  const std::uint64_t width = cfg.output_width();
  return total + width * cfg.num_classes + cfg.num_classes;
}

// ---------------------------------------------------------------------------
// Initialization

inline double glorot_range(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

template <class T>
LstmDirParams<T> init_lstm_direction(std::size_t input_width, std::size_t hidden, Rng& rng) {
  const std::size_t g = 4 * hidden;
  LstmDirParams<T> p;
  const double rw = glorot_range(input_width, g);
  p.W = draw_uniform<T>(rng, -rw, rw, {input_width, g});
  const double rr = glorot_range(hidden, g);
  p.R = draw_uniform<T>(rng, -rr, rr, {hidden, g});
  p.b = Tensor<T>({g});
  for (std::size_t j = hidden; j < 2 * hidden; ++j) p.b[j] = T{1};  // forget gate
  return p;
}

template <class T>
LstmLayerParams<T> init_lstm_layer(const NetworkConfig& cfg, std::size_t layer, Rng& rng) {
  LstmLayerParams<T> out;
  for (std::size_t d = 0; d < cfg.num_directions(); ++d) {
    out.dirs.push_back(init_lstm_direction<T>(cfg.layer_input_width(layer), cfg.hidden_size, rng));
  }
  return out;
}

template <class T>
void init_softmax(NetworkParams<T>& params, const NetworkConfig& cfg, Rng& rng) {
  const double r = glorot_range(cfg.output_width(), cfg.num_classes);
  params.softmax_W = draw_uniform<T>(rng, -r, r, {cfg.output_width(), cfg.num_classes});
  params.softmax_b = Tensor<T>({cfg.num_classes});
}

/// Glorot-uniform weights, zero biases except the forget gate (1.0).
/// `depth` defaults to the configured number of layers.
template <class T>
NetworkParams<T> init_network(const NetworkConfig& cfg, std::size_t depth = 0) {
  cfg.validate();
  if (depth == 0) depth = cfg.num_layers;
  Rng rng(cfg.seed);
  NetworkParams<T> params;
  for (std::size_t l = 0; l < depth; ++l) params.layers.push_back(init_lstm_layer<T>(cfg, l, rng));
  init_softmax(params, cfg, rng);
  return params;
}

// ---------------------------------------------------------------------------
// LSTM cell

namespace detail {

/// Turns raw gate pre-activations of one row into activations (in place) and
/// produces the new cell and hidden state. `keep` is 1 for real frames and 0
/// for padding, which forces c and h to zero.
template <class T>
void cell_row(std::size_t H, T* gates, const T* c_prev, T keep, T* c, T* tanh_c, T* h) {
  for (std::size_t j = 0; j < H; ++j) {
    const T i = sigmoid(gates[j]);
    const T f = sigmoid(gates[H + j]);
    const T g = std::tanh(gates[2 * H + j]);
    const T o = sigmoid(gates[3 * H + j]);
    gates[j] = i;
    gates[H + j] = f;
    gates[2 * H + j] = g;
    gates[3 * H + j] = o;
    const T c_raw = f * (c_prev ? c_prev[j] : T{0}) + i * g;
    const T tc = std::tanh(c_raw);
    tanh_c[j] = tc;
    c[j] = keep * c_raw;
    h[j] = keep * o * tc;
  }
}

}  // namespace detail

template <class T>
struct CellStep {
  Tensor<T> h;       // [B x H]
  Tensor<T> c;       // [B x H]
  Tensor<T> gates;   // [B x 4H] activated i, f, g, o
  Tensor<T> tanh_c;  // [B x H]
};

/// One time step of a peephole-free LSTM for a batch of rows.
template <class T>
CellStep<T> lstm_cell_step(const Tensor<T>& x, const Tensor<T>& h_prev, const Tensor<T>& c_prev,
                           const LstmDirParams<T>& p) {
  const std::size_t H = p.hidden();
  if (x.rank() != 2 || x.dim(1) != p.input_width() || h_prev.shape() != Shape{x.dim(0), H} ||
      c_prev.shape() != h_prev.shape()) {
    throw DimensionError("lstm_cell_step: x " + shape_string(x.shape()) + ", h " +
                         shape_string(h_prev.shape()) + ", c " + shape_string(c_prev.shape()) +
                         " do not fit W " + shape_string(p.W.shape()));
  }
  const std::size_t B = x.dim(0);
  CellStep<T> out{Tensor<T>({B, H}), Tensor<T>({B, H}), Tensor<T>({B, 4 * H}), Tensor<T>({B, H})};
  for (std::size_t b = 0; b < B; ++b) std::copy_n(p.b.ptr(), 4 * H, out.gates.ptr() + b * 4 * H);
  detail::gemm_nn(B, p.input_width(), 4 * H, x.ptr(), p.W.ptr(), out.gates.ptr());
  detail::gemm_nn(B, H, 4 * H, h_prev.ptr(), p.R.ptr(), out.gates.ptr());
  for (std::size_t b = 0; b < B; ++b) {
    detail::cell_row(H, out.gates.ptr() + b * 4 * H, c_prev.ptr() + b * H, T{1}, out.c.ptr() + b * H,
                     out.tanh_c.ptr() + b * H, out.h.ptr() + b * H);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward through the stacked network
//
// Internally all sequence tensors are time-major, [T_max x B x width], so the
// rows of one time step are contiguous.

enum class Mode { train, eval };

template <class T>
struct DirectionCache {
  Tensor<T> gates;   // [Tm x B x 4H] activated gates
  Tensor<T> cell;    // [Tm x B x H] masked cell state
  Tensor<T> tanh_c;  // [Tm x B x H] tanh of the unmasked cell state
  Tensor<T> hidden;  // [Tm x B x H]
};

template <class T>
struct LayerCache {
  std::vector<DirectionCache<T>> dirs;
  Tensor<T> output;        // [Tm x B x width], after dropout
  Tensor<T> dropout_mask;  // same shape as output; empty if no dropout was applied
};

template <class T>
struct ForwardCache {
  std::size_t batch = 0;
  std::size_t steps = 0;
  Tensor<T> input;           // [Tm x B x D]
  std::vector<T> keep;       // [Tm x B], 1 for real frames
  std::vector<LayerCache<T>> layers;

  const Tensor<T>& layer_input(std::size_t l) const { return l == 0 ? input : layers[l - 1].output; }
};

template <class T>
struct ForwardResult {
  Tensor<T> posteriors;  // [B x Tm x C]
  ForwardCache<T> cache;
};

namespace detail {

template <class T>
void run_direction(const LstmDirParams<T>& p, const Tensor<T>& input, const std::vector<T>& keep,
                   std::size_t steps, std::size_t batch, bool reverse, DirectionCache<T>& cache) {
  const std::size_t H = p.hidden();
  const std::size_t G = 4 * H;
  const std::size_t in = p.input_width();
  cache.gates = Tensor<T>({steps, batch, G});
  cache.cell = Tensor<T>({steps, batch, H});
  cache.tanh_c = Tensor<T>({steps, batch, H});
  cache.hidden = Tensor<T>({steps, batch, H});

  T* gates = cache.gates.ptr();
  for (std::size_t r = 0; r < steps * batch; ++r) std::copy_n(p.b.ptr(), G, gates + r * G);
  gemm_nn(steps * batch, in, G, input.ptr(), p.W.ptr(), gates);

  const T* h_prev = nullptr;
  const T* c_prev = nullptr;
  for (std::size_t s = 0; s < steps; ++s) {
    const std::size_t t = reverse ? steps - 1 - s : s;
    T* g_t = gates + t * batch * G;
    if (h_prev) gemm_nn(batch, H, G, h_prev, p.R.ptr(), g_t);
    T* c_t = cache.cell.ptr() + t * batch * H;
    T* tc_t = cache.tanh_c.ptr() + t * batch * H;
    T* h_t = cache.hidden.ptr() + t * batch * H;
    for (std::size_t b = 0; b < batch; ++b) {
      cell_row(H, g_t + b * G, c_prev ? c_prev + b * H : nullptr, keep[t * batch + b], c_t + b * H,
               tc_t + b * H, h_t + b * H);
    }
    h_prev = h_t;
    c_prev = c_t;
  }
}

// d_out points at the gradient w.r.t. the layer output [Tm x B x width]; this
// direction occupies columns [offset, offset + H).
template <class T>
void backprop_direction(const LstmDirParams<T>& p, const Tensor<T>& input, const std::vector<T>& keep,
                        std::size_t steps, std::size_t batch, bool reverse,
                        const DirectionCache<T>& cache, const T* d_out, std::size_t width,
                        std::size_t offset, LstmDirParams<T>& grad, T* d_input) {
  const std::size_t H = p.hidden();
  const std::size_t G = 4 * H;
  const std::size_t in = p.input_width();
  std::vector<T> d_gates(steps * batch * G, T{0});
  std::vector<T> dh_next(batch * H, T{0});
  std::vector<T> dc_next(batch * H, T{0});
  std::vector<T> dh_prev(batch * H);

  for (std::size_t s = steps; s-- > 0;) {
    const std::size_t t = reverse ? steps - 1 - s : s;
    const bool has_prev = s > 0;
    const std::size_t tp = reverse ? t + 1 : t - 1;  // only read when has_prev
    const T* act = cache.gates.ptr() + t * batch * G;
    const T* tc = cache.tanh_c.ptr() + t * batch * H;
    const T* c_prev = has_prev ? cache.cell.ptr() + tp * batch * H : nullptr;
    T* dg = d_gates.data() + t * batch * G;
    for (std::size_t b = 0; b < batch; ++b) {
      const T m = keep[t * batch + b];
      const T* a = act + b * G;
      const T* d_h_out = d_out + (t * batch + b) * width + offset;
      for (std::size_t j = 0; j < H; ++j) {
        const T i = a[j], f = a[H + j], g = a[2 * H + j], o = a[3 * H + j];
        const T tcv = tc[b * H + j];
        const T dh = d_h_out[j] + dh_next[b * H + j];
        const T d_o = m * dh * tcv;
        const T dc = m * (dc_next[b * H + j] + dh * o * (T{1} - tcv * tcv));
        const T cp = c_prev ? c_prev[b * H + j] : T{0};
        T* dgb = dg + b * G;
        dgb[j] = dc * g * i * (T{1} - i);
        dgb[H + j] = dc * cp * f * (T{1} - f);
        dgb[2 * H + j] = dc * i * (T{1} - g * g);
        dgb[3 * H + j] = d_o * o * (T{1} - o);
        dc_next[b * H + j] = dc * f;
      }
    }
    if (has_prev) {
      const T* h_prev = cache.hidden.ptr() + tp * batch * H;
      gemm_tn(H, batch, G, h_prev, dg, grad.R.ptr());
      std::fill(dh_prev.begin(), dh_prev.end(), T{0});
      gemm_nt(batch, G, H, dg, p.R.ptr(), dh_prev.data());
      dh_next.swap(dh_prev);
    }
  }
  gemm_tn(in, steps * batch, G, input.ptr(), d_gates.data(), grad.W.ptr());
  T* db = grad.b.ptr();
  for (std::size_t r = 0; r < steps * batch; ++r) {
    const T* row = d_gates.data() + r * G;
    for (std::size_t k = 0; k < G; ++k) db[k] += row[k];
  }
  if (d_input) gemm_nt(steps * batch, G, in, d_gates.data(), p.W.ptr(), d_input);
}

}  // namespace detail

/// Runs the stacked (B)LSTM over a padded minibatch and returns per-frame
/// class posteriors [B x T_max x C].
///
/// Each chunk starts from zero state in both directions. In train mode with
/// dropout p > 0, every LSTM layer output is multiplied by an independent
/// keep mask scaled by 1/(1-p); recurrent connections are untouched.
template <class T>
ForwardResult<T> forward(const NetworkParams<T>& params, const Minibatch& batch, Mode mode, double dropout,
                         Rng& rng) {
  if (params.layers.empty()) throw ParameterError("network has no LSTM layers");
  const std::size_t D = params.layers.front().dirs.front().input_width();
  if (batch.feature_dim != D) {
    throw DimensionError("minibatch feature dim " + std::to_string(batch.feature_dim) +
                         " does not match network input dim " + std::to_string(D));
  }
  const std::size_t B = batch.batch_size;
  const std::size_t Tm = batch.max_len;
  ForwardResult<T> res;
  ForwardCache<T>& cache = res.cache;
  cache.batch = B;
  cache.steps = Tm;
  cache.input = Tensor<T>({Tm, B, D});
  cache.keep.assign(Tm * B, T{0});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < Tm; ++t) {
      cache.keep[t * B + b] = batch.valid(b, t) ? T{1} : T{0};
      for (std::size_t d = 0; d < D; ++d) cache.input.at(t, b, d) = static_cast<T>(batch.features.at(b, t, d));
    }
  }

  const bool use_dropout = mode == Mode::train && dropout > 0.0;
  const T scale = use_dropout ? T{1} / (T{1} - static_cast<T>(dropout)) : T{1};
  cache.layers.resize(params.depth());
  for (std::size_t l = 0; l < params.depth(); ++l) {
    const auto& layer = params.layers[l];
    LayerCache<T>& lc = cache.layers[l];
    const Tensor<T>& in = cache.layer_input(l);
    const std::size_t H = layer.dirs.front().hidden();
    const std::size_t width = H * layer.dirs.size();
    lc.dirs.resize(layer.dirs.size());
    lc.output = Tensor<T>({Tm, B, width});
    for (std::size_t d = 0; d < layer.dirs.size(); ++d) {
      detail::run_direction(layer.dirs[d], in, cache.keep, Tm, B, d == 1, lc.dirs[d]);
      const T* h = lc.dirs[d].hidden.ptr();
      for (std::size_t r = 0; r < Tm * B; ++r) {
        std::copy_n(h + r * H, H, lc.output.ptr() + r * width + d * H);
      }
    }
    if (use_dropout) {
      lc.dropout_mask = Tensor<T>(lc.output.shape());
      for (std::size_t k = 0; k < lc.output.size(); ++k) {
        lc.dropout_mask[k] = rng.bernoulli(dropout) ? T{0} : scale;
        lc.output[k] *= lc.dropout_mask[k];
      }
    }
  }

  const Tensor<T>& top = cache.layers.back().output;
  const std::size_t width = top.dim(2);
  const std::size_t C = params.softmax_b.size();
  Tensor<T> logits({Tm * B, C});
  for (std::size_t r = 0; r < Tm * B; ++r) std::copy_n(params.softmax_b.ptr(), C, logits.ptr() + r * C);
  detail::gemm_nn(Tm * B, width, C, top.ptr(), params.softmax_W.ptr(), logits.ptr());
  res.posteriors = Tensor<T>({B, Tm, C});
  for (std::size_t t = 0; t < Tm; ++t) {
    for (std::size_t b = 0; b < B; ++b) {
      T* row = logits.ptr() + (t * B + b) * C;
      softmax_inplace(row, C);
      std::copy_n(row, C, &res.posteriors.at(b, t, 0));
    }
  }
  return res;
}

template <class T>
ForwardResult<T> forward(const NetworkParams<T>& params, const Minibatch& batch, Mode mode, double dropout,
                         Rng&& rng) {
  return forward(params, batch, mode, dropout, rng);
}

/// Gradient of the summed cross entropy over counted frames.
template <class T>
Gradients<T> backward(const NetworkParams<T>& params, const Minibatch& batch, const ForwardCache<T>& cache,
                      const Tensor<T>& posteriors) {
  const std::size_t B = cache.batch;
  const std::size_t Tm = cache.steps;
  const std::size_t C = params.softmax_b.size();
  if (posteriors.shape() != Shape{B, Tm, C} || batch.batch_size != B || batch.max_len != Tm) {
    throw DimensionError("backward: posteriors " + shape_string(posteriors.shape()) +
                         " do not match the cached forward pass");
  }
  Gradients<T> grads = params.zeros_like();

  Tensor<T> d_logits({Tm * B, C});
  for (std::size_t t = 0; t < Tm; ++t) {
    for (std::size_t b = 0; b < B; ++b) {
      if (!batch.counted(b, t)) continue;
      T* row = d_logits.ptr() + (t * B + b) * C;
      std::copy_n(&posteriors.at(b, t, 0), C, row);
      row[batch.label(b, t)] -= T{1};
    }
  }

  const Tensor<T>& top = cache.layers.back().output;
  std::size_t width = top.dim(2);
  detail::gemm_tn(width, Tm * B, C, top.ptr(), d_logits.ptr(), grads.softmax_W.ptr());
  for (std::size_t r = 0; r < Tm * B; ++r) {
    for (std::size_t c = 0; c < C; ++c) grads.softmax_b[c] += d_logits[r * C + c];
  }
  std::vector<T> d_out(Tm * B * width, T{0});
  detail::gemm_nt(Tm * B, C, width, d_logits.ptr(), params.softmax_W.ptr(), d_out.data());

  for (std::size_t l = params.depth(); l-- > 0;) {
    const auto& layer = params.layers[l];
    const LayerCache<T>& lc = cache.layers[l];
    if (!lc.dropout_mask.empty()) {
      for (std::size_t k = 0; k < d_out.size(); ++k) d_out[k] *= lc.dropout_mask[k];
    }
    const Tensor<T>& in = cache.layer_input(l);
    const std::size_t in_width = in.dim(2);
    std::vector<T> d_in;
    if (l > 0) d_in.assign(Tm * B * in_width, T{0});
    const std::size_t H = layer.dirs.front().hidden();
    for (std::size_t d = 0; d < layer.dirs.size(); ++d) {
      detail::backprop_direction(layer.dirs[d], in, cache.keep, Tm, B, d == 1, lc.dirs[d], d_out.data(),
                                 width, d * H, grads.layers[l].dirs[d], l > 0 ? d_in.data() : nullptr);
    }
    d_out.swap(d_in);
    width = in_width;
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Metrics

/// Frame-level sums; combine across minibatches before dividing.
struct FrameMetrics {
  double ce_sum = 0.0;
  std::size_t errors = 0;
  std::size_t frames = 0;

  FrameMetrics& operator+=(const FrameMetrics& o) {
    ce_sum += o.ce_sum;
    errors += o.errors;
    frames += o.frames;
    return *this;
  }
  double ce() const {
    if (frames == 0) throw ValidationError("no counted frames to score");
    return ce_sum / static_cast<double>(frames);
  }
  double fer() const {
    if (frames == 0) throw ValidationError("no counted frames to score");
    return static_cast<double>(errors) / static_cast<double>(frames);
  }
};

/// Natural-log cross entropy and frame errors over frames that are real and
/// carry a non-ignored label. `posteriors` is [B x T x C]; labels and mask
/// are [B x T]. Counts are added onto `m`.
template <class T>
FrameMetrics frame_metrics(const Tensor<T>& posteriors, std::span<const int> labels,
                           std::span<const unsigned char> mask, FrameMetrics m = {}) {
  if (posteriors.rank() != 3 || labels.size() != posteriors.dim(0) * posteriors.dim(1) ||
      mask.size() != labels.size()) {
    throw DimensionError("frame_metrics: posteriors " + shape_string(posteriors.shape()) +
                         " do not match " + std::to_string(labels.size()) + " labels");
  }
  const std::size_t C = posteriors.dim(2);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    const int y = labels[r];
    if (!mask[r] || y == kIgnoreLabel) continue;
    const T* row = posteriors.ptr() + r * C;
    const double py = std::max(static_cast<double>(row[y]), std::numeric_limits<double>::denorm_min());
    m.ce_sum -= std::log(py);
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c) {
      if (row[c] > row[best]) best = c;
    }
    if (best != static_cast<std::size_t>(y)) ++m.errors;
    ++m.frames;
  }
  return m;
}

template <class T>
FrameMetrics frame_metrics(const Tensor<T>& posteriors, const Minibatch& batch, FrameMetrics m = {}) {
  return frame_metrics(posteriors, std::span<const int>(batch.labels), std::span<const unsigned char>(batch.mask), m);
}

/// Mean cross entropy and frame error rate. Throws if no frame is counted.
template <class T>
std::pair<double, double> loss_and_fer(const Tensor<T>& posteriors, std::span<const int> labels,
                                       std::span<const unsigned char> mask) {
  const FrameMetrics m = frame_metrics(posteriors, labels, mask);
  return {m.ce(), m.fer()};
}

}  // namespace blstm
