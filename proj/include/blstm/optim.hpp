#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "blstm/error.hpp"
#include "blstm/network.hpp"
#include "blstm/rng.hpp"

namespace blstm {

enum class Method {
  sgd,
  sgd_mom,
  sgd_mom2,
  sgd_nesterov,
  adagrad,
  adadelta,
  rmsprop,
  smorms3,
  adam,
  adam_no_lr_decay,
  adamax,
  nadam,
};

inline constexpr std::array<Method, 12> kAllMethods = {
    Method::sgd,     Method::sgd_mom, Method::sgd_mom2, Method::sgd_nesterov,     Method::adagrad, Method::adadelta,
    Method::rmsprop, Method::smorms3, Method::adam,     Method::adam_no_lr_decay, Method::adamax,  Method::nadam,
};

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::sgd: return "sgd";
    case Method::sgd_mom: return "sgd_mom";
    case Method::sgd_mom2: return "sgd_mom2";
    case Method::sgd_nesterov: return "sgd_nesterov";
    case Method::adagrad: return "adagrad";
    case Method::adadelta: return "adadelta";
    case Method::rmsprop: return "rmsprop";
    case Method::smorms3: return "smorms3";
    case Method::adam: return "adam";
    case Method::adam_no_lr_decay: return "adam_no_lr_decay";
    case Method::adamax: return "adamax";
    case Method::nadam: return "nadam";
  }
  return "?";
}

inline Method parse_method(std::string_view name) {
  for (Method m : kAllMethods) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown optimizer method '" + std::string(name) + "'");
}

enum class ClipMode { global_norm, per_tensor };

struct OptimConfig {
  Method method = Method::adam;
  double lr = 1e-3;
  double momentum = 0.9;  // sgd_mom, sgd_mom2, sgd_nesterov, rmsprop
  double decay = 0.95;    // adadelta, rmsprop
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::optional<double> epsilon;  // unset: per-method default, see eps()
  double l2 = 0.0;
  std::optional<double> grad_clip = 10.0;
  ClipMode clip_mode = ClipMode::global_norm;
  double grad_noise = 0.0;
  std::uint64_t noise_seed = 1;

  double eps() const {
    if (epsilon) return *epsilon;
    switch (method) {
      case Method::adam:
      case Method::adam_no_lr_decay:
      case Method::adamax:
      case Method::nadam:
        return 1e-8;
      case Method::smorms3:
        return 1e-16;
      default:
        return 1e-6;
    }
  }

  void validate() const {
    if (!(lr >= 0.0)) throw ConfigError("optim.lr must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("optim.momentum must be in [0, 1)");
    if (!(decay > 0.0 && decay < 1.0)) throw ConfigError("optim.decay must be in (0, 1)");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("optim.beta1 must be in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("optim.beta2 must be in [0, 1)");
    if (epsilon && !(*epsilon >= 0.0)) throw ConfigError("optim.epsilon must be >= 0");
    if (!(l2 >= 0.0)) throw ConfigError("optim.l2 must be >= 0");
    if (grad_clip && !(*grad_clip > 0.0)) throw ConfigError("optim.grad_clip must be > 0 or none");
    if (!(grad_noise >= 0.0)) throw ConfigError("optim.grad_noise must be >= 0");
  }

  friend bool operator==(const OptimConfig&, const OptimConfig&) = default;
};

/// Names of the per-parameter auxiliary tensors a method keeps.
inline std::vector<std::string> slot_names(Method m) {
  switch (m) {
    case Method::sgd: return {};
    case Method::sgd_mom: return {"gprev"};
    case Method::sgd_mom2:
    case Method::sgd_nesterov: return {"v"};
    case Method::adagrad: return {"accum"};
    case Method::adadelta: return {"eg2", "edx2"};
    case Method::rmsprop: return {"eg2", "v"};
    case Method::smorms3: return {"mem", "g", "g2"};
    case Method::adam:
    case Method::adam_no_lr_decay:
    case Method::nadam: return {"m", "v"};
    case Method::adamax: return {"m", "u"};
  }
  return {};
}

template <class T>
struct OptimizerState {
  Method method = Method::sgd;
  std::uint64_t t = 0;  // number of applied updates
  std::vector<std::string> slots;
  std::vector<NetworkParams<T>> values;  // one mirror of the parameters per slot

  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

template <class T>
OptimizerState<T> init_optimizer_state(const NetworkParams<T>& params, Method method) {
  OptimizerState<T> st;
  st.method = method;
  st.slots = slot_names(method);
  for (const auto& name : st.slots) {
    NetworkParams<T> v = params.zeros_like();
    // SMORMS3 starts its memory length at 1.
    if (method == Method::smorms3 && name == "mem") {
      v.for_each([](const std::string&, Tensor<T>& t) { t.fill(T{1}); });
    }
    st.values.push_back(std::move(v));
  }
  return st;
}

// ---------------------------------------------------------------------------
// Gradient post-processing. Order per update: clip, L2, noise.

/// g += lambda * theta for every tensor, biases included.
template <class T>
void add_l2(Gradients<T>& grads, const NetworkParams<T>& params, double lambda) {
  if (!(lambda >= 0.0)) throw ParameterError("L2 factor must be >= 0");
  if (lambda == 0.0) return;
  const auto g = grads.tensors();
  const auto p = params.tensors();
  const T l = static_cast<T>(lambda);
  for (std::size_t k = 0; k < g.size(); ++k) {
    for (std::size_t i = 0; i < g[k]->size(); ++i) (*g[k])[i] += l * (*p[k])[i];
  }
}

template <class T>
double squared_norm(const Tensor<T>& t) {
  double s = 0.0;
  for (T v : t.data()) s += static_cast<double>(v) * static_cast<double>(v);
  return s;
}

template <class T>
double global_norm(const Gradients<T>& grads) {
  double s = 0.0;
  grads.for_each([&](const std::string&, const Tensor<T>& t) { s += squared_norm(t); });
  return std::sqrt(s);
}

/// Rescales gradients whose norm exceeds `threshold`, either over all tensors
/// jointly or tensor by tensor. Returns the global norm before clipping.
template <class T>
double clip_gradients(Gradients<T>& grads, double threshold, ClipMode mode) {
  if (!(threshold > 0.0)) throw ParameterError("clip threshold must be > 0");
  const double total = global_norm(grads);
  auto scale = [](Tensor<T>& t, double factor) {
    const T f = static_cast<T>(factor);
    for (T& v : t.data()) v *= f;
  };
  if (mode == ClipMode::global_norm) {
    if (total > threshold) {
      grads.for_each([&](const std::string&, Tensor<T>& t) { scale(t, threshold / total); });
    }
  } else {
    grads.for_each([&](const std::string&, Tensor<T>& t) {
      const double n = std::sqrt(squared_norm(t));
      if (n > threshold) scale(t, threshold / n);
    });
  }
  return total;
}

/// Variance of the annealed gradient noise at update t: eta / (1 + t)^0.55.
inline double gradient_noise_variance(double eta, std::uint64_t t) {
  return eta / std::pow(1.0 + static_cast<double>(t), 0.55);
}

template <class T>
void add_gradient_noise(Gradients<T>& grads, std::uint64_t t, double eta, Rng& rng) {
  if (!(eta >= 0.0)) throw ParameterError("gradient noise eta must be >= 0");
  if (t < 1) throw ParameterError("gradient noise needs update counter t >= 1");
  if (eta == 0.0) return;
  const double sigma = std::sqrt(gradient_noise_variance(eta, t));
  grads.for_each([&](const std::string&, Tensor<T>& g) {
    for (T& v : g.data()) v += static_cast<T>(rng.gaussian(0.0, sigma));
  });
}

/// Clip, then L2, then noise, for the update that will carry counter t.
template <class T>
void postprocess_gradients(Gradients<T>& grads, const NetworkParams<T>& params, const OptimConfig& cfg,
                           std::uint64_t t, Rng& noise_rng) {
  if (cfg.grad_clip) clip_gradients(grads, *cfg.grad_clip, cfg.clip_mode);
  add_l2(grads, params, cfg.l2);
  if (cfg.grad_noise > 0.0) add_gradient_noise(grads, t, cfg.grad_noise, noise_rng);
}

// ---------------------------------------------------------------------------
// Update rules

namespace detail {

struct StepScalars {
  double lr, mu, rho, b1, b2, eps;
  double adam_factor;   // sqrt(1 - b2^t) / (1 - b1^t)
  double b1_t;          // 1 - b1^t
  double b1_next;       // 1 - b1^(t+1)
  double b2_t;          // 1 - b2^t
};

template <class T>
void update_tensor(Method method, const StepScalars& s, Tensor<T>& theta, const Tensor<T>& grad,
                   std::vector<Tensor<T>*>& slot) {
  const std::size_t n = theta.size();
  T* x = theta.ptr();
  const T* g = grad.ptr();
  const T lr = static_cast<T>(s.lr);
  const T mu = static_cast<T>(s.mu);
  const T rho = static_cast<T>(s.rho);
  const T b1 = static_cast<T>(s.b1);
  const T b2 = static_cast<T>(s.b2);
  const T eps = static_cast<T>(s.eps);
  const T one{1};
  switch (method) {
    case Method::sgd:
      for (std::size_t i = 0; i < n; ++i) x[i] -= lr * g[i];
      break;
    case Method::sgd_mom: {
      // One-step gradient echo: only the previous minibatch contributes.
      T* gp = slot[0]->ptr();
      for (std::size_t i = 0; i < n; ++i) {
        x[i] -= lr * (g[i] + mu * gp[i]);
        gp[i] = g[i];
      }
      break;
    }
    case Method::sgd_mom2: {
      T* v = slot[0]->ptr();
      for (std::size_t i = 0; i < n; ++i) {
        v[i] = mu * v[i] + g[i];
        x[i] -= lr * v[i];
      }
      break;
    }
    case Method::sgd_nesterov: {
      // v' = mu v + g; theta' = theta - lr (g + mu v')
      T* v = slot[0]->ptr();
      for (std::size_t i = 0; i < n; ++i) {
        v[i] = mu * v[i] + g[i];
        x[i] -= lr * (g[i] + mu * v[i]);
      }
      break;
    }
    case Method::adagrad: {
      T* a = slot[0]->ptr();
      for (std::size_t i = 0; i < n; ++i) {
        a[i] += g[i] * g[i];
        x[i] -= lr * g[i] / std::sqrt(a[i] + eps);
      }
      break;
    }
    case Method::adadelta: {
      T* eg2 = slot[0]->ptr();
      T* edx2 = slot[1]->ptr();
      for (std::size_t i = 0; i < n; ++i) {
        eg2[i] = rho * eg2[i] + (one - rho) * g[i] * g[i];
        const T dx = -std::sqrt(edx2[i] + eps) / std::sqrt(eg2[i] + eps) * g[i];
        edx2[i] = rho * edx2[i] + (one - rho) * dx * dx;
        x[i] += lr * dx;
      }
      break;
    }
    case Method::rmsprop: {
      // E' = rho E + (1 - rho) g^2; v' = mu v + g / sqrt(E' + eps); theta' = theta - lr v'
      T* eg2 = slot[0]->ptr();
      T* v = slot[1]->ptr();
      for (std::size_t i = 0; i < n; ++i) {
        eg2[i] = rho * eg2[i] + (one - rho) * g[i] * g[i];
        v[i] = mu * v[i] + g[i] / std::sqrt(eg2[i] + eps);
        x[i] -= lr * v[i];
      }
      break;
    }
    case Method::smorms3: {
      // r = 1 / (mem + 1)
      // m' = (1 - r) m + r g;   m2' = (1 - r) m2 + r g^2
      // q = m'^2 / (m2' + eps)
      // theta' = theta - g * min(lr, q) / (sqrt(m2') + eps)
      // mem' = 1 + mem (1 - q)
      T* mem = slot[0]->ptr();
      T* m = slot[1]->ptr();
      T* m2 = slot[2]->ptr();
      for (std::size_t i = 0; i < n; ++i) {
        const T r = one / (mem[i] + one);
        m[i] = (one - r) * m[i] + r * g[i];
        m2[i] = (one - r) * m2[i] + r * g[i] * g[i];
        const T q = m[i] * m[i] / (m2[i] + eps);
        x[i] -= g[i] * std::min(lr, q) / (std::sqrt(m2[i]) + eps);
        mem[i] = one + mem[i] * (one - q);
      }
      break;
    }
    case Method::adam:
    case Method::adam_no_lr_decay: {
      T* m = slot[0]->ptr();
      T* v = slot[1]->ptr();
      const T step = method == Method::adam ? static_cast<T>(s.lr * s.adam_factor) : lr;
      for (std::size_t i = 0; i < n; ++i) {
        m[i] = b1 * m[i] + (one - b1) * g[i];
        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
        x[i] -= step * m[i] / (std::sqrt(v[i]) + eps);
      }
      break;
    }
    case Method::adamax: {
      T* m = slot[0]->ptr();
      T* u = slot[1]->ptr();
      const T step = static_cast<T>(s.lr / s.b1_t);
      for (std::size_t i = 0; i < n; ++i) {
        m[i] = b1 * m[i] + (one - b1) * g[i];
        u[i] = std::max(b2 * u[i], std::abs(g[i]));
        x[i] -= step * m[i] / (u[i] + eps);
      }
      break;
    }
    case Method::nadam: {
      // Nesterov lookahead on the bias-corrected first moment:
      // m_hat = b1 m' / (1 - b1^(t+1)) + (1 - b1) g / (1 - b1^t);  v_hat = v' / (1 - b2^t)
      T* m = slot[0]->ptr();
      T* v = slot[1]->ptr();
      const T c_next = static_cast<T>(s.b1_next);
      const T c_now = static_cast<T>(s.b1_t);
      const T c2 = static_cast<T>(s.b2_t);
      for (std::size_t i = 0; i < n; ++i) {
        m[i] = b1 * m[i] + (one - b1) * g[i];
        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
        const T m_hat = b1 * m[i] / c_next + (one - b1) * g[i] / c_now;
        const T v_hat = v[i] / c2;
        x[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
      }
      break;
    }
  }
}

}  // namespace detail

/// Applies one update of `cfg.method` to every parameter tensor whose entry in
/// `trainable` is true (an empty mask trains everything), then advances the
/// counter t. The learning rate is used as given; it is never normalized by
/// the number of frames in the minibatch.
///
/// Throws DivergenceError naming the first tensor that holds a non-finite
/// value after the update.
template <class T>
void apply_update(OptimizerState<T>& state, NetworkParams<T>& params, const Gradients<T>& grads,
                  const OptimConfig& cfg, const std::vector<bool>& trainable = {}) {
  if (state.method != cfg.method) {
    throw ParameterError("optimizer state was built for " + std::string(to_string(state.method)) +
                         ", config asks for " + std::string(to_string(cfg.method)));
  }
  auto p = params.tensors();
  const auto g = grads.tensors();
  const auto names = params.names();
  if (g.size() != p.size()) throw DimensionError("gradient and parameter tensor counts differ");
  std::vector<std::vector<Tensor<T>*>> slot(state.values.size());
  for (std::size_t s = 0; s < state.values.size(); ++s) {
    slot[s] = state.values[s].tensors();
    if (slot[s].size() != p.size()) throw DimensionError("optimizer slot '" + state.slots[s] + "' does not mirror the parameters");
  }
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (g[k]->shape() != p[k]->shape()) {
      throw DimensionError(names[k] + ": gradient " + shape_string(g[k]->shape()) + " vs parameter " +
                           shape_string(p[k]->shape()));
    }
    for (std::size_t s = 0; s < slot.size(); ++s) {
      if (slot[s][k]->shape() != p[k]->shape()) {
        throw DimensionError(names[k] + ": slot " + state.slots[s] + " " + shape_string(slot[s][k]->shape()) +
                             " vs parameter " + shape_string(p[k]->shape()));
      }
    }
  }
  if (!trainable.empty() && trainable.size() != p.size()) {
    throw DimensionError("trainable mask length does not match the parameter count");
  }

  const std::uint64_t t = state.t + 1;
  const double td = static_cast<double>(t);
  detail::StepScalars sc{};
  sc.lr = cfg.lr;
  sc.mu = cfg.momentum;
  sc.rho = cfg.decay;
  sc.b1 = cfg.beta1;
  sc.b2 = cfg.beta2;
  sc.eps = cfg.eps();
  sc.b1_t = 1.0 - std::pow(cfg.beta1, td);
  sc.b1_next = 1.0 - std::pow(cfg.beta1, td + 1.0);
  sc.b2_t = 1.0 - std::pow(cfg.beta2, td);
  sc.adam_factor = std::sqrt(sc.b2_t) / sc.b1_t;

  std::vector<Tensor<T>*> slots_k(slot.size());
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (!trainable.empty() && !trainable[k]) continue;
    for (std::size_t s = 0; s < slot.size(); ++s) slots_k[s] = slot[s][k];
    detail::update_tensor(cfg.method, sc, *p[k], *g[k], slots_k);
  }
  state.t = t;
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (!p[k]->all_finite()) throw DivergenceError("model broken: non-finite values in " + names[k]);
  }
}

// ---------------------------------------------------------------------------
// Multi-copy model averaging (upd-mm-n-k)

struct ModelAverageConfig {
  std::size_t n_copies = 1;
  std::size_t merge_every = 1;

  void validate() const {
    if (n_copies < 1) throw ConfigError("model_avg.n_copies must be >= 1");
    if (merge_every < 1) throw ConfigError("model_avg.merge_every must be >= 1");
  }
  friend bool operator==(const ModelAverageConfig&, const ModelAverageConfig&) = default;
};

template <class T>
struct Replica {
  NetworkParams<T> params;
  OptimizerState<T> state;
};

namespace detail {

template <class T>
void average_into_first(std::vector<std::vector<Tensor<T>*>>& per_copy) {
  const std::size_t n = per_copy.size();
  const T inv = T{1} / static_cast<T>(n);
  for (std::size_t k = 0; k < per_copy[0].size(); ++k) {
    Tensor<T>& dst = *per_copy[0][k];
    for (std::size_t c = 1; c < n; ++c) {
      const Tensor<T>& src = *per_copy[c][k];
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
    if (n > 1) {
      for (T& v : dst.data()) v *= inv;
    }
  }
}

}  // namespace detail

/// Replaces every copy's parameters and optimizer slots by their elementwise
/// mean. The update counter becomes the maximum over copies.
template <class T>
void merge_replicas(std::vector<Replica<T>>& copies) {
  if (copies.size() <= 1) return;
  std::vector<std::vector<Tensor<T>*>> ptrs;
  for (auto& c : copies) ptrs.push_back(c.params.tensors());
  detail::average_into_first(ptrs);
  for (std::size_t s = 0; s < copies[0].state.values.size(); ++s) {
    ptrs.clear();
    for (auto& c : copies) ptrs.push_back(c.state.values[s].tensors());
    detail::average_into_first(ptrs);
  }
  std::uint64_t t = 0;
  for (const auto& c : copies) t = std::max(t, c.state.t);
  copies[0].state.t = t;
  for (std::size_t c = 1; c < copies.size(); ++c) {
    copies[c].params = copies[0].params;
    copies[c].state = copies[0].state;
  }
}

/// Deals minibatches round-robin to the copies; `step(replica, batch)`
/// performs one update. After every copy has done `merge_every` updates the
/// copies are merged; a final merge closes an incomplete round. Returns the
/// merged parameters.
template <class T, class NextBatch, class StepFn>
const NetworkParams<T>& model_average_step(std::vector<Replica<T>>& copies, const ModelAverageConfig& cfg,
                                           NextBatch&& next_batch, StepFn&& step) {
  cfg.validate();
  if (copies.size() != cfg.n_copies) throw ParameterError("replica count does not match model_avg.n_copies");
  const std::size_t round = cfg.n_copies * cfg.merge_every;
  std::size_t dealt = 0;
  while (auto batch = next_batch()) {
    step(copies[dealt % copies.size()], *batch);
    ++dealt;
    if (dealt % round == 0) merge_replicas(copies);
  }
  if (dealt % round != 0) merge_replicas(copies);
  return copies.front().params;
}

}  // namespace blstm
