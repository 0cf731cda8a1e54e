#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ambert/common.hpp"
#include "ambert/params.hpp"

namespace ambert {

enum class LrSchedule { kLinear, kConstant };

struct AdamHyper {
  double lr = 1e-4;  // peak
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  double weight_decay = 0.01;
  long warmup_steps = 10000;
  long max_steps = 500000;
  LrSchedule schedule = LrSchedule::kLinear;
};

/// Learning rate for the `step`-th update (1-based): linear warmup to the
/// peak, then linear decay to zero at max_steps.
inline double learning_rate(const AdamHyper& h, long step) {
  if (step <= 0) return 0.0;
  if (h.warmup_steps > 0 && step < h.warmup_steps)
    return h.lr * static_cast<double>(step) / static_cast<double>(h.warmup_steps);
  if (h.schedule == LrSchedule::kConstant) return h.lr;
  const long span = h.max_steps - h.warmup_steps;
  if (span <= 0) return h.lr;
  const double frac = static_cast<double>(h.max_steps - step) / static_cast<double>(span);
  return h.lr * std::max(0.0, frac);
}

template <typename T>
struct AdamState {
  long step = 0;
  std::vector<Tensor<T>> m;  // per storage
  std::vector<Tensor<T>> v;

  void init(const ParamStore<T>& store) {
    m.clear();
    v.clear();
    for (std::size_t s = 0; s < store.storage_count(); ++s) {
      m.emplace_back(store.at(s).value.shape());
      v.emplace_back(store.at(s).value.shape());
    }
  }
  bool ready(const ParamStore<T>& store) const { return m.size() == store.storage_count(); }
  bool operator==(const AdamState&) const = default;
};

/// One Adam update with decoupled weight decay over every storage. Shared
/// storages already hold the sum of their sites' gradients. All gradients
/// are validated before any parameter moves. Returns the learning rate used.
template <typename T>
double adam_step(ParamStore<T>& store, AdamState<T>& state, const AdamHyper& h) {
  if (!state.ready(store)) state.init(store);
  for (const auto& g : store.groups()) {
    const Tensor<T>& grad = store.at(g.storage).grad;
    for (std::size_t i = 0; i < grad.size(); ++i)
      if (!std::isfinite(static_cast<double>(grad[i])))
        throw NumericError(str_cat("non-finite gradient in parameter ", g.names.front()));
  }
  const long t = state.step + 1;
  const double lr = learning_rate(h, t);
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
  for (std::size_t s = 0; s < store.storage_count(); ++s) {
    Param<T>& p = store.at(s);
    Tensor<T>& m = state.m[s];
    Tensor<T>& v = state.v[s];
    const double wd = p.decay ? h.weight_decay : 0.0;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = static_cast<double>(p.grad[i]);
      const double mi = h.beta1 * static_cast<double>(m[i]) + (1.0 - h.beta1) * g;
      const double vi = h.beta2 * static_cast<double>(v[i]) + (1.0 - h.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / (bc1 > 0 ? bc1 : 1.0);
      const double vhat = vi / (bc2 > 0 ? bc2 : 1.0);
      const double w = static_cast<double>(p.value[i]);
      p.value[i] = static_cast<T>(w - lr * (mhat / (std::sqrt(vhat) + h.eps) + wd * w));
    }
  }
  state.step = t;
  return lr;
}

}  // namespace ambert
