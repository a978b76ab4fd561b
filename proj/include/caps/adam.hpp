#pragma once

#include <cmath>
#include <map>
#include <string>

#include "caps/params.hpp"

namespace caps {

// Bias-corrected Adam over a ParameterStore. Moment buffers are lazily
// created to match parameter shapes on the first step.
template <typename T>
class AdamT {
 public:
  explicit AdamT(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                 double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  long step_count() const { return step_; }
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

  // Applies one update using the gradients in `store`, then zeroes them.
  // A non-finite gradient aborts the step (no parameter is touched) and
  // reports the offending parameter.
  void step(ParameterStoreT<T>& store) {
    for (const auto& name : store.names()) {
      for (T g : store.entry(name).grad.data)
        if (!std::isfinite(static_cast<double>(g)))
          throw RuntimeFailure("non-finite gradient in parameter '" + name + "'");
    }
    ++step_;
    double bc1 = 1.0 - std::pow(beta1_, step_);
    double bc2 = 1.0 - std::pow(beta2_, step_);
    for (const auto& name : store.names()) {
      auto& e = store.entry(name);
      auto& m = moments_[name];
      if (m.m.size() != e.value.size()) {
        m.m.assign(e.value.size(), 0.0);
        m.v.assign(e.value.size(), 0.0);
      }
      for (size_t i = 0; i < e.value.size(); ++i) {
        double g = static_cast<double>(e.grad.data[i]);
        m.m[i] = beta1_ * m.m[i] + (1.0 - beta1_) * g;
        m.v[i] = beta2_ * m.v[i] + (1.0 - beta2_) * g * g;
        double mhat = m.m[i] / bc1;
        double vhat = m.v[i] / bc2;
        e.value.data[i] -= static_cast<T>(lr_ * mhat / (std::sqrt(vhat) + eps_));
      }
    }
    store.zero_grads();
  }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  double lr_, beta1_, beta2_, eps_;
  long step_ = 0;
  std::map<std::string, Moments> moments_;
};

using Adam = AdamT<float>;

}  // namespace caps
