#pragma once

#include <cmath>
#include <unordered_map>

#include "meanvc/param_store.hpp"

namespace meanvc {

// Plain Adam over a ParamStore; reads the store's gradient accumulators.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamStore& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (auto& e : params.entries()) {
      auto& st = state_[e.name];
      if (st.m.empty()) {
        st.m = Tensor::zeros_like(e.value);
        st.v = Tensor::zeros_like(e.value);
      }
      for (std::size_t i = 0; i < e.value.size(); ++i) {
        const double g = e.grad[i];
        st.m[i] = beta1_ * st.m[i] + (1.0 - beta1_) * g;
        st.v[i] = beta2_ * st.v[i] + (1.0 - beta2_) * g * g;
        const double mh = st.m[i] / bc1;
        const double vh = st.v[i] / bc2;
        e.value[i] -= lr_ * mh / (std::sqrt(vh) + eps_);
      }
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  struct State {
    Tensor m, v;
  };
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::unordered_map<std::string, State> state_;
};

}  // namespace meanvc
