#pragma once

#include <vector>

#include "fewshot/params.hpp"

namespace fewshot {

// SGD with classic (non-Nesterov) momentum and decoupled-from-nothing L2:
//   g    <- grad + weight_decay * value     (if the parameter opts in)
//   buf  <- momentum * buf + g
//   value <- value - lr * buf
// Buffers start at zero. Update order = parameter registration order.
template <typename T>
class SgdOptimizer {
 public:
  struct Config {
    T lr = T(0.1);
    T momentum = T(0.9);
    T weight_decay = T(5e-4);
  };

  SgdOptimizer(std::vector<Parameter<T>*> params, Config cfg)
      : params_(std::move(params)), cfg_(cfg) {
    buffers_.reserve(params_.size());
    for (auto* p : params_) buffers_.emplace_back(p->value.shape());
  }

  void set_lr(T lr) { cfg_.lr = lr; }
  T lr() const { return cfg_.lr; }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  void step() {
    for (size_t k = 0; k < params_.size(); ++k) {
      Parameter<T>& p = *params_[k];
      Tensor<T>& buf = buffers_[k];
      const T wd = p.weight_decay ? cfg_.weight_decay : T(0);
      for (size_t i = 0; i < p.value.numel(); ++i) {
        const T g = p.grad[i] + wd * p.value[i];
        buf[i] = cfg_.momentum * buf[i] + g;
        p.value[i] -= cfg_.lr * buf[i];
      }
    }
  }

  const std::vector<Parameter<T>*>& params() const { return params_; }

 private:
  std::vector<Parameter<T>*> params_;
  Config cfg_;
  std::vector<Tensor<T>> buffers_;
};

// Stepwise learning-rate decay: lr(epoch) = base * factor^floor(epoch / every).
template <typename T>
T scheduled_lr(T base, T factor, int every, int epoch) {
  T lr = base;
  for (int k = 0; k < epoch / every; ++k) lr *= factor;
  return lr;
}

}  // namespace fewshot
