#pragma once

#include <memory>
#include <string>
#include <vector>

#include "fewshot/errors.hpp"
#include "fewshot/tensor.hpp"

namespace fewshot {

// A named trainable tensor. Gradients accumulate across backward passes
// until zero_grad(); the optimizer consumes .grad.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool weight_decay = true;  // log-gamma temperatures opt out

  void zero_grad() { grad.fill(T(0)); }
};

// Non-trainable state saved with checkpoints (batchnorm running stats).
template <typename T>
struct Buffer {
  std::string name;
  Tensor<T> value;
};

// Owns parameters/buffers and fixes their registration order, which defines
// the checkpoint serialization order and the optimizer update order.
template <typename T>
class ParameterStore {
 public:
  Parameter<T>& add_param(const std::string& name, Tensor<T> init, bool weight_decay = true) {
    if (find(name) || find_buffer(name)) throw ContractError("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->grad = Tensor<T>(init.shape());
    p->value = std::move(init);
    p->weight_decay = weight_decay;
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Buffer<T>& add_buffer(const std::string& name, Tensor<T> init) {
    if (find(name) || find_buffer(name)) throw ContractError("duplicate buffer name: " + name);
    auto b = std::make_unique<Buffer<T>>();
    b->name = name;
    b->value = std::move(init);
    buffers_.push_back(std::move(b));
    return *buffers_.back();
  }

  Parameter<T>* find(const std::string& name) {
    for (auto& p : params_)
      if (p->name == name) return p.get();
    return nullptr;
  }
  const Parameter<T>* find(const std::string& name) const {
    return const_cast<ParameterStore*>(this)->find(name);
  }

  Buffer<T>* find_buffer(const std::string& name) {
    for (auto& b : buffers_)
      if (b->name == name) return b.get();
    return nullptr;
  }

  std::vector<Parameter<T>*> all_params() {
    std::vector<Parameter<T>*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }

  std::vector<Buffer<T>*> all_buffers() {
    std::vector<Buffer<T>*> out;
    out.reserve(buffers_.size());
    for (auto& b : buffers_) out.push_back(b.get());
    return out;
  }

  // Parameters whose name starts with one of the given prefixes, in
  // registration order.
  std::vector<Parameter<T>*> params_with_prefix(const std::vector<std::string>& prefixes) {
    std::vector<Parameter<T>*> out;
    for (auto& p : params_) {
      for (const auto& pre : prefixes) {
        if (p->name.rfind(pre, 0) == 0) {
          out.push_back(p.get());
          break;
        }
      }
    }
    return out;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  size_t scalar_count() const {
    size_t n = 0;
    for (const auto& p : params_) n += p->value.numel();
    return n;
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::vector<std::unique_ptr<Buffer<T>>> buffers_;
};

}  // namespace fewshot
