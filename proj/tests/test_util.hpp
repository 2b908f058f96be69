#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "fewshot/rng.hpp"
#include "fewshot/tensor.hpp"

namespace testutil {

// Standard normal entries.
template <typename T>
fewshot::Tensor<T> randn(fewshot::Rng& rng, std::vector<size_t> shape, double scale = 1.0) {
  fewshot::Tensor<T> t(std::move(shape));
  for (size_t i = 0; i < t.numel(); ++i) t[i] = T(rng.normal() * scale);
  return t;
}

// Entries bounded away from zero: uniform magnitude in [lo, hi], random sign.
// Keeps finite differences clear of relu/max kinks.
template <typename T>
fewshot::Tensor<T> rand_signed(fewshot::Rng& rng, std::vector<size_t> shape, double lo = 0.1,
                               double hi = 1.0) {
  fewshot::Tensor<T> t(std::move(shape));
  for (size_t i = 0; i < t.numel(); ++i) {
    const double m = rng.uniform(lo, hi);
    t[i] = T(rng.below(2) ? m : -m);
  }
  return t;
}

// Strictly positive entries for log/sqrt domains.
template <typename T>
fewshot::Tensor<T> rand_positive(fewshot::Rng& rng, std::vector<size_t> shape, double lo = 0.5,
                                 double hi = 2.0) {
  fewshot::Tensor<T> t(std::move(shape));
  for (size_t i = 0; i < t.numel(); ++i) t[i] = T(rng.uniform(lo, hi));
  return t;
}

inline std::vector<int> rand_labels(fewshot::Rng& rng, size_t n, int n_classes) {
  std::vector<int> out(n);
  for (auto& v : out) v = int(rng.below(uint64_t(n_classes)));
  return out;
}

// Unique scratch directory under the build tree; caller cleans up or not
// (the build dir is disposable).
inline std::filesystem::path scratch_dir(const std::string& tag) {
  static int counter = 0;
  auto dir = std::filesystem::temp_directory_path() /
             ("fewshot_test_" + tag + "_" + std::to_string(++counter) + "_" +
              std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testutil
