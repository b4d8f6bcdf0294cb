// Shared helpers for the test binaries.

#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "sermtl/tensor.hpp"

namespace sermtl::testutil {

inline Tensor rand_tensor(Shape shape, double lo, double hi,
                          std::mt19937_64& eng) {
  std::uniform_real_distribution<double> unif(lo, hi);
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = unif(eng);
  return t;
}

inline bool approx_equal(const Tensor& a, const Tensor& b, double tol) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (std::abs(a[i] - b[i]) > tol) return false;
  }
  return true;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(a[i] - b[i]));
  }
  return m;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (a[i] != b[i]) return false;
  }
  return true;
}

}  // namespace sermtl::testutil
