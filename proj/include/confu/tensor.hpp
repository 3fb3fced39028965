#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <vector>

#include "confu/error.hpp"

namespace confu {

// Dense row-major float64 array. Rank is usually 1 or 2; the shape vector is
// kept general so checkpoints can carry anything.
struct TensorF64 {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  std::optional<std::vector<double>> grad;

  TensorF64() = default;
  TensorF64(std::vector<std::size_t> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != data.size())
      throw DimensionError("tensor data size does not match shape");
  }

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
  }

  static TensorF64 zeros(std::vector<std::size_t> s) {
    std::size_t n = numel_of(s);
    return TensorF64(std::move(s), std::vector<double>(n, 0.0));
  }

  static TensorF64 full(std::vector<std::size_t> s, double v) {
    std::size_t n = numel_of(s);
    return TensorF64(std::move(s), std::vector<double>(n, v));
  }

  static TensorF64 scalar(double v) { return TensorF64({1}, {v}); }

  static TensorF64 row(std::vector<double> d) {
    std::size_t n = d.size();
    return TensorF64({1, n}, std::move(d));
  }

  static TensorF64 vec(std::vector<double> d) {
    std::size_t n = d.size();
    return TensorF64({n}, std::move(d));
  }

  std::size_t numel() const { return data.size(); }

  // 2-D accessors; a rank-1 tensor is treated as a single row.
  std::size_t rows() const { return shape.size() >= 2 ? shape[0] : 1; }
  std::size_t cols() const {
    if (shape.empty()) return 0;
    return shape.size() >= 2 ? shape[1] : shape[0];
  }

  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  bool same_shape(const TensorF64& o) const { return shape == o.shape; }

  void ensure_grad() {
    if (!grad) grad.emplace(data.size(), 0.0);
  }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), 0.0);
  }

  // Gradient viewed as a tensor with this tensor's shape.
  TensorF64 grad_tensor() const {
    if (!grad) throw StateError("grad_tensor: gradient not populated");
    return TensorF64(shape, *grad);
  }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline double max_abs_diff(const TensorF64& a, const TensorF64& b) {
  if (!a.same_shape(b)) throw DimensionError("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::fabs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace confu
