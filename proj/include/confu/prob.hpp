#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "confu/error.hpp"
#include "confu/tensor.hpp"

namespace confu {

inline std::size_t argmax(const std::vector<double>& v) {
  if (v.empty()) throw DimensionError("argmax of empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

// Softmax of logits at a sampling temperature. Temperature zero is greedy:
// a one-hot distribution on the argmax (lowest index on ties).
inline std::vector<double> softmax_temp(const std::vector<double>& logits, double temperature) {
  if (temperature < 0.0) throw ConfigError("temperature must be >= 0");
  std::vector<double> out(logits.size(), 0.0);
  if (logits.empty()) return out;
  if (temperature == 0.0) {
    out[argmax(logits)] = 1.0;
    return out;
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : logits) mx = std::max(mx, v / temperature);
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] / temperature - mx);
    z += out[i];
  }
  for (double& v : out) v /= z;
  return out;
}

inline std::vector<double> softmax_temp(const TensorF64& logits_row, double temperature) {
  return softmax_temp(logits_row.data, temperature);
}

// Normalized positive part of (p - q); the residual distribution used by the
// lossless correction step.
inline std::vector<double> residual_dist(const std::vector<double>& p,
                                         const std::vector<double>& q) {
  if (p.size() != q.size()) throw DimensionError("residual_dist: size mismatch");
  std::vector<double> r(p.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    r[i] = std::max(0.0, p[i] - q[i]);
    z += r[i];
  }
  if (z <= 0.0) {
    // p <= q everywhere can only happen when p == q, where rejection has
    // probability zero; fall back to p so callers never divide by zero.
    return p;
  }
  for (double& v : r) v /= z;
  return r;
}

// Indices of the k largest entries, ties to the lowest index.
inline std::vector<std::size_t> top_k_indices(const std::vector<double>& v, std::size_t k) {
  std::vector<std::size_t> order(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (v[a] != v[b]) return v[a] > v[b];
    return a < b;
  });
  order.resize(std::min(k, order.size()));
  return order;
}

inline double total_variation(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DimensionError("total_variation: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::fabs(a[i] - b[i]);
  return 0.5 * s;
}

}  // namespace confu
