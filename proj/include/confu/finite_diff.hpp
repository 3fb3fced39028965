#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "confu/error.hpp"
#include "confu/param_store.hpp"
#include "confu/tensor.hpp"

namespace confu {

// Central finite differences over one parameter group:
//   g_i = (loss(theta_i + h) - loss(theta_i - h)) / (2h)
// The loss function must be a deterministic function of the store. Gradient
// oracle for backward(); lives in the library so tools can cross-check too.
inline TensorF64 finite_diff_grad(ParamStore& store, const std::string& group_name,
                                  const std::function<double()>& loss_fn, double h = 1e-5) {
  TensorF64& t = store.tensor(group_name);
  TensorF64 out = TensorF64::zeros(t.shape);
  for (std::size_t i = 0; i < t.data.size(); ++i) {
    double saved = t.data[i];
    t.data[i] = saved + h;
    double up = loss_fn();
    t.data[i] = saved - h;
    double down = loss_fn();
    t.data[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericError("finite_diff_grad: non-finite loss at " + group_name + "[" +
                         std::to_string(i) + "]");
    out.data[i] = (up - down) / (2.0 * h);
  }
  return out;
}

// Max relative error between backward gradients and the finite-difference
// estimate, with an absolute floor so near-zero entries compare sanely.
inline double max_rel_error(const TensorF64& got, const TensorF64& want, double floor = 1e-6) {
  if (!got.same_shape(want)) throw DimensionError("max_rel_error: shape mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < got.data.size(); ++i) {
    double denom = std::max(std::fabs(want.data[i]), floor);
    worst = std::max(worst, std::fabs(got.data[i] - want.data[i]) / denom);
  }
  return worst;
}

}  // namespace confu
