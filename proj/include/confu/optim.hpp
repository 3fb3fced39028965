#pragma once

#include <cmath>
#include <map>
#include <string>

#include "confu/error.hpp"
#include "confu/param_store.hpp"

namespace confu {

// Plain SGD over every trainable group with a populated gradient.
// Frozen groups are left bit-identical.
inline void sgd_step(ParamStore& store, double lr) {
  for (auto& [name, g] : store) {
    if (!g.trainable) continue;
    if (!g.tensor.grad) throw StateError("sgd_step: no gradient for group " + name);
    for (std::size_t i = 0; i < g.tensor.data.size(); ++i)
      g.tensor.data[i] -= lr * (*g.tensor.grad)[i];
  }
}

// Adam with standard defaults and bias correction.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamStore& store) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& [name, g] : store) {
      if (!g.trainable) continue;
      if (!g.tensor.grad) throw StateError("Adam::step: no gradient for group " + name);
      auto& m = m_[name];
      auto& v = v_[name];
      if (m.size() != g.tensor.data.size()) m.assign(g.tensor.data.size(), 0.0);
      if (v.size() != g.tensor.data.size()) v.assign(g.tensor.data.size(), 0.0);
      for (std::size_t i = 0; i < g.tensor.data.size(); ++i) {
        double grad = (*g.tensor.grad)[i];
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * grad;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * grad * grad;
        double mhat = m[i] / bc1;
        double vhat = v[i] / bc2;
        g.tensor.data[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  void set_lr(double lr) { lr_ = lr; }
  std::uint64_t steps_taken() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

}  // namespace confu
