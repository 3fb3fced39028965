#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "confu/error.hpp"
#include "confu/mask.hpp"
#include "confu/param_store.hpp"
#include "confu/tensor.hpp"

namespace confu {

// Reverse-mode tape. Values are computed eagerly as ops are recorded;
// backward() replays the tape in reverse. One Graph per forward pass (or per
// training step); inference paths simply never call backward().
class Graph;

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Graph {
 public:
  static constexpr double kRmsEps = 1e-6;
  static constexpr double kProbFloor = 1e-12;

  // ---- leaves ------------------------------------------------------------

  Var constant(TensorF64 v) { return push(std::move(v), {}, nullptr, false); }

  Var scalar(double v) { return constant(TensorF64::scalar(v)); }

  // Leaf bound to a parameter group; gradients land in the group's grad slot.
  // Re-leafing the same group returns the cached node so one step sees one leaf.
  Var param(ParamStore& store, const std::string& name) {
    auto key = std::make_pair(&store, name);
    auto it = param_cache_.find(key);
    if (it != param_cache_.end()) return Var{it->second};
    auto& g = store.group(name);
    Var v = push(g.tensor, {}, nullptr, g.trainable);
    nodes_[v.id].bound_store = &store;
    nodes_[v.id].bound_name = name;
    param_cache_[key] = v.id;
    return v;
  }

  Var detach(Var a) { return constant(val(a)); }

  // ---- elementwise -------------------------------------------------------

  Var add(Var a, Var b) {
    check_same_shape(a, b, "add");
    TensorF64 out = val(a);
    const auto& bd = val(b).data;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bd[i];
    return push(std::move(out), {a, b}, [](Graph& g, const Node& n) {
      g.accumulate(n.parents[0], n.grad);
      g.accumulate(n.parents[1], n.grad);
    });
  }

  Var sub(Var a, Var b) {
    check_same_shape(a, b, "sub");
    TensorF64 out = val(a);
    const auto& bd = val(b).data;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bd[i];
    return push(std::move(out), {a, b}, [](Graph& g, const Node& n) {
      g.accumulate(n.parents[0], n.grad);
      if (g.wants_grad(n.parents[1])) {
        std::vector<double> neg(n.grad.size());
        for (std::size_t i = 0; i < neg.size(); ++i) neg[i] = -n.grad[i];
        g.accumulate(n.parents[1], neg);
      }
    });
  }

  Var mul(Var a, Var b) {
    check_same_shape(a, b, "mul");
    TensorF64 out = val(a);
    const auto& bd = val(b).data;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bd[i];
    return push(std::move(out), {a, b}, [](Graph& g, const Node& n) {
      if (g.wants_grad(n.parents[0])) {
        std::vector<double> da(n.grad.size());
        const auto& bd2 = g.val(n.parents[1]).data;
        for (std::size_t i = 0; i < da.size(); ++i) da[i] = n.grad[i] * bd2[i];
        g.accumulate(n.parents[0], da);
      }
      if (g.wants_grad(n.parents[1])) {
        std::vector<double> db(n.grad.size());
        const auto& ad = g.val(n.parents[0]).data;
        for (std::size_t i = 0; i < db.size(); ++i) db[i] = n.grad[i] * ad[i];
        g.accumulate(n.parents[1], db);
      }
    });
  }

  Var scale(Var a, double c) {
    TensorF64 out = val(a);
    for (double& v : out.data) v *= c;
    return push(std::move(out), {a}, [c](Graph& g, const Node& n) {
      if (!g.wants_grad(n.parents[0])) return;
      std::vector<double> da(n.grad.size());
      for (std::size_t i = 0; i < da.size(); ++i) da[i] = c * n.grad[i];
      g.accumulate(n.parents[0], da);
    });
  }

  // Elementwise division by a scalar node (broadcast). Exact where IEEE
  // division is (notably x/x == 1).
  Var div_by(Var a, Var s) {
    const TensorF64& sv = val(s);
    if (sv.numel() != 1) throw DimensionError("div_by: scalar expected");
    double c = sv.data[0];
    if (c == 0.0) throw NumericError("div_by: division by zero");
    TensorF64 out = val(a);
    for (double& v : out.data) v /= c;
    return push(std::move(out), {a, s}, [c](Graph& g, const Node& n) {
      if (g.wants_grad(n.parents[0])) {
        std::vector<double> da(n.grad.size());
        for (std::size_t i = 0; i < da.size(); ++i) da[i] = n.grad[i] / c;
        g.accumulate(n.parents[0], da);
      }
      if (g.wants_grad(n.parents[1])) {
        const auto& ad = g.val(n.parents[0]).data;
        double ds = 0.0;
        for (std::size_t i = 0; i < n.grad.size(); ++i) ds -= n.grad[i] * ad[i] / (c * c);
        g.accumulate(n.parents[1], {ds});
      }
    });
  }

  // [r,c] + [c] broadcast over rows.
  Var add_rowvec(Var m, Var v) {
    const TensorF64& mv = val(m);
    const TensorF64& vv = val(v);
    if (vv.numel() != mv.cols()) throw DimensionError("add_rowvec: vector length != cols");
    TensorF64 out = mv;
    for (std::size_t r = 0; r < out.rows(); ++r)
      for (std::size_t c = 0; c < out.cols(); ++c) out.at(r, c) += vv.data[c];
    return push(std::move(out), {m, v}, [](Graph& g, const Node& n) {
      g.accumulate(n.parents[0], n.grad);
      if (g.wants_grad(n.parents[1])) {
        const TensorF64& outv = n.value;
        std::size_t rows = outv.rows(), cols = outv.cols();
        std::vector<double> dv(cols, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) dv[c] += n.grad[r * cols + c];
        g.accumulate(n.parents[1], dv);
      }
    });
  }

  // ---- matrix products ----------------------------------------------------

  // [m,k] x [k,n] -> [m,n]
  Var matmul(Var a, Var b) {
    const TensorF64& av = val(a);
    const TensorF64& bv = val(b);
    if (av.cols() != bv.rows())
      throw DimensionError("matmul: inner dims " + std::to_string(av.cols()) + " vs " +
                           std::to_string(bv.rows()));
    std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    TensorF64 out = TensorF64::zeros({m, n});
    matmul_raw(av.data.data(), bv.data.data(), out.data.data(), m, k, n);
    return push(std::move(out), {a, b}, [m, k, n](Graph& g, const Node& nd) {
      // dA = dY * B^T ; dB = A^T * dY
      if (g.wants_grad(nd.parents[0])) {
        std::vector<double> da(m * k, 0.0);
        matmul_nt_raw(nd.grad.data(), g.val(nd.parents[1]).data.data(), da.data(), m, n, k);
        g.accumulate(nd.parents[0], da);
      }
      if (g.wants_grad(nd.parents[1])) {
        std::vector<double> db(k * n, 0.0);
        matmul_tn_raw(g.val(nd.parents[0]).data.data(), nd.grad.data(), db.data(), m, k, n);
        g.accumulate(nd.parents[1], db);
      }
    });
  }

  // a [m,k] x b^T where b is [n,k] -> [m,n]  (attention scores: q x k^T)
  Var matmul_nt(Var a, Var b) {
    const TensorF64& av = val(a);
    const TensorF64& bv = val(b);
    if (av.cols() != bv.cols()) throw DimensionError("matmul_nt: inner dims differ");
    std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
    TensorF64 out = TensorF64::zeros({m, n});
    matmul_nt_raw(av.data.data(), bv.data.data(), out.data.data(), m, k, n);
    return push(std::move(out), {a, b}, [m, k, n](Graph& g, const Node& nd) {
      // Y = A B^T: dA = dY * B ; dB = dY^T * A
      if (g.wants_grad(nd.parents[0])) {
        std::vector<double> da(m * k, 0.0);
        matmul_raw(nd.grad.data(), g.val(nd.parents[1]).data.data(), da.data(), m, n, k);
        g.accumulate(nd.parents[0], da);
      }
      if (g.wants_grad(nd.parents[1])) {
        std::vector<double> db(n * k, 0.0);
        matmul_tn_raw(nd.grad.data(), g.val(nd.parents[0]).data.data(), db.data(), m, n, k);
        g.accumulate(nd.parents[1], db);
      }
    });
  }

  // ---- shape surgery -------------------------------------------------------

  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: empty");
    std::size_t cols = val(parts[0]).cols();
    std::size_t rows = 0;
    for (Var p : parts) {
      if (val(p).cols() != cols) throw DimensionError("concat_rows: column mismatch");
      rows += val(p).rows();
    }
    TensorF64 out = TensorF64::zeros({rows, cols});
    std::size_t r0 = 0;
    for (Var p : parts) {
      const TensorF64& pv = val(p);
      std::copy(pv.data.begin(), pv.data.end(), out.data.begin() + r0 * cols);
      r0 += pv.rows();
    }
    return push(std::move(out), parts, [cols](Graph& g, const Node& n) {
      std::size_t r0 = 0;
      for (Var p : n.parents) {
        std::size_t pr = g.val(p).rows();
        if (g.wants_grad(p)) {
          std::vector<double> dp(n.grad.begin() + r0 * cols, n.grad.begin() + (r0 + pr) * cols);
          g.accumulate(p, dp);
        }
        r0 += pr;
      }
    });
  }

  Var concat_cols(Var a, Var b) {
    const TensorF64& av = val(a);
    const TensorF64& bv = val(b);
    if (av.rows() != bv.rows()) throw DimensionError("concat_cols: row mismatch");
    std::size_t rows = av.rows(), ca = av.cols(), cb = bv.cols();
    TensorF64 out = TensorF64::zeros({rows, ca + cb});
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(av.data.begin() + r * ca, av.data.begin() + (r + 1) * ca,
                out.data.begin() + r * (ca + cb));
      std::copy(bv.data.begin() + r * cb, bv.data.begin() + (r + 1) * cb,
                out.data.begin() + r * (ca + cb) + ca);
    }
    return push(std::move(out), {a, b}, [rows, ca, cb](Graph& g, const Node& n) {
      if (g.wants_grad(n.parents[0])) {
        std::vector<double> da(rows * ca);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < ca; ++c) da[r * ca + c] = n.grad[r * (ca + cb) + c];
        g.accumulate(n.parents[0], da);
      }
      if (g.wants_grad(n.parents[1])) {
        std::vector<double> db(rows * cb);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cb; ++c) db[r * cb + c] = n.grad[r * (ca + cb) + ca + c];
        g.accumulate(n.parents[1], db);
      }
    });
  }

  Var slice_rows(Var a, std::size_t r0, std::size_t r1) {
    const TensorF64& av = val(a);
    if (r1 > av.rows() || r0 > r1) throw DimensionError("slice_rows: bad range");
    std::size_t cols = av.cols();
    TensorF64 out({r1 - r0, cols},
                  std::vector<double>(av.data.begin() + r0 * cols, av.data.begin() + r1 * cols));
    return push(std::move(out), {a}, [r0, r1, cols](Graph& g, const Node& n) {
      if (!g.wants_grad(n.parents[0])) return;
      std::vector<double> da(g.val(n.parents[0]).numel(), 0.0);
      std::copy(n.grad.begin(), n.grad.end(), da.begin() + r0 * cols);
      g.accumulate(n.parents[0], da);
    });
  }

  Var slice_cols(Var a, std::size_t c0, std::size_t c1) {
    const TensorF64& av = val(a);
    if (c1 > av.cols() || c0 > c1) throw DimensionError("slice_cols: bad range");
    std::size_t rows = av.rows(), cols = av.cols(), w = c1 - c0;
    TensorF64 out = TensorF64::zeros({rows, w});
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c) out.at(r, c) = av.data[r * cols + c0 + c];
    return push(std::move(out), {a}, [c0, rows, cols, w](Graph& g, const Node& n) {
      if (!g.wants_grad(n.parents[0])) return;
      std::vector<double> da(rows * cols, 0.0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < w; ++c) da[r * cols + c0 + c] = n.grad[r * w + c];
      g.accumulate(n.parents[0], da);
    });
  }

  // Row gather (embedding lookup). Backward scatter-adds.
  Var gather_rows(Var table, std::vector<std::size_t> ids) {
    const TensorF64& tv = val(table);
    std::size_t cols = tv.cols();
    for (std::size_t id : ids)
      if (id >= tv.rows()) throw DimensionError("gather_rows: id out of range");
    TensorF64 out = TensorF64::zeros({ids.size(), cols});
    for (std::size_t r = 0; r < ids.size(); ++r)
      std::copy(tv.data.begin() + ids[r] * cols, tv.data.begin() + (ids[r] + 1) * cols,
                out.data.begin() + r * cols);
    return push(std::move(out), {table}, [ids = std::move(ids), cols](Graph& g, const Node& n) {
      if (!g.wants_grad(n.parents[0])) return;
      std::vector<double> da(g.val(n.parents[0]).numel(), 0.0);
      for (std::size_t r = 0; r < ids.size(); ++r)
        for (std::size_t c = 0; c < cols; ++c) da[ids[r] * cols + c] += n.grad[r * cols + c];
      g.accumulate(n.parents[0], da);
    });
  }

  // ---- nonlinearities -------------------------------------------------------

  Var silu(Var a) {
    TensorF64 out = val(a);
    for (double& v : out.data) v = v / (1.0 + std::exp(-v));
    return push(std::move(out), {a}, [](Graph& g, const Node& n) {
      if (!g.wants_grad(n.parents[0])) return;
      const auto& x = g.val(n.parents[0]).data;
      std::vector<double> da(n.grad.size());
      for (std::size_t i = 0; i < da.size(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-x[i]));
        da[i] = n.grad[i] * s * (1.0 + x[i] * (1.0 - s));
      }
      g.accumulate(n.parents[0], da);
    });
  }

  // Row-wise RMS norm with a learnable gain vector.
  Var rms_norm_rows(Var x, Var gain) {
    const TensorF64& xv = val(x);
    const TensorF64& gv = val(gain);
    std::size_t rows = xv.rows(), cols = xv.cols();
    if (gv.numel() != cols) throw DimensionError("rms_norm_rows: gain length != cols");
    TensorF64 out = TensorF64::zeros({rows, cols});
    std::vector<double> inv_rms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      double ss = 0.0;
      for (std::size_t c = 0; c < cols; ++c) ss += xv.at(r, c) * xv.at(r, c);
      double ir = 1.0 / std::sqrt(ss / static_cast<double>(cols) + kRmsEps);
      inv_rms[r] = ir;
      for (std::size_t c = 0; c < cols; ++c) out.at(r, c) = xv.at(r, c) * ir * gv.data[c];
    }
    return push(std::move(out), {x, gain},
                [rows, cols, inv_rms = std::move(inv_rms)](Graph& g, const Node& n) {
      const auto& xd = g.val(n.parents[0]).data;
      const auto& gd = g.val(n.parents[1]).data;
      if (g.wants_grad(n.parents[0])) {
        std::vector<double> dx(rows * cols);
        for (std::size_t r = 0; r < rows; ++r) {
          double ir = inv_rms[r];
          double dot = 0.0;  // sum_c dy*g*x
          for (std::size_t c = 0; c < cols; ++c)
            dot += n.grad[r * cols + c] * gd[c] * xd[r * cols + c];
          double k = dot * ir * ir * ir / static_cast<double>(cols);
          for (std::size_t c = 0; c < cols; ++c)
            dx[r * cols + c] = n.grad[r * cols + c] * gd[c] * ir - xd[r * cols + c] * k;
        }
        g.accumulate(n.parents[0], dx);
      }
      if (g.wants_grad(n.parents[1])) {
        std::vector<double> dg(cols, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c)
            dg[c] += n.grad[r * cols + c] * xd[r * cols + c] * inv_rms[r];
        g.accumulate(n.parents[1], dg);
      }
    });
  }

  // Row softmax over the allowed key set only. Masked entries are excluded
  // from the max and the sum and come out exactly zero.
  Var masked_softmax_rows(Var scores, const AttentionMask& mask) {
    const TensorF64& sv = val(scores);
    if (sv.rows() != mask.q_len() || sv.cols() != mask.k_len())
      throw DimensionError("masked_softmax_rows: mask does not match scores");
    mask.require_every_row_attends();
    std::size_t rows = sv.rows(), cols = sv.cols();
    TensorF64 out = TensorF64::zeros({rows, cols});
    for (std::size_t r = 0; r < rows; ++r) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < cols; ++c)
        if (mask.at(r, c)) mx = std::max(mx, sv.at(r, c));
      double z = 0.0;
      for (std::size_t c = 0; c < cols; ++c)
        if (mask.at(r, c)) {
          double e = std::exp(sv.at(r, c) - mx);
          out.at(r, c) = e;
          z += e;
        }
      for (std::size_t c = 0; c < cols; ++c)
        if (mask.at(r, c)) out.at(r, c) /= z;
    }
    return push(std::move(out), {scores}, [rows, cols](Graph& g, const Node& n) {
      if (!g.wants_grad(n.parents[0])) return;
      std::vector<double> ds(rows * cols, 0.0);
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c)
          dot += n.grad[r * cols + c] * n.value.data[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c) {
          double y = n.value.data[r * cols + c];
          ds[r * cols + c] = y * (n.grad[r * cols + c] - dot);  // zero where y==0
        }
      }
      g.accumulate(n.parents[0], ds);
    });
  }

  Var softmax_rows(Var scores) {
    const TensorF64& sv = val(scores);
    AttentionMask all(sv.rows(), sv.cols(), true);
    return masked_softmax_rows(scores, all);
  }

  Var log_softmax_rows(Var scores) {
    const TensorF64& sv = val(scores);
    std::size_t rows = sv.rows(), cols = sv.cols();
    TensorF64 out = TensorF64::zeros({rows, cols});
    std::vector<double> soft(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, sv.at(r, c));
      double z = 0.0;
      for (std::size_t c = 0; c < cols; ++c) z += std::exp(sv.at(r, c) - mx);
      double lz = mx + std::log(z);
      for (std::size_t c = 0; c < cols; ++c) {
        out.at(r, c) = sv.at(r, c) - lz;
        soft[r * cols + c] = std::exp(out.at(r, c));
      }
    }
    return push(std::move(out), {scores},
                [rows, cols, soft = std::move(soft)](Graph& g, const Node& n) {
      if (!g.wants_grad(n.parents[0])) return;
      std::vector<double> ds(rows * cols);
      for (std::size_t r = 0; r < rows; ++r) {
        double gsum = 0.0;
        for (std::size_t c = 0; c < cols; ++c) gsum += n.grad[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c)
          ds[r * cols + c] = n.grad[r * cols + c] - soft[r * cols + c] * gsum;
      }
      g.accumulate(n.parents[0], ds);
    });
  }

  // ---- reductions & losses ---------------------------------------------------

  Var sum(Var a) {
    const TensorF64& av = val(a);
    double s = 0.0;
    for (double v : av.data) s += v;
    return push(TensorF64::scalar(s), {a}, [](Graph& g, const Node& n) {
      if (!g.wants_grad(n.parents[0])) return;
      std::vector<double> da(g.val(n.parents[0]).numel(), n.grad[0]);
      g.accumulate(n.parents[0], da);
    });
  }

  // KL(p || q) with constant teacher rows p and log-prob rows logq.
  // Teacher entries are floored at kProbFloor; terms with p at the floor
  // contribute ~0 but keep the value finite.
  Var kl_const_teacher(const TensorF64& p_rows, Var logq_rows) {
    const TensorF64& lv = val(logq_rows);
    if (!p_rows.same_shape(lv)) throw DimensionError("kl_const_teacher: shape mismatch");
    double total = 0.0;
    std::vector<double> p_eff(p_rows.data.size());
    for (std::size_t i = 0; i < p_rows.data.size(); ++i) {
      double p = std::max(p_rows.data[i], kProbFloor);
      p_eff[i] = p;
      total += p * (std::log(p) - lv.data[i]);
    }
    if (!std::isfinite(total)) throw NumericError("kl_const_teacher: non-finite value");
    return push(TensorF64::scalar(total), {logq_rows},
                [p_eff = std::move(p_eff)](Graph& g, const Node& n) {
      if (!g.wants_grad(n.parents[0])) return;
      std::vector<double> dq(p_eff.size());
      for (std::size_t i = 0; i < p_eff.size(); ++i) dq[i] = -p_eff[i] * n.grad[0];
      g.accumulate(n.parents[0], dq);
    });
  }

  // Mean cross-entropy of logits rows against integer targets.
  Var cross_entropy_mean(Var logits, const std::vector<std::size_t>& targets) {
    const TensorF64& lv = val(logits);
    if (lv.rows() != targets.size()) throw DimensionError("cross_entropy: target count mismatch");
    Var logp = log_softmax_rows(logits);
    const TensorF64& lpv = val(logp);
    std::size_t cols = lpv.cols();
    double total = 0.0;
    for (std::size_t r = 0; r < targets.size(); ++r) {
      if (targets[r] >= cols) throw DimensionError("cross_entropy: target id out of range");
      total -= lpv.at(r, targets[r]);
    }
    double inv = 1.0 / static_cast<double>(targets.size());
    return push(TensorF64::scalar(total * inv), {logp},
                [targets, cols, inv](Graph& g, const Node& n) {
      if (!g.wants_grad(n.parents[0])) return;
      std::vector<double> d(g.val(n.parents[0]).numel(), 0.0);
      for (std::size_t r = 0; r < targets.size(); ++r)
        d[r * cols + targets[r]] = -inv * n.grad[0];
      g.accumulate(n.parents[0], d);
    });
  }

  // ---- execution ------------------------------------------------------------

  const TensorF64& val(Var v) const {
    check_var(v);
    return nodes_[v.id].value;
  }

  // Gradient of the last backward() w.r.t. a node (zeros if it never got one).
  TensorF64 grad_of(Var v) const {
    check_var(v);
    const Node& n = nodes_[v.id];
    TensorF64 g = TensorF64::zeros(n.value.shape);
    if (!n.grad.empty()) g.data = n.grad;
    return g;
  }

  bool requires_grad(Var v) const {
    check_var(v);
    return nodes_[v.id].requires_grad;
  }

  // Reverse sweep from a scalar loss. Gradients of parameter leaves are
  // accumulated into their ParamStore groups (frozen groups untouched).
  void backward(Var loss) {
    check_var(loss);
    if (val(loss).numel() != 1) throw StateError("backward: loss is not a scalar");
    if (!nodes_[loss.id].requires_grad)
      throw StateError("backward: loss does not depend on any trainable parameter");
    for (auto& n : nodes_) n.grad.clear();
    nodes_[loss.id].grad.assign(1, 1.0);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(*this, n);
    }
    for (auto& n : nodes_) {
      if (n.bound_store && n.requires_grad && !n.grad.empty()) {
        TensorF64& t = n.bound_store->tensor(n.bound_name);
        t.ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) (*t.grad)[i] += n.grad[i];
      }
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    TensorF64 value;
    std::vector<double> grad;
    std::vector<Var> parents;
    std::function<void(Graph&, const Node&)> backward;
    bool requires_grad = false;
    ParamStore* bound_store = nullptr;
    std::string bound_name;
  };

  friend struct NodeAccess;

  void check_var(Var v) const {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
      throw StateError("variable does not belong to this graph (backward without forward?)");
  }

  void check_same_shape(Var a, Var b, const char* op) const {
    if (!val(a).same_shape(val(b))) throw DimensionError(std::string(op) + ": shape mismatch");
  }

  bool wants_grad(Var v) const { return nodes_[v.id].requires_grad; }

  void accumulate(Var v, const std::vector<double>& g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (n.grad.empty()) n.grad.assign(n.value.numel(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
  }

  Var push(TensorF64 value, std::vector<Var> parents,
           std::function<void(Graph&, const Node&)> back, bool leaf_requires = false) {
    Node n;
    n.value = std::move(value);
    n.parents = std::move(parents);
    n.requires_grad = leaf_requires;
    for (Var p : n.parents) {
      check_var(p);
      if (nodes_[p.id].requires_grad) n.requires_grad = true;
    }
    if (n.requires_grad) n.backward = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  static void matmul_raw(const double* a, const double* b, double* out, std::size_t m,
                         std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
      double* orow = out + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        double av = a[i * k + p];
        if (av == 0.0) continue;
        const double* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  }

  // out[m,n] += a[m,k] * b[n,k]^T
  static void matmul_nt_raw(const double* a, const double* b, double* out, std::size_t m,
                            std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* arow = a + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const double* brow = b + j * k;
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
        out[i * n + j] += s;
      }
    }
  }

  // out[k,n] += a[m,k]^T * b[m,n]
  static void matmul_tn_raw(const double* a, const double* b, double* out, std::size_t m,
                            std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* arow = a + i * k;
      const double* brow = b + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        double av = arow[p];
        if (av == 0.0) continue;
        double* orow = out + p * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  }

  std::vector<Node> nodes_;
  std::map<std::pair<const ParamStore*, std::string>, int> param_cache_;
};

// Single-head masked scaled-dot-product attention over explicit q/k/v rows.
// The multi-head blocks are built from this by column slicing.
inline Var masked_attention(Graph& g, Var q, Var k, Var v, const AttentionMask& mask,
                            double scale_override = 0.0) {
  const TensorF64& qv = g.val(q);
  const TensorF64& kv = g.val(k);
  const TensorF64& vv = g.val(v);
  if (qv.cols() != kv.cols()) throw DimensionError("masked_attention: q/k width mismatch");
  if (kv.rows() != vv.rows()) throw DimensionError("masked_attention: k/v row mismatch");
  if (mask.q_len() != qv.rows() || mask.k_len() != kv.rows())
    throw DimensionError("masked_attention: mask dims do not match (q_len, k_len)");
  double s = scale_override != 0.0 ? scale_override
                                   : 1.0 / std::sqrt(static_cast<double>(qv.cols()));
  Var scores = g.scale(g.matmul_nt(q, k), s);
  Var probs = g.masked_softmax_rows(scores, mask);
  return g.matmul(probs, v);
}

}  // namespace confu
