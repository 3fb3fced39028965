#pragma once

#include <string>
#include <vector>

#include "confu/graph.hpp"
#include "confu/mask.hpp"
#include "confu/param_store.hpp"

namespace confu {

constexpr std::size_t kFfnMult = 4;

// Parameter groups for one pre-norm transformer block under `prefix.`:
//   rms1, wq, wk, wv, wo, rms2, ffn_w1, ffn_w2
inline void init_block_params(ParamStore& store, const std::string& prefix, std::size_t d,
                              SplitMix& rng, double stddev) {
  store.add(prefix + ".rms1", TensorF64::full({d}, 1.0));
  store.add(prefix + ".wq", gaussian_tensor({d, d}, stddev, rng));
  store.add(prefix + ".wk", gaussian_tensor({d, d}, stddev, rng));
  store.add(prefix + ".wv", gaussian_tensor({d, d}, stddev, rng));
  store.add(prefix + ".wo", gaussian_tensor({d, d}, stddev, rng));
  store.add(prefix + ".rms2", TensorF64::full({d}, 1.0));
  store.add(prefix + ".ffn_w1", gaussian_tensor({d, d * kFfnMult}, stddev, rng));
  store.add(prefix + ".ffn_w2", gaussian_tensor({d * kFfnMult, d}, stddev, rng));
}

struct BlockIO {
  Var y;      // [r, d] block output (residual stream)
  Var k_new;  // [r, d] keys of the new rows
  Var v_new;  // [r, d] values of the new rows
};

// One pre-norm block over r new rows. `past_k`/`past_v` hold the keys/values
// the new rows may attend to in front of themselves (soft prompt rows first,
// then cached content, then transient rows); pass invalid Vars when there is
// no past. The mask covers [past | new] columns.
inline BlockIO transformer_block(Graph& g, ParamStore& store, const std::string& prefix, Var x,
                                 Var past_k, Var past_v, const AttentionMask& mask,
                                 std::size_t n_heads) {
  const std::size_t d = g.val(x).cols();
  if (d % n_heads != 0) throw DimensionError("transformer_block: d_model % n_heads != 0");
  const std::size_t dh = d / n_heads;

  Var xn = g.rms_norm_rows(x, g.param(store, prefix + ".rms1"));
  Var q = g.matmul(xn, g.param(store, prefix + ".wq"));
  Var k_new = g.matmul(xn, g.param(store, prefix + ".wk"));
  Var v_new = g.matmul(xn, g.param(store, prefix + ".wv"));

  Var k_all = past_k.valid() ? g.concat_rows({past_k, k_new}) : k_new;
  Var v_all = past_v.valid() ? g.concat_rows({past_v, v_new}) : v_new;
  if (g.val(k_all).rows() != mask.k_len() || g.val(x).rows() != mask.q_len())
    throw DimensionError("transformer_block: mask does not cover [past | new] keys");

  Var att;
  for (std::size_t h = 0; h < n_heads; ++h) {
    Var qh = g.slice_cols(q, h * dh, (h + 1) * dh);
    Var kh = g.slice_cols(k_all, h * dh, (h + 1) * dh);
    Var vh = g.slice_cols(v_all, h * dh, (h + 1) * dh);
    Var oh = masked_attention(g, qh, kh, vh, mask);
    att = h == 0 ? oh : g.concat_cols(att, oh);
  }
  Var h1 = g.add(x, g.matmul(att, g.param(store, prefix + ".wo")));

  Var hn = g.rms_norm_rows(h1, g.param(store, prefix + ".rms2"));
  Var ff = g.matmul(g.silu(g.matmul(hn, g.param(store, prefix + ".ffn_w1"))),
                    g.param(store, prefix + ".ffn_w2"));
  return BlockIO{g.add(h1, ff), k_new, v_new};
}

}  // namespace confu
