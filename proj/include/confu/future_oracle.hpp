#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "confu/graph.hpp"
#include "confu/param_store.hpp"

namespace confu {

// ---------------------------------------------------------------------------
// Soft prompts: s learnable key/value rows per layer, reserved at the front of
// the target KV cache. Visible only to contemplate rows.
// ---------------------------------------------------------------------------

struct SoftPromptSet {
  std::size_t count = 0;  // s
  std::string prefix = "confu.soft";

  std::string key_name(std::size_t layer) const {
    return prefix + ".layer" + std::to_string(layer) + ".k";
  }
  std::string value_name(std::size_t layer) const {
    return prefix + ".layer" + std::to_string(layer) + ".v";
  }
};

inline SoftPromptSet init_soft_prompts(ParamStore& store, std::size_t n_layers, std::size_t s,
                                       std::size_t d, SplitMix& rng, double stddev = 0.05) {
  SoftPromptSet sp;
  sp.count = s;
  for (std::size_t l = 0; l < n_layers; ++l) {
    store.add(sp.key_name(l), gaussian_tensor({s, d}, stddev, rng));
    store.add(sp.value_name(l), gaussian_tensor({s, d}, stddev, rng));
  }
  return sp;
}

// ---------------------------------------------------------------------------
// MoE embedder: a router over n_expert learnable embeddings; the output is a
// convex combination of the top-K experts. One instance each for the
// contemplate embedding [con] and the draft future embedding [f].
// ---------------------------------------------------------------------------

struct MoEConfig {
  std::size_t n_expert = 8;
  std::size_t k_expert = 2;
  std::size_t input_dim = 0;  // router input width (3d for [con], d for [f])
  std::size_t d_model = 0;

  void validate() const {
    if (n_expert == 0 || k_expert == 0 || k_expert > n_expert)
      throw ConfigError("MoE: need 1 <= K_expert <= n_expert");
    if (input_dim == 0 || d_model == 0) throw ConfigError("MoE: zero dimension");
  }
};

struct MoEEmbedder {
  MoEConfig cfg;
  std::string prefix;  // e.g. "confu.moe_con"

  std::string router_name() const { return prefix + ".router"; }
  std::string experts_name() const { return prefix + ".experts"; }
};

// Router is zero-initialized so gating starts uniform; experts start as small
// jitter around a provided center (the mean target input embedding).
inline MoEEmbedder init_moe(ParamStore& store, MoEConfig cfg, const std::string& prefix,
                            const std::vector<double>& center, SplitMix& rng,
                            double stddev = 0.02) {
  cfg.validate();
  if (center.size() != cfg.d_model) throw ConfigError("init_moe: center width != d_model");
  MoEEmbedder m{cfg, prefix};
  store.add(m.router_name(), TensorF64::zeros({cfg.input_dim, cfg.n_expert}));
  TensorF64 experts = TensorF64::zeros({cfg.n_expert, cfg.d_model});
  for (std::size_t e = 0; e < cfg.n_expert; ++e)
    for (std::size_t c = 0; c < cfg.d_model; ++c)
      experts.at(e, c) = center[c] + stddev * rng.gaussian();
  store.add(m.experts_name(), std::move(experts));
  return m;
}

struct GateReport {
  std::vector<std::size_t> selected;  // expert indices, highest gate first
  std::vector<double> weights;        // renormalized; same order as selected
  std::vector<double> full_probs;     // softmax over all experts
};

struct MoEOut {
  Var embedding;  // [1, d_model]
  GateReport gate;
};

// Full softmax over expert logits, top-K by probability (ties to the lowest
// index), weights renormalized to sum to one over the selection.
inline MoEOut moe_embed(Graph& g, ParamStore& store, const MoEEmbedder& moe, Var h) {
  moe.cfg.validate();
  const TensorF64& hv = g.val(h);
  if (hv.rows() != 1 || hv.cols() != moe.cfg.input_dim)
    throw DimensionError("moe_embed: router input must be [1, input_dim]");

  Var logits = g.matmul(h, g.param(store, moe.router_name()));  // [1, n_expert]
  Var probs = g.softmax_rows(logits);

  // Copy: later ops may reallocate the graph's node storage.
  const std::vector<double> p = g.val(probs).data;
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (p[a] != p[b]) return p[a] > p[b];
    return a < b;
  });
  order.resize(moe.cfg.k_expert);

  // Selection matrix S [K, n_expert]; p_sel = p S^T.
  TensorF64 sel = TensorF64::zeros({moe.cfg.k_expert, moe.cfg.n_expert});
  for (std::size_t i = 0; i < order.size(); ++i) sel.at(i, order[i]) = 1.0;
  Var p_sel = g.matmul_nt(probs, g.constant(sel));  // [1, K]
  Var mass = g.sum(p_sel);

  Var weights = g.div_by(p_sel, mass);  // renormalized; exactly 1.0 at K=1
  Var experts = g.param(store, moe.experts_name());
  Var chosen = g.gather_rows(experts, order);  // [K, d]
  Var out = g.matmul(weights, chosen);         // [1, d]

  GateReport report;
  report.selected = order;
  report.full_probs = p;
  report.weights = g.val(weights).data;
  return MoEOut{out, std::move(report)};
}

// ---------------------------------------------------------------------------
// Future predictions: the contemplate row's final-layer hidden state, selected
// per last accepted token after each verification round.
// ---------------------------------------------------------------------------

struct FuturePrediction {
  TensorF64 f;          // [d_model]
  int source_node = -1; // draft-tree node index; -1 = root / prefill
};

// Futures are per draft node; the accepted path lists node indices in order.
// The last entry is the deepest accepted node, whose future carries forward.
inline FuturePrediction select_future(const std::vector<FuturePrediction>& per_node,
                                      const std::vector<int>& accepted_path) {
  if (accepted_path.empty())
    throw ContractError("select_future: empty accepted path (all-rejected handled by caller)");
  int node = accepted_path.back();
  if (node < 0 || node >= static_cast<int>(per_node.size()))
    throw ContractError("select_future: node id out of range");
  if (per_node[node].f.numel() == 0)
    throw ContractError("select_future: node " + std::to_string(node) + " has no future");
  return per_node[node];
}

}  // namespace confu
