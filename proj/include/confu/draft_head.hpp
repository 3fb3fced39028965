#pragma once

#include <cstdint>
#include <optional>
#include <queue>
#include <string>
#include <vector>

#include "confu/draft_tree.hpp"
#include "confu/graph.hpp"
#include "confu/mask.hpp"
#include "confu/nn.hpp"
#include "confu/param_store.hpp"
#include "confu/prob.hpp"

namespace confu {

enum class DraftMode { kBaseline, kConfu };

struct DraftConfig {
  std::size_t d_model = 48;
  std::size_t n_heads = 4;
  std::size_t vocab_size = 258;
  std::size_t max_seq_len = 512;
  std::size_t chain_depth = 4;  // K
  std::size_t tree_budget = 16; // T
  std::size_t branch_k = 2;

  void validate() const {
    if (chain_depth < 1 || tree_budget < chain_depth)
      throw ConfigError("draft: need tree budget T >= chain depth K >= 1");
    if (branch_k < 1) throw ConfigError("draft: branch top-k >= 1");
    if (d_model % n_heads != 0) throw ConfigError("draft: d_model % n_heads != 0");
  }
};

// One input slot of the draft transformer: a token embedding paired with a
// feature vector (projected target taps for verified tokens, the draft's own
// hidden for self-generated ones, and ([f] embedding, f) for the future slot).
struct DraftSlot {
  TensorF64 embed;    // [1, d]
  TensorF64 feature;  // [1, d]
  std::size_t position = 0;
};

// Single-layer draft transformer. Token embeddings, position table, and the
// output head are frozen views of the target model's tables; trainable pieces
// are the tap down-projection, the (embedding, feature) fusion, and the block.
class DraftModel {
 public:
  DraftModel(DraftConfig cfg, ParamStore& store) : cfg_(cfg), store_(&store) {
    cfg_.validate();
  }

  static void init_params(ParamStore& store, const DraftConfig& cfg, std::uint64_t seed,
                          double stddev = 0.08) {
    cfg.validate();
    SplitMix rng(mix64(seed, 0x5d4aa1));
    store.add("draft.w_proj", gaussian_tensor({3 * cfg.d_model, cfg.d_model}, stddev, rng));
    store.add("draft.fuse", gaussian_tensor({2 * cfg.d_model, cfg.d_model}, stddev, rng));
    init_block_params(store, "draft.layer", cfg.d_model, rng, stddev);
    store.add("draft.final_rms", TensorF64::full({cfg.d_model}, 1.0));
  }

  const DraftConfig& config() const { return cfg_; }
  ParamStore& store() const { return *store_; }

  // ---- graph-level building blocks -----------------------------------------

  struct SlotSpec {
    Var embed;
    Var feature;
    std::size_t position = 0;
  };

  struct SlotsOut {
    Var k, v;    // [r, d]
    Var hidden;  // [r, d] (valid when outputs requested)
    Var logits;  // [r, vocab]
  };

  // h^{Md} = W_proj h^{Mt,cat}; accepts [n, 3d] rows.
  Var down_project(Graph& g, Var taps_cat) const {
    if (g.val(taps_cat).cols() != 3 * cfg_.d_model)
      throw DimensionError("down_project: input width must be 3*d_model");
    return g.matmul(taps_cat, g.param(*store_, "draft.w_proj"));
  }

  Var token_embedding(Graph& g, int token) const {
    if (token < 0 || static_cast<std::size_t>(token) >= cfg_.vocab_size)
      throw DimensionError("token_embedding: id out of vocab");
    return g.gather_rows(g.param(*store_, "target.tok_emb"), {static_cast<std::size_t>(token)});
  }

  // Mask layout: [past rows | new slots].
  SlotsOut forward_slots(Graph& g, const std::vector<SlotSpec>& slots, Var past_k, Var past_v,
                         const AttentionMask& mask, bool want_output) const {
    if (slots.empty()) throw DimensionError("forward_slots: no slots");
    Var pos_table = g.param(*store_, "target.pos_emb");
    Var fuse = g.param(*store_, "draft.fuse");
    std::vector<Var> rows;
    rows.reserve(slots.size());
    for (const SlotSpec& s : slots) {
      if (s.position >= cfg_.max_seq_len)
        throw CapacityError("forward_slots: position beyond max_seq_len");
      if (!s.embed.valid() || !s.feature.valid())
        throw ContractError("forward_slots: slot needs both embedding and feature");
      Var x = g.matmul(g.concat_cols(s.embed, s.feature), fuse);
      rows.push_back(g.add(x, g.gather_rows(pos_table, {s.position})));
    }
    Var x = rows.size() == 1 ? rows[0] : g.concat_rows(rows);
    BlockIO io = transformer_block(g, *store_, "draft.layer", x, past_k, past_v, mask,
                                   cfg_.n_heads);
    SlotsOut out;
    out.k = io.k_new;
    out.v = io.v_new;
    if (want_output) {
      out.hidden = io.y;
      Var xn = g.rms_norm_rows(io.y, g.param(*store_, "draft.final_rms"));
      out.logits = g.matmul(xn, g.param(*store_, "target.lm_head"));
    }
    return out;
  }

  // ---- one-shot drafting (recomputes the whole context) ----------------------

  struct NextOut {
    TensorF64 logits;  // [1, vocab] draft distribution logits for the next token
    TensorF64 hidden;  // [1, d] h-tilde for the new position
  };

  // Causal pass over the context slots with the readout at the last slot. In
  // confu mode the future slot rides along at the sequence end as one extra
  // key/value row that only the readout may attend to; ablating it leaves
  // exactly the baseline drafting path.
  NextOut draft_next(const std::vector<DraftSlot>& context,
                     const std::optional<DraftSlot>& future, DraftMode mode) const {
    if (context.empty()) throw ContractError("draft_next: empty context");
    if (mode == DraftMode::kConfu && !future)
      throw ContractError("draft_next: confu drafting requires the future slot");
    if (mode == DraftMode::kBaseline && future)
      throw ContractError("draft_next: baseline drafting must not receive a future slot");
    Graph g;
    std::vector<SlotSpec> slots;
    for (const DraftSlot& s : context)
      slots.push_back(SlotSpec{g.constant(s.embed), g.constant(s.feature), s.position});
    std::size_t n = context.size();
    AttentionMask mask = AttentionMask::causal(n);
    if (future) {
      slots.push_back(SlotSpec{g.constant(future->embed), g.constant(future->feature),
                               context.back().position + 1});
      mask = AttentionMask(n + 1, n + 1, false);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) mask.set(i, j, true);
      mask.set(n - 1, n, true);  // readout looks ahead at the future row
      mask.set_row(n, true);     // the future row's own output is unused
    }
    SlotsOut so = forward_slots(g, slots, Var{}, Var{}, mask, true);
    std::size_t last = n - 1;
    const TensorF64& logits = g.val(so.logits);
    const TensorF64& hidden = g.val(so.hidden);
    NextOut out;
    out.logits = TensorF64({1, cfg_.vocab_size},
                           {logits.data.begin() + last * cfg_.vocab_size,
                            logits.data.begin() + (last + 1) * cfg_.vocab_size});
    out.hidden = TensorF64({1, cfg_.d_model}, {hidden.data.begin() + last * cfg_.d_model,
                                               hidden.data.begin() + (last + 1) * cfg_.d_model});
    return out;
  }

  // ---- incremental drafting state --------------------------------------------

  // Committed-token slots with cached single-layer k/v.
  struct Context {
    TensorF64 k{{0, 0}, {}};
    TensorF64 v{{0, 0}, {}};
    std::vector<std::size_t> positions;
    TensorF64 last_logits;   // successor logits at the last slot (baseline root)
    TensorF64 last_hidden;   // h-tilde for the successor of the last slot
    TensorF64 last_embed;    // last slot's inputs, for the future-aware re-query
    TensorF64 last_feature;

    std::size_t len() const { return positions.size(); }
  };

  Context make_context() const {
    Context c;
    c.k = TensorF64::zeros({0, cfg_.d_model});
    c.v = TensorF64::zeros({0, cfg_.d_model});
    return c;
  }

  void extend_context(Context& ctx, const std::vector<DraftSlot>& slots) const {
    if (slots.empty()) return;
    Graph g;
    std::vector<SlotSpec> specs;
    for (const DraftSlot& s : slots)
      specs.push_back(SlotSpec{g.constant(s.embed), g.constant(s.feature), s.position});
    std::size_t past = ctx.len();
    AttentionMask mask = AttentionMask::causal_with_past(slots.size(), past);
    Var past_k = past ? g.constant(ctx.k) : Var{};
    Var past_v = past ? g.constant(ctx.v) : Var{};
    SlotsOut so = forward_slots(g, specs, past_k, past_v, mask, true);
    const TensorF64& k = g.val(so.k);
    const TensorF64& v = g.val(so.v);
    ctx.k.data.insert(ctx.k.data.end(), k.data.begin(), k.data.end());
    ctx.k.shape[0] += k.rows();
    ctx.v.data.insert(ctx.v.data.end(), v.data.begin(), v.data.end());
    ctx.v.shape[0] += v.rows();
    for (const DraftSlot& s : slots) ctx.positions.push_back(s.position);
    std::size_t last = slots.size() - 1;
    const TensorF64& logits = g.val(so.logits);
    const TensorF64& hidden = g.val(so.hidden);
    ctx.last_logits = TensorF64({1, cfg_.vocab_size},
                                {logits.data.begin() + last * cfg_.vocab_size,
                                 logits.data.begin() + (last + 1) * cfg_.vocab_size});
    ctx.last_hidden = TensorF64({1, cfg_.d_model},
                                {hidden.data.begin() + last * cfg_.d_model,
                                 hidden.data.begin() + (last + 1) * cfg_.d_model});
    ctx.last_embed = slots.back().embed;
    ctx.last_feature = slots.back().feature;
  }

  // ---- budgeted best-first tree ------------------------------------------------

  // Materializes candidates in order of cumulative draft log-probability, so
  // the resulting node set is exactly the `budget` most probable partial paths
  // (each step restricted to a parent's top-k successors), closed under prefix.
  DraftTree build_draft_tree(const Context& ctx, int root_token,
                             const std::optional<DraftSlot>& future, std::size_t budget,
                             std::size_t branch_k, DraftMode mode) const {
    if (budget < 1 || branch_k < 1) throw ConfigError("build_draft_tree: budget and k >= 1");
    if (ctx.len() == 0) throw ContractError("build_draft_tree: empty draft context");
    if (mode == DraftMode::kConfu && !future)
      throw ContractError("build_draft_tree: confu drafting requires the future slot");

    DraftTree tree;
    tree.root_token = root_token;
    tree.budget = budget;
    std::size_t root_pos = ctx.positions.back();

    // Arena of materialized node slot rows (single layer).
    TensorF64 arena_k = TensorF64::zeros({0, cfg_.d_model});
    TensorF64 arena_v = TensorF64::zeros({0, cfg_.d_model});

    auto ancestors_of = [&](int parent) {
      std::vector<std::size_t> rows;  // arena row indices root-side first
      for (int a = parent; a >= 0; a = tree.nodes[a].parent) rows.push_back(a);
      std::reverse(rows.begin(), rows.end());
      return rows;
    };

    auto gather_arena = [&](const std::vector<std::size_t>& rows, const TensorF64& src) {
      TensorF64 out = TensorF64::zeros({rows.size(), cfg_.d_model});
      for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy(src.data.begin() + rows[i] * cfg_.d_model,
                  src.data.begin() + (rows[i] + 1) * cfg_.d_model,
                  out.data.begin() + i * cfg_.d_model);
      return out;
    };

    // Readout for a node (or the root when parent == -1): returns successor
    // logits and the h-tilde its children will use as feature. The readout is
    // always the node slot itself; in confu mode the future row rides along as
    // one extra key/value the readout may peek at.
    auto expand = [&](int parent, std::optional<int> new_token, const TensorF64& feature,
                      std::size_t node_pos) -> std::pair<TensorF64, TensorF64> {
      Graph g;
      std::vector<std::size_t> anc = ancestors_of(parent);
      TensorF64 sel_k = gather_arena(anc, arena_k);
      TensorF64 sel_v = gather_arena(anc, arena_v);

      std::vector<SlotSpec> slots;
      bool requery = !new_token.has_value();
      if (new_token) {
        slots.push_back(SlotSpec{token_embedding(g, *new_token), g.constant(feature), node_pos});
      } else {
        // Confu root readout: re-query the last committed slot so it can see
        // the future row. Its k/v already live in the context, so the fresh
        // copy must not attend itself twice.
        if (mode != DraftMode::kConfu)
          throw ContractError("build_draft_tree: baseline root needs context output");
        slots.push_back(SlotSpec{g.constant(ctx.last_embed), g.constant(ctx.last_feature),
                                 node_pos});
      }
      if (mode == DraftMode::kConfu)
        slots.push_back(SlotSpec{g.constant(future->embed), g.constant(future->feature),
                                 node_pos + 1});

      std::size_t past = ctx.len() + anc.size();
      AttentionMask mask(slots.size(), past + slots.size(), false);
      for (std::size_t c = 0; c < past; ++c) mask.set(0, c, true);
      if (!requery) mask.set(0, past, true);  // a fresh node slot attends itself
      if (mode == DraftMode::kConfu) {
        mask.set(0, past + slots.size() - 1, true);  // readout sees the future row
        mask.set_row(slots.size() - 1, true);        // future row's own output unused
      }
      Var past_k = g.constant(concat_const(ctx.k, sel_k));
      Var past_v = g.constant(concat_const(ctx.v, sel_v));
      SlotsOut so = forward_slots(g, slots, past_k, past_v, mask, true);

      // Persist the new node slot's k/v for descendants.
      if (new_token) {
        const TensorF64& k = g.val(so.k);
        const TensorF64& v = g.val(so.v);
        arena_k.data.insert(arena_k.data.end(), k.data.begin(), k.data.begin() + cfg_.d_model);
        arena_k.shape[0] += 1;
        arena_v.data.insert(arena_v.data.end(), v.data.begin(), v.data.begin() + cfg_.d_model);
        arena_v.shape[0] += 1;
      }
      const TensorF64& logits = g.val(so.logits);
      const TensorF64& hidden = g.val(so.hidden);
      TensorF64 lrow({1, cfg_.vocab_size},
                     {logits.data.begin(), logits.data.begin() + cfg_.vocab_size});
      TensorF64 hrow({1, cfg_.d_model}, {hidden.data.begin(), hidden.data.begin() + cfg_.d_model});
      return {lrow, hrow};
    };

    if (mode == DraftMode::kConfu) {
      auto [logits, hidden] = expand(-1, std::nullopt, TensorF64{}, root_pos);
      tree.root_successor_logits = logits;
      tree.root_child_feature = hidden;
    } else {
      if (ctx.last_logits.numel() == 0)
        throw ContractError("build_draft_tree: baseline root requires context outputs");
      tree.root_successor_logits = ctx.last_logits;
      tree.root_child_feature = ctx.last_hidden;
    }

    struct Candidate {
      double cum = 0.0;
      std::uint64_t seq = 0;  // FIFO tiebreak
      int parent = -1;
      int token = -1;
      int depth = 1;
    };
    auto worse = [](const Candidate& a, const Candidate& b) {
      if (a.cum != b.cum) return a.cum < b.cum;
      return a.seq > b.seq;
    };
    std::priority_queue<Candidate, std::vector<Candidate>, decltype(worse)> heap(worse);
    std::uint64_t seq = 0;

    auto push_children = [&](int parent, const TensorF64& successor_logits, double parent_cum,
                             int child_depth) {
      std::vector<double> logp = log_softmax_vec(successor_logits.data);
      for (std::size_t tok : top_k_indices(logp, branch_k))
        heap.push(Candidate{parent_cum + logp[tok], seq++, parent, static_cast<int>(tok),
                            child_depth});
    };
    push_children(-1, tree.root_successor_logits, 0.0, 1);

    while (tree.nodes.size() < budget && !heap.empty()) {
      Candidate c = heap.top();
      heap.pop();
      std::size_t node_pos = root_pos + static_cast<std::size_t>(c.depth);
      if (node_pos + (mode == DraftMode::kConfu ? 1 : 0) >= cfg_.max_seq_len) continue;
      const TensorF64& feature =
          c.parent < 0 ? tree.root_child_feature : tree.nodes[c.parent].child_feature;
      auto [logits, hidden] = expand(c.parent, c.token, feature, node_pos);
      DraftTreeNode node;
      node.token = c.token;
      node.parent = c.parent;
      node.cum_logprob = c.cum;
      node.depth = c.depth;
      node.successor_logits = logits;
      node.child_feature = hidden;
      tree.nodes.push_back(std::move(node));
      int id = static_cast<int>(tree.nodes.size()) - 1;
      push_children(id, tree.nodes[id].successor_logits, c.cum, c.depth + 1);
    }
    tree.check_invariants();
    return tree;
  }

 private:
  static TensorF64 concat_const(const TensorF64& a, const TensorF64& b) {
    if (a.rows() == 0) return b;
    if (b.rows() == 0) return a;
    TensorF64 out = a;
    out.data.insert(out.data.end(), b.data.begin(), b.data.end());
    out.shape[0] += b.rows();
    return out;
  }

  static std::vector<double> log_softmax_vec(const std::vector<double>& logits) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : logits) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    double lz = mx + std::log(z);
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lz;
    return out;
  }

  DraftConfig cfg_;
  ParamStore* store_;
};

}  // namespace confu
