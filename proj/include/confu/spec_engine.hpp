#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "confu/draft_head.hpp"
#include "confu/future_oracle.hpp"
#include "confu/prob.hpp"
#include "confu/rng.hpp"
#include "confu/target_model.hpp"

namespace confu {

enum class AcceptRule { kLossless, kGreedyMatch };

// Lossless residual sampling preserves the target distribution at any
// temperature; greedy matching is the natural temperature-zero rule.
inline AcceptRule default_rule_for(double temperature) {
  return temperature == 0.0 ? AcceptRule::kGreedyMatch : AcceptRule::kLossless;
}

struct DecodeMode {
  double temperature = 1.0;
  AcceptRule rule = AcceptRule::kLossless;
  DraftMode mode = DraftMode::kConfu;
  std::size_t draft_budget = 16;  // T draft nodes per round; 0 = plain autoregression
  std::size_t branch_k = 2;

  void validate() const {
    if (temperature < 0.0) throw ConfigError("DecodeMode: temperature must be >= 0");
    if (draft_budget > 0 && branch_k < 1) throw ConfigError("DecodeMode: branch_k >= 1");
  }
};

// Parameter bindings for the confu side: soft prompts plus either the two MoE
// embedders or static [con]/[f] embeddings.
struct ConfuBindings {
  SoftPromptSet soft;
  bool use_moe = true;
  MoEEmbedder moe_con;
  MoEEmbedder moe_f;
  std::string con_static = "confu.con_static";
  std::string f_static = "confu.f_static";
};

struct RoundResult {
  std::vector<int> accepted_tokens;
  std::size_t accepted_count = 0;  // a
  int terminal_token = -1;         // bonus (full acceptance) or correction token
  bool terminal_is_bonus = false;
  FuturePrediction future;         // selected for the next round; empty in baseline
  std::size_t rows_draft = 0;
  std::size_t rows_contemplate = 0;
};

struct Metrics {
  double tau = 0.0;
  std::size_t tokens = 0;
  std::size_t rounds = 0;
  std::size_t draft_rows = 0;
  std::size_t contemplate_rows = 0;
  std::uint64_t wall_ns = 0;
  // Auxiliary accounting, not part of the canonical metrics JSON.
  std::size_t commit_rows = 0;
  std::size_t fallback_contemplate_rows = 0;
  std::size_t target_forwards = 0;
  std::size_t prefill_rows = 0;
  bool truncated = false;
};

struct GenerateResult {
  std::vector<int> tokens;  // generated tokens (prompt excluded)
  Metrics metrics;
  std::vector<RoundResult> rounds;  // populated when round logging is enabled
};

// ---------------------------------------------------------------------------
// Standalone lossless / greedy acceptance along one proposed path; the tree
// walk inside the engine follows the same rules with sampled proposals.
//   q_path[i]  draft distribution at level i, proposed[i] drawn from it
//   p_path[i]  target distribution at level i; p_path[K] feeds the bonus token
// ---------------------------------------------------------------------------

struct PathAcceptResult {
  std::size_t accepted = 0;
  int terminal_token = -1;
  bool terminal_is_bonus = false;
};

inline PathAcceptResult accept_reject_path(const std::vector<std::vector<double>>& q_path,
                                           const std::vector<int>& proposed,
                                           const std::vector<std::vector<double>>& p_path,
                                           AcceptRule rule, RandomSource& rng,
                                           std::uint64_t round = 0) {
  if (q_path.size() != proposed.size() || p_path.size() != q_path.size() + 1)
    throw DimensionError("accept_reject_path: need K proposals, K draft dists, K+1 target dists");
  PathAcceptResult out;
  for (std::size_t i = 0; i < proposed.size(); ++i) {
    const auto& p = p_path[i];
    const auto& q = q_path[i];
    int x = proposed[i];
    if (x < 0 || static_cast<std::size_t>(x) >= q.size())
      throw ProposalError("accept_reject_path: proposed token out of range");
    if (rule == AcceptRule::kGreedyMatch) {
      if (static_cast<std::size_t>(x) != argmax(p)) {
        out.terminal_token = static_cast<int>(argmax(p));
        return out;
      }
      ++out.accepted;
      continue;
    }
    if (q[x] <= 0.0) throw ProposalError("accept_reject_path: proposal has zero draft mass");
    double accept_prob = std::min(1.0, p[x] / q[x]);
    DrawKey key{round, i, DrawPurpose::kAccept, 0};
    if (rng.bernoulli(accept_prob, key)) {
      ++out.accepted;
      continue;
    }
    std::vector<double> r = residual_dist(p, q);
    out.terminal_token =
        static_cast<int>(rng.sample(r, DrawKey{round, i, DrawPurpose::kResidual, 0}));
    return out;
  }
  out.terminal_is_bonus = true;
  out.terminal_token = static_cast<int>(
      rng.sample(p_path.back(), DrawKey{round, proposed.size(), DrawPurpose::kBonus, 0}));
  return out;
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

class SpecEngine {
 public:
  SpecEngine(TargetModel& target, DraftModel& draft, ConfuBindings bindings, DecodeMode mode,
             std::uint64_t seed, std::optional<int> eos_token = std::nullopt)
      : target_(&target),
        draft_(&draft),
        bindings_(std::move(bindings)),
        mode_(mode),
        rng_(seed),
        eos_(eos_token) {
    mode_.validate();
    if (confu() && bindings_.use_moe) {
      bindings_.moe_con.cfg.validate();
      bindings_.moe_f.cfg.validate();
    }
  }

  bool confu() const { return mode_.mode == DraftMode::kConfu; }
  const DecodeMode& mode() const { return mode_; }

  // Committed-sequence state between rounds. Copyable so the exhaustive
  // verifier can branch over round outcomes.
  struct GenState {
    KVCache cache;
    DraftModel::Context dctx;
    std::optional<int> pending;      // committed token not yet in the cache
    TensorF64 root_logits;           // target logits after the last cached token (no pending)
    TensorF64 f_sel;                 // selected future prediction
    int f_source_node = -1;
    bool need_fallback = false;      // previous round accepted nothing
    TensorF64 last_verified_tap;     // [1, 3d] taps of the most recent verified token
    std::vector<int> out_tokens;
    bool eos_seen = false;
  };

  struct PrefillPlan {
    GenState state;
    std::vector<double> first_dist;  // tempered distribution for the first token
    std::size_t rows_processed = 0;
  };

  PrefillPlan plan_prefill(const std::vector<int>& prompt) const {
    if (prompt.empty()) throw ConfigError("generate: empty prompt");
    PrefillPlan plan;
    const SoftPromptSet* soft = soft_set();
    TargetModel::PrefillOut po =
        target_->prefill(prompt, soft, confu() ? con_embed_fn() : ConEmbedFn{});
    plan.rows_processed = po.rows_processed;
    GenState st;
    st.cache = std::move(po.cache);
    st.dctx = draft_->make_context();
    std::vector<DraftSlot> slots;
    for (std::size_t i = 0; i < prompt.size(); ++i)
      slots.push_back(DraftSlot{plain_token_embedding(prompt[i]), project_tap(po.taps[i]), i});
    draft_->extend_context(st.dctx, slots);
    st.last_verified_tap = po.taps.back();
    if (confu()) {
      st.f_sel = po.future;
      st.f_source_node = -1;
    }
    plan.first_dist = softmax_temp(po.last_logits, mode_.temperature);
    plan.state = std::move(st);
    return plan;
  }

  void apply_first_token(GenState& st, int token) const {
    // The new pending token's slot feature is the draft's own h-tilde from the
    // prompt pass; verified slots use projected target taps.
    DraftSlot slot{plain_token_embedding(token), st.dctx.last_hidden,
                   st.cache.content_len()};
    draft_->extend_context(st.dctx, {slot});
    st.pending = token;
    st.out_tokens.push_back(token);
    if (eos_ && token == *eos_) st.eos_seen = true;
  }

  // ---- round planning ---------------------------------------------------------

  struct RoundPlan {
    GenState pre_state;  // state after fallback handling, before the walk
    DraftTree tree;
    TargetModel::VerifyOut vout;
    std::vector<double> root_p;               // tempered target dist at the root
    std::vector<double> root_q;               // tempered draft dist at the root
    std::vector<std::vector<double>> node_p;  // per tree node
    std::vector<std::vector<double>> node_q;
    bool had_pending = false;
    std::size_t root_pos = 0;
    bool fallback_ran = false;
    bool autoregressive = false;  // draft_budget == 0
    bool decode_ran = false;      // autoregressive commit pass happened
    GateReport gate_con, gate_f;  // populated when MoE routing ran this round
  };

  RoundPlan plan_round(GenState state) const {
    RoundPlan plan;
    plan.fallback_ran = run_fallback_if_needed(state);

    if (mode_.draft_budget == 0) {
      // Pure autoregression: commit the pending token, sample from its row.
      if (state.pending) {
        TargetModel::DecodeOut d = target_->decode_step(state.cache, *state.pending, soft_set());
        state.root_logits = d.logits;
        state.last_verified_tap = d.tap;
        state.pending.reset();
        plan.decode_ran = true;
      }
      plan.autoregressive = true;
      plan.root_p = softmax_temp(state.root_logits, mode_.temperature);
      plan.pre_state = std::move(state);
      return plan;
    }

    TensorF64 f_embed;
    std::optional<DraftSlot> future;
    if (confu()) {
      if (state.f_sel.numel() == 0) throw ContractError("plan_round: missing future prediction");
      auto [emb, gate] = f_embedding(state.last_verified_tap);
      f_embed = std::move(emb);
      plan.gate_f = std::move(gate);
      future = DraftSlot{f_embed, state.f_sel, 0};  // position assigned per readout
    }

    int root_token = state.pending ? *state.pending : state.cache.tokens().back();
    plan.tree = draft_->build_draft_tree(state.dctx, root_token, future, mode_.draft_budget,
                                         mode_.branch_k, mode_.mode);

    std::vector<TensorF64> con_embeds;
    if (confu()) {
      auto [con, gate] = con_embedding(state.last_verified_tap);
      plan.gate_con = std::move(gate);
      con_embeds.assign(plan.tree.nodes.size(), con);
    }
    AttentionMask mask = target_->build_verify_mask(state.cache, plan.tree,
                                                    state.pending.has_value(), confu());
    plan.vout = target_->verify_tree(state.cache, plan.tree, mask, soft_set(),
                                     confu() ? &con_embeds : nullptr, state.pending);
    plan.had_pending = state.pending.has_value();
    plan.root_pos = state.pending ? state.cache.next_position()
                                  : state.cache.next_position() - 1;
    const TensorF64& root_logits =
        plan.had_pending ? plan.vout.commit->logits : state.root_logits;
    plan.root_p = softmax_temp(root_logits, mode_.temperature);
    plan.root_q = softmax_temp(plan.tree.root_successor_logits, mode_.temperature);
    for (const DraftTreeNode& n : plan.tree.nodes) {
      plan.node_q.push_back(softmax_temp(n.successor_logits, mode_.temperature));
    }
    for (const auto& n : plan.vout.nodes)
      plan.node_p.push_back(softmax_temp(n.logits, mode_.temperature));
    plan.pre_state = std::move(state);
    return plan;
  }

  // ---- the accept/reject walk -------------------------------------------------

  struct WalkOutcome {
    std::vector<int> accepted_nodes;  // tree node ids, root child first
    int terminal_token = -1;
    bool terminal_is_bonus = false;
  };

  // One candidate per level: propose from the node's full draft distribution,
  // accept with min(1, p/q); descending continues only when the accepted token
  // was materialized as a child. Rejection samples the residual and ends the
  // round; a childless node ends it with a bonus draw from the target.
  WalkOutcome walk(const RoundPlan& plan, RandomSource& rng, std::uint64_t round) const {
    WalkOutcome out;
    if (plan.autoregressive) {
      out.terminal_token =
          static_cast<int>(rng.sample(plan.root_p, DrawKey{round, 0, DrawPurpose::kBonus, 0}));
      out.terminal_is_bonus = true;
      return out;
    }
    int cur = -1;
    while (true) {
      const std::vector<double>& p = cur < 0 ? plan.root_p : plan.node_p[cur];
      std::vector<int> children = plan.tree.children_of(cur);
      std::uint64_t key_node = static_cast<std::uint64_t>(cur + 1);

      if (mode_.rule == AcceptRule::kGreedyMatch) {
        int want = static_cast<int>(argmax(p));
        int next = -1;
        for (int c : children)
          if (plan.tree.nodes[c].token == want) {
            next = c;
            break;
          }
        if (next < 0) {
          out.terminal_token = want;
          out.terminal_is_bonus = children.empty();
          return out;
        }
        out.accepted_nodes.push_back(next);
        cur = next;
        continue;
      }

      if (children.empty()) {
        out.terminal_token =
            static_cast<int>(rng.sample(p, DrawKey{round, key_node, DrawPurpose::kBonus, 0}));
        out.terminal_is_bonus = true;
        return out;
      }
      const std::vector<double>& q = cur < 0 ? plan.root_q : plan.node_q[cur];
      std::size_t x = rng.sample(q, DrawKey{round, key_node, DrawPurpose::kProposal, 0});
      if (q[x] <= 0.0) throw ProposalError("walk: proposal has zero draft mass");
      double accept_prob = std::min(1.0, p[x] / q[x]);
      if (rng.bernoulli(accept_prob, DrawKey{round, key_node, DrawPurpose::kAccept, 0})) {
        int next = -1;
        for (int c : children)
          if (plan.tree.nodes[c].token == static_cast<int>(x)) {
            next = c;
            break;
          }
        if (next < 0) {
          // Accepted a token the tree never materialized; commit it and stop.
          out.terminal_token = static_cast<int>(x);
          out.terminal_is_bonus = true;
          return out;
        }
        out.accepted_nodes.push_back(next);
        cur = next;
        continue;
      }
      std::vector<double> r = residual_dist(p, q);
      out.terminal_token =
          static_cast<int>(rng.sample(r, DrawKey{round, key_node, DrawPurpose::kResidual, 0}));
      out.terminal_is_bonus = false;
      return out;
    }
  }

  // ---- state transition -----------------------------------------------------------

  GenState apply_round(const RoundPlan& plan, const WalkOutcome& out) const {
    GenState st = plan.pre_state;
    if (plan.autoregressive) {
      st.pending = out.terminal_token;
      st.out_tokens.push_back(out.terminal_token);
      if (eos_ && out.terminal_token == *eos_) st.eos_seen = true;
      return st;
    }

    if (plan.had_pending)
      st.cache.append_row(plan.vout.batch_kv, plan.vout.commit_row, plan.root_pos, *st.pending);
    std::vector<DraftSlot> new_slots;
    for (int node : out.accepted_nodes) {
      const DraftTreeNode& n = plan.tree.nodes[node];
      std::size_t pos = plan.root_pos + static_cast<std::size_t>(n.depth);
      st.cache.append_row(plan.vout.batch_kv, plan.vout.first_node_row + node, pos, n.token);
      new_slots.push_back(
          DraftSlot{plain_token_embedding(n.token), project_tap(plan.vout.nodes[node].tap), pos});
    }
    std::size_t a = out.accepted_nodes.size();
    const TensorF64& terminal_feature =
        a > 0 ? plan.tree.nodes[out.accepted_nodes.back()].child_feature
              : plan.tree.root_child_feature;
    new_slots.push_back(DraftSlot{plain_token_embedding(out.terminal_token), terminal_feature,
                                  plan.root_pos + a + 1});
    draft_->extend_context(st.dctx, new_slots);

    st.pending = out.terminal_token;
    if (a > 0) {
      st.last_verified_tap = plan.vout.nodes[out.accepted_nodes.back()].tap;
    } else if (plan.had_pending) {
      st.last_verified_tap = plan.vout.commit->tap;
    }
    if (confu()) {
      if (a > 0) {
        FuturePrediction f = select_future(node_futures(plan), out.accepted_nodes);
        st.f_sel = std::move(f.f);
        st.f_source_node = f.source_node;
        st.need_fallback = false;
      } else {
        st.need_fallback = true;  // recompute the future at the correction token
      }
    }
    for (int node : out.accepted_nodes) {
      st.out_tokens.push_back(plan.tree.nodes[node].token);
      if (eos_ && plan.tree.nodes[node].token == *eos_) st.eos_seen = true;
    }
    st.out_tokens.push_back(out.terminal_token);
    if (eos_ && out.terminal_token == *eos_) st.eos_seen = true;
    return st;
  }

  RoundResult round_result(const RoundPlan& plan, const WalkOutcome& out) const {
    RoundResult rr;
    for (int node : out.accepted_nodes) rr.accepted_tokens.push_back(plan.tree.nodes[node].token);
    rr.accepted_count = out.accepted_nodes.size();
    rr.terminal_token = out.terminal_token;
    rr.terminal_is_bonus = out.terminal_is_bonus;
    rr.rows_draft = plan.vout.rows_draft;
    rr.rows_contemplate = plan.vout.rows_contemplate;
    if (confu() && !out.accepted_nodes.empty())
      rr.future = select_future(node_futures(plan), out.accepted_nodes);
    return rr;
  }

  // ---- generation loop ---------------------------------------------------------

  GenerateResult generate(const std::vector<int>& prompt, std::size_t max_tokens,
                          bool keep_rounds = false,
                          std::optional<std::uint64_t> seed_override = std::nullopt) {
    if (max_tokens == 0) throw ConfigError("generate: max_tokens must be >= 1");
    auto t0 = std::chrono::steady_clock::now();
    GenerateResult res;
    RngSource src(CounterRng(seed_override.value_or(rng_.seed())));

    PrefillPlan pp = plan_prefill(prompt);
    res.metrics.prefill_rows = pp.rows_processed;
    res.metrics.target_forwards = confu() ? 2 : 1;  // prompt pass (+ contemplate pass)
    int first = static_cast<int>(
        src.sample(pp.first_dist, DrawKey{0, 0, DrawPurpose::kPrefill, 0}));
    GenState st = std::move(pp.state);
    apply_first_token(st, first);

    std::uint64_t round = 1;
    while (st.out_tokens.size() < max_tokens && !st.eos_seen) {
      if (!capacity_ok(st)) {
        res.metrics.truncated = true;
        break;
      }
      RoundPlan plan = plan_round(std::move(st));
      if (plan.fallback_ran) {
        res.metrics.commit_rows += 1;
        res.metrics.fallback_contemplate_rows += 1;
        res.metrics.target_forwards += 1;
      }
      WalkOutcome out = walk(plan, src, round);
      if (keep_rounds) res.rounds.push_back(round_result(plan, out));
      res.metrics.rounds += 1;
      if (plan.autoregressive) {
        if (plan.decode_ran) {
          res.metrics.commit_rows += 1;
          res.metrics.target_forwards += 1;
        }
      } else {
        res.metrics.target_forwards += 1;
        res.metrics.draft_rows += plan.vout.rows_draft;
        res.metrics.contemplate_rows += plan.vout.rows_contemplate;
        res.metrics.commit_rows += plan.had_pending ? 1 : 0;
      }
      res.metrics.tau += static_cast<double>(out.accepted_nodes.size()) + 1.0;
      st = apply_round(plan, out);
      ++round;
    }
    if (res.metrics.rounds > 0) res.metrics.tau /= static_cast<double>(res.metrics.rounds);
    else res.metrics.tau = 1.0;
    res.tokens = st.out_tokens;
    if (res.tokens.size() > max_tokens) res.tokens.resize(max_tokens);
    res.metrics.tokens = res.tokens.size();
    res.metrics.wall_ns = static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() -
                                                             t0)
            .count());
    return res;
  }

  // Expert usage histograms across the run (confu + MoE only).
  const std::map<std::size_t, std::size_t>& gate_usage_con() const { return gate_usage_con_; }
  const std::map<std::size_t, std::size_t>& gate_usage_f() const { return gate_usage_f_; }

 private:
  const SoftPromptSet* soft_set() const {
    return confu() && bindings_.soft.count > 0 ? &bindings_.soft : nullptr;
  }

  ConEmbedFn con_embed_fn() const {
    return [this](Graph& g, const TensorF64& tap) -> Var {
      if (!bindings_.use_moe) return g.param(draft_->store(), bindings_.con_static);
      MoEOut mo = moe_embed(g, draft_->store(), bindings_.moe_con, g.constant(tap));
      record_gate(gate_usage_con_, mo.gate);
      return mo.embedding;
    };
  }

  std::pair<TensorF64, GateReport> con_embedding(const TensorF64& tap) const {
    Graph g;
    if (!bindings_.use_moe)
      return {g.val(g.param(draft_->store(), bindings_.con_static)), GateReport{}};
    MoEOut mo = moe_embed(g, draft_->store(), bindings_.moe_con, g.constant(tap));
    record_gate(gate_usage_con_, mo.gate);
    return {g.val(mo.embedding), mo.gate};
  }

  std::pair<TensorF64, GateReport> f_embedding(const TensorF64& tap) const {
    Graph g;
    if (!bindings_.use_moe)
      return {g.val(g.param(draft_->store(), bindings_.f_static)), GateReport{}};
    Var h_md = draft_->down_project(g, g.constant(tap));
    MoEOut mo = moe_embed(g, draft_->store(), bindings_.moe_f, h_md);
    record_gate(gate_usage_f_, mo.gate);
    return {g.val(mo.embedding), mo.gate};
  }

  void record_gate(std::map<std::size_t, std::size_t>& hist, const GateReport& gate) const {
    for (std::size_t e : gate.selected) hist[e] += 1;
  }

  std::vector<FuturePrediction> node_futures(const RoundPlan& plan) const {
    std::vector<FuturePrediction> futures(plan.vout.nodes.size());
    for (std::size_t n = 0; n < plan.vout.nodes.size(); ++n) {
      futures[n].f = plan.vout.nodes[n].future;
      futures[n].source_node = static_cast<int>(n);
    }
    return futures;
  }

  TensorF64 plain_token_embedding(int token) const {
    const TensorF64& table = draft_->store().tensor("target.tok_emb");
    std::size_t d = table.cols();
    if (token < 0 || static_cast<std::size_t>(token) >= table.rows())
      throw DimensionError("token embedding out of range");
    return TensorF64({1, d}, {table.data.begin() + token * d,
                              table.data.begin() + (token + 1) * d});
  }

  TensorF64 project_tap(const TensorF64& tap) const {
    Graph g;
    return g.val(draft_->down_project(g, g.constant(tap)));
  }

  // The correction token from an all-rejected round gets its future from a
  // fresh two-row pass (its own content row plus one contemplate row).
  bool run_fallback_if_needed(GenState& state) const {
    if (!confu() || !state.need_fallback) return false;
    if (!state.pending) throw StateError("fallback without a pending token");
    TargetModel::CommitWithFutureOut o = target_->commit_with_future(
        state.cache, *state.pending, soft_set(), con_embed_fn(), state.last_verified_tap);
    state.root_logits = o.logits;
    state.last_verified_tap = o.tap;
    state.f_sel = o.future;
    state.f_source_node = -1;
    state.pending.reset();
    state.need_fallback = false;
    return true;
  }

  bool capacity_ok(const GenState& st) const {
    std::size_t need = st.cache.next_position() + mode_.draft_budget + 3;
    return need < target_->config().max_seq_len;
  }

  TargetModel* target_;
  DraftModel* draft_;
  ConfuBindings bindings_;
  DecodeMode mode_;
  CounterRng rng_;
  std::optional<int> eos_;
  mutable std::map<std::size_t, std::size_t> gate_usage_con_;
  mutable std::map<std::size_t, std::size_t> gate_usage_f_;
};

}  // namespace confu
