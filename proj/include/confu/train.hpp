#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "confu/corpus.hpp"
#include "confu/draft_head.hpp"
#include "confu/future_oracle.hpp"
#include "confu/graph.hpp"
#include "confu/optim.hpp"
#include "confu/spec_engine.hpp"
#include "confu/target_model.hpp"

namespace confu {

// ---------------------------------------------------------------------------
// Training configuration and anchor sampling
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t unroll_depth = 3;     // L: tokens predicted per position
  std::size_t anchors_per_seq = 8;  // K_train
  std::size_t replication = 1;      // l: window reusing an anchor's future
  std::size_t min_gap = 0;          // 0 = default L + l + 1
  double lr = 1e-3;
  std::size_t steps = 200;
  std::uint64_t seed = 1;

  std::size_t effective_gap() const {
    return min_gap > 0 ? min_gap : unroll_depth + replication + 1;
  }

  void validate(std::size_t seq_len) const {
    if (unroll_depth < 1) throw ConfigError("train: unroll depth L >= 1");
    if (seq_len < unroll_depth + replication + 2) throw ConfigError("train: sequence too short");
    if (anchors_per_seq * (replication + unroll_depth + 1) > seq_len)
      throw ConfigError("train: K_train exceeds N / (l + L + 1)");
    std::size_t p_min = anchor_min();
    std::size_t p_max = anchor_max(seq_len);
    if (p_max < p_min) throw ConfigError("train: no feasible anchor positions");
    if (anchors_per_seq >= 1 &&
        p_min + (anchors_per_seq - 1) * effective_gap() > p_max)
      throw ConfigError("train: anchors cannot satisfy the minimum gap");
  }

  std::size_t anchor_min() const { return 1; }
  std::size_t anchor_max(std::size_t seq_len) const {
    return seq_len - 1 - (replication + unroll_depth);
  }
};

struct AnchorSet {
  std::vector<std::size_t> positions;  // sorted anchor token indices
};

// Uniform over valid anchor sets; every [p, p+l+L] window stays in-sequence
// and pairwise gaps respect the configured minimum. Sampling goes through the
// standard bijection between gap-constrained subsets and plain subsets of a
// shrunk range, so it is exact and never rejects.
inline AnchorSet sample_anchors(std::size_t seq_len, const TrainConfig& cfg, SplitMix& rng) {
  cfg.validate(seq_len);
  AnchorSet out;
  if (cfg.anchors_per_seq == 0) return out;
  std::size_t k = cfg.anchors_per_seq;
  std::size_t p_min = cfg.anchor_min();
  std::size_t p_max = cfg.anchor_max(seq_len);
  std::size_t gap = cfg.effective_gap();
  // q_i = p_i - i*(gap-1) maps valid sets onto plain k-subsets of [0, span).
  std::size_t span = p_max - p_min + 1 - (k - 1) * (gap - 1);
  std::vector<std::size_t> picks;
  while (picks.size() < k) {
    std::size_t q = static_cast<std::size_t>(rng.below(span));
    if (std::find(picks.begin(), picks.end(), q) == picks.end()) picks.push_back(q);
  }
  std::sort(picks.begin(), picks.end());
  for (std::size_t i = 0; i < k; ++i) out.positions.push_back(p_min + picks[i] + i * (gap - 1));
  return out;
}

// Every valid anchor set, for exact-marginal tests on tiny configs.
inline std::vector<std::vector<std::size_t>> enumerate_anchor_sets(std::size_t seq_len,
                                                                   const TrainConfig& cfg) {
  cfg.validate(seq_len);
  std::vector<std::vector<std::size_t>> all;
  std::vector<std::size_t> cur;
  std::size_t gap = cfg.effective_gap();
  std::function<void(std::size_t)> rec = [&](std::size_t next_min) {
    if (cur.size() == cfg.anchors_per_seq) {
      all.push_back(cur);
      return;
    }
    for (std::size_t p = next_min; p <= cfg.anchor_max(seq_len); ++p) {
      cur.push_back(p);
      rec(p + gap);
      cur.pop_back();
    }
  };
  rec(cfg.anchor_min());
  return all;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct LossStats {
  double value = 0.0;
  std::size_t kl_terms = 0;
  std::size_t target_rows = 0;      // ordinary + contemplate rows through the target
  std::size_t floored_teacher = 0;  // teacher entries clamped at the probability floor
  std::vector<double> term_values;  // anchor-major, window-offset, unroll-step order
};

class TrainOps {
 public:
  TrainOps(TargetModel& target, DraftModel& draft) : target_(&target), draft_(&draft) {}

  struct TargetPass {
    std::size_t n = 0;
    TensorF64 logits;  // [N, vocab]
    TensorF64 taps;    // [N, 3d]
    KVCache cache;     // content rows for the whole sequence
  };

  // Frozen full-sequence pass feeding both losses (teachers, taps, KV rows).
  TargetPass eager_target_pass(const std::vector<int>& seq) const {
    const TargetConfig& cfg = target_->config();
    if (seq.size() > cfg.max_seq_len) throw CapacityError("training sequence too long");
    Graph g;
    std::vector<TargetModel::RowInput> rows(seq.size());
    for (std::size_t i = 0; i < seq.size(); ++i)
      rows[i] = TargetModel::RowInput{seq[i], Var{}, i};
    AttentionMask mask = AttentionMask::causal(seq.size());
    KVCache cache = target_->make_cache(0);
    TargetModel::ForwardOut fo = target_->forward_rows(g, cache, nullptr, rows, mask, true, true);
    TargetPass pass;
    pass.n = seq.size();
    pass.logits = g.val(fo.logits);
    pass.taps = g.val(fo.taps);
    std::vector<std::pair<TensorF64, TensorF64>> kv;
    for (auto& [k, v] : fo.kv) kv.emplace_back(g.val(k), g.val(v));
    for (std::size_t i = 0; i < seq.size(); ++i) cache.append_row(kv, i, i, seq[i]);
    pass.cache = std::move(cache);
    return pass;
  }

  TensorF64 teacher_row(const TargetPass& pass, std::size_t row) const {
    std::size_t v = target_->config().vocab_size;
    std::vector<double> logits(pass.logits.data.begin() + row * v,
                               pass.logits.data.begin() + (row + 1) * v);
    return TensorF64({1, v}, softmax_temp(logits, 1.0));
  }

  // KL between a frozen teacher row and the draft logits of a readout row.
  Var kl_term(Graph& g, const TargetPass& pass, std::size_t teacher_row_idx, Var logits_row,
              LossStats& stats) const {
    TensorF64 teacher = teacher_row(pass, teacher_row_idx);
    for (double p : teacher.data)
      if (p < Graph::kProbFloor) ++stats.floored_teacher;
    Var term = g.kl_const_teacher(teacher, g.log_softmax_rows(logits_row));
    stats.kl_terms += 1;
    stats.term_values.push_back(g.val(term).data[0]);
    return term;
  }

  // Multi-step unrolled next-token KL (the baseline draft objective): for each
  // position t, predict x_{t+1..t+L}; steps past the first feed the draft its
  // own hidden states while token context stays teacher-forced.
  std::pair<Var, LossStats> eagle3_loss(Graph& g, const TargetPass& pass,
                                        const std::vector<int>& seq, std::size_t L,
                                        const std::vector<std::size_t>* positions = nullptr)
      const {
    LossStats stats;
    std::size_t n = pass.n;
    Var features = draft_->down_project(g, g.constant(pass.taps));  // [N, d]
    std::vector<DraftModel::SlotSpec> slots = base_slots(g, seq, features);
    DraftModel::SlotsOut base =
        draft_->forward_slots(g, slots, Var{}, Var{}, AttentionMask::causal(n), true);

    std::vector<std::size_t> all;
    if (!positions) {
      for (std::size_t p = 0; p + 1 < n; ++p) all.push_back(p);
      positions = &all;
    }
    Var total;
    for (std::size_t p : *positions) {
      if (p + 1 >= n) throw ConfigError("eagle3_loss: position leaves no target token");
      // i = 1: the base pass already read out position p.
      Var term = kl_term(g, pass, p, g.slice_rows(base.logits, p, p + 1), stats);
      total = total.valid() ? g.add(total, term) : term;
      stats.target_rows = n;

      Var h_prev = g.slice_rows(base.hidden, p, p + 1);
      std::vector<Var> unroll_k, unroll_v;
      for (std::size_t i = 2; i <= L && p + i < n; ++i) {
        std::size_t slot_pos = p + i - 1;
        DraftModel::SlotSpec self{token_embed(g, seq[slot_pos]), h_prev, slot_pos};
        auto [so, past_rows] = unrolled_slot(g, base, p, unroll_k, unroll_v, self, true);
        Var term_i = kl_term(g, pass, slot_pos, so.logits, stats);
        total = g.add(total, term_i);
        h_prev = so.hidden;
        unroll_k.push_back(so.k);
        unroll_v.push_back(so.v);
        (void)past_rows;
      }
    }
    if (!total.valid()) throw ConfigError("eagle3_loss: no terms");
    stats.value = g.val(total).data[0];
    return {total, stats};
  }

  struct ConfuLossOpts {
    const TrainConfig* cfg = nullptr;
    const AnchorSet* anchors = nullptr;
    const ConfuBindings* bindings = nullptr;
    bool with_future = true;  // false ablates the future slot (objective regression path)
  };

  // Anchored future-aware objective: each anchor gets a contemplate row whose
  // final hidden state f feeds the draft's fixed future slot; a window of l
  // following offsets reuses the same future. Ablating the future reduces the
  // term set to the baseline objective on the anchor windows.
  std::pair<Var, LossStats> confu_loss(Graph& g, const TargetPass& pass,
                                       const std::vector<int>& seq, const ConfuLossOpts& opt)
      const {
    if (!opt.cfg || !opt.anchors || !opt.bindings) throw ConfigError("confu_loss: missing opts");
    const TrainConfig& cfg = *opt.cfg;
    const ConfuBindings& b = *opt.bindings;
    std::size_t n = pass.n;
    std::size_t L = cfg.unroll_depth;

    if (!opt.with_future) {
      std::vector<std::size_t> positions;
      for (std::size_t p : opt.anchors->positions)
        for (std::size_t j = 0; j <= cfg.replication; ++j) positions.push_back(p + j);
      auto [loss, stats] = eagle3_loss(g, pass, seq, L, &positions);
      stats.target_rows = n;
      return {loss, stats};
    }

    LossStats stats;
    stats.target_rows = n + opt.anchors->positions.size();
    if (opt.anchors->positions.empty()) {
      stats.value = 0.0;
      return {g.scalar(0.0), stats};  // no anchors, no ConFu terms
    }

    // Contemplate rows for every anchor in one target pass.
    std::vector<Var> futures = anchor_futures(g, pass, *opt.anchors, b);

    Var features = draft_->down_project(g, g.constant(pass.taps));
    std::vector<DraftModel::SlotSpec> slots = base_slots(g, seq, features);
    DraftModel::SlotsOut base =
        draft_->forward_slots(g, slots, Var{}, Var{}, AttentionMask::causal(n), false);

    Var total;
    for (std::size_t a = 0; a < opt.anchors->positions.size(); ++a) {
      std::size_t p = opt.anchors->positions[a];
      Var f_embed = b.use_moe
                        ? moe_embed(g, draft_->store(), b.moe_f,
                                    g.slice_rows(features, p, p + 1))
                              .embedding
                        : g.param(draft_->store(), b.f_static);
      for (std::size_t j = 0; j <= cfg.replication; ++j) {
        std::size_t ctx_end = p + j;  // base rows 0..ctx_end are visible
        Var h_prev;
        std::vector<Var> unroll_k, unroll_v;
        for (std::size_t i = 1; i <= L; ++i) {
          std::size_t predict_pos = ctx_end + i;  // predicting seq[predict_pos]
          if (predict_pos >= n) throw ConfigError("confu_loss: anchor window out of range");
          // The first step re-queries the teacher-forced slot at ctx_end so it
          // can see the future row (its k/v already sit among the base rows);
          // later steps run fresh self slots carrying the draft's own hiddens.
          DraftModel::SlotSpec main =
              i == 1 ? DraftModel::SlotSpec{token_embed(g, seq[ctx_end]),
                                            g.slice_rows(features, ctx_end, ctx_end + 1),
                                            ctx_end}
                     : DraftModel::SlotSpec{token_embed(g, seq[predict_pos - 1]), h_prev,
                                            predict_pos - 1};
          DraftModel::SlotsOut so =
              future_aware_slot(g, base, ctx_end, unroll_k, unroll_v, main,
                                /*self_attend=*/i >= 2, f_embed, futures[a]);
          Var term = kl_term(g, pass, predict_pos - 1, g.slice_rows(so.logits, 0, 1), stats);
          total = total.valid() ? g.add(total, term) : term;
          h_prev = g.slice_rows(so.hidden, 0, 1);
          if (i >= 2) {
            unroll_k.push_back(g.slice_rows(so.k, 0, 1));
            unroll_v.push_back(g.slice_rows(so.v, 0, 1));
          }
        }
      }
    }
    if (!total.valid()) throw ConfigError("confu_loss: no terms (zero anchors?)");
    stats.value = g.val(total).data[0];
    return {total, stats};
  }

 private:
  Var token_embed(Graph& g, int token) const { return draft_->token_embedding(g, token); }

  std::vector<DraftModel::SlotSpec> base_slots(Graph& g, const std::vector<int>& seq,
                                               Var features) const {
    std::vector<DraftModel::SlotSpec> slots;
    for (std::size_t i = 0; i < seq.size(); ++i)
      slots.push_back(DraftModel::SlotSpec{token_embed(g, seq[i]),
                                           g.slice_rows(features, i, i + 1), i});
    return slots;
  }

  // A readout slot plus the future row in one two-row pass: the slot attends
  // base rows 0..ctx_end, the unroll rows, optionally itself, and the future
  // row appended one position past it. Row 0 of every output is the readout.
  DraftModel::SlotsOut future_aware_slot(Graph& g, const DraftModel::SlotsOut& base,
                                         std::size_t ctx_end, const std::vector<Var>& unroll_k,
                                         const std::vector<Var>& unroll_v,
                                         const DraftModel::SlotSpec& slot, bool self_attend,
                                         Var f_embed, Var f_feature) const {
    std::vector<Var> ks = {g.slice_rows(base.k, 0, ctx_end + 1)};
    std::vector<Var> vs = {g.slice_rows(base.v, 0, ctx_end + 1)};
    for (Var k : unroll_k) ks.push_back(k);
    for (Var v : unroll_v) vs.push_back(v);
    Var past_k = ks.size() == 1 ? ks[0] : g.concat_rows(ks);
    Var past_v = vs.size() == 1 ? vs[0] : g.concat_rows(vs);
    std::size_t past = ctx_end + 1 + unroll_k.size();
    std::vector<DraftModel::SlotSpec> slots = {
        slot, DraftModel::SlotSpec{f_embed, f_feature, slot.position + 1}};
    AttentionMask mask(2, past + 2, false);
    for (std::size_t c = 0; c < past; ++c) mask.set(0, c, true);
    if (self_attend) mask.set(0, past, true);
    mask.set(0, past + 1, true);  // the future row
    mask.set_row(1, true);        // future row's own output is unused
    return draft_->forward_slots(g, slots, past_k, past_v, mask, true);
  }

  // One new slot attending to base rows 0..ctx_end plus the unroll rows.
  std::pair<DraftModel::SlotsOut, std::size_t> unrolled_slot(
      Graph& g, const DraftModel::SlotsOut& base, std::size_t ctx_end,
      const std::vector<Var>& unroll_k, const std::vector<Var>& unroll_v,
      const DraftModel::SlotSpec& slot, bool want_output) const {
    std::vector<Var> ks = {g.slice_rows(base.k, 0, ctx_end + 1)};
    std::vector<Var> vs = {g.slice_rows(base.v, 0, ctx_end + 1)};
    for (Var k : unroll_k) ks.push_back(k);
    for (Var v : unroll_v) vs.push_back(v);
    Var past_k = ks.size() == 1 ? ks[0] : g.concat_rows(ks);
    Var past_v = vs.size() == 1 ? vs[0] : g.concat_rows(vs);
    std::size_t past = ctx_end + 1 + unroll_k.size();
    AttentionMask mask(1, past + 1, true);
    DraftModel::SlotsOut so =
        draft_->forward_slots(g, {slot}, past_k, past_v, mask, want_output);
    return {so, past};
  }

  // One batched pass of per-anchor contemplate rows through the target; each
  // row sees the soft prompts, the prefix up to its anchor, and itself.
  std::vector<Var> anchor_futures(Graph& g, const TargetPass& pass, const AnchorSet& anchors,
                                  const ConfuBindings& b) const {
    std::size_t s = b.soft.count;
    std::size_t t = pass.n;
    std::vector<TargetModel::RowInput> rows;
    for (std::size_t a = 0; a < anchors.positions.size(); ++a) {
      std::size_t p = anchors.positions[a];
      Var con = b.use_moe
                    ? moe_embed(g, draft_->store(), b.moe_con,
                                g.constant(TensorF64(
                                    {1, 3 * target_->config().d_model},
                                    {pass.taps.data.begin() + p * 3 * target_->config().d_model,
                                     pass.taps.data.begin() +
                                         (p + 1) * 3 * target_->config().d_model})))
                          .embedding
                    : g.param(draft_->store(), b.con_static);
      rows.push_back(TargetModel::RowInput{-1, con, p + 1});
    }
    AttentionMask mask(rows.size(), s + t + rows.size(), false);
    for (std::size_t a = 0; a < rows.size(); ++a) {
      for (std::size_t c = 0; c < s; ++c) mask.set(a, c, true);
      for (std::size_t c = 0; c <= anchors.positions[a]; ++c) mask.set(a, s + c, true);
      mask.set(a, s + t + a, true);
    }
    TargetModel::ForwardOut fo = target_->forward_rows(
        g, pass.cache, s > 0 ? &b.soft : nullptr, rows, mask, false, false);
    std::vector<Var> futures;
    for (std::size_t a = 0; a < rows.size(); ++a)
      futures.push_back(g.slice_rows(fo.hidden, a, a + 1));
    return futures;
  }

  TargetModel* target_;
  DraftModel* draft_;
};

// ---------------------------------------------------------------------------
// Stage runners
// ---------------------------------------------------------------------------

enum class TrainStage { kTargetPretrain, kDraftBaseline, kConfu };

struct StageLog {
  std::vector<double> losses;  // one entry per step
};

// Trainability per stage: pretraining owns target.*; the draft stages freeze
// the target; the confu stage trains the draft head plus whichever future
// parameterization (MoE or static) the variant uses, plus the soft prompts.
inline void set_stage_trainability(ParamStore& store, TrainStage stage, bool use_moe) {
  store.set_trainable_prefix("target.", stage == TrainStage::kTargetPretrain);
  store.set_trainable_prefix("draft.", stage != TrainStage::kTargetPretrain);
  bool confu = stage == TrainStage::kConfu;
  store.set_trainable_prefix("confu.soft", confu);
  store.set_trainable_prefix("confu.moe_con", confu && use_moe);
  store.set_trainable_prefix("confu.moe_f", confu && use_moe);
  if (store.has("confu.con_static")) store.set_trainable("confu.con_static", confu && !use_moe);
  if (store.has("confu.f_static")) store.set_trainable("confu.f_static", confu && !use_moe);
}

using StepHook = std::function<void(std::size_t step, double loss)>;

inline StageLog train_target_lm(TargetModel& target, ParamStore& store, const Corpus& corpus,
                                const TrainConfig& cfg, const StepHook& hook = {}) {
  set_stage_trainability(store, TrainStage::kTargetPretrain, false);
  Adam opt(cfg.lr);
  StageLog log;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const std::vector<int>& seq = corpus.sequences[step % corpus.sequences.size()];
    Graph g;
    std::vector<TargetModel::RowInput> rows(seq.size());
    for (std::size_t i = 0; i < seq.size(); ++i)
      rows[i] = TargetModel::RowInput{seq[i], Var{}, i};
    KVCache cache = target.make_cache(0);
    TargetModel::ForwardOut fo = target.forward_rows(
        g, cache, nullptr, rows, AttentionMask::causal(seq.size()), true, false);
    std::vector<std::size_t> targets;
    for (std::size_t i = 1; i < seq.size(); ++i) targets.push_back(
        static_cast<std::size_t>(seq[i]));
    Var loss = g.cross_entropy_mean(g.slice_rows(fo.logits, 0, seq.size() - 1), targets);
    store.drop_grads();
    g.backward(loss);
    opt.step(store);
    log.losses.push_back(g.val(loss).data[0]);
    if (hook) hook(step, log.losses.back());
  }
  return log;
}

inline StageLog train_draft_baseline(TargetModel& target, DraftModel& draft, ParamStore& store,
                                     const Corpus& corpus, const TrainConfig& cfg,
                                     const StepHook& hook = {}) {
  set_stage_trainability(store, TrainStage::kDraftBaseline, false);
  TrainOps ops(target, draft);
  Adam opt(cfg.lr);
  StageLog log;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const std::vector<int>& seq = corpus.sequences[step % corpus.sequences.size()];
    TrainOps::TargetPass pass = ops.eager_target_pass(seq);
    Graph g;
    auto [loss, stats] = ops.eagle3_loss(g, pass, seq, cfg.unroll_depth);
    store.drop_grads();
    g.backward(loss);
    opt.step(store);
    log.losses.push_back(stats.value);
    if (hook) hook(step, stats.value);
  }
  return log;
}

inline StageLog train_confu_stage(TargetModel& target, DraftModel& draft, ParamStore& store,
                                  const ConfuBindings& bindings, const Corpus& corpus,
                                  const TrainConfig& cfg, const StepHook& hook = {}) {
  set_stage_trainability(store, TrainStage::kConfu, bindings.use_moe);
  TrainOps ops(target, draft);
  Adam opt(cfg.lr);
  StageLog log;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const std::vector<int>& seq = corpus.sequences[step % corpus.sequences.size()];
    SplitMix anchor_rng(mix64(cfg.seed, 0xA0C4 + step));
    AnchorSet anchors = sample_anchors(seq.size(), cfg, anchor_rng);
    TrainOps::TargetPass pass = ops.eager_target_pass(seq);
    Graph g;
    TrainOps::ConfuLossOpts opts;
    opts.cfg = &cfg;
    opts.anchors = &anchors;
    opts.bindings = &bindings;
    auto [loss, stats] = ops.confu_loss(g, pass, seq, opts);
    if (stats.kl_terms > 0) {
      store.drop_grads();
      g.backward(loss);
      opt.step(store);
    }
    log.losses.push_back(stats.value);
    if (hook) hook(step, stats.value);
  }
  return log;
}

}  // namespace confu
