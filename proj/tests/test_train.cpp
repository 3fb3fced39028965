#include <cmath>
#include <vector>

#include "confu/checkpoint.hpp"
#include "confu/corpus.hpp"
#include "confu/finite_diff.hpp"
#include "confu/lossless.hpp"
#include "confu/train.hpp"
#include "doctest.h"
#include "model_fixture.hpp"

using namespace confu;
using confu_test::FixtureOptions;
using confu_test::ModelFixture;

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

TEST_CASE("byte tokenizer: 'ab' maps to byte ids and sequences carry BOS") {
  std::vector<int> toks = tokenize_bytes("ab");
  CHECK(toks == std::vector<int>{97, 98});
  Corpus c = corpus_from_text("abcdefghijklmnop", 8);
  for (const auto& seq : c.sequences) {
    CHECK(seq.size() == 8);
    CHECK(seq[0] == kBosToken);
  }
}

TEST_CASE("tokenize/detokenize round-trips arbitrary byte strings") {
  SplitMix rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    std::string s;
    std::size_t len = 1 + rng.below(64);
    for (std::size_t i = 0; i < len; ++i) s.push_back(static_cast<char>(rng.below(256)));
    CHECK(detokenize_bytes(tokenize_bytes(s)) == s);
  }
}

TEST_CASE("empty corpus is a config error") {
  CHECK_THROWS_AS(corpus_from_text("", 16), ConfigError);
  CHECK_THROWS_AS(corpus_from_file("/nonexistent/file.txt", 16), ConfigError);
}

TEST_CASE("synthetic corpus: topic constant per sequence, deterministic, in-alphabet") {
  SyntheticSpec spec;
  spec.n_sequences = 12;
  spec.seq_len = 24;
  SyntheticCorpus a = synthetic_corpus(spec);
  SyntheticCorpus b = synthetic_corpus(spec);
  REQUIRE(a.corpus.sequences.size() == 12);
  CHECK(a.topics.size() == 12);
  CHECK(a.corpus.sequences == b.corpus.sequences);  // seeded determinism
  CHECK(a.topics == b.topics);
  bool saw_both = false;
  for (std::size_t i = 1; i < a.topics.size(); ++i)
    if (a.topics[i] != a.topics[0]) saw_both = true;
  CHECK(saw_both);
  for (const auto& seq : a.corpus.sequences) {
    CHECK(seq[0] == kBosToken);
    for (std::size_t i = 1; i < seq.size(); ++i) {
      CHECK(seq[i] >= 'a');
      CHECK(seq[i] < 'a' + static_cast<int>(spec.n_symbols));
    }
  }
}

// ---------------------------------------------------------------------------
// Anchor sampling
// ---------------------------------------------------------------------------

TEST_CASE("anchors: N=10, K=2, L=2, l=1, gap=4 yields only valid sets; length N+K") {
  TrainConfig cfg;
  cfg.unroll_depth = 2;
  cfg.anchors_per_seq = 2;
  cfg.replication = 1;
  cfg.min_gap = 4;
  SplitMix rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    AnchorSet s = sample_anchors(10, cfg, rng);
    REQUIRE(s.positions.size() == 2);
    CHECK(s.positions[0] >= 1);
    CHECK(s.positions[1] - s.positions[0] >= 4);
    CHECK(s.positions[1] + 3 <= 9);  // window [p, p+l+L] in-sequence
  }
}

TEST_CASE("anchors: zero anchors give an empty set and a zero confu loss") {
  TrainConfig cfg;
  cfg.anchors_per_seq = 0;
  SplitMix rng(1);
  AnchorSet s = sample_anchors(16, cfg, rng);
  CHECK(s.positions.empty());

  ModelFixture fx(FixtureOptions{.vocab = 12, .max_seq_len = 64});
  TrainOps ops(*fx.target, *fx.draft);
  std::vector<int> seq = {kBosToken % 12, 1, 2, 3, 4, 5, 6, 7, 1, 2, 3, 4};
  TrainOps::TargetPass pass = ops.eager_target_pass(seq);
  Graph g;
  TrainOps::ConfuLossOpts opts;
  opts.cfg = &cfg;
  opts.anchors = &s;
  opts.bindings = &fx.bindings;
  auto [loss, stats] = ops.confu_loss(g, pass, seq, opts);
  CHECK(stats.kl_terms == 0);
  CHECK(g.val(loss).data[0] == 0.0);
  CHECK(stats.target_rows == seq.size());
}

TEST_CASE("infeasible anchor configs are config errors") {
  TrainConfig cfg;
  cfg.anchors_per_seq = 5;
  cfg.unroll_depth = 3;
  cfg.replication = 1;
  SplitMix rng(1);
  CHECK_THROWS_AS(sample_anchors(12, cfg, rng), ConfigError);  // K*(l+L+1) > N
}

TEST_CASE("anchor marginals match the exhaustive enumeration oracle (chi-squared)") {
  //

  TrainConfig cfg;
  cfg.unroll_depth = 3;
  cfg.anchors_per_seq = 4;
  cfg.replication = 1;
  const std::size_t N = 64;
  auto all = enumerate_anchor_sets(N, cfg);
  REQUIRE(!all.empty());

  std::vector<double> marginal(N, 0.0);
  for (const auto& set : all)
    for (std::size_t p : set) marginal[p] += 1.0;
  double total_slots = static_cast<double>(all.size()) * cfg.anchors_per_seq;
  for (double& m : marginal) m /= total_slots;

  SplitMix rng(2024);
  const std::size_t draws = 10000;
  std::vector<std::size_t> counts(N, 0);
  for (std::size_t i = 0; i < draws; ++i)
    for (std::size_t p : sample_anchors(N, cfg, rng).positions) counts[p] += 1;

  Chi2Result chi = chi_squared_gof(counts, marginal, draws * cfg.anchors_per_seq);
  CHECK(chi.p_value > 0.01);
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

TEST_CASE("KL oracle values: KL(p||p)=0 and the hand-computed two-token case") {
  Graph g;
  TensorF64 p = TensorF64::row({0.5, 0.5});
  Var logp = g.constant(TensorF64::row({std::log(0.5), std::log(0.5)}));
  CHECK(std::fabs(g.val(g.kl_const_teacher(p, logp)).data[0]) < 1e-12);

  // p=(1/2,1/2), q=(1/4,3/4): KL = .5 ln 2 + .5 ln(2/3)
  Var logq = g.constant(TensorF64::row({std::log(0.25), std::log(0.75)}));
  double want = 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0);
  CHECK(g.val(g.kl_const_teacher(p, logq)).data[0] == doctest::Approx(want).epsilon(1e-12));
  CHECK(want == doctest::Approx(0.1438).epsilon(1e-3));
}

namespace {

std::vector<int> demo_sequence(const ModelFixture& fx, std::size_t n, std::uint64_t seed) {
  SplitMix rng(seed);
  std::vector<int> seq;
  for (std::size_t i = 0; i < n; ++i)
    seq.push_back(static_cast<int>(rng.below(fx.tcfg.vocab_size)));
  return seq;
}

}  // namespace

TEST_CASE("confu loss: (l=1, L=3) yields exactly 6 KL terms per anchor; rows = N + K") {
  ModelFixture fx(FixtureOptions{.vocab = 12, .max_seq_len = 64});
  TrainOps ops(*fx.target, *fx.draft);
  std::vector<int> seq = demo_sequence(fx, 24, 7);

  TrainConfig cfg;
  cfg.unroll_depth = 3;
  cfg.anchors_per_seq = 2;
  cfg.replication = 1;
  SplitMix rng(3);
  AnchorSet anchors = sample_anchors(seq.size(), cfg, rng);

  TrainOps::TargetPass pass = ops.eager_target_pass(seq);
  Graph g;
  TrainOps::ConfuLossOpts opts;
  opts.cfg = &cfg;
  opts.anchors = &anchors;
  opts.bindings = &fx.bindings;
  auto [loss, stats] = ops.confu_loss(g, pass, seq, opts);
  CHECK(stats.kl_terms == anchors.positions.size() * 6);
  CHECK(stats.target_rows == seq.size() + anchors.positions.size());
  CHECK(stats.value >= 0.0);
  for (double t : stats.term_values) CHECK(t >= -1e-12);
  (void)loss;
}

TEST_CASE("confu loss at l=0 equals an independent per-term recomputation (Eq.-2 route)") {
  ModelFixture fx(FixtureOptions{.vocab = 12, .max_seq_len = 64});
  fx.bindings.use_moe = false;  // static embeddings keep the oracle simple
  TrainOps ops(*fx.target, *fx.draft);
  std::vector<int> seq = demo_sequence(fx, 20, 13);

  TrainConfig cfg;
  cfg.unroll_depth = 2;
  cfg.anchors_per_seq = 2;
  cfg.replication = 0;
  SplitMix rng(5);
  AnchorSet anchors = sample_anchors(seq.size(), cfg, rng);

  TrainOps::TargetPass pass = ops.eager_target_pass(seq);
  Graph g;
  TrainOps::ConfuLossOpts opts;
  opts.cfg = &cfg;
  opts.anchors = &anchors;
  opts.bindings = &fx.bindings;
  auto [loss, stats] = ops.confu_loss(g, pass, seq, opts);
  REQUIRE(stats.term_values.size() == anchors.positions.size() * cfg.unroll_depth);

  // Independent route: prefill up to the anchor for f, one-shot draft_next
  // calls for the student distribution, plain softmax teachers.
  std::size_t term_idx = 0;
  for (std::size_t p : anchors.positions) {
    std::vector<int> prefix(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(p) + 1);
    auto pre = fx.target->prefill(prefix, &fx.bindings.soft,
                                  [&](Graph& gg, const TensorF64&) {
                                    return gg.param(fx.store, "confu.con_static");
                                  });
    DraftSlot future;
    future.embed = fx.store.tensor("confu.f_static");
    future.feature = pre.future;

    std::vector<DraftSlot> ctx;
    for (std::size_t i = 0; i <= p; ++i) {
      Graph gg;
      TensorF64 tap = pre.taps[i];
      DraftSlot s;
      s.embed = gg.val(fx.draft->token_embedding(gg, prefix[i]));
      s.feature = gg.val(fx.draft->down_project(gg, gg.constant(tap)));
      s.position = i;
      ctx.push_back(std::move(s));
    }
    for (std::size_t i = 1; i <= cfg.unroll_depth; ++i) {
      auto out = fx.draft->draft_next(ctx, future, DraftMode::kConfu);
      TensorF64 teacher = ops.teacher_row(pass, p + i - 1);
      std::vector<double> logq(out.logits.data);
      double mx = *std::max_element(logq.begin(), logq.end());
      double z = 0.0;
      for (double v : logq) z += std::exp(v - mx);
      double lz = mx + std::log(z);
      double kl = 0.0;
      for (std::size_t c = 0; c < teacher.numel(); ++c) {
        double pe = std::max(teacher.data[c], Graph::kProbFloor);
        kl += pe * (std::log(pe) - (logq[c] - lz));
      }
      CHECK(stats.term_values[term_idx] == doctest::Approx(kl).epsilon(1e-9));
      ++term_idx;
      Graph gg;
      ctx.push_back(DraftSlot{gg.val(fx.draft->token_embedding(gg, seq[p + i])), out.hidden,
                              p + i});
    }
  }
  (void)loss;
}

TEST_CASE("ablating the future reduces confu loss to the baseline loss on anchor windows") {
  ModelFixture fx(FixtureOptions{.vocab = 12, .max_seq_len = 64});
  TrainOps ops(*fx.target, *fx.draft);
  std::vector<int> seq = demo_sequence(fx, 24, 21);

  TrainConfig cfg;
  cfg.unroll_depth = 3;
  cfg.anchors_per_seq = 2;
  cfg.replication = 1;
  SplitMix rng(9);
  AnchorSet anchors = sample_anchors(seq.size(), cfg, rng);
  TrainOps::TargetPass pass = ops.eager_target_pass(seq);

  Graph g1;
  TrainOps::ConfuLossOpts opts;
  opts.cfg = &cfg;
  opts.anchors = &anchors;
  opts.bindings = &fx.bindings;
  opts.with_future = false;
  auto [ablated, stats_a] = ops.confu_loss(g1, pass, seq, opts);

  std::vector<std::size_t> positions;
  for (std::size_t p : anchors.positions)
    for (std::size_t j = 0; j <= cfg.replication; ++j) positions.push_back(p + j);
  Graph g2;
  auto [eagle, stats_e] = ops.eagle3_loss(g2, pass, seq, cfg.unroll_depth, &positions);

  CHECK(g1.val(ablated).data[0] == g2.val(eagle).data[0]);  // exact equality
  CHECK(stats_a.kl_terms == stats_e.kl_terms);
}

TEST_CASE("gradients flow to soft prompts, MoE, and draft head; never to the target") {
  ModelFixture fx(FixtureOptions{.vocab = 12, .d_model = 8, .n_heads = 2, .max_seq_len = 32,
                                 .soft_count = 2, .n_expert = 2, .k_expert = 2});
  fx.store.set_trainable_prefix("target.", false);
  TrainOps ops(*fx.target, *fx.draft);
  std::vector<int> seq = demo_sequence(fx, 14, 31);

  TrainConfig cfg;
  cfg.unroll_depth = 2;
  cfg.anchors_per_seq = 2;
  cfg.replication = 1;
  SplitMix rng(11);
  AnchorSet anchors = sample_anchors(seq.size(), cfg, rng);
  TrainOps::TargetPass pass = ops.eager_target_pass(seq);

  Graph g;
  TrainOps::ConfuLossOpts opts;
  opts.cfg = &cfg;
  opts.anchors = &anchors;
  opts.bindings = &fx.bindings;
  auto [loss, stats] = ops.confu_loss(g, pass, seq, opts);
  fx.store.drop_grads();
  g.backward(loss);

  auto grad_norm = [&](const std::string& name) {
    const TensorF64& t = fx.store.tensor(name);
    if (!t.grad) return -1.0;
    double s = 0.0;
    for (double v : *t.grad) s += v * v;
    return s;
  };
  CHECK(grad_norm("confu.soft.layer0.k") > 0.0);
  CHECK(grad_norm("confu.soft.layer0.v") > 0.0);
  CHECK(grad_norm("confu.moe_con.router") >= 0.0);  // zero-init router: grads exist
  CHECK(grad_norm("confu.moe_con.experts") > 0.0);
  CHECK(grad_norm("confu.moe_f.experts") > 0.0);
  CHECK(grad_norm("draft.w_proj") > 0.0);
  CHECK(grad_norm("draft.fuse") > 0.0);
  for (const auto& name : fx.store.names())
    if (name.rfind("target.", 0) == 0) CHECK(grad_norm(name) == -1.0);
  (void)stats;
}

TEST_CASE("backward matches finite differences through the full confu loss (d=8)") {
  ModelFixture fx(FixtureOptions{.vocab = 10, .d_model = 8, .n_heads = 2, .max_seq_len = 32,
                                 .soft_count = 2, .n_expert = 2, .k_expert = 2});
  fx.store.set_trainable_prefix("target.", false);
  TrainOps ops(*fx.target, *fx.draft);
  std::vector<int> seq = demo_sequence(fx, 12, 41);

  TrainConfig cfg;
  cfg.unroll_depth = 2;
  cfg.anchors_per_seq = 1;
  cfg.replication = 1;
  SplitMix rng(13);
  AnchorSet anchors = sample_anchors(seq.size(), cfg, rng);

  auto loss_value = [&]() {
    TrainOps::TargetPass pass = ops.eager_target_pass(seq);
    Graph g;
    TrainOps::ConfuLossOpts opts;
    opts.cfg = &cfg;
    opts.anchors = &anchors;
    opts.bindings = &fx.bindings;
    auto [loss, stats] = ops.confu_loss(g, pass, seq, opts);
    (void)stats;
    return g.val(loss).data[0];
  };

  TrainOps::TargetPass pass = ops.eager_target_pass(seq);
  Graph g;
  TrainOps::ConfuLossOpts opts;
  opts.cfg = &cfg;
  opts.anchors = &anchors;
  opts.bindings = &fx.bindings;
  auto [loss, stats] = ops.confu_loss(g, pass, seq, opts);
  (void)stats;
  fx.store.drop_grads();
  g.backward(loss);

  for (const std::string& name :
       {std::string("confu.soft.layer0.k"), std::string("confu.moe_con.router"),
        std::string("confu.moe_f.experts"), std::string("draft.w_proj"),
        std::string("draft.fuse")}) {
    TensorF64 analytic = fx.store.tensor(name).grad_tensor();
    TensorF64 fd = finite_diff_grad(fx.store, name, loss_value, 1e-5);
    CHECK_MESSAGE(max_rel_error(analytic, fd) < 1e-4, "group ", name);
  }
}

// ---------------------------------------------------------------------------
// Stage runners and checkpoints
// ---------------------------------------------------------------------------

TEST_CASE("two confu steps with identical seeds give bit-identical parameters") {
  auto run = [&]() {
    ModelFixture fx(FixtureOptions{.vocab = kByteVocabSize, .d_model = 8, .n_heads = 2,
                                   .max_seq_len = 48, .soft_count = 2, .n_expert = 2,
                                   .k_expert = 2});
    SyntheticSpec spec;
    spec.seq_len = 20;
    spec.n_sequences = 4;
    spec.n_symbols = 8;
    SyntheticCorpus sc = synthetic_corpus(spec);
    TrainConfig cfg;
    cfg.unroll_depth = 2;
    cfg.anchors_per_seq = 2;
    cfg.replication = 1;
    cfg.steps = 2;
    cfg.lr = 1e-3;
    cfg.seed = 777;
    train_confu_stage(*fx.target, *fx.draft, fx.store, fx.bindings, sc.corpus, cfg);
    return checkpoint_from_store(fx.store);
  };
  Checkpoint a = run();
  Checkpoint b = run();
  REQUIRE(a.tensors.size() == b.tensors.size());
  for (const auto& [name, t] : a.tensors) {
    REQUIRE(b.tensors.count(name) == 1);
    CHECK(t.data == b.tensors.at(name).data);  // bitwise
  }
}

TEST_CASE("confu stage leaves every target tensor bit-identical") {
  ModelFixture fx(FixtureOptions{.vocab = kByteVocabSize, .d_model = 8, .n_heads = 2,
                                 .max_seq_len = 48, .soft_count = 2, .n_expert = 2,
                                 .k_expert = 2});
  std::map<std::string, std::vector<double>> before;
  for (const auto& name : fx.store.names())
    if (name.rfind("target.", 0) == 0) before[name] = fx.store.tensor(name).data;

  SyntheticSpec spec;
  spec.seq_len = 20;
  spec.n_sequences = 4;
  spec.n_symbols = 8;
  SyntheticCorpus sc = synthetic_corpus(spec);
  TrainConfig cfg;
  cfg.unroll_depth = 2;
  cfg.anchors_per_seq = 2;
  cfg.replication = 1;
  cfg.steps = 3;
  cfg.seed = 5;
  train_confu_stage(*fx.target, *fx.draft, fx.store, fx.bindings, sc.corpus, cfg);

  for (const auto& [name, data] : before) CHECK(fx.store.tensor(name).data == data);
}

TEST_CASE("checkpoint round-trip is bit-exact, with meta and version checks") {
  ModelFixture fx(FixtureOptions{.vocab = 10, .d_model = 8, .n_heads = 2, .soft_count = 2,
                                 .n_expert = 2, .k_expert = 2});
  Checkpoint ck = checkpoint_from_store(fx.store, {{"step", 42.0}, {"stage", 2.0}});
  std::string path = "/tmp/confu_test_ckpt.bin";
  save_checkpoint(path, ck);
  Checkpoint back = load_checkpoint(path);
  CHECK(back.version == kCheckpointVersion);
  CHECK(back.meta.at("step") == 42.0);
  REQUIRE(back.tensors.size() == ck.tensors.size());
  for (const auto& [name, t] : ck.tensors) {
    CHECK(back.tensors.at(name).shape == t.shape);
    CHECK(back.tensors.at(name).data == t.data);
  }

  ParamStore restored;
  load_into_store(back, restored);
  CHECK(restored.size() == fx.store.size());

  CHECK_THROWS_AS(load_checkpoint("/nonexistent/x.ckpt"), ConfigError);
}

TEST_CASE("target pretraining drives the LM loss down on a tiny synthetic corpus") {
  ModelFixture fx(FixtureOptions{.vocab = kByteVocabSize, .d_model = 16, .n_layers = 2,
                                 .n_heads = 2, .max_seq_len = 48, .soft_count = 2,
                                 .n_expert = 2, .k_expert = 2, .seed = 9});
  SyntheticSpec spec;
  spec.seq_len = 24;
  spec.n_sequences = 6;
  SyntheticCorpus sc = synthetic_corpus(spec);
  TrainConfig cfg;
  cfg.steps = 60;
  cfg.lr = 3e-3;
  StageLog log = train_target_lm(*fx.target, fx.store, sc.corpus, cfg);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 10; ++i) {
    first += log.losses[i] / 10.0;
    last += log.losses[log.losses.size() - 10 + i] / 10.0;
  }
  CHECK(last < first);
}
