#include <cmath>
#include <vector>

#include "confu/lossless.hpp"
#include "confu/spec_engine.hpp"
#include "doctest.h"
#include "model_fixture.hpp"

using namespace confu;
using confu_test::FixtureOptions;
using confu_test::ModelFixture;

namespace {

DecodeMode mode_of(DraftMode m, double temp, AcceptRule rule, std::size_t budget,
                   std::size_t k) {
  DecodeMode dm;
  dm.temperature = temp;
  dm.rule = rule;
  dm.mode = m;
  dm.draft_budget = budget;
  dm.branch_k = k;
  return dm;
}

}  // namespace

TEST_CASE("accept_reject_path: p == q accepts every level with probability one") {
  std::vector<std::vector<double>> q = {{0.3, 0.7}, {0.6, 0.4}};
  std::vector<std::vector<double>> p = q;
  p.push_back({1.0, 0.0});  // bonus dist
  std::vector<int> proposed = {1, 0};
  auto outcomes = enumerate_outcomes<PathAcceptResult>([&](RandomSource& src) {
    return accept_reject_path(q, proposed, p, AcceptRule::kLossless, src);
  });
  double p_full = 0.0;
  for (auto& [oc, prob] : outcomes)
    if (oc.accepted == 2) p_full += prob;
  CHECK(p_full == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("accept_reject_path: q=(1,0) proposing a against p=(.5,.5) (hand residual)") {
  // Acceptance probability is 1/2; the residual max(0, p-q) normalizes to all
  // mass on token b.
  std::vector<std::vector<double>> q = {{1.0, 0.0}};
  std::vector<std::vector<double>> p = {{0.5, 0.5}, {0.25, 0.75}};
  std::vector<int> proposed = {0};
  auto outcomes = enumerate_outcomes<PathAcceptResult>([&](RandomSource& src) {
    return accept_reject_path(q, proposed, p, AcceptRule::kLossless, src);
  });
  double p_accept = 0.0, p_reject_b = 0.0;
  for (auto& [oc, prob] : outcomes) {
    if (oc.accepted == 1) p_accept += prob;
    if (oc.accepted == 0) {
      CHECK(oc.terminal_token == 1);  // residual has mass only on b
      p_reject_b += prob;
    }
  }
  CHECK(p_accept == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(p_reject_b == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("accept_reject_path: greedy rule accepts the matching prefix") {
  std::vector<std::vector<double>> q = {{0.9, 0.1}, {0.9, 0.1}, {0.9, 0.1}};
  std::vector<std::vector<double>> p = {{0.8, 0.2}, {0.7, 0.3}, {0.2, 0.8}, {0.5, 0.5}};
  std::vector<int> proposed = {0, 0, 0};  // argmax p at first two levels only
  RngSource src{CounterRng(7)};
  auto res = accept_reject_path(q, proposed, p, AcceptRule::kGreedyMatch, src);
  CHECK(res.accepted == 2);
  CHECK(res.terminal_token == 1);
  CHECK_FALSE(res.terminal_is_bonus);
}

TEST_CASE("accept_reject_path: zero-mass proposal raises a proposal error") {
  std::vector<std::vector<double>> q = {{1.0, 0.0}};
  std::vector<std::vector<double>> p = {{0.5, 0.5}, {0.5, 0.5}};
  std::vector<int> proposed = {1};
  RngSource src{CounterRng(1)};
  CHECK_THROWS_AS(accept_reject_path(q, proposed, p, AcceptRule::kLossless, src), ProposalError);
}

// ---------------------------------------------------------------------------
// Losslessness: the exact engine output distribution equals the autoregressive
// one, for chains and trees, baseline and confu, independent of draft weights.
// ---------------------------------------------------------------------------

TEST_CASE("exhaustive losslessness on a tiny model (chain and tree, both modes)") {
  ModelFixture fx(FixtureOptions{.vocab = 6, .d_model = 16, .max_seq_len = 32, .soft_count = 3});
  std::vector<int> prompt = {1, 4};
  const std::size_t len = 3;

  struct Case {
    DraftMode mode;
    double temp;
    std::size_t budget, k;
  };
  std::vector<Case> cases = {
      {DraftMode::kBaseline, 1.0, 2, 1},  // chain K=2
      {DraftMode::kBaseline, 1.0, 4, 2},  // tree T=4
      {DraftMode::kConfu, 1.0, 2, 1},
      {DraftMode::kConfu, 1.0, 4, 2},
      {DraftMode::kConfu, 0.7, 4, 2},
  };
  for (const Case& c : cases) {
    CAPTURE(static_cast<int>(c.mode));
    CAPTURE(c.budget);
    CAPTURE(c.temp);
    SpecEngine eng = fx.make_engine(
        mode_of(c.mode, c.temp, AcceptRule::kLossless, c.budget, c.k), 99);
    LosslessReport rep = verify_lossless_exhaustive(eng, *fx.target, prompt, len);
    CHECK(rep.pass);
    CHECK(rep.total_variation < 1e-9);
  }
}

TEST_CASE("greedy-match at temperature 0 also preserves the (degenerate) distribution") {
  ModelFixture fx(FixtureOptions{.vocab = 6, .d_model = 16, .max_seq_len = 32, .soft_count = 3});
  SpecEngine eng = fx.make_engine(
      mode_of(DraftMode::kConfu, 0.0, AcceptRule::kGreedyMatch, 4, 2), 5);
  LosslessReport rep = verify_lossless_exhaustive(eng, *fx.target, {2, 0}, 3);
  CHECK(rep.pass);
}

TEST_CASE("greedy-match at temperature 1 is NOT lossless (expected-fail lane)") {
  // The literal token-matching rule preserves the distribution only under
  // greedy target sampling; at temperature 1 the harness must flag it.
  ModelFixture fx(FixtureOptions{.vocab = 6, .d_model = 16, .max_seq_len = 32, .soft_count = 3});
  SpecEngine eng = fx.make_engine(
      mode_of(DraftMode::kBaseline, 1.0, AcceptRule::kGreedyMatch, 3, 2), 5);
  LosslessReport rep = verify_lossless_exhaustive(eng, *fx.target, {2, 0}, 2);
  CHECK_FALSE(rep.pass);
  CHECK(rep.total_variation > 1e-3);
}

TEST_CASE("zero draft budget degenerates to lossless autoregression with tau == 1") {
  ModelFixture fx(FixtureOptions{.vocab = 6, .d_model = 16, .max_seq_len = 32, .soft_count = 3});
  SpecEngine eng = fx.make_engine(
      mode_of(DraftMode::kBaseline, 1.0, AcceptRule::kLossless, 0, 1), 31);
  LosslessReport rep = verify_lossless_exhaustive(eng, *fx.target, {3}, 3);
  CHECK(rep.pass);
  GenerateResult r = eng.generate({3}, 6);
  CHECK(r.metrics.tau == doctest::Approx(1.0));
  CHECK(r.metrics.draft_rows == 0);
}

TEST_CASE("monte-carlo chi-squared harness agrees with the autoregressive law") {
  ModelFixture fx(FixtureOptions{.vocab = 6, .d_model = 16, .max_seq_len = 32, .soft_count = 3});
  auto make = [&](std::uint64_t seed) {
    return fx.make_engine(mode_of(DraftMode::kConfu, 1.0, AcceptRule::kLossless, 3, 2), seed);
  };
  LosslessReport rep =
      verify_lossless_monte_carlo(make, *fx.target, {1, 4}, 2, 1200, 1.0, 777);
  CHECK(rep.trials == 1200);
  CHECK(rep.p_value > 0.001);
  CHECK(rep.pass);
}

// ---------------------------------------------------------------------------
// Round mechanics
// ---------------------------------------------------------------------------

TEST_CASE("round accounting: confu rounds process (T, T) rows, baseline (T, 0)") {
  ModelFixture fx(FixtureOptions{.vocab = 12, .max_seq_len = 96});
  for (DraftMode m : {DraftMode::kConfu, DraftMode::kBaseline}) {
    SpecEngine eng = fx.make_engine(mode_of(m, 1.0, AcceptRule::kLossless, 6, 2), 11);
    GenerateResult r = eng.generate({1, 2, 3}, 12, /*keep_rounds=*/true);
    REQUIRE(!r.rounds.empty());
    for (const RoundResult& rr : r.rounds) {
      CHECK(rr.rows_draft == 6);
      CHECK(rr.rows_contemplate == (m == DraftMode::kConfu ? 6 : 0));
      CHECK(rr.accepted_count <= 6);
      CHECK(rr.terminal_token >= 0);  // exactly one bonus-or-correction per round
    }
    CHECK(r.metrics.draft_rows == 6 * r.metrics.rounds);
  }
}

TEST_CASE("tau stays within [1, K+1] for chain drafting") {
  ModelFixture fx(FixtureOptions{.vocab = 12, .max_seq_len = 128});
  const std::size_t K = 3;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    SpecEngine eng = fx.make_engine(
        mode_of(DraftMode::kConfu, 1.0, AcceptRule::kLossless, K, 1), seed);
    GenerateResult r = eng.generate({2, 5, 7}, 20);
    CHECK(r.metrics.tau >= 1.0);
    CHECK(r.metrics.tau <= static_cast<double>(K) + 1.0);
  }
}

TEST_CASE("monotone budget: greedy acceptance never shrinks when the tree grows") {
  ModelFixture fx(FixtureOptions{.vocab = 12, .max_seq_len = 128});
  SpecEngine small = fx.make_engine(
      mode_of(DraftMode::kBaseline, 0.0, AcceptRule::kGreedyMatch, 3, 2), 21);
  SpecEngine big = fx.make_engine(
      mode_of(DraftMode::kBaseline, 0.0, AcceptRule::kGreedyMatch, 9, 2), 21);

  for (std::uint64_t s : {100u, 200u, 300u}) {
    SpecEngine::PrefillPlan pp = small.plan_prefill({1, 2, static_cast<int>(s % 11)});
    SpecEngine::GenState st = pp.state;
    small.apply_first_token(st, static_cast<int>(argmax(pp.first_dist)));

    SpecEngine::RoundPlan plan_small = small.plan_round(st);
    SpecEngine::RoundPlan plan_big = big.plan_round(st);
    RngSource src{CounterRng(s)};
    auto a = small.walk(plan_small, src, 1);
    auto b = big.walk(plan_big, src, 1);
    CHECK(b.accepted_nodes.size() >= a.accepted_nodes.size());
    // Nested trees: the small tree's nodes are a prefix of the big tree's.
    for (std::size_t i = 0; i < plan_small.tree.nodes.size(); ++i)
      CHECK(plan_small.tree.nodes[i].token == plan_big.tree.nodes[i].token);
  }
}

TEST_CASE("greedy all-miss round: a == 0 and the correction is the root argmax") {
  ModelFixture fx(FixtureOptions{.vocab = 12, .max_seq_len = 96});
  SpecEngine eng = fx.make_engine(
      mode_of(DraftMode::kBaseline, 0.0, AcceptRule::kGreedyMatch, 4, 2), 3);
  GenerateResult r = eng.generate({4, 8, 1}, 16, /*keep_rounds=*/true);
  bool saw_all_miss = false;
  for (const RoundResult& rr : r.rounds) {
    if (rr.accepted_count == 0) {
      saw_all_miss = true;
      CHECK_FALSE(rr.terminal_is_bonus);
    }
  }
  // Deterministic, so it either happens for this seed/model or the check is
  // vacuous; the assertion matrix in the engine walk covers the rule itself.
  (void)saw_all_miss;
}

TEST_CASE("identical seeds reproduce tokens and metrics exactly") {
  ModelFixture fx(FixtureOptions{.vocab = 12, .max_seq_len = 96});
  SpecEngine a = fx.make_engine(mode_of(DraftMode::kConfu, 0.7, AcceptRule::kLossless, 5, 2), 42);
  SpecEngine b = fx.make_engine(mode_of(DraftMode::kConfu, 0.7, AcceptRule::kLossless, 5, 2), 42);
  GenerateResult ra = a.generate({3, 6, 9}, 18);
  GenerateResult rb = b.generate({3, 6, 9}, 18);
  CHECK(ra.tokens == rb.tokens);
  CHECK(ra.metrics.tau == rb.metrics.tau);
  CHECK(ra.metrics.draft_rows == rb.metrics.draft_rows);
  CHECK(ra.metrics.contemplate_rows == rb.metrics.contemplate_rows);

  GenerateResult rc = a.generate({3, 6, 9}, 18, false, /*seed=*/43);
  CHECK(ra.tokens != rc.tokens);  // different stream, tiny chance of collision
}

TEST_CASE("max_tokens=1 is pure prefill plus one sample, no rounds") {
  ModelFixture fx;
  SpecEngine eng = fx.make_engine(mode_of(DraftMode::kConfu, 1.0, AcceptRule::kLossless, 4, 2), 9);
  GenerateResult r = eng.generate({1, 2}, 1);
  CHECK(r.tokens.size() == 1);
  CHECK(r.metrics.rounds == 0);
  CHECK(r.metrics.draft_rows == 0);
  CHECK(r.metrics.prefill_rows == 2 + fx.bindings.soft.count + 1);
}

TEST_CASE("generation stops after committing the EOS token") {
  ModelFixture fx(FixtureOptions{.vocab = 12, .max_seq_len = 96});
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    SpecEngine eng = fx.make_engine(
        mode_of(DraftMode::kConfu, 1.0, AcceptRule::kLossless, 4, 2), 50 + seed,
        /*eos=*/5);
    GenerateResult r = eng.generate({1, 2, 3}, 24);
    auto it = std::find(r.tokens.begin(), r.tokens.end(), 5);
    if (it != r.tokens.end()) {
      // Nothing but the terminal commit of that round may follow the EOS.
      CHECK(std::distance(it, r.tokens.end()) <= 1 + static_cast<std::ptrdiff_t>(
                                                         eng.mode().draft_budget));
      CHECK(r.tokens.size() <= 24);
    }
  }
}

TEST_CASE("running out of positions truncates with a flag instead of throwing") {
  ModelFixture fx(FixtureOptions{.vocab = 12, .max_seq_len = 24});
  SpecEngine eng = fx.make_engine(mode_of(DraftMode::kConfu, 1.0, AcceptRule::kLossless, 4, 2),
                                  77);
  GenerateResult r = eng.generate({1, 2, 3}, 64);
  CHECK(r.metrics.truncated);
  CHECK(r.tokens.size() < 64);
  CHECK(!r.tokens.empty());
}

TEST_CASE("engine-level verification neutrality: stripped shadow round agrees") {
  ModelFixture fx(FixtureOptions{.vocab = 12, .max_seq_len = 96});
  SpecEngine eng = fx.make_engine(mode_of(DraftMode::kConfu, 1.0, AcceptRule::kLossless, 5, 2),
                                  1234);
  SpecEngine::PrefillPlan pp = eng.plan_prefill({2, 7, 4});
  SpecEngine::GenState st = pp.state;
  eng.apply_first_token(st, static_cast<int>(argmax(pp.first_dist)));

  for (int round = 1; round <= 3; ++round) {
    SpecEngine::RoundPlan plan = eng.plan_round(st);

    // Shadow verification of the same tree with contemplate rows stripped.
    AttentionMask stripped_mask = fx.target->build_verify_mask(
        plan.pre_state.cache, plan.tree, plan.had_pending, false);
    auto stripped = fx.target->verify_tree(plan.pre_state.cache, plan.tree, stripped_mask,
                                           &fx.bindings.soft, nullptr,
                                           plan.had_pending
                                               ? plan.pre_state.pending
                                               : std::optional<int>{});
    for (std::size_t n = 0; n < plan.tree.nodes.size(); ++n)
      CHECK(max_abs_diff(stripped.nodes[n].logits, plan.vout.nodes[n].logits) < 1e-9);

    SpecEngine::RoundPlan shadow = plan;
    shadow.node_p.clear();
    for (const auto& n : stripped.nodes)
      shadow.node_p.push_back(softmax_temp(n.logits, eng.mode().temperature));
    if (plan.had_pending)
      shadow.root_p = softmax_temp(stripped.commit->logits, eng.mode().temperature);

    RngSource src_a{CounterRng(888)}, src_b{CounterRng(888)};
    auto oa = eng.walk(plan, src_a, static_cast<std::uint64_t>(round));
    auto ob = eng.walk(shadow, src_b, static_cast<std::uint64_t>(round));
    CHECK(oa.accepted_nodes == ob.accepted_nodes);
    CHECK(oa.terminal_token == ob.terminal_token);

    st = eng.apply_round(plan, oa);
  }
}
