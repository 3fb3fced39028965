#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <vector>

#include "confu/prob.hpp"
#include "confu/rng.hpp"
#include "confu/spec_engine.hpp"
#include "confu/target_model.hpp"

namespace confu {

// ---------------------------------------------------------------------------
// Scripted randomness. Replays a fixed choice prefix and, past its end,
// greedily takes the first positive-probability branch while recording the
// alternatives. Driving the real decode walk with progressively extended
// scripts enumerates the walk's full outcome distribution.
// ---------------------------------------------------------------------------

class ScriptSource final : public RandomSource {
 public:
  struct Extension {
    std::size_t at = 0;                     // script index of the free choice
    std::vector<std::size_t> alternatives;  // untaken positive-probability branches
  };

  ScriptSource() = default;
  explicit ScriptSource(std::vector<std::size_t> script) : script_(std::move(script)) {}

  std::size_t sample(std::span<const double> probs, const DrawKey&) override {
    return choose(probs);
  }

  bool bernoulli(double p_true, const DrawKey&) override {
    double clamped = std::min(1.0, std::max(0.0, p_true));
    std::vector<double> probs = {clamped, 1.0 - clamped};
    return choose(probs) == 0;
  }

  const std::vector<std::size_t>& script() const { return script_; }
  const std::vector<Extension>& extensions() const { return extensions_; }
  double path_prob() const { return path_prob_; }

 private:
  std::size_t choose(std::span<const double> probs) {
    if (cursor_ < script_.size()) {
      std::size_t c = script_[cursor_];
      if (c >= probs.size() || probs[c] <= 0.0)
        throw StateError("ScriptSource: scripted choice has no mass");
      path_prob_ *= probs[c];
      ++cursor_;
      return c;
    }
    Extension ext;
    ext.at = cursor_;
    std::size_t first = probs.size();
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (probs[i] <= 0.0) continue;
      if (first == probs.size()) first = i;
      else ext.alternatives.push_back(i);
    }
    if (first == probs.size()) throw NumericError("ScriptSource: no positive mass");
    extensions_.push_back(std::move(ext));
    script_.push_back(first);
    path_prob_ *= probs[first];
    ++cursor_;
    return first;
  }

  std::vector<std::size_t> script_;
  std::vector<Extension> extensions_;
  std::size_t cursor_ = 0;
  double path_prob_ = 1.0;
};

// Exhausts every randomness path of a decision procedure driven through a
// RandomSource. The runner must be deterministic given the drawn choices.
template <typename Outcome>
std::vector<std::pair<Outcome, double>> enumerate_outcomes(
    const std::function<Outcome(RandomSource&)>& run) {
  std::vector<std::pair<Outcome, double>> out;
  std::vector<std::vector<std::size_t>> stack;
  stack.push_back({});
  while (!stack.empty()) {
    std::vector<std::size_t> script = std::move(stack.back());
    stack.pop_back();
    ScriptSource src(std::move(script));
    Outcome oc = run(src);
    for (const ScriptSource::Extension& ext : src.extensions())
      for (std::size_t alt : ext.alternatives) {
        std::vector<std::size_t> s(src.script().begin(),
                                   src.script().begin() + static_cast<std::ptrdiff_t>(ext.at));
        s.push_back(alt);
        stack.push_back(std::move(s));
      }
    out.emplace_back(std::move(oc), src.path_prob());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sequence distributions
// ---------------------------------------------------------------------------

using SeqDist = std::map<std::vector<int>, double>;

// Exact output distribution of the speculative engine over length-`max_tokens`
// sequences, obtained by exhausting every random branch of the real decode
// path (prefill draw, proposals, accept coins, residual and bonus draws).
inline SeqDist enumerate_engine_distribution(SpecEngine& engine, const std::vector<int>& prompt,
                                             std::size_t max_tokens) {
  SeqDist dist;
  SpecEngine::PrefillPlan pp = engine.plan_prefill(prompt);

  std::function<void(SpecEngine::GenState, double)> recurse = [&](SpecEngine::GenState st,
                                                                  double prob) {
    if (st.out_tokens.size() >= max_tokens || st.eos_seen) {
      std::vector<int> seq(st.out_tokens.begin(),
                           st.out_tokens.begin() +
                               static_cast<std::ptrdiff_t>(
                                   std::min(max_tokens, st.out_tokens.size())));
      dist[seq] += prob;
      return;
    }
    SpecEngine::RoundPlan plan = engine.plan_round(st);
    auto outcomes = enumerate_outcomes<SpecEngine::WalkOutcome>(
        [&](RandomSource& src) { return engine.walk(plan, src, 0); });
    for (auto& [oc, p] : outcomes) recurse(engine.apply_round(plan, oc), prob * p);
  };

  for (std::size_t tok = 0; tok < pp.first_dist.size(); ++tok) {
    if (pp.first_dist[tok] <= 0.0) continue;
    SpecEngine::GenState st = pp.state;
    engine.apply_first_token(st, static_cast<int>(tok));
    recurse(std::move(st), pp.first_dist[tok]);
  }
  return dist;
}

// Exact autoregressive distribution of the target model alone; the oracle the
// engine distribution must match. Never touches the draft model or engine.
inline SeqDist autoregressive_distribution(const TargetModel& target,
                                           const std::vector<int>& prompt,
                                           std::size_t max_tokens, double temperature) {
  SeqDist dist;
  TargetModel::PrefillOut po = target.prefill(prompt, nullptr, ConEmbedFn{});

  std::function<void(const KVCache&, const TensorF64&, std::vector<int>, double)> recurse =
      [&](const KVCache& cache, const TensorF64& logits, std::vector<int> prefix, double prob) {
        if (prefix.size() >= max_tokens) {
          dist[prefix] += prob;
          return;
        }
        std::vector<double> p = softmax_temp(logits, temperature);
        for (std::size_t tok = 0; tok < p.size(); ++tok) {
          if (p[tok] <= 0.0) continue;
          KVCache branch = cache;
          TargetModel::DecodeOut d = target.decode_step(branch, static_cast<int>(tok), nullptr);
          std::vector<int> next = prefix;
          next.push_back(static_cast<int>(tok));
          recurse(branch, d.logits, std::move(next), prob * p[tok]);
        }
      };
  recurse(po.cache, po.last_logits, {}, 1.0);
  return dist;
}

inline double seq_dist_total_variation(const SeqDist& a, const SeqDist& b) {
  double tv = 0.0;
  for (const auto& [k, v] : a) {
    auto it = b.find(k);
    tv += std::fabs(v - (it == b.end() ? 0.0 : it->second));
  }
  for (const auto& [k, v] : b)
    if (!a.count(k)) tv += v;
  return 0.5 * tv;
}

// ---------------------------------------------------------------------------
// Chi-squared goodness of fit (for the Monte-Carlo lossless check and the
// anchor-sampling uniformity test).
// ---------------------------------------------------------------------------

namespace detail {

inline double gammln(double x) {
  static const double cof[6] = {76.18009172947146,  -86.50532032941677, 24.01409824083091,
                                -1.231739572450155, 0.1208650973866179e-2, -0.5395239384953e-5};
  double y = x, tmp = x + 5.5;
  tmp -= (x + 0.5) * std::log(tmp);
  double ser = 1.000000000190015;
  for (double c : cof) ser += c / ++y;
  return -tmp + std::log(2.5066282746310005 * ser / x);
}

// Regularized upper incomplete gamma Q(a, x).
inline double gammq(double a, double x) {
  if (x < 0.0 || a <= 0.0) throw NumericError("gammq: bad arguments");
  if (x == 0.0) return 1.0;
  if (x < a + 1.0) {
    // series for P(a,x)
    double ap = a, sum = 1.0 / a, del = sum;
    for (int i = 0; i < 500; ++i) {
      ++ap;
      del *= x / ap;
      sum += del;
      if (std::fabs(del) < std::fabs(sum) * 1e-15) break;
    }
    return 1.0 - sum * std::exp(-x + a * std::log(x) - gammln(a));
  }
  // continued fraction for Q(a,x)
  double b = x + 1.0 - a, c = 1e308, d = 1.0 / b, h = d;
  for (int i = 1; i <= 500; ++i) {
    double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
    b += 2.0;
    d = an * d + b;
    if (std::fabs(d) < 1e-300) d = 1e-300;
    c = b + an / c;
    if (std::fabs(c) < 1e-300) c = 1e-300;
    d = 1.0 / d;
    double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < 1e-15) break;
  }
  return std::exp(-x + a * std::log(x) - gammln(a)) * h;
}

}  // namespace detail

inline double chi_squared_sf(double chi2, double dof) {
  if (dof <= 0.0) throw NumericError("chi_squared_sf: dof must be positive");
  return detail::gammq(dof / 2.0, chi2 / 2.0);
}

// Pearson chi-squared p-value of observed counts against expected
// probabilities. Cells with expected count below `min_expected` are pooled.
struct Chi2Result {
  double statistic = 0.0;
  double dof = 0.0;
  double p_value = 1.0;
};

inline Chi2Result chi_squared_gof(const std::vector<std::size_t>& observed,
                                  const std::vector<double>& expected_probs, std::size_t total,
                                  double min_expected = 5.0) {
  if (observed.size() != expected_probs.size())
    throw DimensionError("chi_squared_gof: size mismatch");
  double chi2 = 0.0;
  std::size_t cells = 0;
  double pooled_obs = 0.0, pooled_exp = 0.0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    double e = expected_probs[i] * static_cast<double>(total);
    double o = static_cast<double>(observed[i]);
    if (e < min_expected) {
      pooled_obs += o;
      pooled_exp += e;
      continue;
    }
    chi2 += (o - e) * (o - e) / e;
    ++cells;
  }
  if (pooled_exp > 0.0) {
    chi2 += (pooled_obs - pooled_exp) * (pooled_obs - pooled_exp) / pooled_exp;
    ++cells;
  }
  Chi2Result res;
  res.statistic = chi2;
  res.dof = cells > 1 ? static_cast<double>(cells - 1) : 1.0;
  res.p_value = cells > 1 ? chi_squared_sf(chi2, res.dof) : 1.0;
  return res;
}

// ---------------------------------------------------------------------------
// Lossless verification harness (the core of `confu verify-lossless`).
// ---------------------------------------------------------------------------

struct LosslessReport {
  bool exhaustive = false;
  double total_variation = 0.0;  // exhaustive mode
  double p_value = 1.0;          // monte-carlo mode
  std::size_t sequences = 0;
  std::size_t trials = 0;
  bool pass = false;
};

inline LosslessReport verify_lossless_exhaustive(SpecEngine& engine, const TargetModel& target,
                                                 const std::vector<int>& prompt,
                                                 std::size_t max_tokens, double tolerance = 1e-9) {
  if (target.config().vocab_size > 8 || max_tokens > 4)
    throw ConfigError("exhaustive lossless check requires vocab <= 8 and length <= 4");
  SeqDist engine_dist = enumerate_engine_distribution(engine, prompt, max_tokens);
  SeqDist oracle = autoregressive_distribution(target, prompt, max_tokens,
                                               engine.mode().temperature);
  LosslessReport rep;
  rep.exhaustive = true;
  rep.sequences = oracle.size();
  rep.total_variation = seq_dist_total_variation(engine_dist, oracle);
  rep.pass = rep.total_variation < tolerance;
  return rep;
}

inline LosslessReport verify_lossless_monte_carlo(
    const std::function<SpecEngine(std::uint64_t)>& make_engine, const TargetModel& target,
    const std::vector<int>& prompt, std::size_t max_tokens, std::size_t trials,
    double temperature, std::uint64_t seed, double alpha = 0.001) {
  SeqDist oracle = autoregressive_distribution(target, prompt, max_tokens, temperature);
  std::vector<std::vector<int>> keys;
  std::vector<double> expected;
  for (const auto& [k, v] : oracle) {
    keys.push_back(k);
    expected.push_back(v);
  }
  std::map<std::vector<int>, std::size_t> counts;
  for (std::size_t i = 0; i < trials; ++i) {
    SpecEngine eng = make_engine(mix64(seed, i));
    GenerateResult r = eng.generate(prompt, max_tokens);
    counts[r.tokens] += 1;
  }
  std::vector<std::size_t> observed(keys.size(), 0);
  for (std::size_t i = 0; i < keys.size(); ++i) {
    auto it = counts.find(keys[i]);
    observed[i] = it == counts.end() ? 0 : it->second;
  }
  Chi2Result chi = chi_squared_gof(observed, expected, trials);
  LosslessReport rep;
  rep.exhaustive = false;
  rep.sequences = keys.size();
  rep.trials = trials;
  rep.p_value = chi.p_value;
  rep.pass = chi.p_value > alpha;
  return rep;
}

}  // namespace confu
