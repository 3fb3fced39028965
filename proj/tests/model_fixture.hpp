#pragma once

// Seeded tiny model setups shared across the test suites.

#include <memory>
#include <vector>

#include "confu/draft_head.hpp"
#include "confu/future_oracle.hpp"
#include "confu/spec_engine.hpp"
#include "confu/target_model.hpp"

namespace confu_test {

using namespace confu;

struct FixtureOptions {
  std::size_t vocab = 8;
  std::size_t d_model = 16;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t max_seq_len = 64;
  std::size_t soft_count = 4;
  std::size_t n_expert = 4;
  std::size_t k_expert = 2;
  std::uint64_t seed = 1234;
};

struct ModelFixture {
  TargetConfig tcfg;
  DraftConfig dcfg;
  ParamStore store;
  std::unique_ptr<TargetModel> target;
  std::unique_ptr<DraftModel> draft;
  ConfuBindings bindings;

  explicit ModelFixture(const FixtureOptions& opt = {}) {
    tcfg.n_layers = opt.n_layers;
    tcfg.d_model = opt.d_model;
    tcfg.n_heads = opt.n_heads;
    tcfg.vocab_size = opt.vocab;
    tcfg.max_seq_len = opt.max_seq_len;
    tcfg.tap_layers = TargetConfig::default_taps(opt.n_layers);

    dcfg.d_model = opt.d_model;
    dcfg.n_heads = opt.n_heads;
    dcfg.vocab_size = opt.vocab;
    dcfg.max_seq_len = opt.max_seq_len;

    TargetModel::init_params(store, tcfg, opt.seed);
    DraftModel::init_params(store, dcfg, opt.seed + 1);
    target = std::make_unique<TargetModel>(tcfg, store);
    draft = std::make_unique<DraftModel>(dcfg, store);

    SplitMix rng(mix64(opt.seed, 77));
    bindings.soft = init_soft_prompts(store, tcfg.n_layers, opt.soft_count, tcfg.d_model, rng);

    std::vector<double> center = mean_token_embedding();
    MoEConfig con_cfg{opt.n_expert, opt.k_expert, 3 * tcfg.d_model, tcfg.d_model};
    MoEConfig f_cfg{opt.n_expert, opt.k_expert, tcfg.d_model, tcfg.d_model};
    bindings.use_moe = true;
    bindings.moe_con = init_moe(store, con_cfg, "confu.moe_con", center, rng);
    bindings.moe_f = init_moe(store, f_cfg, "confu.moe_f", center, rng);
    store.add("confu.con_static", gaussian_tensor({1, tcfg.d_model}, 0.05, rng));
    store.add("confu.f_static", gaussian_tensor({1, tcfg.d_model}, 0.05, rng));
  }

  std::vector<double> mean_token_embedding() const {
    const TensorF64& t = store.tensor("target.tok_emb");
    std::vector<double> m(t.cols(), 0.0);
    for (std::size_t r = 0; r < t.rows(); ++r)
      for (std::size_t c = 0; c < t.cols(); ++c) m[c] += t.at(r, c);
    for (double& v : m) v /= static_cast<double>(t.rows());
    return m;
  }

  SpecEngine make_engine(DecodeMode mode, std::uint64_t seed,
                         std::optional<int> eos = std::nullopt) {
    return SpecEngine(*target, *draft, bindings, mode, seed, eos);
  }
};

}  // namespace confu_test
