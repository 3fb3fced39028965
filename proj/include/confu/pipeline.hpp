#pragma once

#include <map>
#include <memory>
#include <string>

#include "confu/checkpoint.hpp"
#include "confu/config_file.hpp"
#include "confu/corpus.hpp"
#include "confu/train.hpp"

namespace confu {

// ---------------------------------------------------------------------------
// Experiment configuration (one config file drives every stage)
// ---------------------------------------------------------------------------

enum class BenchMode { kBaseline, kConfu, kConfuNoMoe, kConfuNoMoeNoRepl };

inline std::string bench_mode_name(BenchMode m) {
  switch (m) {
    case BenchMode::kBaseline: return "baseline";
    case BenchMode::kConfu: return "confu";
    case BenchMode::kConfuNoMoe: return "confu-no-moe";
    case BenchMode::kConfuNoMoeNoRepl: return "confu-no-moe-no-repl";
  }
  throw ConfigError("unknown bench mode");
}

inline BenchMode bench_mode_from(const std::string& name) {
  if (name == "baseline") return BenchMode::kBaseline;
  if (name == "confu") return BenchMode::kConfu;
  if (name == "confu-no-moe") return BenchMode::kConfuNoMoe;
  if (name == "confu-no-moe-no-repl") return BenchMode::kConfuNoMoeNoRepl;
  throw ConfigError("unknown mode: " + name);
}

inline std::string checkpoint_name_for(BenchMode m) {
  switch (m) {
    case BenchMode::kBaseline: return "draft_baseline.ckpt";
    case BenchMode::kConfu: return "confu.ckpt";
    case BenchMode::kConfuNoMoe: return "confu_no_moe.ckpt";
    case BenchMode::kConfuNoMoeNoRepl: return "confu_no_moe_no_repl.ckpt";
  }
  throw ConfigError("unknown bench mode");
}

struct ExperimentConfig {
  TargetConfig target;
  DraftConfig draft;
  std::size_t soft_count = 16;
  std::size_t n_expert = 8;
  std::size_t k_expert = 2;
  TrainConfig pretrain;
  TrainConfig draft_train;
  TrainConfig confu_train;
  SyntheticSpec corpus_spec;
  std::string corpus_file;  // non-empty: train on a text file instead
  std::uint64_t init_seed = 1;

  static ExperimentConfig from_config(const ConfigFile& cf) {
    ExperimentConfig ec;
    ec.target.d_model = static_cast<std::size_t>(cf.get_int("model", "d_model", 48));
    ec.target.n_layers = static_cast<std::size_t>(cf.get_int("model", "n_layers", 3));
    ec.target.n_heads = static_cast<std::size_t>(cf.get_int("model", "n_heads", 4));
    ec.target.vocab_size = static_cast<std::size_t>(
        cf.get_int("model", "vocab", static_cast<long long>(kByteVocabSize)));
    ec.target.max_seq_len = static_cast<std::size_t>(cf.get_int("model", "max_seq_len", 512));
    ec.target.tap_layers = TargetConfig::default_taps(ec.target.n_layers);

    ec.draft.d_model = ec.target.d_model;
    ec.draft.n_heads = static_cast<std::size_t>(
        cf.get_int("model", "draft_heads", static_cast<long long>(ec.target.n_heads)));
    ec.draft.vocab_size = ec.target.vocab_size;
    ec.draft.max_seq_len = ec.target.max_seq_len;

    ec.soft_count = static_cast<std::size_t>(cf.get_int("confu", "soft_count", 16));
    ec.n_expert = static_cast<std::size_t>(cf.get_int("confu", "n_expert", 8));
    ec.k_expert = static_cast<std::size_t>(cf.get_int("confu", "k_expert", 2));

    auto fill_train = [&](TrainConfig& tc, const std::string& section, std::size_t steps,
                          double lr) {
      tc.steps = static_cast<std::size_t>(cf.get_int(section, "steps",
                                                     static_cast<long long>(steps)));
      tc.lr = cf.get_double(section, "lr", lr);
      tc.unroll_depth = static_cast<std::size_t>(cf.get_int(section, "unroll_depth", 3));
      tc.anchors_per_seq = static_cast<std::size_t>(cf.get_int(section, "anchors_per_seq", 8));
      tc.replication = static_cast<std::size_t>(cf.get_int(section, "replication", 1));
      tc.min_gap = static_cast<std::size_t>(cf.get_int(section, "min_gap", 0));
      tc.seed = static_cast<std::uint64_t>(cf.get_int(section, "seed", 1));
    };
    fill_train(ec.pretrain, "pretrain", 2000, 2e-3);
    fill_train(ec.draft_train, "draft_train", 1000, 1e-3);
    fill_train(ec.confu_train, "confu_train", 1000, 1e-3);

    ec.corpus_spec.n_topics = static_cast<std::size_t>(cf.get_int("corpus", "topics", 2));
    ec.corpus_spec.n_symbols = static_cast<std::size_t>(cf.get_int("corpus", "symbols", 10));
    ec.corpus_spec.seq_len = static_cast<std::size_t>(cf.get_int("corpus", "seq_len", 96));
    ec.corpus_spec.n_sequences =
        static_cast<std::size_t>(cf.get_int("corpus", "sequences", 64));
    ec.corpus_spec.main_prob = cf.get_double("corpus", "main_prob", 0.75);
    ec.corpus_spec.phase_len =
        static_cast<std::size_t>(cf.get_int("corpus", "phase_len", 0));
    ec.corpus_spec.seed = static_cast<std::uint64_t>(cf.get_int("corpus", "seed", 1));
    ec.corpus_file = cf.get("corpus", "file", "");
    ec.init_seed = static_cast<std::uint64_t>(cf.get_int("model", "seed", 1));

    if (auto seed = env_seed_override()) {
      ec.init_seed = *seed;
      ec.pretrain.seed = *seed;
      ec.draft_train.seed = *seed;
      ec.confu_train.seed = *seed;
      ec.corpus_spec.seed = *seed;
    }
    ec.target.validate();
    ec.draft.validate();
    return ec;
  }

  Corpus load_corpus() const {
    if (!corpus_file.empty()) return corpus_from_file(corpus_file, corpus_spec.seq_len);
    return synthetic_corpus(corpus_spec).corpus;
  }
};

// ---------------------------------------------------------------------------
// Workspace: a parameter store with models bound, from scratch or checkpoint
// ---------------------------------------------------------------------------

struct Workspace {
  ExperimentConfig cfg;
  ParamStore store;
  std::unique_ptr<TargetModel> target;
  std::unique_ptr<DraftModel> draft;
  ConfuBindings bindings;
  bool has_confu_params = false;
};

inline std::vector<double> mean_token_embedding(const ParamStore& store) {
  const TensorF64& t = store.tensor("target.tok_emb");
  std::vector<double> m(t.cols(), 0.0);
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m[c] += t.at(r, c);
  for (double& v : m) v /= static_cast<double>(t.rows());
  return m;
}

inline void add_confu_params(Workspace& ws) {
  SplitMix rng(mix64(ws.cfg.init_seed, 0xC0FFEE));
  ws.bindings.soft =
      init_soft_prompts(ws.store, ws.cfg.target.n_layers, ws.cfg.soft_count,
                        ws.cfg.target.d_model, rng);
  std::vector<double> center = mean_token_embedding(ws.store);
  MoEConfig con_cfg{ws.cfg.n_expert, ws.cfg.k_expert, 3 * ws.cfg.target.d_model,
                    ws.cfg.target.d_model};
  MoEConfig f_cfg{ws.cfg.n_expert, ws.cfg.k_expert, ws.cfg.target.d_model,
                  ws.cfg.target.d_model};
  ws.bindings.moe_con = init_moe(ws.store, con_cfg, "confu.moe_con", center, rng);
  ws.bindings.moe_f = init_moe(ws.store, f_cfg, "confu.moe_f", center, rng);
  ws.store.add("confu.con_static", gaussian_tensor({1, ws.cfg.target.d_model}, 0.02, rng));
  ws.store.add("confu.f_static", gaussian_tensor({1, ws.cfg.target.d_model}, 0.02, rng));
  ws.has_confu_params = true;
}

// Rebinds MoE descriptors to an existing store (after checkpoint load).
inline void bind_confu(Workspace& ws, bool use_moe) {
  ws.bindings.soft.count = ws.cfg.soft_count;
  ws.bindings.soft.prefix = "confu.soft";
  ws.bindings.use_moe = use_moe;
  MoEConfig con_cfg{ws.cfg.n_expert, ws.cfg.k_expert, 3 * ws.cfg.target.d_model,
                    ws.cfg.target.d_model};
  MoEConfig f_cfg{ws.cfg.n_expert, ws.cfg.k_expert, ws.cfg.target.d_model,
                  ws.cfg.target.d_model};
  ws.bindings.moe_con = MoEEmbedder{con_cfg, "confu.moe_con"};
  ws.bindings.moe_f = MoEEmbedder{f_cfg, "confu.moe_f"};
}

inline std::map<std::string, double> config_meta(const ExperimentConfig& cfg) {
  return {
      {"d_model", static_cast<double>(cfg.target.d_model)},
      {"n_layers", static_cast<double>(cfg.target.n_layers)},
      {"n_heads", static_cast<double>(cfg.target.n_heads)},
      {"draft_heads", static_cast<double>(cfg.draft.n_heads)},
      {"vocab", static_cast<double>(cfg.target.vocab_size)},
      {"max_seq_len", static_cast<double>(cfg.target.max_seq_len)},
      {"soft_count", static_cast<double>(cfg.soft_count)},
      {"n_expert", static_cast<double>(cfg.n_expert)},
      {"k_expert", static_cast<double>(cfg.k_expert)},
  };
}

inline ExperimentConfig config_from_meta(const Checkpoint& ckpt, ExperimentConfig base = {}) {
  auto need = [&](const std::string& k) {
    auto it = ckpt.meta.find(k);
    if (it == ckpt.meta.end()) throw FormatError("checkpoint meta missing " + k);
    return it->second;
  };
  base.target.d_model = static_cast<std::size_t>(need("d_model"));
  base.target.n_layers = static_cast<std::size_t>(need("n_layers"));
  base.target.n_heads = static_cast<std::size_t>(need("n_heads"));
  base.target.vocab_size = static_cast<std::size_t>(need("vocab"));
  base.target.max_seq_len = static_cast<std::size_t>(need("max_seq_len"));
  base.target.tap_layers = TargetConfig::default_taps(base.target.n_layers);
  base.draft.d_model = base.target.d_model;
  base.draft.n_heads = static_cast<std::size_t>(need("draft_heads"));
  base.draft.vocab_size = base.target.vocab_size;
  base.draft.max_seq_len = base.target.max_seq_len;
  base.soft_count = static_cast<std::size_t>(need("soft_count"));
  base.n_expert = static_cast<std::size_t>(need("n_expert"));
  base.k_expert = static_cast<std::size_t>(need("k_expert"));
  return base;
}

inline Workspace workspace_from_checkpoint(const std::string& path, ExperimentConfig base = {}) {
  Checkpoint ckpt = load_checkpoint(path);
  Workspace ws;
  ws.cfg = config_from_meta(ckpt, std::move(base));
  load_into_store(ckpt, ws.store);
  ws.target = std::make_unique<TargetModel>(ws.cfg.target, ws.store);
  if (ws.store.has("draft.w_proj"))
    ws.draft = std::make_unique<DraftModel>(ws.cfg.draft, ws.store);
  ws.has_confu_params = ws.store.has("confu.moe_con.router");
  if (ws.has_confu_params) bind_confu(ws, /*use_moe=*/true);
  return ws;
}

// ---------------------------------------------------------------------------
// Stages. Each stage loads its dependency checkpoint, trains, and persists.
// ---------------------------------------------------------------------------

inline void stage_train_target(const ExperimentConfig& cfg, const Corpus& corpus,
                               const std::string& out_path, const StepHook& hook = {}) {
  Workspace ws;
  ws.cfg = cfg;
  TargetModel::init_params(ws.store, cfg.target, cfg.init_seed);
  ws.target = std::make_unique<TargetModel>(cfg.target, ws.store);
  train_target_lm(*ws.target, ws.store, corpus, cfg.pretrain, hook);
  auto meta = config_meta(cfg);
  meta["stage"] = 0.0;
  meta["step"] = static_cast<double>(cfg.pretrain.steps);
  save_checkpoint(out_path, checkpoint_from_store(ws.store, meta));
}

inline void stage_train_draft(const ExperimentConfig& base, const Corpus& corpus,
                              const std::string& target_ckpt, const std::string& out_path,
                              const StepHook& hook = {}) {
  Workspace ws = workspace_from_checkpoint(target_ckpt, base);
  ws.cfg.draft_train = base.draft_train;
  if (!ws.store.has("draft.w_proj"))
    DraftModel::init_params(ws.store, ws.cfg.draft, ws.cfg.init_seed + 1);
  ws.draft = std::make_unique<DraftModel>(ws.cfg.draft, ws.store);
  train_draft_baseline(*ws.target, *ws.draft, ws.store, corpus, ws.cfg.draft_train, hook);
  auto meta = config_meta(ws.cfg);
  meta["stage"] = 1.0;
  meta["step"] = static_cast<double>(ws.cfg.draft_train.steps);
  save_checkpoint(out_path, checkpoint_from_store(ws.store, meta));
}

// variant: kConfu (MoE + replication), kConfuNoMoe (static embeddings),
// kConfuNoMoeNoRepl (static embeddings, l = 0).
inline void stage_train_confu(const ExperimentConfig& base, const Corpus& corpus,
                              const std::string& draft_ckpt, BenchMode variant,
                              const std::string& out_path, const StepHook& hook = {}) {
  if (variant == BenchMode::kBaseline)
    throw ConfigError("train-confu: baseline is not a confu variant");
  Workspace ws = workspace_from_checkpoint(draft_ckpt, base);
  if (!ws.draft) throw ConfigError("train-confu: checkpoint lacks a draft head (train-draft first)");
  ws.cfg.confu_train = base.confu_train;
  if (!ws.has_confu_params) add_confu_params(ws);
  bool use_moe = variant == BenchMode::kConfu;
  bind_confu(ws, use_moe);
  TrainConfig tc = ws.cfg.confu_train;
  if (variant == BenchMode::kConfuNoMoeNoRepl) tc.replication = 0;
  train_confu_stage(*ws.target, *ws.draft, ws.store, ws.bindings, corpus, tc, hook);
  auto meta = config_meta(ws.cfg);
  meta["stage"] = 2.0;
  meta["variant"] = static_cast<double>(static_cast<int>(variant));
  meta["use_moe"] = use_moe ? 1.0 : 0.0;
  meta["step"] = static_cast<double>(tc.steps);
  save_checkpoint(out_path, checkpoint_from_store(ws.store, meta));
}

// Engine factory for a trained checkpoint workspace.
inline SpecEngine engine_for(Workspace& ws, BenchMode mode, DecodeMode dm, std::uint64_t seed,
                             std::optional<int> eos = std::nullopt) {
  if (!ws.draft) throw ConfigError("engine: workspace lacks a draft head");
  dm.mode = mode == BenchMode::kBaseline ? DraftMode::kBaseline : DraftMode::kConfu;
  if (mode != BenchMode::kBaseline) {
    if (!ws.has_confu_params) throw ConfigError("engine: checkpoint lacks confu parameters");
    bind_confu(ws, mode == BenchMode::kConfu);
  }
  return SpecEngine(*ws.target, *ws.draft, ws.bindings, dm, seed, eos);
}

}  // namespace confu
