// confu: train, decode, benchmark, and verify the speculative decoding engine.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "confu/bench.hpp"
#include "confu/lossless.hpp"
#include "confu/pipeline.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace confu;

namespace {

ExperimentConfig load_experiment_config(const std::string& config_path) {
  if (config_path.empty()) return ExperimentConfig::from_config(ConfigFile{});
  return ExperimentConfig::from_config(ConfigFile::from_file(config_path));
}

StepHook jsonl_hook(std::ofstream& out, const std::string& stage) {
  return [&out, stage](std::size_t step, double loss) {
    json j = {{"step", step}, {"stage", stage}, {"loss", loss}};
    out << j.dump() << "\n";
  };
}

json metrics_json(const Metrics& m) {
  return json{{"tau", m.tau},
              {"tokens", m.tokens},
              {"rounds", m.rounds},
              {"draft_rows", m.draft_rows},
              {"contemplate_rows", m.contemplate_rows},
              {"wall_ns", m.wall_ns}};
}

void apply_seed_override(ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.init_seed = seed;
  cfg.pretrain.seed = seed;
  cfg.draft_train.seed = seed;
  cfg.confu_train.seed = seed;
  cfg.corpus_spec.seed = seed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"confu: future-aware speculative decoding at desk scale"};
  app.require_subcommand(1);

  std::string config_path, out_path, ckpt_path, mode_str = "confu", prompt;
  std::string target_ckpt, draft_ckpt;
  std::uint64_t seed = 0;
  bool have_seed = false;
  double temperature = 1.0;
  std::size_t nodes = 30, branch_k = 2, max_tokens = 48, trials = 20000, prompt_len = 2;
  bool exhaustive = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "config file (key=value sections)");
    cmd->add_option("--seed", seed, "seed override")->each([&](const std::string&) {
      have_seed = true;
    });
    cmd->add_option("--out", out_path, "output path");
  };

  CLI::App* train_target = app.add_subcommand("train-target", "pretrain the tiny target LM");
  add_common(train_target);

  CLI::App* train_draft = app.add_subcommand("train-draft", "train the baseline draft head");
  add_common(train_draft);
  train_draft->add_option("--target-ckpt", target_ckpt, "target checkpoint (default from --out dir)");

  CLI::App* train_confu = app.add_subcommand("train-confu", "train a confu variant from the baseline draft");
  add_common(train_confu);
  train_confu->add_option("--mode", mode_str, "confu | confu-no-moe | confu-no-moe-no-repl");
  train_confu->add_option("--draft-ckpt", draft_ckpt, "baseline draft checkpoint");

  CLI::App* decode = app.add_subcommand("decode", "generate text from a checkpoint");
  add_common(decode);
  decode->add_option("--ckpt", ckpt_path, "checkpoint to decode with")->required();
  decode->add_option("--prompt", prompt, "prompt text")->required();
  decode->add_option("--mode", mode_str, "baseline | confu | confu-no-moe | confu-no-moe-no-repl");
  decode->add_option("--temperature", temperature, "sampling temperature (0 = greedy)");
  decode->add_option("--nodes", nodes, "draft tree budget T");
  decode->add_option("--branch", branch_k, "draft tree branch top-k");
  decode->add_option("--max-tokens", max_tokens, "tokens to generate");

  CLI::App* bench = app.add_subcommand("bench", "run the experiment grid and emit CSV + JSONL");
  add_common(bench);

  CLI::App* verify = app.add_subcommand("verify-lossless",
                                        "certify that decoding preserves the target distribution");
  add_common(verify);
  verify->add_option("--ckpt", ckpt_path, "checkpoint to verify")->required();
  verify->add_flag("--exhaustive", exhaustive, "enumerate all randomness (tiny configs only)");
  verify->add_option("--trials", trials, "monte-carlo trials when not exhaustive");
  verify->add_option("--mode", mode_str, "baseline | confu");
  verify->add_option("--temperature", temperature, "sampling temperature");
  verify->add_option("--nodes", nodes, "draft tree budget T");
  verify->add_option("--branch", branch_k, "draft tree branch top-k");
  verify->add_option("--max-tokens", max_tokens, "output length under test");
  verify->add_option("--prompt-len", prompt_len, "prompt length (tokens 1..len)");

  CLI::App* report = app.add_subcommand("report", "join bench CSVs into a comparison table");
  add_common(report);
  std::vector<std::string> report_paths;
  report->add_option("paths", report_paths, "bench CSV files")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_target || *train_draft || *train_confu) {
      ExperimentConfig cfg = load_experiment_config(config_path);
      if (have_seed) apply_seed_override(cfg, seed);
      if (out_path.empty()) out_path = ".";
      fs::create_directories(out_path);
      Corpus corpus = cfg.load_corpus();
      std::ofstream log(out_path + "/train_log.jsonl", std::ios::app);

      if (*train_target) {
        stage_train_target(cfg, corpus, out_path + "/target.ckpt", jsonl_hook(log, "target"));
        std::cout << "wrote " << out_path << "/target.ckpt\n";
      } else if (*train_draft) {
        std::string dep = target_ckpt.empty() ? out_path + "/target.ckpt" : target_ckpt;
        if (!fs::exists(dep)) throw ConfigError("train-draft: missing target checkpoint " + dep);
        stage_train_draft(cfg, corpus, dep, out_path + "/draft_baseline.ckpt",
                          jsonl_hook(log, "draft-baseline"));
        std::cout << "wrote " << out_path << "/draft_baseline.ckpt\n";
      } else {
        BenchMode variant = bench_mode_from(mode_str);
        std::string dep = draft_ckpt.empty() ? out_path + "/draft_baseline.ckpt" : draft_ckpt;
        if (!fs::exists(dep)) throw ConfigError("train-confu: missing draft checkpoint " + dep);
        std::string out_file = out_path + "/" + checkpoint_name_for(variant);
        stage_train_confu(cfg, corpus, dep, variant, out_file,
                          jsonl_hook(log, bench_mode_name(variant)));
        std::cout << "wrote " << out_file << "\n";
      }
      return 0;
    }

    if (*decode) {
      Workspace ws = workspace_from_checkpoint(ckpt_path);
      BenchMode mode = bench_mode_from(mode_str);
      DecodeMode dm;
      dm.temperature = temperature;
      dm.rule = default_rule_for(temperature);
      dm.draft_budget = nodes;
      dm.branch_k = branch_k;
      std::vector<int> tokens = {kBosToken};
      for (int t : tokenize_bytes(prompt)) tokens.push_back(t);
      SpecEngine eng = engine_for(ws, mode, dm, have_seed ? seed : 1, kEosToken);
      GenerateResult r = eng.generate(tokens, max_tokens);
      std::cout << detokenize_bytes(r.tokens) << "\n";
      std::cout << metrics_json(r.metrics).dump() << "\n";
      return 0;
    }

    if (*bench) {
      ConfigFile cf = config_path.empty() ? ConfigFile{} : ConfigFile::from_file(config_path);
      ExperimentSpec spec = ExperimentSpec::from_config(cf);
      if (have_seed) spec.seeds = {seed};
      if (!out_path.empty()) spec.out_path = out_path;
      GateUsage gates;
      BenchReport rep = run_bench(spec, &gates, false, &std::cerr);
      std::string csv_path = spec.out_path + ".csv";
      std::ofstream csv(csv_path, std::ios::binary | std::ios::trunc);
      csv << render_csv(rep);
      std::ofstream jsonl(spec.out_path + ".jsonl", std::ios::trunc);
      for (const BenchRow& row : rep.rows) {
        json j = {{"mode", row.mode},       {"temperature", row.temperature},
                  {"budget", row.budget},   {"tau", row.tau},
                  {"sr_proxy", row.sr_proxy}, {"tokens", row.tokens},
                  {"rounds", row.rounds},   {"draft_rows", row.draft_rows},
                  {"contemplate_rows", row.contemplate_rows}, {"wall_ns", row.wall_ns}};
        jsonl << j.dump() << "\n";
      }
      json gate_json;
      for (auto& [e, c] : gates.con) gate_json["con"][std::to_string(e)] = c;
      for (auto& [e, c] : gates.f) gate_json["f"][std::to_string(e)] = c;
      std::ofstream gate_out(spec.out_path + "_gates.json", std::ios::trunc);
      gate_out << gate_json.dump(2) << "\n";
      std::cout << "wrote " << csv_path << "\n";
      return 0;
    }

    if (*verify) {
      Workspace ws = workspace_from_checkpoint(ckpt_path);
      BenchMode mode = bench_mode_from(mode_str);
      DecodeMode dm;
      dm.temperature = temperature;
      dm.rule = AcceptRule::kLossless;
      dm.draft_budget = nodes;
      dm.branch_k = branch_k;
      std::vector<int> prompt_tokens;
      for (std::size_t i = 0; i < prompt_len; ++i)
        prompt_tokens.push_back(static_cast<int>((i + 1) % ws.cfg.target.vocab_size));
      std::uint64_t s = have_seed ? seed : 1;

      LosslessReport rep;
      if (exhaustive) {
        if (ws.cfg.target.vocab_size > 8 || max_tokens > 4)
          throw ConfigError(
              "verify-lossless: exhaustive mode requires vocab <= 8 and max-tokens <= 4; "
              "use --trials for larger configs");
        SpecEngine eng = engine_for(ws, mode, dm, s);
        rep = verify_lossless_exhaustive(eng, *ws.target, prompt_tokens, max_tokens);
        std::cout << (rep.pass ? "PASS" : "FAIL") << " exhaustive tv=" << rep.total_variation
                  << " sequences=" << rep.sequences << "\n";
      } else {
        auto make = [&](std::uint64_t trial_seed) {
          return engine_for(ws, mode, dm, trial_seed);
        };
        rep = verify_lossless_monte_carlo(make, *ws.target, prompt_tokens, max_tokens, trials,
                                          temperature, s);
        std::cout << (rep.pass ? "PASS" : "FAIL") << " monte-carlo p=" << rep.p_value
                  << " trials=" << rep.trials << "\n";
      }
      return rep.pass ? 0 : 1;
    }

    if (*report) {
      std::vector<BenchReport> reports;
      for (const std::string& p : report_paths) {
        std::ifstream in(p, std::ios::binary);
        if (!in) throw ConfigError("report: cannot open " + p);
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        reports.push_back(parse_csv(text));
      }
      JoinedReport joined = join_reports(reports);
      std::cout << joined.table;
      if (!out_path.empty()) {
        std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
        out << joined.csv;
        std::cout << "wrote " << out_path << "\n";
      }
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
