#pragma once

#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "confu/config_file.hpp"
#include "confu/pipeline.hpp"

namespace confu {

// ---------------------------------------------------------------------------
// Experiment grid
// ---------------------------------------------------------------------------

struct ExperimentSpec {
  std::vector<BenchMode> modes{BenchMode::kBaseline, BenchMode::kConfu};
  std::vector<double> temperatures{0.0, 1.0};
  std::vector<std::size_t> budgets{30};
  std::size_t branch_k = 2;
  std::vector<std::uint64_t> seeds{1};
  std::size_t n_prompts = 8;
  std::size_t prompt_len = 16;
  std::size_t max_tokens = 48;
  std::string ckpt_dir = ".";
  std::string out_path = "bench";
  std::uint64_t prompt_seed = 9000;

  void validate() const {
    if (modes.empty()) throw ConfigError("bench: need at least one mode");
    if (temperatures.empty() || seeds.empty()) throw ConfigError("bench: empty grid axis");
    for (std::size_t b : budgets)
      if (b < 1) throw ConfigError("bench: budgets must be >= 1");
    if (budgets.empty()) throw ConfigError("bench: empty budget axis");
  }

  static ExperimentSpec from_config(const ConfigFile& cf) {
    ExperimentSpec spec;
    spec.modes.clear();
    for (const std::string& m : cf.get_list("bench", "modes", "baseline,confu"))
      spec.modes.push_back(bench_mode_from(m));
    spec.temperatures.clear();
    for (const std::string& t : cf.get_list("bench", "temperatures", "0,1.0"))
      spec.temperatures.push_back(std::stod(t));
    spec.budgets.clear();
    for (const std::string& b : cf.get_list("bench", "budgets", "30"))
      spec.budgets.push_back(static_cast<std::size_t>(std::stoull(b)));
    spec.branch_k = static_cast<std::size_t>(cf.get_int("bench", "branch_k", 2));
    spec.seeds.clear();
    for (const std::string& s : cf.get_list("bench", "seeds", "1"))
      spec.seeds.push_back(static_cast<std::uint64_t>(std::stoull(s)));
    spec.n_prompts = static_cast<std::size_t>(cf.get_int("bench", "prompts", 8));
    spec.prompt_len = static_cast<std::size_t>(cf.get_int("bench", "prompt_len", 16));
    spec.max_tokens = static_cast<std::size_t>(cf.get_int("bench", "max_tokens", 48));
    spec.ckpt_dir = cf.get("bench", "ckpt_dir", ".");
    spec.out_path = cf.get("bench", "out", "bench");
    spec.prompt_seed = static_cast<std::uint64_t>(cf.get_int("bench", "prompt_seed", 9000));
    if (auto seed = env_seed_override()) spec.seeds = {*seed};
    spec.validate();
    return spec;
  }

  ConfigFile to_config() const {
    ConfigFile cf;
    std::string modes_s;
    for (BenchMode m : modes) modes_s += (modes_s.empty() ? "" : ",") + bench_mode_name(m);
    cf.set("bench", "modes", modes_s);
    auto join_d = [](const std::vector<double>& v) {
      std::string s;
      for (double x : v) {
        std::ostringstream os;
        os << x;
        s += (s.empty() ? "" : ",") + os.str();
      }
      return s;
    };
    auto join_u = [](const auto& v) {
      std::string s;
      for (auto x : v) s += (s.empty() ? "" : ",") + std::to_string(x);
      return s;
    };
    cf.set("bench", "temperatures", join_d(temperatures));
    cf.set("bench", "budgets", join_u(budgets));
    cf.set("bench", "branch_k", std::to_string(branch_k));
    cf.set("bench", "seeds", join_u(seeds));
    cf.set("bench", "prompts", std::to_string(n_prompts));
    cf.set("bench", "prompt_len", std::to_string(prompt_len));
    cf.set("bench", "max_tokens", std::to_string(max_tokens));
    cf.set("bench", "ckpt_dir", ckpt_dir);
    cf.set("bench", "out", out_path);
    cf.set("bench", "prompt_seed", std::to_string(prompt_seed));
    return cf;
  }
};

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct BenchRow {
  std::string mode;
  double temperature = 0.0;
  std::size_t budget = 0;
  double tau = 0.0;
  double sr_proxy = 0.0;  // generated tokens per target forward pass
  std::size_t tokens = 0;
  std::size_t rounds = 0;
  std::size_t draft_rows = 0;
  std::size_t contemplate_rows = 0;
  std::size_t commit_rows = 0;
  std::size_t target_forwards = 0;
  std::uint64_t wall_ns = 0;
  std::size_t runs = 0;  // prompts x seeds aggregated into this row
};

struct BenchReport {
  std::vector<BenchRow> rows;
};

inline std::string csv_quote(const std::string& s) {
  bool need = s.find_first_of(",\"\r\n") != std::string::npos;
  if (!need) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out += "\"";
  return out;
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

// RFC-4180: CRLF line endings, quoted fields where needed.
inline std::string render_csv(const BenchReport& report) {
  std::ostringstream out;
  // Wall time deliberately stays out of the CSV (it lives in the JSONL log)
  // so reruns with identical seeds produce identical CSV bytes.
  out << "mode,temperature,budget,tau,sr_proxy,tokens,rounds,draft_rows,contemplate_rows,"
         "commit_rows,target_forwards,runs\r\n";
  for (const BenchRow& r : report.rows) {
    out << csv_quote(r.mode) << ',' << format_double(r.temperature) << ',' << r.budget << ','
        << format_double(r.tau) << ',' << format_double(r.sr_proxy) << ',' << r.tokens << ','
        << r.rounds << ',' << r.draft_rows << ',' << r.contemplate_rows << ',' << r.commit_rows
        << ',' << r.target_forwards << ',' << r.runs << "\r\n";
  }
  return out.str();
}

inline BenchReport parse_csv(const std::string& text) {
  BenchReport report;
  std::istringstream in(text);
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
    if (line.empty()) continue;
    if (header) {
      header = false;
      if (line.rfind("mode,", 0) != 0) throw FormatError("bench csv: unexpected header");
      continue;
    }
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      char c = line[i];
      if (quoted) {
        if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else if (c == '"') {
          quoted = false;
        } else {
          cur.push_back(c);
        }
      } else if (c == '"') {
        quoted = true;
      } else if (c == ',') {
        fields.push_back(cur);
        cur.clear();
      } else {
        cur.push_back(c);
      }
    }
    fields.push_back(cur);
    if (fields.size() != 12) throw FormatError("bench csv: wrong column count");
    BenchRow r;
    r.mode = fields[0];
    r.temperature = std::stod(fields[1]);
    r.budget = static_cast<std::size_t>(std::stoull(fields[2]));
    r.tau = std::stod(fields[3]);
    r.sr_proxy = std::stod(fields[4]);
    r.tokens = static_cast<std::size_t>(std::stoull(fields[5]));
    r.rounds = static_cast<std::size_t>(std::stoull(fields[6]));
    r.draft_rows = static_cast<std::size_t>(std::stoull(fields[7]));
    r.contemplate_rows = static_cast<std::size_t>(std::stoull(fields[8]));
    r.commit_rows = static_cast<std::size_t>(std::stoull(fields[9]));
    r.target_forwards = static_cast<std::size_t>(std::stoull(fields[10]));
    r.runs = static_cast<std::size_t>(std::stoull(fields[11]));
    report.rows.push_back(std::move(r));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

// Deterministic evaluation prompts drawn from the same synthetic family as
// the training corpus but under an independent seed.
inline std::vector<std::vector<int>> bench_prompts(const ExperimentConfig& cfg,
                                                   const ExperimentSpec& spec) {
  SyntheticSpec eval = cfg.corpus_spec;
  eval.seed = mix64(spec.prompt_seed, 0xE7A1);
  eval.n_sequences = spec.n_prompts;
  eval.seq_len = std::max<std::size_t>(spec.prompt_len + 1, 8);
  SyntheticCorpus sc = synthetic_corpus(eval);
  std::vector<std::vector<int>> prompts;
  for (const auto& seq : sc.corpus.sequences)
    prompts.emplace_back(seq.begin(), seq.begin() + std::min(spec.prompt_len, seq.size()));
  return prompts;
}

struct GateUsage {
  std::map<std::size_t, std::size_t> con, f;
};

inline BenchReport run_bench(const ExperimentSpec& spec, GateUsage* gates = nullptr,
                             bool quiet = true, std::ostream* log = nullptr) {
  spec.validate();
  BenchReport report;
  for (BenchMode mode : spec.modes) {
    std::string path = spec.ckpt_dir + "/" + checkpoint_name_for(mode);
    {
      std::ifstream probe(path);
      if (!probe) throw ConfigError("bench: missing checkpoint " + path);
    }
    Workspace ws = workspace_from_checkpoint(path);
    std::vector<std::vector<int>> prompts = bench_prompts(ws.cfg, spec);
    for (double temp : spec.temperatures) {
      for (std::size_t budget : spec.budgets) {
        BenchRow row;
        row.mode = bench_mode_name(mode);
        row.temperature = temp;
        row.budget = budget;
        double tau_weighted = 0.0;
        for (std::uint64_t seed : spec.seeds) {
          DecodeMode dm;
          dm.temperature = temp;
          dm.rule = default_rule_for(temp);
          dm.draft_budget = budget;
          dm.branch_k = spec.branch_k;
          SpecEngine eng = engine_for(ws, mode, dm, seed, kEosToken);
          for (std::size_t p = 0; p < prompts.size(); ++p) {
            GenerateResult r =
                eng.generate(prompts[p], spec.max_tokens, false, mix64(seed, p + 1));
            row.tokens += r.metrics.tokens;
            row.rounds += r.metrics.rounds;
            row.draft_rows += r.metrics.draft_rows;
            row.contemplate_rows += r.metrics.contemplate_rows;
            row.commit_rows += r.metrics.commit_rows;
            row.target_forwards += r.metrics.target_forwards;
            row.wall_ns += r.metrics.wall_ns;
            tau_weighted += r.metrics.tau * static_cast<double>(r.metrics.rounds);
            row.runs += 1;
          }
          if (gates && mode == BenchMode::kConfu) {
            for (auto& [e, c] : eng.gate_usage_con()) gates->con[e] += c;
            for (auto& [e, c] : eng.gate_usage_f()) gates->f[e] += c;
          }
        }
        row.tau = row.rounds > 0 ? tau_weighted / static_cast<double>(row.rounds) : 1.0;
        row.sr_proxy = row.target_forwards > 0
                           ? static_cast<double>(row.tokens) /
                                 static_cast<double>(row.target_forwards)
                           : 0.0;
        if (!quiet && log)
          *log << row.mode << " T=" << temp << " budget=" << budget << " tau=" << row.tau
               << "\n";
        report.rows.push_back(std::move(row));
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Report joining (the `report` subcommand)
// ---------------------------------------------------------------------------

// Joins reports, adds tau ratios against the baseline at matching
// (temperature, budget) cells, and renders an aligned text table.
struct JoinedReport {
  BenchReport merged;
  std::string table;
  std::string csv;
};

inline JoinedReport join_reports(const std::vector<BenchReport>& reports) {
  JoinedReport out;
  for (const BenchReport& r : reports)
    out.merged.rows.insert(out.merged.rows.end(), r.rows.begin(), r.rows.end());

  std::map<std::pair<double, std::size_t>, double> baseline_tau;
  for (const BenchRow& r : out.merged.rows)
    if (r.mode == "baseline") baseline_tau[{r.temperature, r.budget}] = r.tau;

  std::ostringstream csv;
  csv << "mode,temperature,budget,tau,sr_proxy,tau_vs_baseline\r\n";
  std::ostringstream tbl;
  tbl << std::left << std::setw(22) << "mode" << std::right << std::setw(8) << "temp"
      << std::setw(8) << "budget" << std::setw(10) << "tau" << std::setw(10) << "sr"
      << std::setw(12) << "tau/base" << "\n";
  for (const BenchRow& r : out.merged.rows) {
    auto it = baseline_tau.find({r.temperature, r.budget});
    double ratio = it != baseline_tau.end() && it->second > 0.0 ? r.tau / it->second : 0.0;
    csv << csv_quote(r.mode) << ',' << format_double(r.temperature) << ',' << r.budget << ','
        << format_double(r.tau) << ',' << format_double(r.sr_proxy) << ','
        << (ratio > 0.0 ? format_double(ratio) : "") << "\r\n";
    tbl << std::left << std::setw(22) << r.mode << std::right << std::setw(8) << std::fixed
        << std::setprecision(2) << r.temperature << std::setw(8) << r.budget << std::setw(10)
        << std::setprecision(4) << r.tau << std::setw(10) << r.sr_proxy << std::setw(12);
    if (ratio > 0.0)
      tbl << std::setprecision(4) << ratio;
    else
      tbl << "-";
    tbl << "\n";
  }
  out.csv = csv.str();
  out.table = tbl.str();
  return out;
}

}  // namespace confu
