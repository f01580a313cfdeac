#pragma once

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <thread>

#include "sat/runlog.hpp"

namespace sat {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitViolation = 2;

struct CliOptions {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string mode;  // empty = from config
  bool strict = false;
};

inline std::uint64_t parse_seed_text(const std::string& text, const std::string& what) {
  std::uint64_t v = 0;
  const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
  if (r.ec != std::errc() || r.ptr != text.data() + text.size())
    throw ConfigError(what, "expected an unsigned integer, got '" + text + "'");
  return v;
}

// Precedence: --seed, then SAT_MASTER_SEED, then the config file.
inline RunConfig load_run_config(const CliOptions& o, SeedInfo& seed, std::ostream& err) {
  require(!o.config.empty(), "--config is required");
  std::vector<std::string> warnings;
  RunConfig cfg = parse_config(read_json_file(o.config), o.strict, &warnings);
  for (const auto& w : warnings) err << "warning: " << w << "\n";
  seed = {cfg.seed, "config"};
  if (const char* env = std::getenv("SAT_MASTER_SEED"); env && *env) {
    seed = {parse_seed_text(env, "SAT_MASTER_SEED"), "env:SAT_MASTER_SEED"};
  }
  if (o.seed) seed = {*o.seed, "flag"};
  cfg.seed = seed.seed;
  if (!o.mode.empty()) {
    if (o.mode != "exact" && o.mode != "sampled") throw ConfigError("mode", "must be exact or sampled");
    cfg.mode = o.mode;
  }
  return cfg;
}

inline std::filesystem::path prepare_out(const std::string& out) {
  require(!out.empty(), "--out is required");
  std::filesystem::path p(out);
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  if (ec || !std::filesystem::is_directory(p)) throw Error("cannot create output directory " + out + ": " + ec.message());
  return p;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot write " + p.string());
  return os;
}

struct RunOutcome {
  std::vector<StageReport> reports;
  RunState final_state;
  std::string error;
};

// Independent suite members, one per worker; results come back in run order.
inline std::vector<RunOutcome> run_suite(std::size_t runs,
                                         const std::function<RunOutcome(std::size_t)>& job) {
  std::vector<RunOutcome> out(runs);
  std::atomic<std::size_t> next{0};
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(runs, std::thread::hardware_concurrency()));
  auto work = [&] {
    for (std::size_t r = next++; r < runs; r = next++) {
      try {
        out[r] = job(r);
      } catch (const std::exception& e) {
        out[r].error = e.what();
      }
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  return out;
}

inline RunOutcome train_one(const RunConfig& cfg, std::size_t run, const std::optional<RunState>& resume = {}) {
  RunOutcome o;
  const auto mdp = resolve_mdp(cfg, run);
  RunState st = resume ? *resume : initial_state(cfg, mdp, run);
  o.reports = run_training(cfg, mdp, st, run);
  o.final_state = std::move(st);
  return o;
}

struct LogWriter {
  std::ofstream log, stages, steps;
  RunTotals totals;

  LogWriter(const std::filesystem::path& dir, const std::string& stem, const RunConfig& cfg, const SeedInfo& seed,
            const std::string& command)
      : log(open_out(dir / (stem + ".jsonl"))),
        stages(open_out(dir / (stem == "run" ? std::string("summary.csv") : stem + "_summary.csv"))),
        steps(open_out(dir / (stem == "run" ? std::string("steps.csv") : stem + "_steps.csv"))) {
    log << header_record(cfg, seed, command).dump() << "\n";
    stages << kStageCsvHeader << "\n";
    steps << kStepCsvHeader << "\n";
  }

  void write(const json& rec) { log << rec.dump() << "\n"; }

  void write(const StageReport& rep) {
    for (std::size_t i = 0; i < rep.steps.size(); ++i) {
      write(step_record(rep, i));
      steps << step_csv_row(rep, i) << "\n";
    }
    write(stage_record(rep));
    stages << stage_csv_row(rep) << "\n";
    totals.add(rep);
  }

  void finish() {
    write(summary_record(totals));
    log.flush();
    stages.flush();
    steps.flush();
    if (!log || !stages || !steps) throw Error("write failure in output directory");
  }
};

inline void print_totals(std::ostream& os, const RunTotals& t) {
  os << "runs=" << t.runs << " stages=" << t.stages << " steps=" << t.steps
     << " realized_gain=" << fmt(t.realized_gain) << " certified_lower=" << fmt(t.certified_lower)
     << " violations(step_lower=" << t.step_lower << " step_upper=" << t.step_upper
     << " step_budget=" << t.step_budget << " stage_lower=" << t.stage_lower << " stage_main=" << t.stage_main
     << " sampled_envelope=" << t.sampled_envelope << ")\n";
}

inline int cmd_train(const CliOptions& o, const std::string& resume_path, std::ostream& os, std::ostream& err) {
  SeedInfo seed;
  const RunConfig cfg = load_run_config(o, seed, err);
  const auto dir = prepare_out(o.out);
  std::optional<RunState> resume;
  if (!resume_path.empty()) {
    require(cfg.suite.count == 0, "--resume applies to single runs, not suites");
    resume = checkpoint_from_json(read_json_file(resume_path));
  }
  const std::size_t runs = cfg.suite.count > 0 ? cfg.suite.count : 1;
  LogWriter w(dir, "run", cfg, seed, "train");
  const auto results = run_suite(runs, [&](std::size_t r) { return train_one(cfg, r, resume); });
  w.totals.runs = runs;
  for (std::size_t r = 0; r < runs; ++r) {
    if (!results[r].error.empty()) {
      w.log.flush();
      throw Error("run " + std::to_string(r) + ": " + results[r].error);
    }
    for (const auto& rep : results[r].reports) w.write(rep);
    w.totals.final_j.push_back(results[r].reports.empty() ? oracle_evaluate(resolve_mdp(cfg, r),
                                                                            results[r].final_state.team)
                                                                 .j
                                                          : results[r].reports.back().cert.j_end);
  }
  w.finish();
  if (cfg.suite.count == 0) {
    auto ck = open_out(dir / "checkpoint.json");
    ck << checkpoint_to_json(results[0].final_state).dump(2) << "\n";
  }
  print_totals(os, w.totals);
  return totals_violate(w.totals, cfg.sampled(), cfg.confidence) ? kExitViolation : kExitOk;
}

inline int cmd_certify(const std::string& log_path, std::ostream& os) {
  std::ifstream in(log_path);
  if (!in) throw Error("cannot open " + log_path);
  const auto rep = certify_log(in);
  for (const auto& m : rep.mismatches) os << "MISMATCH " << m << "\n";
  os << "records=" << rep.records << " steps=" << rep.steps << " stages=" << rep.stages << " swaps=" << rep.swaps
     << " mismatches=" << rep.mismatches.size() << " mode=" << (rep.sampled ? "sampled" : "exact") << "\n";
  const auto& t = rep.totals;
  os << "validity exceptions: step_lower=" << t.step_lower << " step_upper=" << t.step_upper
     << " step_budget=" << t.step_budget << " stage_lower=" << t.stage_lower << " stage_main=" << t.stage_main
     << " sampled_envelope=" << t.sampled_envelope << " kl_radius=" << t.kl_radius;
  if (rep.sampled) os << " (allowed up to conf=" << fmt(rep.conf) << " of steps)";
  os << "\n";
  if (rep.violation) os << "VIOLATION certificate validity does not hold\n";
  return rep.ok() ? kExitOk : kExitViolation;
}

struct SweepRow {
  double delta = 0.0;
  std::size_t violations = 0, checks = 0, steps = 0;
  double rate() const { return checks ? double(violations) / double(checks) : 0.0; }
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::optional<double> slope;  // over rows with a positive rate; absent with fewer than two
  bool monotone = true;
};

inline SweepResult sweep_delta(const RunConfig& base, const std::vector<double>& radii, const SeedInfo& seed,
                               const std::filesystem::path* dir = nullptr) {
  require(!radii.empty(), "sweep-delta: empty radius list");
  for (std::size_t k = 0; k < radii.size(); ++k) {
    if (!(radii[k] > 0.0)) throw ConfigError("radii", "sweep radii must be positive");
    if (k && !(radii[k] > radii[k - 1])) throw ConfigError("radii", "sweep radii must be strictly ascending");
  }
  SweepResult res;
  for (std::size_t k = 0; k < radii.size(); ++k) {
    RunConfig cfg = base;
    cfg.mode = "sampled";
    cfg.radii = {{radii[k]}};
    const std::size_t runs = cfg.suite.count > 0 ? cfg.suite.count : 1;
    const auto results = run_suite(runs, [&](std::size_t r) { return train_one(cfg, r); });
    std::optional<LogWriter> w;
    if (dir) w.emplace(*dir, "sweep_" + std::to_string(k), cfg, seed, "sweep-delta");
    SweepRow row;
    row.delta = radii[k];
    for (std::size_t r = 0; r < runs; ++r) {
      if (!results[r].error.empty()) throw Error("delta " + fmt(radii[k]) + ", run " + std::to_string(r) + ": " + results[r].error);
      for (const auto& rep : results[r].reports) {
        row.violations += rep.raw_violations();
        row.checks += rep.raw_state_checks();
        row.steps += rep.steps.size();
        if (w) w->write(rep);
      }
      if (w && !results[r].reports.empty()) w->totals.final_j.push_back(results[r].reports.back().cert.j_end);
    }
    if (w) {
      w->totals.runs = runs;
      w->finish();
    }
    res.rows.push_back(row);
  }
  std::vector<double> xs, ys;
  for (std::size_t k = 0; k < res.rows.size(); ++k) {
    if (k && res.rows[k].rate() < res.rows[k - 1].rate()) res.monotone = false;
    if (res.rows[k].rate() > 0.0) {
      xs.push_back(res.rows[k].delta);
      ys.push_back(res.rows[k].rate());
    }
  }
  if (xs.size() >= 2) res.slope = log_log_slope(xs, ys);
  return res;
}

inline int cmd_sweep_delta(const CliOptions& o, const std::vector<double>& radii, std::ostream& os,
                           std::ostream& err) {
  SeedInfo seed;
  const RunConfig cfg = load_run_config(o, seed, err);
  const auto dir = prepare_out(o.out);
  const auto res = sweep_delta(cfg, radii, seed, &dir);
  auto csv = open_out(dir / "sweep.csv");
  csv << "delta,violation_rate,raw_violations,raw_state_checks,steps\n";
  for (const auto& r : res.rows)
    csv << fmt(r.delta) << ',' << fmt(r.rate()) << ',' << r.violations << ',' << r.checks << ',' << r.steps << "\n";
  auto js = open_out(dir / "sweep_summary.json");
  js << json{{"slope", res.slope ? json(*res.slope) : json(nullptr)},
             {"monotone_nondecreasing", res.monotone},
             {"radii", radii}}
            .dump(2)
     << "\n";
  for (const auto& r : res.rows) os << "delta=" << fmt(r.delta) << " rate=" << fmt(r.rate()) << "\n";
  os << "slope=" << (res.slope ? fmt(*res.slope) : std::string("absent")) << " monotone=" << res.monotone << "\n";
  return kExitOk;
}

// ---- plug-and-play --------------------------------------------------------

struct SwapSpec {
  std::size_t agent = 0;
  std::size_t after_stage = 1;
  std::vector<double> delta0{0.05};
  std::string kind = "incumbent";  // incumbent | dominance | noisy | logits
  double strength = 2.0;
  double noise = 1.0;
  std::uint64_t seed = 0;
  std::optional<MatrixXd> logits;
};

inline SwapSpec parse_swap_spec(const json& j) {
  SwapSpec s;
  if (!j.is_object()) throw ConfigError("<swap>", "expected an object");
  for (const auto& [k, _] : j.items())
    if (k != "agent" && k != "after_stage" && k != "delta0" && k != "pretrained")
      throw ConfigError("swap." + k, "unknown key");
  try {
    if (j.contains("agent")) s.agent = j.at("agent").get<std::size_t>();
    if (j.contains("after_stage")) s.after_stage = j.at("after_stage").get<std::size_t>();
    if (j.contains("delta0")) s.delta0 = detail::numbers(j.at("delta0"), "swap.delta0");
    if (j.contains("pretrained")) {
      const json& p = j.at("pretrained");
      for (const auto& [k, _] : p.items())
        if (k != "kind" && k != "strength" && k != "noise" && k != "seed" && k != "logits")
          throw ConfigError("swap.pretrained." + k, "unknown key");
      if (p.contains("kind")) s.kind = p.at("kind").get<std::string>();
      if (p.contains("strength")) s.strength = p.at("strength").get<double>();
      if (p.contains("noise")) s.noise = p.at("noise").get<double>();
      if (p.contains("seed")) s.seed = p.at("seed").get<std::uint64_t>();
      if (p.contains("logits")) s.logits = agent_from_json({{"agent", s.agent}, {"logits", p.at("logits")}}).logits();
    }
  } catch (const json::exception& e) {
    throw ConfigError("swap", e.what());
  }
  if (s.kind != "incumbent" && s.kind != "dominance" && s.kind != "noisy" && s.kind != "logits")
    throw ConfigError("swap.pretrained.kind", "must be incumbent, dominance, noisy or logits");
  if (s.kind == "logits" && !s.logits) throw ConfigError("swap.pretrained.logits", "required for kind 'logits'");
  for (double d : s.delta0) detail::range(d > 0.0, "swap.delta0", "must be > 0");
  return s;
}

// Per-state soft improvement of the incumbent: logits + strength * marginal advantage.
inline AgentPolicy dominance_agent(const TabularMdp& mdp, const FactorizedPolicy& team, std::size_t j,
                                   double strength) {
  const auto values = oracle_evaluate(mdp, team);
  const auto anchor = make_surrogate_anchor(mdp, team, values, j);
  return {j, team.agent(j).logits() + strength * anchor.marginal_advantage};
}

inline AgentPolicy build_pretrained(const SwapSpec& s, const TabularMdp& mdp, const FactorizedPolicy& team) {
  require(s.agent < team.num_agents(), "swap: agent index out of range");
  const AgentPolicy& inc = team.agent(s.agent);
  if (s.kind == "incumbent") return inc;
  if (s.kind == "dominance") return dominance_agent(mdp, team, s.agent, s.strength);
  if (s.kind == "noisy") {
    Rng rng(s.seed);
    MatrixXd l = inc.logits();
    for (Eigen::Index a = 0; a < l.rows(); ++a)
      for (Eigen::Index b = 0; b < l.cols(); ++b) l(a, b) += s.noise * rng.normal();
    return {s.agent, std::move(l)};
  }
  require(s.logits->rows() == inc.logits().rows() && s.logits->cols() == inc.logits().cols(),
          "swap: pretrained logits must match the incumbent's alphabet and state count");
  return {s.agent, *s.logits};
}

// next_stage_surrogate: exact surrogate of the team after the first continued stage, anchored at the
// shared pre-swap branch point, so both variants are measured against the same advantages.
struct PlugPlayBranch {
  std::vector<StageReport> continued;
  std::optional<SwapRecord> swap;
  double j_branch = 0.0;  // J at the start of the continuation (after the swap, if any)
  double next_stage_surrogate = 0.0;
  double composite() const {
    double c = 0.0;
    for (const auto& r : continued) c += r.cert.main.composite;
    return c;
  }
  double realized() const { return continued.empty() ? 0.0 : continued.back().cert.j_end - continued.front().cert.j_start; }
  double final_j() const { return continued.empty() ? j_branch : continued.back().cert.j_end; }
  std::size_t violations(bool sampled, double conf) const {
    RunTotals t;
    for (const auto& r : continued) t.add(r);
    if (sampled) return totals_violate(t, true, conf);
    return t.step_lower + t.step_upper + t.step_budget + t.stage_lower + t.stage_main + t.kl_radius;
  }
};

struct PlugPlayResult {
  std::vector<StageReport> base;
  PlugPlayBranch unswapped, swapped;
  std::size_t params_unswapped = 0, params_swapped = 0;
};

inline PlugPlayResult plugplay(const RunConfig& cfg, const SwapSpec& spec) {
  require(cfg.suite.count == 0, "plugplay runs on a single MDP, not a suite");
  require(spec.after_stage <= cfg.stages, "swap: after_stage exceeds the configured stage count");
  const auto mdp = resolve_mdp(cfg, 0);
  PlugPlayResult res;
  RunConfig head = cfg;
  head.stages = spec.after_stage;
  RunState st = initial_state(cfg, mdp);
  res.base = run_training(head, mdp, st);
  const auto branch_values = oracle_evaluate(mdp, st.team);

  auto continue_branch = [&](RunState& s, PlugPlayBranch& br) {
    br.j_branch = oracle_evaluate(mdp, s.team).j;
    if (s.next_stage < cfg.stages) br.continued.push_back(run_stage(cfg, mdp, s));
    br.next_stage_surrogate = exact_surrogate(mdp, branch_values, s.team);
    for (auto& r : run_training(cfg, mdp, s)) br.continued.push_back(std::move(r));
  };
  RunState a = st, b = st;
  continue_branch(a, res.unswapped);
  res.swapped.swap = swap_agent(b, spec.agent, build_pretrained(spec, mdp, b.team), spec.delta0);
  continue_branch(b, res.swapped);
  res.params_unswapped = a.team.parameter_count();
  res.params_swapped = b.team.parameter_count();
  return res;
}

inline const char* kPlugPlayCsvHeader =
    "variant,composite_gain,next_stage_surrogate,realized_gain,final_j,violations,relative_cost";

inline int cmd_plugplay(const CliOptions& o, const std::string& swap_path, std::ostream& os, std::ostream& err) {
  SeedInfo seed;
  const RunConfig cfg = load_run_config(o, seed, err);
  const auto dir = prepare_out(o.out);
  const SwapSpec spec = parse_swap_spec(read_json_file(swap_path));
  const auto res = plugplay(cfg, spec);

  auto write_branch = [&](const std::string& stem, const PlugPlayBranch& br) {
    LogWriter w(dir, stem, cfg, seed, "plugplay");
    w.totals.runs = 1;
    for (const auto& rep : res.base) w.write(rep);
    if (br.swap) w.write(swap_record(*br.swap));
    for (const auto& rep : br.continued) w.write(rep);
    w.totals.final_j.push_back(br.final_j());
    w.finish();
    return w.totals;
  };
  const auto ta = write_branch("plugplay_unswapped", res.unswapped);
  const auto tb = write_branch("plugplay_swapped", res.swapped);

  const double cost = double(res.params_swapped) / double(res.params_unswapped);
  auto csv = open_out(dir / "plugplay.csv");
  csv << kPlugPlayCsvHeader << "\n";
  auto row = [&](const char* name, const PlugPlayBranch& br) {
    csv << name << ',' << fmt(br.composite()) << ',' << fmt(br.next_stage_surrogate) << ',' << fmt(br.realized())
        << ',' << fmt(br.final_j()) << ',' << br.violations(cfg.sampled(), cfg.confidence) << ','
        << fmt(&br == &res.swapped ? cost : 1.0) << "\n";
  };
  row("unswapped", res.unswapped);
  row("swapped", res.swapped);
  const auto& A = res.unswapped;
  const auto& B = res.swapped;
  csv << "delta," << fmt(B.composite() - A.composite()) << ',' << fmt(B.next_stage_surrogate - A.next_stage_surrogate)
      << ',' << fmt(B.realized() - A.realized()) << ',' << fmt(B.final_j() - A.final_j()) << ','
      << (long long)(B.violations(cfg.sampled(), cfg.confidence)) - (long long)(A.violations(cfg.sampled(), cfg.confidence))
      << ',' << fmt(cost - 1.0) << "\n";
  os << "next_stage_surrogate unswapped=" << fmt(A.next_stage_surrogate) << " swapped=" << fmt(B.next_stage_surrogate)
     << " final_j unswapped=" << fmt(A.final_j()) << " swapped=" << fmt(B.final_j()) << "\n";
  const bool bad = totals_violate(ta, cfg.sampled(), cfg.confidence) || totals_violate(tb, cfg.sampled(), cfg.confidence);
  return bad ? kExitViolation : kExitOk;
}

// ---- oracle dump ----------------------------------------------------------

inline json oracle_dump(const TabularMdp& mdp, const FactorizedPolicy& team) {
  const auto v = oracle_evaluate(mdp, team);
  json q = json::array(), adv = json::array();
  for (std::size_t s = 0; s < mdp.num_states(); ++s) {
    std::vector<double> qs, as;
    for (std::size_t k = 0; k < mdp.joint_count(s); ++k) {
      qs.push_back(v.q[mdp.joint_offset(s) + k]);
      as.push_back(v.advantage[mdp.joint_offset(s) + k]);
    }
    q.push_back(qs);
    adv.push_back(as);
  }
  return {{"j", v.j},
          {"v", v.v},
          {"q", q},
          {"advantage", adv},
          {"occupancy", v.occupancy},
          {"a_max", v.a_max},
          {"bellman_residual", v.bellman_residual},
          {"policy_digest", hex64(policy_digest(team))}};
}

inline int cmd_oracle(const CliOptions& o, const std::string& policy_path, std::ostream& os, std::ostream& err) {
  SeedInfo seed;
  const RunConfig cfg = load_run_config(o, seed, err);
  const auto mdp = resolve_mdp(cfg, 0);
  const FactorizedPolicy team =
      policy_path.empty() ? initial_state(cfg, mdp).team : policy_from_json(read_json_file(policy_path));
  check_compatible(team, mdp);
  const json doc = oracle_dump(mdp, team);
  if (o.out.empty()) {
    os << doc.dump(2) << "\n";
  } else {
    const auto dir = prepare_out(o.out);
    auto f = open_out(dir / "oracle.json");
    f << doc.dump(2) << "\n";
    os << "j=" << fmt(doc.at("j").get<double>()) << "\n";
  }
  return kExitOk;
}

}  // namespace sat
