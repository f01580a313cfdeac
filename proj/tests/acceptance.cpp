// Acceptance driver: one PASS/FAIL line per criterion, nonzero exit if any fails.
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "sat/commands.hpp"

using namespace sat;
namespace fs = std::filesystem;

namespace {

int g_failed = 0;

void report(int id, const std::string& name, bool ok, const std::string& detail) {
  std::cout << (ok ? "PASS" : "FAIL") << " [" << id << "] " << name << ": " << detail << std::endl;
  if (!ok) ++g_failed;
}

std::string num(double x) {
  std::ostringstream os;
  os.precision(6);
  os << x;
  return os.str();
}

int run(const std::string& cmd) {
  const int rc = std::system((cmd + " >/dev/null 2>&1").c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

RunConfig suite_config(std::size_t count, std::uint64_t seed) {
  RunConfig c;
  c.suite.count = count;
  c.suite.seed = seed;
  c.suite.states = {2, 6};
  c.suite.actions = {2, 3};
  c.suite.agents = {1, 3};
  c.suite.gamma = {0.8, 0.95};
  c.stages = 1;
  c.radii = {{0.02}};
  c.ordering = "random";
  c.seed = seed;
  return c;
}

std::vector<StageReport> run_suite_reports(const RunConfig& cfg) {
  std::vector<StageReport> all;
  const auto res = run_suite(cfg.suite.count, [&](std::size_t r) { return train_one(cfg, r); });
  for (const auto& o : res) {
    if (!o.error.empty()) throw Error(o.error);
    all.insert(all.end(), o.reports.begin(), o.reports.end());
  }
  return all;
}

struct LowerCounts {
  std::size_t steps = 0, stages = 0, step_fail = 0, stage_fail = 0;
  double worst_tele = 0.0;
  void add(const StageReport& r) {
    ++stages;
    stage_fail += !r.cert.lower_ok;
    worst_tele = std::max(worst_tele, r.cert.telescoping_gap);
    for (const auto& s : r.steps) {
      ++steps;
      step_fail += !s.cert.lower_ok;
    }
  }
  bool ok() const { return step_fail == 0 && stage_fail == 0; }
};

// 1 and 2: exact suite, plus a sampled suite for the finite-budget envelope.
std::vector<StageReport> g_exact;

void criterion_1() {
  const auto t0 = std::chrono::steady_clock::now();
  g_exact = run_suite_reports(suite_config(120, 2024));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  LowerCounts c;
  for (const auto& r : g_exact) c.add(r);
  report(1, "certificate validity (exact oracle, 120 MDPs)", c.ok() && secs <= 300.0,
         std::to_string(c.step_fail) + "/" + std::to_string(c.steps) + " step and " + std::to_string(c.stage_fail) +
             "/" + std::to_string(c.stages) + " stage lower-bound failures in " + num(secs) + " s");
}

void criterion_2() {
  std::size_t steps = 0, upper_fail = 0;
  for (const auto& r : g_exact)
    for (const auto& s : r.steps) {
      ++steps;
      upper_fail += !s.cert.upper_ok;
    }
  RunConfig cfg = suite_config(300, 77);
  cfg.suite.states = {2, 4};
  cfg.stages = 2;
  cfg.mode = "sampled";
  cfg.estimator.episodes = 64;
  cfg.estimator.zeta_probes = 4;
  const auto sampled = run_suite_reports(cfg);
  std::size_t s_steps = 0, s_fail = 0;
  for (const auto& r : sampled)
    for (const auto& s : r.steps) {
      ++s_steps;
      s_fail += !(s.sampled_envelope_ok && s.cert.budget_ok);
    }
  const double rate = double(s_fail) / double(std::max<std::size_t>(s_steps, 1));
  report(2, "envelopes", upper_fail == 0 && s_steps >= 1000 && rate <= 0.05,
         "oracle envelope " + std::to_string(upper_fail) + "/" + std::to_string(steps) +
             " failures; finite-budget envelope " + std::to_string(s_fail) + "/" + std::to_string(s_steps) +
             " sampled steps (rate " + num(rate) + ")");
}

void criterion_3() {
  Rng rng(33);
  double pdi = 0.0, add = 0.0, tele = 0.0;
  std::size_t pinsker_fail = 0;
  for (int t = 0; t < 200; ++t) {
    RandomMdpSizes sz;
    sz.states = 2 + rng.below(5);
    sz.actions.assign(1 + rng.below(3), 0);
    for (auto& a : sz.actions) a = 2 + rng.below(2);
    sz.gamma = rng.uniform(0.8, 0.95);
    sz.mask_prob = 0.2;
    const auto m = random_mdp(rng.below(1u << 30), sz);
    const auto p = FactorizedPolicy::random(m, rng.below(1u << 30), 1.5);
    const auto q = FactorizedPolicy::random(m, rng.below(1u << 30), 1.5);
    const auto vp = oracle_evaluate(m, p), vq = oracle_evaluate(m, q);
    double rhs = 0.0;
    for (std::size_t s = 0; s < m.num_states(); ++s) {
      const auto d = joint_dist(q, m, s);
      for (std::size_t k = 0; k < d.size(); ++k) rhs += vq.occupancy[s] * d[k] * vp.advantage[m.joint_offset(s) + k];
    }
    pdi = std::max(pdi, std::abs(vq.j - vp.j - rhs / (1.0 - m.gamma())));
    const auto joint = divergence(q, p, m);
    for (std::size_t s = 0; s < m.num_states(); ++s) {
      double sum = 0.0;
      for (std::size_t j = 0; j < m.num_agents(); ++j)
        if (m.is_active(s, j)) sum += kl_divergence(q.agent(j).row(s), p.agent(j).row(s));
      add = std::max(add, std::abs(joint.per_state_kl[s] - sum));
    }
  }
  for (int t = 0; t < 10000; ++t) {
    const std::size_t n = 2 + rng.below(5);
    std::vector<double> p(n), q(n);
    double zp = 0.0, zq = 0.0;
    for (std::size_t a = 0; a < n; ++a) {
      zp += (p[a] = std::exp(3.0 * rng.normal()));
      zq += (q[a] = std::exp(3.0 * rng.normal()));
    }
    for (std::size_t a = 0; a < n; ++a) {
      p[a] /= zp;
      q[a] /= zq;
    }
    const double tv = tv_distance(p, q);
    pinsker_fail += tv > std::sqrt(kl_divergence(p, q) / 2.0) + 1e-12;
  }
  for (const auto& r : g_exact) tele = std::max(tele, r.cert.telescoping_gap);
  report(3, "identities", pdi <= 1e-8 && add <= 1e-9 && pinsker_fail == 0 && tele <= 1e-8,
         "performance difference " + num(pdi) + ", KL additivity " + num(add) + ", Pinsker failures " +
             std::to_string(pinsker_fail) + "/10000, telescoping " + num(tele));
}

void criterion_4() {
  Rng rng(44);
  std::size_t fail = 0;
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    RandomMdpSizes sz;
    sz.states = 2 + rng.below(5);
    sz.actions.assign(1 + rng.below(3), 0);
    for (auto& a : sz.actions) a = 2 + rng.below(2);
    sz.gamma = rng.uniform(0.8, 0.95);
    const auto m = random_mdp(rng.below(1u << 30), sz);
    const auto p = FactorizedPolicy::random(m, rng.below(1u << 30), 2.0);
    const auto q = FactorizedPolicy::random(m, rng.below(1u << 30), 2.0);
    std::vector<double> f(m.num_states());
    double fmax = 0.0;
    for (double& x : f) fmax = std::max(fmax, std::abs(x = rng.uniform(-1.0, 1.0)));
    const double lhs = occupancy_shift_exact(m, p, q, f);
    const double rhs = occupancy_shift_bound(divergence(p, q, m), m.gamma()) * fmax;
    fail += lhs > rhs + 1e-12;
    if (rhs > 0.0) worst = std::max(worst, lhs / rhs);
  }
  report(4, "occupancy shift", fail == 0,
         std::to_string(fail) + "/1000 violations, tightest ratio " + num(worst));
}

void criterion_5() {
  Rng rng(55);
  std::size_t steps = 0, margin_fail = 0, avg_fail = 0, blocks = 0;
  double worst_margin = kInf;
  for (int t = 0; t < 100; ++t) {
    const auto m = suite_mdp(suite_config(1, 5500 + t).suite, 0);
    const auto pi = FactorizedPolicy::random(m, rng.below(1u << 30), 1.5);
    const auto v = oracle_evaluate(m, pi);
    for (std::size_t j = 0; j < m.num_agents(); ++j) {
      const auto an = make_surrogate_anchor(m, pi, v, j);
      TrustRegionConfig cfg;
      cfg.delta = {0.05};
      cfg.epochs = 20;
      double beta = 1.0;
      const double eta = auto_eta(std::nullopt, pi.agent(j), v.a_max, m.gamma());
      const auto r = optimize_block([&](const AgentPolicy& c, double) { return ObjectiveValue{an.value(c), an.gradient(c)}; },
                                    pi.agent(j), cfg, eta, v.occupancy, &m, beta);
      ++blocks;
      const std::size_t K = r.diag.grad_mapping_norm.size();
      if (K == 0) continue;
      double sq = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        ++steps;
        margin_fail += r.diag.ascent_margin[k] < -1e-8;
        worst_margin = std::min(worst_margin, r.diag.ascent_margin[k]);
        sq += r.diag.grad_mapping_norm[k] * r.diag.grad_mapping_norm[k];
      }
      const double g_best = *std::max_element(r.diag.objective.begin(), r.diag.objective.end());
      avg_fail += sq / double(K) > 2.0 * (g_best - r.diag.objective.front()) / (eta * double(K)) + 1e-6;
    }
  }
  report(5, "block coordinate ascent", margin_fail == 0 && avg_fail == 0,
         std::to_string(margin_fail) + "/" + std::to_string(steps) + " steps below the ascent margin (worst " +
             num(worst_margin) + "), " + std::to_string(avg_fail) + "/" + std::to_string(blocks) +
             " blocks above the averaged gradient-mapping bound");
}

void criterion_6() {
  Rng rng(66);
  std::size_t trials = 0, miss = 0;
  for (int mi = 0; mi < 10; ++mi) {
    const auto m = suite_mdp(suite_config(1, 6600 + mi).suite, 0);
    const auto pi = FactorizedPolicy::random(m, rng.below(1u << 30), 1.0);
    const auto v = oracle_evaluate(m, pi);
    const auto next = pi.with_agent(FactorizedPolicy::random(m, rng.below(1u << 30), 1.0).agent(0));
    const double exact = exact_surrogate(m, v, next);
    const std::size_t H = default_horizon(m.gamma(), v.a_max, 1e-9);
    const double radius = hoeffding_radius(100, 0.1, v.a_max / (1.0 - m.gamma()));
    for (int t = 0; t < 100; ++t) {
      const auto b = sample_batch(m, pi, 100, H, mix_seed(6600 + mi, t));
      const auto terms = episode_surrogate_terms(b, m, v, next);
      double mean = 0.0;
      for (double x : terms) mean += x / double(terms.size());
      ++trials;
      miss += std::abs(mean - exact) > radius;
    }
  }
  const double rate = double(miss) / double(trials);
  report(6, "concentration (N=100, conf=0.1)", rate <= 0.1,
         std::to_string(miss) + "/" + std::to_string(trials) + " estimates outside the Hoeffding radius (rate " +
             num(rate) + ")");
}

void criterion_7() {
  Rng rng(77);
  std::size_t over = 0, slack_nonzero = 0, binding_miss = 0, binding = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t S = 1 + rng.below(6), A = 2 + rng.below(3);
    MatrixXd lp = MatrixXd::Zero(Eigen::Index(S), Eigen::Index(A)), lc = lp;
    for (Eigen::Index i = 0; i < lp.size(); ++i) {
      lp.data()[i] = 3.0 * rng.normal();
      lc.data()[i] = rng.normal();
    }
    std::vector<double> d0(S);
    for (double& d : d0) d = std::exp(rng.uniform(std::log(1e-4), std::log(2.0)));
    const auto r = stage0_project(AgentPolicy(0, lp), AgentPolicy(0, lc), d0);
    for (std::size_t s = 0; s < S; ++s) {
      const double kl = kl_divergence(r.projected.row(s), AgentPolicy(0, lc).row(s));
      over += kl > d0[s] + 1e-6;
      if (!r.binding[s]) {
        slack_nonzero += r.lambda[s] != 0.0;
      } else {
        ++binding;
        binding_miss += std::abs(kl - d0[s]) > 1e-6;
      }
    }
  }
  const auto mix = geometric_mixture(std::vector<double>{0.9, 0.1}, std::vector<double>{0.5, 0.5}, 1.0);
  const bool mix_ok = std::abs(mix[0] - 0.75) <= 1e-15 && std::abs(mix[1] - 0.25) <= 1e-15;
  report(7, "stage-0 projection", over == 0 && slack_nonzero == 0 && binding_miss == 0 && mix_ok,
         std::to_string(over) + " radius excesses, " + std::to_string(slack_nonzero) + " nonzero slack multipliers, " +
             std::to_string(binding_miss) + "/" + std::to_string(binding) + " binding misses, mixture (" +
             num(mix[0]) + ", " + num(mix[1]) + ")");
}

void criterion_8(const fs::path& dir) {
  RunConfig cfg = suite_config(20, 88);
  cfg.suite.agents = {3, 3};
  LowerCounts c;
  std::size_t recorded = 0, runs = 0;
  {
    std::ofstream log(dir / "orders.jsonl");
    for (std::size_t r = 0; r < 20; ++r) {
      const auto m = resolve_mdp(cfg, r);
      if (m.num_agents() != 3) continue;
      ++runs;
      std::vector<std::size_t> order{0, 1, 2};
      do {
        auto st = initial_state(cfg, m, r);
        const auto rep = run_stage(cfg, m, st, r, order);
        c.add(rep);
        log << stage_record(rep).dump() << "\n";
      } while (std::next_permutation(order.begin(), order.end()));
    }
  }
  std::ifstream in(dir / "orders.jsonl");
  for (std::string line; std::getline(in, line);) {
    const auto j = json::parse(line);
    recorded += j.contains("order") && j.at("bounds").contains("realized_stage_gain");
  }
  report(8, "sequence agnosticism", c.ok() && runs == 20 && recorded == 120,
         std::to_string(runs) + " MDPs x 6 orders, " + std::to_string(c.step_fail) + " step and " +
             std::to_string(c.stage_fail) + " stage failures, " + std::to_string(recorded) +
             " per-order gains logged");
}

void criterion_9(const fs::path& dir) {
  RunConfig cfg = suite_config(40, 99);
  cfg.suite.states = {2, 4};
  cfg.stages = 2;
  cfg.estimator.episodes = 64;
  cfg.estimator.zeta_probes = 4;
  const auto res = sweep_delta(cfg, {0.001, 0.004, 0.016, 0.064}, SeedInfo{cfg.seed, "config"}, &dir);
  std::string rates;
  for (const auto& r : res.rows) rates += (rates.empty() ? "" : ", ") + num(r.rate());
  const bool slope_ok = res.slope && *res.slope >= 0.3 && *res.slope <= 0.7;
  report(9, "radius sweep", res.monotone && slope_ok,
         "rates (" + rates + "), monotone=" + (res.monotone ? "yes" : "no") +
             ", log-log slope " + (res.slope ? num(*res.slope) : std::string("absent")));
}

void criterion_10() {
  RunConfig cfg;
  cfg.mdp.seed = 101;
  cfg.mdp.states = 5;
  cfg.mdp.actions = {2, 3};
  cfg.mdp.mask_prob = 0.2;
  cfg.team.init = "random";
  cfg.team.init_seed = 9;
  cfg.stages = 4;
  cfg.radii = {{0.03}};
  cfg.seed = 10;
  SwapSpec noop;
  noop.agent = 1;
  noop.after_stage = 2;
  noop.kind = "incumbent";
  const auto a = plugplay(cfg, noop);
  bool identical = a.unswapped.continued.size() == a.swapped.continued.size();
  for (std::size_t k = 0; identical && k < a.unswapped.continued.size(); ++k) {
    const auto& x = a.unswapped.continued[k];
    const auto& y = a.swapped.continued[k];
    identical = stage_record(x).dump() == stage_record(y).dump();
    for (std::size_t i = 0; identical && i < x.steps.size(); ++i)
      identical = step_record(x, i).dump() == step_record(y, i).dump();
  }
  std::size_t dominance_ok = 0, trials = 0, post_fail = 0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    RunConfig c = cfg;
    c.mdp.seed = 200 + s;
    SwapSpec dom = noop;
    dom.kind = "dominance";
    dom.agent = s % 2;
    const auto b = plugplay(c, dom);
    ++trials;
    dominance_ok += b.swapped.next_stage_surrogate >= b.unswapped.next_stage_surrogate - 1e-12;
    for (const auto& r : b.swapped.continued) {
      post_fail += !r.cert.lower_ok;
      for (const auto& st : r.steps) post_fail += !st.cert.lower_ok;
    }
  }
  report(10, "plug-and-play", identical && dominance_ok == trials && post_fail == 0,
         std::string("no-op continuation ") + (identical ? "byte-identical" : "DIFFERS") + ", dominance surrogate >= " +
             "unswapped in " + std::to_string(dominance_ok) + "/" + std::to_string(trials) + ", " +
             std::to_string(post_fail) + " post-swap lower-bound failures");
}

void criterion_11() {
  std::size_t points = 0, fail = 0, mdps = 0;
  double worst = 0.0;
  for (std::size_t r = 0; r < 10; ++r) {
    const auto m = suite_mdp(suite_config(1, 1100 + r).suite, 0);
    ++mdps;
    const auto pi = FactorizedPolicy::random(m, 1100 + r, 1.0);
    const auto b = sample_batch(m, pi, 32, 12, r, 4);
    const auto v = oracle_evaluate(m, pi);
    const auto step_adv = gae(b, v.v, m.gamma(), 0.95);
    const auto adv = group_normalize(aggregate_episode_advantages(step_adv, m.gamma()), group_keys(b));
    const std::size_t j = r % m.num_agents();
    const SequenceCounts counts(b, m, j);
    Rng rng(mix_seed(1100, r));
    for (int p = 0; p < 20; ++p) {
      MatrixXd l = pi.agent(j).logits();
      for (Eigen::Index i = 0; i < l.size(); ++i) l.data()[i] += 0.1 * rng.normal();
      auto f = [&](const MatrixXd& x) {
        return clipped_objective(adv, counts, AgentPolicy(j, x), pi.agent(j), 0.5, 0.2, v.occupancy, &m);
      };
      const MatrixXd g = f(l).gradient;
      MatrixXd fd(l.rows(), l.cols());
      const double h = 1e-6;
      for (Eigen::Index i = 0; i < l.size(); ++i) {
        MatrixXd lp = l, lm = l;
        lp.data()[i] += h;
        lm.data()[i] -= h;
        fd.data()[i] = (f(lp).value - f(lm).value) / (2 * h);
      }
      const double scale = std::max(fd.cwiseAbs().maxCoeff(), 1e-12);
      const double err = (g - fd).cwiseAbs().maxCoeff() / scale;
      ++points;
      worst = std::max(worst, err);
      fail += err > 1e-5;
    }
  }
  report(11, "gradient correctness", fail == 0 && points >= 20 * mdps,
         std::to_string(fail) + "/" + std::to_string(points) + " points above 1e-5 relative error (worst " + num(worst) +
             ")");
}

void criterion_12(const fs::path& dir, const std::vector<fs::path>& extra_logs) {
  const fs::path cfg = dir / "repro.json";
  std::ofstream(cfg) << R"({"mdp": {"seed": 12, "states": 4, "actions": [2, 3]},
    "team": {"agents": 2, "init": "random", "init_seed": 2}, "stages": 3, "radii": 0.02,
    "mode": "sampled", "estimator": {"episodes": 48, "zeta_probes": 4}, "seed": 1234})";
  const std::string cli = SAT_CLI_PATH;
  const int rc1 = run(cli + " train --config " + cfg.string() + " --out " + (dir / "r1").string());
  const int rc2 = run(cli + " train --config " + cfg.string() + " --out " + (dir / "r2").string());
  const int rc3 = run(cli + " train --mode exact --config " + cfg.string() + " --out " + (dir / "r3").string());
  const bool same = rc1 == 0 && rc2 == 0 && slurp(dir / "r1" / "run.jsonl") == slurp(dir / "r2" / "run.jsonl") &&
                    slurp(dir / "r1" / "steps.csv") == slurp(dir / "r2" / "steps.csv");
  std::vector<fs::path> logs{dir / "r1" / "run.jsonl", dir / "r2" / "run.jsonl", dir / "r3" / "run.jsonl"};
  logs.insert(logs.end(), extra_logs.begin(), extra_logs.end());
  std::size_t certified = 0;
  for (const auto& l : logs) certified += run(cli + " certify " + l.string()) == 0;
  report(12, "reproducibility", same && rc3 == 0 && certified == logs.size(),
         std::string("repeated sampled run ") + (same ? "byte-identical" : "DIFFERS") + ", certify exit 0 on " +
             std::to_string(certified) + "/" + std::to_string(logs.size()) + " logs");
}

}  // namespace

int main() {
  const fs::path dir = fs::temp_directory_path() / "sat_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto guarded = [](int id, auto&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      report(id, "criterion", false, std::string("threw: ") + e.what());
    }
  };
  guarded(1, criterion_1);
  guarded(2, criterion_2);
  guarded(3, criterion_3);
  guarded(4, criterion_4);
  guarded(5, criterion_5);
  guarded(6, criterion_6);
  guarded(7, criterion_7);
  guarded(8, [&] { criterion_8(dir); });
  guarded(9, [&] { criterion_9(dir); });
  guarded(10, criterion_10);
  guarded(11, criterion_11);
  std::vector<fs::path> sweep_logs;
  for (int k = 0; k < 4; ++k)
    if (fs::exists(dir / ("sweep_" + std::to_string(k) + ".jsonl"))) sweep_logs.push_back(dir / ("sweep_" + std::to_string(k) + ".jsonl"));
  guarded(12, [&] { criterion_12(dir, sweep_logs); });
  std::cout << (g_failed ? std::to_string(g_failed) + " criteria failed" : std::string("all criteria passed"))
            << std::endl;
  return g_failed ? 1 : 0;
}
