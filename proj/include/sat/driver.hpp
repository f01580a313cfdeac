#pragma once

#include <chrono>
#include <functional>

#include "sat/certificates.hpp"
#include "sat/config.hpp"
#include "sat/plug_and_play.hpp"

namespace sat {

struct AdvantageStats {
  std::size_t episodes = 0;
  double mean_raw = 0.0;
  double sd_raw = 0.0;
  double clip_fraction = 0.0;
};

struct StepReport {
  std::size_t agent = 0;
  std::string target_digest;
  StepCertificate cert;
  InfoGeometry info;
  OptimizerDiagnostics diag;
  AdvantageStats adv;
  bool sampled_envelope_ok = true;  // empirical surrogate within the finite-budget envelope
};

struct StageReport {
  std::size_t run = 0;
  std::size_t stage = 0;
  std::string mode;
  std::vector<std::size_t> order;
  std::vector<StepReport> steps;
  StageCertificate cert;
  std::string digest_before, digest_after;
  std::uint64_t stage_seed = 0, rollout_seed = 0, order_seed = 0;
  double wall_ms = 0.0;  // not logged

  std::size_t raw_state_checks() const {
    std::size_t n = 0;
    for (const auto& s : steps) n += s.diag.raw_state_checks;
    return n;
  }
  std::size_t raw_violations() const {
    std::size_t n = 0;
    for (const auto& s : steps) n += s.diag.raw_violations;
    return n;
  }
};

struct RunState {
  FactorizedPolicy team;
  std::size_t next_stage = 0;
  std::vector<double> beta;  // per agent, carried across stages
};

inline std::uint64_t stage_seed(std::uint64_t master, std::size_t stage) { return mix_seed(master, stage); }

inline TabularMdp mdp_from_source(const MdpSource& src, std::size_t agents) {
  if (src.spec) return build_mdp(*src.spec);
  if (!src.file.empty()) {
    try {
      return build_mdp(mdp_spec_from_json(read_json_file(src.file)));
    } catch (const ValidationError& e) {
      throw ConfigError("mdp.file", e.what());
    }
  }
  RandomMdpSizes sz;
  sz.states = src.states;
  sz.actions.assign(agents, 2);
  if (src.actions.size() == 1) sz.actions.assign(agents, src.actions[0]);
  if (src.actions.size() == agents) sz.actions = src.actions;
  sz.density = src.density;
  sz.gamma = src.gamma;
  sz.mask_prob = src.mask_prob;
  return random_mdp(src.seed, sz);
}

// Suite member r: sizes and discount drawn from the configured ranges.
inline TabularMdp suite_mdp(const SuiteConfig& suite, std::size_t r) {
  const std::uint64_t seed = mix_seed(suite.seed, r);
  Rng rng(mix_seed(seed, 0x5e7));
  auto pick = [&](const std::array<std::size_t, 2>& lim) { return lim[0] + rng.below(lim[1] - lim[0] + 1); };
  RandomMdpSizes sz;
  sz.states = pick(suite.states);
  const std::size_t n = pick(suite.agents);
  sz.actions.clear();
  for (std::size_t j = 0; j < n; ++j) sz.actions.push_back(pick(suite.actions));
  sz.gamma = rng.uniform(suite.gamma[0], suite.gamma[1]);
  sz.density = suite.density;
  return random_mdp(seed, sz);
}

inline TabularMdp resolve_mdp(const RunConfig& cfg, std::size_t run) {
  return cfg.suite.count > 0 ? suite_mdp(cfg.suite, run) : mdp_from_source(cfg.mdp, cfg.team.agents);
}

inline RunState initial_state(const RunConfig& cfg, const TabularMdp& mdp, std::size_t run = 0) {
  RunState st;
  st.team = cfg.team.init == "random"
                ? FactorizedPolicy::random(mdp, mix_seed(cfg.team.init_seed, run), cfg.team.init_scale)
                : FactorizedPolicy::uniform(mdp);
  st.beta.assign(mdp.num_agents(), cfg.trust_region.beta);
  return st;
}

inline std::vector<double> agent_radius(const RunConfig& cfg, const TabularMdp& mdp, std::size_t j) {
  require(cfg.radii.size() == 1 || j < cfg.radii.size(), "radii: no radius for agent " + std::to_string(j));
  const auto& r = cfg.radius_of(j);
  require(r.size() == 1 || r.size() == mdp.num_states(), "radii: per-state table length must equal the state count");
  return r;
}

inline double max_radius(const std::vector<double>& r, const TabularMdp& mdp, std::size_t j) {
  if (r.size() == 1) return r[0];
  double m = 0.0;
  for (std::size_t s = 0; s < r.size(); ++s)
    if (mdp.is_active(s, j)) m = std::max(m, r[s]);
  return m;
}

// First-order gain at the anchor, kappa * sqrt(delta).
inline std::vector<std::size_t> order_agents(const RunConfig& cfg, const TabularMdp& mdp, const FactorizedPolicy& team,
                                             std::uint64_t seed) {
  const std::size_t n = team.num_agents();
  std::vector<std::size_t> order(n);
  for (std::size_t j = 0; j < n; ++j) order[j] = j;
  if (cfg.ordering == "random") {
    Rng rng(seed);
    rng.shuffle(order);
  } else if (cfg.ordering == "greedy-surrogate") {
    const auto values = oracle_evaluate(mdp, team);
    std::vector<double> score(n);
    for (std::size_t j = 0; j < n; ++j) {
      const auto anchor = make_surrogate_anchor(mdp, team, values, j);
      const double d = max_radius(agent_radius(cfg, mdp, j), mdp, j);
      score[j] = fisher_and_gain(anchor, team.agent(j), std::nullopt, 0.0, d).kappa * std::sqrt(d);
    }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  } else {
    require(cfg.ordering == "fixed", "unknown ordering strategy " + cfg.ordering);
  }
  return order;
}

inline AdvantageStats advantage_stats(const AdvantageSet& a) {
  AdvantageStats st;
  st.episodes = a.raw.size();
  if (a.raw.empty()) return st;
  for (double x : a.raw) st.mean_raw += x;
  st.mean_raw /= double(a.raw.size());
  for (double x : a.raw) st.sd_raw += (x - st.mean_raw) * (x - st.mean_raw);
  st.sd_raw = std::sqrt(st.sd_raw / double(a.raw.size()));
  std::size_t clipped = 0;
  for (double z : a.pre_clip) clipped += std::abs(z) > a.clip_bound;
  st.clip_fraction = double(clipped) / double(a.raw.size());
  return st;
}

inline double auto_eta(const std::optional<double>& eta, const AgentPolicy& current, double a_max, double gamma) {
  if (eta) return *eta;
  const double l = smoothness_constants(current, a_max, gamma).l_blk;
  return l > 0.0 ? 1.0 / l : 1.0;
}

// One stage of sequential updates. `forced_order` overrides the configured strategy.
inline StageReport run_stage(const RunConfig& cfg, const TabularMdp& mdp, RunState& state, std::size_t run = 0,
                             const std::optional<std::vector<std::size_t>>& forced_order = std::nullopt) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t n = mdp.num_agents();
  check_compatible(state.team, mdp);
  if (state.beta.size() != n) state.beta.assign(n, cfg.trust_region.beta);
  const double g = mdp.gamma();

  StageReport rep;
  rep.run = run;
  rep.stage = state.next_stage;
  rep.mode = cfg.mode;
  rep.stage_seed = stage_seed(cfg.seed, rep.stage);
  rep.rollout_seed = mix_seed(rep.stage_seed, 1);
  rep.order_seed = mix_seed(rep.stage_seed, 2);
  rep.digest_before = hex64(policy_digest(state.team));
  rep.order = forced_order ? *forced_order : order_agents(cfg, mdp, state.team, rep.order_seed);
  check_permutation(rep.order, n);

  const FactorizedPolicy base = state.team;
  const auto base_values = oracle_evaluate(mdp, base);

  std::optional<TrajectoryBatch> batch;
  const auto& E = cfg.estimator;
  if (cfg.sampled()) {
    const std::size_t h = E.horizon > 0 ? E.horizon : default_horizon(g, mdp.r_max(), E.tail_tol);
    batch = sample_batch(mdp, base, E.episodes, h, rep.rollout_seed, E.group_size);
  }

  std::map<std::size_t, AgentPolicy> targets;
  std::vector<StepCertificate> certs;
  std::vector<InfoGeometry> infos;
  OracleValues prev_values = base_values;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = rep.order[i];
    const IntermediatePolicy prev = compose_intermediate(base, targets, rep.order, i);
    require(prev.overrides().size() == i && !prev.overrides().count(j),
            "run_stage: intermediate policy must hold exactly the committed targets");
    const AgentPolicy& current = prev.agent(j);
    const auto anchor = make_surrogate_anchor(mdp, prev, prev_values, j);
    const auto& weights = prev_values.occupancy;

    TrustRegionConfig tr = cfg.trust_region;
    tr.delta = agent_radius(cfg, mdp, j);

    StepReport sr;
    sr.agent = j;
    BlockResult res{current, {}};
    std::optional<double> l_emp;
    double zeta = 0.0;
    std::string zeta_method = "exact-oracle";

    if (!cfg.sampled()) {
      const double eta = auto_eta(tr.eta, current, prev_values.a_max, g);
      auto obj = [&](const AgentPolicy& c, double) { return ObjectiveValue{anchor.value(c), anchor.gradient(c)}; };
      res = optimize_block(obj, current, tr, eta, weights, &mdp, state.beta[j]);
      res.diag.l_blk = smoothness_constants(current, prev_values.a_max, g).l_blk;
    } else {
      std::optional<StepTable> trace;
      if (E.reweight) trace = reweight_truncated(*batch, mdp, prev).c;
      const StepTable step_adv = gae(*batch, prev_values.v, g, E.lambda, trace ? &*trace : nullptr);
      const AdvantageSet adv =
          group_normalize(aggregate_episode_advantages(step_adv, g), group_keys(*batch), E.eps, E.clip);
      sr.adv = advantage_stats(adv);
      const SequenceCounts counts(*batch, mdp, j);
      const double eta = auto_eta(tr.eta, current, E.clip, g);
      auto obj = [&](const AgentPolicy& c, double beta) {
        return clipped_objective(adv, counts, c, current, beta, tr.eps_clip, weights, &mdp);
      };
      res = optimize_block(obj, current, tr, eta, weights, &mdp, state.beta[j]);
      res.diag.l_blk = smoothness_constants(current, E.clip, g).l_blk;
      l_emp = empirical_surrogate(*batch, step_adv, mdp, res.policy);
      BiasProbeConfig bp;
      bp.delta = max_radius(tr.delta, mdp, j);
      bp.lambda = E.lambda;
      bp.reweight = E.reweight;
      bp.probes = E.zeta_probes;
      bp.seed = mix_seed(rep.stage_seed, 3 + i);
      if (bp.delta > 0.0) {
        const auto zb = estimator_bias(mdp, prev, j, bp, {res.policy});
        zeta = zb.zeta;
        zeta_method = zb.method;
      } else {
        zeta_method = "null-radius";
      }
    }
    sr.diag = res.diag;

    targets.insert_or_assign(j, res.policy);
    const IntermediatePolicy next = compose_intermediate(base, targets, rep.order, i + 1);
    const auto next_values = oracle_evaluate(mdp, next);
    const auto div = single_block_divergence(res.policy, current, weights, tr.alpha, &mdp);

    StepInputs in;
    in.stage = rep.stage;
    in.step = i;
    in.agent = j;
    in.gamma = g;
    in.r_max = mdp.r_max();
    in.surrogate_exact = exact_surrogate(mdp, prev_values, next);
    in.surrogate_empirical = l_emp;
    in.radius = max_radius(tr.delta, mdp, j);
    in.kl_max = div.kl_max;
    in.expected_kl = div.expected_kl;
    in.a_max = prev_values.a_max;
    in.zeta = zeta;
    in.zeta_method = zeta_method;
    in.episodes = cfg.sampled() ? double(E.episodes) : kInf;
    in.conf = cfg.confidence;
    in.j_before = prev_values.j;
    in.j_after = next_values.j;
    sr.cert = single_step_certificate(in);
    if (l_emp) sr.sampled_envelope_ok = *l_emp <= sr.cert.budget_upper + kCertTol;
    const double l_loc = smoothness_constants(current, prev_values.a_max, g).l_blk;
    sr.info = fisher_and_gain(anchor, current, std::nullopt, l_loc, sr.cert.delta_used);
    sr.target_digest = hex64(agent_digest(res.policy));

    certs.push_back(sr.cert);
    infos.push_back(sr.info);
    rep.steps.push_back(std::move(sr));
    prev_values = next_values;
  }

  state.team = compose_intermediate(base, targets, rep.order, n).materialize();
  rep.cert = joint_stage_certificate(rep.stage, rep.order, certs, infos, base_values.j, prev_values.j, cfg.confidence);
  rep.digest_after = hex64(policy_digest(state.team));
  ++state.next_stage;
  rep.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

using StageSink = std::function<void(const StageReport&)>;

// Runs stages until `state.next_stage == stages`. Each finished stage goes to `sink` before the next starts.
inline std::vector<StageReport> run_training(const RunConfig& cfg, const TabularMdp& mdp, RunState& state,
                                             std::size_t run = 0, const StageSink& sink = {}) {
  std::vector<StageReport> out;
  while (state.next_stage < cfg.stages) {
    out.push_back(run_stage(cfg, mdp, state, run));
    if (sink) sink(out.back());
  }
  return out;
}

inline std::vector<StageReport> run_training(const RunConfig& cfg, std::size_t run = 0) {
  const auto mdp = resolve_mdp(cfg, run);
  auto state = initial_state(cfg, mdp, run);
  return run_training(cfg, mdp, state, run);
}

struct SwapRecord {
  std::size_t run = 0;
  std::size_t stage = 0;  // first stage trained with the swapped agent
  std::size_t agent = 0;
  std::string pretrained_digest;
  std::string projected_digest;
  Stage0Result stage0;
};

inline SwapRecord swap_agent(RunState& state, std::size_t j, const AgentPolicy& pretrained,
                             std::span<const double> delta0, std::size_t run = 0) {
  auto out = replace_agent(state.team, j, pretrained, delta0);
  SwapRecord rec;
  rec.run = run;
  rec.stage = state.next_stage;
  rec.agent = j;
  rec.pretrained_digest = hex64(agent_digest(AgentPolicy(j, pretrained.logits())));
  rec.projected_digest = hex64(agent_digest(out.stage0.projected));
  rec.stage0 = std::move(out.stage0);
  state.team = std::move(out.team);
  return rec;
}

inline std::pair<SwapRecord, std::vector<StageReport>> swap_and_continue(const RunConfig& cfg, const TabularMdp& mdp,
                                                                         RunState& state, std::size_t j,
                                                                         const AgentPolicy& pretrained,
                                                                         std::span<const double> delta0,
                                                                         std::size_t run = 0,
                                                                         const StageSink& sink = {}) {
  auto rec = swap_agent(state, j, pretrained, delta0, run);
  auto reports = run_training(cfg, mdp, state, run, sink);
  return {std::move(rec), std::move(reports)};
}

inline json checkpoint_to_json(const RunState& st) {
  return {{"team", policy_to_json(st.team)}, {"next_stage", st.next_stage}, {"beta", st.beta}};
}

inline RunState checkpoint_from_json(const json& j) {
  RunState st;
  try {
    st.team = policy_from_json(j.at("team"));
    st.next_stage = j.at("next_stage").get<std::size_t>();
    st.beta = j.at("beta").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("checkpoint: ") + e.what());
  }
  return st;
}

}  // namespace sat
