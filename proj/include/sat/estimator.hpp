#pragma once

#include "sat/oracle.hpp"
#include "sat/rollout.hpp"

namespace sat {

using StepTable = std::vector<std::vector<double>>;  // [episode][t]

struct AdvantageSet {
  std::vector<double> raw;         // per-episode aggregate
  std::vector<double> pre_clip;    // group-normalized, before clipping
  std::vector<double> normalized;  // after symmetric clipping
  StepTable per_step;
  StepTable ratios;     // rho_t
  StepTable truncated;  // c_t
  double clip_bound = 3.0;
};

struct TruncatedWeights {
  StepTable rho;
  StepTable c;
};

struct EstimatorBiasEstimate {
  double zeta = 0.0;
  std::string method = "exact-oracle";
};

// Per-step GAE with optional trace weights: A_t = delta_t + gamma*lambda*c_{t+1}*A_{t+1}.
// The last step bootstraps through V(final_state).
inline StepTable gae(const TrajectoryBatch& b, std::span<const double> values, double gamma, double lambda,
                     const StepTable* trace = nullptr) {
  require(lambda >= 0.0 && lambda <= 1.0, "gae: lambda must lie in [0,1]");
  StepTable out(b.size());
  for (std::size_t e = 0; e < b.size(); ++e) {
    const auto& steps = b.episodes[e].steps;
    auto& adv = out[e];
    adv.assign(steps.size(), 0.0);
    double next_adv = 0.0;
    for (std::size_t t = steps.size(); t-- > 0;) {
      const std::size_t s_next = t + 1 < steps.size() ? steps[t + 1].state : b.episodes[e].final_state;
      const double delta = steps[t].reward + gamma * values[s_next] - values[steps[t].state];
      double carry = 0.0;
      if (t + 1 < steps.size()) carry = gamma * lambda * (trace ? (*trace)[e][t + 1] : 1.0) * next_adv;
      adv[t] = delta + carry;
      next_adv = adv[t];
    }
  }
  return out;
}

inline TruncatedWeights reweight_truncated(const TrajectoryBatch& b, const TabularMdp& mdp,
                                           const IntermediatePolicy& pi_prev) {
  require(b.sampling_policy_id == policy_digest(pi_prev.base()),
          "reweight_truncated: batch was not sampled under this stage's current policy");
  TruncatedWeights w;
  w.rho.resize(b.size());
  w.c.resize(b.size());
  for (std::size_t e = 0; e < b.size(); ++e) {
    for (const auto& st : b.episodes[e].steps) {
      double log_ratio = 0.0;
      for (const auto& [j, target] : pi_prev.overrides())
        if (mdp.is_active(st.state, j))
          log_ratio += target.log_prob(st.state, mdp.agent_action(st.state, st.joint, j)) - st.log_probs[j];
      const double rho = std::exp(log_ratio);
      w.rho[e].push_back(rho);
      w.c[e].push_back(std::min(1.0, rho));
    }
  }
  return w;
}

inline std::vector<double> aggregate_episode_advantages(const StepTable& per_step, double gamma) {
  std::vector<double> raw(per_step.size(), 0.0);
  for (std::size_t e = 0; e < per_step.size(); ++e) {
    double w = 1.0;
    for (double a : per_step[e]) {
      raw[e] += w * a;
      w *= gamma;
    }
  }
  return raw;
}

inline AdvantageSet group_normalize(const std::vector<double>& raw, const std::vector<std::size_t>& group_keys,
                                    double eps = 1e-8, double clip = 3.0) {
  require(raw.size() == group_keys.size(), "group_normalize: key count mismatch");
  require(clip > 0.0, "group_normalize: clip must be positive");
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t e = 0; e < raw.size(); ++e) groups[group_keys[e]].push_back(e);
  AdvantageSet a;
  a.raw = raw;
  a.clip_bound = clip;
  a.pre_clip.assign(raw.size(), 0.0);
  a.normalized.assign(raw.size(), 0.0);
  for (const auto& [key, members] : groups) {
    require(members.size() >= 2, "group_normalize: group " + std::to_string(key) + " has a single episode");
    double mean = 0.0;
    for (std::size_t e : members) mean += raw[e];
    mean /= double(members.size());
    double var = 0.0;
    for (std::size_t e : members) var += (raw[e] - mean) * (raw[e] - mean);
    const double sd = std::sqrt(var / double(members.size()));
    for (std::size_t e : members) {
      // Exactly-constant groups can still show rounding noise around the mean.
      const double z = sd <= 1e-12 * (1.0 + std::abs(mean)) ? 0.0 : (raw[e] - mean) / (sd + eps);
      a.pre_clip[e] = z;
      a.normalized[e] = std::clamp(z, -clip, clip);
    }
  }
  return a;
}

inline std::vector<std::size_t> group_keys(const TrajectoryBatch& b) {
  std::vector<std::size_t> k(b.size());
  for (std::size_t e = 0; e < b.size(); ++e) k[e] = b.group_key(e);
  return k;
}

// Self-normalized estimate of (1/(1-gamma)) E_{s~d, a~pi-hat^i}[A]: the candidate's factor is
// reweighted against the logged factor of the same agent.
inline double empirical_surrogate(const TrajectoryBatch& b, const StepTable& step_adv, const TabularMdp& mdp,
                                  const AgentPolicy& candidate, double clip = kInf) {
  const std::size_t j = candidate.agent_index();
  const double g = mdp.gamma();
  double num = 0.0, den = 0.0;
  for (std::size_t e = 0; e < b.size(); ++e) {
    double disc = 1.0;
    const auto& steps = b.episodes[e].steps;
    for (std::size_t t = 0; t < steps.size(); ++t) {
      const auto& st = steps[t];
      double w = 1.0;
      if (mdp.is_active(st.state, j))
        w = std::exp(candidate.log_prob(st.state, mdp.agent_action(st.state, st.joint, j)) - st.log_probs[j]);
      num += disc * w * std::clamp(step_adv[e][t], -clip, clip);
      den += disc * w;
      disc *= g;
    }
  }
  return den > 0.0 ? num / den / (1.0 - g) : 0.0;
}

// Per-episode terms sum_t gamma^t E_{k~next(s_t)}[A_prev(s_t, k)]; each lies in [-A_max/(1-g), A_max/(1-g)]
// and their mean estimates the exact surrogate on-policy (batch drawn under the previous policy).
template <TeamPolicy Next>
std::vector<double> episode_surrogate_terms(const TrajectoryBatch& b, const TabularMdp& mdp,
                                            const OracleValues& prev_values, const Next& next) {
  const std::size_t S = mdp.num_states();
  std::vector<double> per_state(S, 0.0);
  for (std::size_t s = 0; s < S; ++s) {
    const auto d = joint_dist(next, mdp, s);
    for (std::size_t k = 0; k < d.size(); ++k) per_state[s] += d[k] * prev_values.advantage[mdp.joint_offset(s) + k];
  }
  std::vector<double> out(b.size(), 0.0);
  for (std::size_t e = 0; e < b.size(); ++e) {
    double w = 1.0;
    for (const auto& st : b.episodes[e].steps) {
      out[e] += w * per_state[st.state];
      w *= mdp.gamma();
    }
  }
  return out;
}

// Large-sample limit of empirical_surrogate fed by truncated-trace GAE with V = V^{prev}.
// X(s,k) = E[A_t | s,k] solves X = A_prev + gamma*lambda*M X with M = P * behavior * c.
template <TeamPolicy B, TeamPolicy Prev>
double population_surrogate(const TabularMdp& mdp, const B& behavior, const Prev& prev, const OracleValues& prev_values,
                            const OracleValues& behavior_values, const AgentPolicy& candidate, double lambda,
                            bool reweight) {
  const std::size_t S = mdp.num_states(), T = mdp.total_joint();
  const double g = mdp.gamma();
  std::vector<double> pb(T), weight(T);
  for (std::size_t s = 0; s < S; ++s) {
    const auto db = joint_dist(behavior, mdp, s);
    const auto dp = joint_dist(prev, mdp, s);
    for (std::size_t k = 0; k < db.size(); ++k) {
      pb[mdp.joint_offset(s) + k] = db[k];
      weight[mdp.joint_offset(s) + k] = db[k] * (reweight ? std::min(1.0, dp[k] / db[k]) : 1.0);
    }
  }
  MatrixXd m = MatrixXd::Zero(Eigen::Index(T), Eigen::Index(T));
  VectorXd rhs(static_cast<Eigen::Index>(T));
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t k = 0; k < mdp.joint_count(s); ++k) {
      const std::size_t row = mdp.joint_offset(s) + k;
      rhs(Eigen::Index(row)) = prev_values.advantage[row];
      const auto tr = mdp.transition_row(s, k);
      for (std::size_t s2 = 0; s2 < S; ++s2) {
        if (tr[s2] == 0.0) continue;
        for (std::size_t k2 = 0; k2 < mdp.joint_count(s2); ++k2)
          m(Eigen::Index(row), Eigen::Index(mdp.joint_offset(s2) + k2)) = tr[s2] * weight[mdp.joint_offset(s2) + k2];
      }
    }
  }
  const VectorXd x = detail::solve_discounted(m, rhs, g * lambda, false, T <= 2000);
  const std::size_t j = candidate.agent_index();
  double total = 0.0;
  for (std::size_t s = 0; s < S; ++s) {
    double inner = 0.0;
    for (std::size_t k = 0; k < mdp.joint_count(s); ++k) {
      const std::size_t idx = mdp.joint_offset(s) + k;
      double w = 1.0;
      if (mdp.is_active(s, j)) {
        const std::size_t a = mdp.agent_action(s, k, j);
        w = candidate.prob(s, a) / behavior.agent(j).prob(s, a);
      }
      inner += pb[idx] * w * x(Eigen::Index(idx));
    }
    total += behavior_values.occupancy[s] * inner;
  }
  return total / (1.0 - g);
}

// Bisects the scale of a logit displacement so the max per-state KL to `anchor` equals `radius`.
inline AgentPolicy scale_into_ball(const AgentPolicy& anchor, const MatrixXd& direction, double radius,
                                   const TabularMdp* mdp = nullptr) {
  auto kl_at = [&](double t) {
    return single_block_divergence(AgentPolicy(anchor.agent_index(), anchor.logits() + t * direction), anchor, {}, 0.05,
                                   mdp)
        .kl_max;
  };
  double hi = 1.0;
  for (int i = 0; i < 60 && kl_at(hi) < radius; ++i) hi *= 2.0;
  double lo = 0.0;
  for (int i = 0; i < 80; ++i) {
    const double mid = 0.5 * (lo + hi);
    (kl_at(mid) <= radius ? lo : hi) = mid;
  }
  return {anchor.agent_index(), anchor.logits() + lo * direction};
}

struct BiasProbeConfig {
  double delta = 0.01;
  double lambda = 0.95;
  bool reweight = true;
  std::size_t probes = 16;
  std::uint64_t seed = 0;
};

// zeta in advantage units: (1-gamma) * max over probes of |L_exact - L_population|.
inline EstimatorBiasEstimate estimator_bias(const TabularMdp& mdp, const IntermediatePolicy& prev,
                                            std::size_t agent, const BiasProbeConfig& cfg,
                                            const std::vector<AgentPolicy>& extra = {}) {
  const auto prev_values = oracle_evaluate(mdp, prev);
  const auto behavior_values = prev.num_updated() == 0 ? prev_values : oracle_evaluate(mdp, prev.base());
  const AgentPolicy& anchor = prev.agent(agent);
  std::vector<AgentPolicy> cands = extra;
  Rng rng(mix_seed(cfg.seed, 0x7a657461));
  for (std::size_t k = 0; k < cfg.probes; ++k) {
    MatrixXd dir(anchor.logits().rows(), anchor.logits().cols());
    for (Eigen::Index s = 0; s < dir.rows(); ++s)
      for (Eigen::Index a = 0; a < dir.cols(); ++a) dir(s, a) = rng.normal();
    cands.push_back(scale_into_ball(anchor, dir, cfg.delta * rng.uniform(0.05, 1.0), &mdp));
  }
  double worst = 0.0;
  for (const auto& c : cands) {
    std::map<std::size_t, AgentPolicy> ov = prev.overrides();
    ov.insert_or_assign(agent, c);
    const IntermediatePolicy next(prev.base(), std::move(ov), prev.order(), prev.num_updated() + 1);
    const double exact = exact_surrogate(mdp, prev_values, next);
    const double pop = population_surrogate(mdp, prev.base(), prev, prev_values, behavior_values, c, cfg.lambda,
                                            cfg.reweight);
    worst = std::max(worst, std::abs(exact - pop));
  }
  return {(1.0 - mdp.gamma()) * worst, "empirical-gap"};
}

}  // namespace sat
