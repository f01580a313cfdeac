#pragma once

#include <array>
#include <optional>

#include "sat/estimator.hpp"

namespace sat {

struct TrustRegionConfig {
  std::vector<double> delta{0.01};  // one entry = scalar broadcast, else per state
  double eps_clip = 0.2;
  double beta = 1.0;
  double beta_growth = 2.0;
  double beta_decay = 0.9;
  double alpha = 0.05;
  std::optional<double> eta;  // nullopt = 1/L_blk
  std::size_t epochs = 10;
  std::size_t max_backtracks = 8;

  double radius(std::size_t s) const { return delta.size() == 1 ? delta[0] : delta.at(s); }
  bool scalar() const { return delta.size() == 1; }
  bool null_radius() const {
    return std::all_of(delta.begin(), delta.end(), [](double d) { return d <= 0.0; });
  }
  bool operator==(const TrustRegionConfig&) const = default;
};

struct SmoothnessConstants {
  double b1 = std::sqrt(2.0);
  double b2 = 1.0;
  double l_blk = 0.0;
};

inline SmoothnessConstants smoothness_constants(const AgentPolicy&, double a_max, double gamma) {
  SmoothnessConstants c;
  c.l_blk = a_max / (1.0 - gamma) * (c.b2 + c.b1 * c.b1);
  return c;
}

struct ObjectiveValue {
  double value = 0.0;
  MatrixXd gradient;
};

struct OptimizerDiagnostics {
  double b1 = std::sqrt(2.0), b2 = 1.0, l_blk = 0.0, eta = 0.0;
  std::vector<double> ascent_margin;
  std::vector<double> grad_mapping_norm;
  std::vector<double> step_eta;
  std::vector<double> objective;  // value after each accepted step; front is the anchor value
  std::size_t backtracks = 0;
  bool abandoned = false;
  double final_kl_quantile = 0.0;
  double final_kl_max = 0.0;
  double final_beta = 0.0;
  std::size_t raw_proposals = 0;
  std::size_t raw_state_checks = 0;  // active states inspected across first proposals
  std::size_t raw_violations = 0;    // of which KL > delta before any backtracking
};

namespace detail {

inline std::vector<double> block_kl(const AgentPolicy& cand, const AgentPolicy& current, const TabularMdp* mdp) {
  return single_block_divergence(cand, current, {}, 0.05, mdp).per_state_kl;
}

inline double max_ratio(const std::vector<double>& kl, const TrustRegionConfig& cfg) {
  double m = 0.0;
  for (std::size_t s = 0; s < kl.size(); ++s) {
    const double r = cfg.radius(s);
    m = std::max(m, kl[s] == 0.0 ? 0.0 : (r > 0.0 ? kl[s] / r : kInf));
  }
  return m;
}

}  // namespace detail

// Per-episode counts of the agent's actions, the sufficient statistic of u_i(tau).
struct SequenceCounts {
  std::size_t agent = 0;
  std::vector<std::vector<std::array<std::size_t, 3>>> entries;  // (s, a, count)

  SequenceCounts(const TrajectoryBatch& b, const TabularMdp& mdp, std::size_t agent_index) : agent(agent_index) {
    entries.resize(b.size());
    for (std::size_t e = 0; e < b.size(); ++e) {
      std::map<std::pair<std::size_t, std::size_t>, std::size_t> c;
      for (const auto& st : b.episodes[e].steps)
        if (mdp.is_active(st.state, agent)) ++c[{st.state, mdp.agent_action(st.state, st.joint, agent)}];
      for (const auto& [k, n] : c) entries[e].push_back({k.first, k.second, n});
    }
  }
};

// Clipped sequence-level objective minus beta * E_w[KL(candidate || current)].
inline ObjectiveValue clipped_objective(const AdvantageSet& adv, const SequenceCounts& counts,
                                        const AgentPolicy& cand, const AgentPolicy& current, double beta,
                                        double eps_clip, std::span<const double> kl_weights,
                                        const TabularMdp* mdp = nullptr) {
  require(cand.num_states() == current.num_states() && cand.num_actions() == current.num_actions(),
          "clipped_objective: shape mismatch");
  require(adv.normalized.size() == counts.entries.size(), "clipped_objective: advantage/batch size mismatch");
  const double lo = std::log(1.0 - eps_clip), hi = std::log(1.0 + eps_clip);
  const double n_ep = double(counts.entries.size());
  ObjectiveValue out;
  out.gradient = MatrixXd::Zero(cand.logits().rows(), cand.logits().cols());
  for (std::size_t e = 0; e < counts.entries.size(); ++e) {
    const double a = adv.normalized[e];
    double u = 0.0;
    for (const auto& [s, act, n] : counts.entries[e]) u += double(n) * (cand.log_prob(s, act) - current.log_prob(s, act));
    const double r = std::exp(u);
    const double rc = std::exp(std::clamp(u, lo, hi));
    const double unclipped = r * a, clipped = rc * a;
    if (unclipped <= clipped) {
      out.value += unclipped / n_ep;
      if (a == 0.0) continue;
      const double scale = a * r / n_ep;
      for (const auto& [s, act, n] : counts.entries[e]) {
        const Eigen::Index si = Eigen::Index(s);
        out.gradient(si, Eigen::Index(act)) += scale * double(n);
        for (Eigen::Index b = 0; b < out.gradient.cols(); ++b)
          out.gradient(si, b) -= scale * double(n) * cand.prob(s, std::size_t(b));
      }
    } else {
      out.value += clipped / n_ep;
    }
  }
  if (beta != 0.0) {
    require(kl_weights.size() == cand.num_states(), "clipped_objective: kl_weights length mismatch");
    for (std::size_t s = 0; s < cand.num_states(); ++s) {
      if (mdp && !mdp->is_active(s, cand.agent_index())) continue;
      if (kl_weights[s] == 0.0) continue;
      const auto p = cand.row(s), q = current.row(s);
      const double kl = kl_divergence(p, q);
      out.value -= beta * kl_weights[s] * kl;
      for (std::size_t b = 0; b < p.size(); ++b)
        out.gradient(Eigen::Index(s), Eigen::Index(b)) -=
            beta * kl_weights[s] * p[b] * (cand.log_prob(s, b) - current.log_prob(s, b) - kl);
    }
  }
  return out;
}

inline ObjectiveValue clipped_objective(const AdvantageSet& adv, const TrajectoryBatch& b, const TabularMdp& mdp,
                                        const AgentPolicy& cand, const AgentPolicy& current, double beta,
                                        double eps_clip, std::span<const double> kl_weights) {
  return clipped_objective(adv, SequenceCounts(b, mdp, cand.agent_index()), cand, current, beta, eps_clip,
                           kl_weights, &mdp);
}

struct BlockStepResult {
  AgentPolicy policy;
  double scale = 1.0;
  double grad_mapping_norm = 0.0;
  bool projected = false;
  std::vector<double> raw_kl;  // per-state KL of the unprojected proposal
};

inline BlockStepResult block_step(const AgentPolicy& cand, const MatrixXd& gradient, double eta,
                                  const TrustRegionConfig& cfg, const AgentPolicy& current,
                                  const TabularMdp* mdp = nullptr) {
  require(eta > 0.0, "block_step: eta must be positive");
  const MatrixXd disp = eta * gradient;
  auto at = [&](double t) { return AgentPolicy(cand.agent_index(), cand.logits() + t * disp); };
  BlockStepResult r;
  r.policy = at(1.0);
  r.raw_kl = detail::block_kl(r.policy, current, mdp);
  if (detail::max_ratio(r.raw_kl, cfg) <= 1.0) {
    r.grad_mapping_norm = gradient.norm();
    return r;
  }
  r.projected = true;
  double lo = 0.0, hi = 1.0;
  double m_lo = detail::max_ratio(detail::block_kl(cand, current, mdp), cfg);
  for (int it = 0; it < 60; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double m = detail::max_ratio(detail::block_kl(at(mid), current, mdp), cfg);
    if (m > 1.0) {
      hi = mid;
    } else {
      lo = mid;
      m_lo = m;
      if (m >= 0.95) break;
    }
  }
  if (m_lo < 0.95 || m_lo > 1.0) throw Error("block_step: bisection did not reach the trust-region boundary in 60 iterations");
  r.scale = lo;
  r.policy = at(lo);
  r.grad_mapping_norm = lo * gradient.norm();
  return r;
}

struct BacktrackDecision {
  bool accepted = true;
  double beta = 0.0;
  double quantile = 0.0;  // KL quantile (scalar radius) or KL/delta quantile (per-state radius)
};

inline BacktrackDecision quantile_backtrack(const AgentPolicy& cand, const AgentPolicy& current,
                                            const TrustRegionConfig& cfg, double beta,
                                            std::span<const double> kl_weights, const TabularMdp* mdp = nullptr) {
  auto kl = detail::block_kl(cand, current, mdp);
  BacktrackDecision d;
  d.beta = beta;
  if (cfg.scalar()) {
    d.quantile = weighted_quantile(kl, kl_weights, 1.0 - cfg.alpha);
    d.accepted = d.quantile <= cfg.delta[0];
  } else {
    for (std::size_t s = 0; s < kl.size(); ++s) kl[s] = kl[s] == 0.0 ? 0.0 : kl[s] / cfg.radius(s);
    d.quantile = weighted_quantile(kl, kl_weights, 1.0 - cfg.alpha);
    d.accepted = d.quantile <= 1.0;
  }
  if (!d.accepted) d.beta = beta * cfg.beta_growth;
  return d;
}

struct BlockResult {
  AgentPolicy policy;
  OptimizerDiagnostics diag;
};

// Objective: ObjectiveValue(const AgentPolicy&, double beta).
template <class Objective>
BlockResult optimize_block(Objective&& objective, const AgentPolicy& current, const TrustRegionConfig& cfg,
                           double eta, std::span<const double> kl_weights, const TabularMdp* mdp, double& beta) {
  BlockResult out{current, {}};
  auto& d = out.diag;
  d.eta = eta;
  d.final_beta = beta;
  if (cfg.null_radius()) return out;
  require(eta > 0.0 && std::isfinite(eta), "optimize_block: eta must be positive and finite");

  AgentPolicy cand = current;
  std::size_t accepts_in_row = 0;
  d.objective.push_back(objective(cand, beta).value);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double eta_b = eta;
    ObjectiveValue ov = objective(cand, beta);
    bool accepted = false;
    for (std::size_t b = 0; b <= cfg.max_backtracks; ++b) {
      const AgentPolicy raw(cand.agent_index(), cand.logits() + eta_b * ov.gradient);
      if (b == 0) {
        const auto kl = detail::block_kl(raw, current, mdp);
        ++d.raw_proposals;
        for (std::size_t s = 0; s < kl.size(); ++s) {
          if (mdp && !mdp->is_active(s, cand.agent_index())) continue;
          ++d.raw_state_checks;
          if (kl[s] > cfg.radius(s)) ++d.raw_violations;
        }
      }
      const auto dec = quantile_backtrack(raw, current, cfg, beta, kl_weights, mdp);
      if (dec.accepted) {
        accepted = true;
        break;
      }
      beta = dec.beta;
      ++d.backtracks;
      accepts_in_row = 0;
      if (b == cfg.max_backtracks) break;
      eta_b *= 0.5;
      ov = objective(cand, beta);
    }
    if (!accepted) {
      d.abandoned = true;
      break;
    }
    const auto step = block_step(cand, ov.gradient, eta_b, cfg, current, mdp);
    const double after = objective(step.policy, beta).value;
    d.ascent_margin.push_back(after - ov.value - 0.5 * eta_b * step.grad_mapping_norm * step.grad_mapping_norm);
    d.grad_mapping_norm.push_back(step.grad_mapping_norm);
    d.step_eta.push_back(eta_b);
    d.objective.push_back(after);
    cand = step.policy;
    if (++accepts_in_row == 3) {
      beta = std::max(0.0, beta * cfg.beta_decay);
      accepts_in_row = 0;
    }
    if (step.grad_mapping_norm == 0.0) break;
  }

  const auto div = single_block_divergence(cand, current, kl_weights, cfg.alpha, mdp);
  if (detail::max_ratio(div.per_state_kl, cfg) > 1.0 + 1e-9)
    throw Error("optimize_block: returned target violates the hard trust region");
  d.final_kl_max = div.kl_max;
  d.final_kl_quantile = div.kl_quantile;
  d.final_beta = beta;
  out.policy = std::move(cand);
  return out;
}

}  // namespace sat
