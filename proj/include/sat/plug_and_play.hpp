#pragma once

#include "sat/policy.hpp"

namespace sat {

// pi(a) proportional to pre(a)^{1/(1+lambda)} * cur(a)^{lambda/(1+lambda)}, returned as log-probs.
inline std::vector<double> geometric_mixture_log(std::span<const double> log_pre, std::span<const double> log_cur,
                                                 double lambda) {
  require(log_pre.size() == log_cur.size(), "geometric_mixture: size mismatch");
  require(lambda >= 0.0, "geometric_mixture: lambda must be >= 0");
  const double w_pre = 1.0 / (1.0 + lambda), w_cur = lambda / (1.0 + lambda);
  std::vector<double> l(log_pre.size());
  for (std::size_t a = 0; a < l.size(); ++a) l[a] = w_pre * log_pre[a] + w_cur * log_cur[a];
  const double z = log_sum_exp(l);
  for (double& x : l) x -= z;
  return l;
}

inline std::vector<double> geometric_mixture(std::span<const double> pre, std::span<const double> cur, double lambda) {
  std::vector<double> lp(pre.size()), lc(cur.size());
  for (std::size_t a = 0; a < pre.size(); ++a) {
    require(pre[a] > 0.0 && cur[a] > 0.0, "geometric_mixture: distributions must be strictly positive");
    lp[a] = std::log(pre[a]);
    lc[a] = std::log(cur[a]);
  }
  if (lambda == 0.0) return {pre.begin(), pre.end()};
  auto l = geometric_mixture_log(lp, lc, lambda);
  for (double& x : l) x = std::exp(x);
  return l;
}

struct Stage0Result {
  AgentPolicy projected;
  std::vector<double> lambda;
  std::vector<double> kl_to_incumbent;
  std::vector<double> kl_to_pretrained;
  std::vector<bool> binding;

  std::size_t binding_count() const { return std::size_t(std::count(binding.begin(), binding.end(), true)); }
};

inline constexpr double kStage0Tol = 1e-6;

inline Stage0Result stage0_project(const AgentPolicy& pre, const AgentPolicy& incumbent, std::span<const double> delta0) {
  require(pre.num_states() == incumbent.num_states() && pre.num_actions() == incumbent.num_actions(),
          "stage0_project: pretrained and incumbent shapes differ");
  const std::size_t S = pre.num_states(), A = pre.num_actions();
  require(delta0.size() == 1 || delta0.size() == S, "stage0_project: delta0 must be scalar or per state");
  Stage0Result r;
  r.lambda.assign(S, 0.0);
  r.kl_to_incumbent.assign(S, 0.0);
  r.kl_to_pretrained.assign(S, 0.0);
  r.binding.assign(S, false);
  MatrixXd logits = pre.logits();

  for (std::size_t s = 0; s < S; ++s) {
    const double d0 = delta0.size() == 1 ? delta0[0] : delta0[s];
    require(d0 > 0.0, "stage0_project: delta0 must be positive at state " + std::to_string(s));
    std::vector<double> lp(A), lc(A);
    for (std::size_t a = 0; a < A; ++a) {
      lp[a] = pre.log_prob(s, a);
      lc[a] = incumbent.log_prob(s, a);
    }
    auto kl_inc = [&](const std::vector<double>& l) {
      double k = 0.0;
      for (std::size_t a = 0; a < A; ++a) k += std::exp(l[a]) * (l[a] - lc[a]);
      return std::max(k, 0.0);
    };
    const double k0 = kl_inc(lp);
    if (k0 <= d0) {
      r.kl_to_incumbent[s] = k0;
      continue;
    }
    r.binding[s] = true;
    double hi = 1.0;
    while (kl_inc(geometric_mixture_log(lp, lc, hi)) > d0) {
      hi *= 2.0;
      if (hi > std::ldexp(1.0, 60))
        throw Error("stage0_project: bracket expansion failed at state " + std::to_string(s));
    }
    double lo = 0.0;
    for (int it = 0; it < 80; ++it) {
      const double mid = 0.5 * (lo + hi);
      (kl_inc(geometric_mixture_log(lp, lc, mid)) > d0 ? lo : hi) = mid;
    }
    const auto l = geometric_mixture_log(lp, lc, hi);
    const double k = kl_inc(l);
    if (k > d0 + kStage0Tol || k < d0 - kStage0Tol)
      throw Error("stage0_project: bisection missed the radius at state " + std::to_string(s));
    r.lambda[s] = hi;
    r.kl_to_incumbent[s] = k;
    for (std::size_t a = 0; a < A; ++a) logits(Eigen::Index(s), Eigen::Index(a)) = l[a];
  }
  r.projected = AgentPolicy(incumbent.agent_index(), std::move(logits));
  for (std::size_t s = 0; s < S; ++s) r.kl_to_pretrained[s] = kl_divergence(r.projected.row(s), pre.row(s));
  return r;
}

inline double relaxed_radius(double delta, double n, double eta) {
  require(n >= 1.0, "relaxed_radius: N must be >= 1");
  require(eta > 0.0 && eta < 1.0, "relaxed_radius: eta must lie in (0,1)");
  if (std::isinf(n)) return delta;
  return delta + std::sqrt(std::log(2.0 / eta) / (2.0 * n));
}

struct SwapOutcome {
  FactorizedPolicy team;
  Stage0Result stage0;
};

inline SwapOutcome replace_agent(const FactorizedPolicy& team, std::size_t j, const AgentPolicy& pre,
                                 std::span<const double> delta0) {
  require(j < team.num_agents(), "replace_agent: agent index out of range");
  const AgentPolicy relabeled(j, pre.logits());
  auto res = stage0_project(relabeled, team.agent(j), delta0);
  return {team.with_agent(res.projected), std::move(res)};
}

}  // namespace sat
