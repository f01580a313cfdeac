#pragma once

#include "sat/policy.hpp"

namespace sat {

struct OracleValues {
  std::vector<double> v;          // per state
  std::vector<double> q;          // per (s, k), flat at mdp.joint_offset(s) + k
  std::vector<double> advantage;  // q - v
  std::vector<double> occupancy;  // normalized discounted visitation
  double j = 0.0;
  double a_max = 0.0;
  double bellman_residual = 0.0;
};

inline constexpr std::size_t kDenseSolveLimit = 10000;

namespace detail {

// Solves x = b + gamma * M x for a row-substochastic M.
inline VectorXd solve_discounted(const MatrixXd& m, const VectorXd& b, double gamma, bool transpose, bool dense) {
  const Eigen::Index n = m.rows();
  if (dense) {
    MatrixXd sys = MatrixXd::Identity(n, n) - gamma * (transpose ? MatrixXd(m.transpose()) : m);
    Eigen::PartialPivLU<MatrixXd> lu(sys);
    VectorXd x = lu.solve(b);
    x += lu.solve(b - sys * x);  // one refinement pass
    return x;
  }
  VectorXd x = b;
  for (int it = 0; it < 1000000; ++it) {
    VectorXd nx = b + gamma * (transpose ? VectorXd(m.transpose() * x) : VectorXd(m * x));
    const double diff = (nx - x).lpNorm<Eigen::Infinity>();
    x.swap(nx);
    if (diff <= 1e-12) break;
  }
  return x;
}

}  // namespace detail

template <TeamPolicy P>
OracleValues oracle_evaluate(const TabularMdp& mdp, const P& pi) {
  check_compatible(pi, mdp);
  const std::size_t S = mdp.num_states();
  const double g = mdp.gamma();
  MatrixXd p_pi = MatrixXd::Zero(Eigen::Index(S), Eigen::Index(S));
  VectorXd r_pi = VectorXd::Zero(Eigen::Index(S));
  std::vector<std::vector<double>> dist(S);
  for (std::size_t s = 0; s < S; ++s) {
    dist[s] = joint_dist(pi, mdp, s);
    for (std::size_t k = 0; k < dist[s].size(); ++k) {
      const double w = dist[s][k];
      r_pi(Eigen::Index(s)) += w * mdp.reward(s, k);
      const auto row = mdp.transition_row(s, k);
      for (std::size_t s2 = 0; s2 < S; ++s2) p_pi(Eigen::Index(s), Eigen::Index(s2)) += w * row[s2];
    }
  }
  const bool dense = mdp.total_joint() <= kDenseSolveLimit;
  const VectorXd v = detail::solve_discounted(p_pi, r_pi, g, false, dense);
  VectorXd mu(static_cast<Eigen::Index>(S));
  for (std::size_t s = 0; s < S; ++s) mu(Eigen::Index(s)) = mdp.initial()[s];
  VectorXd occ = (1.0 - g) * detail::solve_discounted(p_pi, mu, g, true, dense);

  OracleValues out;
  out.v.assign(v.data(), v.data() + S);
  out.occupancy.resize(S);
  double occ_sum = 0.0;
  for (std::size_t s = 0; s < S; ++s) occ_sum += (out.occupancy[s] = std::max(occ(Eigen::Index(s)), 0.0));
  for (double& d : out.occupancy) d /= occ_sum;

  out.q.resize(mdp.total_joint());
  out.advantage.resize(mdp.total_joint());
  for (std::size_t s = 0; s < S; ++s) {
    double backup = 0.0;
    for (std::size_t k = 0; k < mdp.joint_count(s); ++k) {
      const auto row = mdp.transition_row(s, k);
      double ev = 0.0;
      for (std::size_t s2 = 0; s2 < S; ++s2) ev += row[s2] * out.v[s2];
      const std::size_t idx = mdp.joint_offset(s) + k;
      out.q[idx] = mdp.reward(s, k) + g * ev;
      out.advantage[idx] = out.q[idx] - out.v[s];
      out.a_max = std::max(out.a_max, std::abs(out.advantage[idx]));
      backup += dist[s][k] * out.q[idx];
    }
    out.bellman_residual = std::max(out.bellman_residual, std::abs(backup - out.v[s]));
  }
  for (std::size_t s = 0; s < S; ++s) out.j += mdp.initial()[s] * out.v[s];
  return out;
}

template <TeamPolicy P1, TeamPolicy P2>
double occupancy_shift_exact(const TabularMdp& mdp, const P1& p1, const P2& p2, std::span<const double> f) {
  require(f.size() == mdp.num_states(), "occupancy_shift_exact: f length mismatch");
  const auto d1 = oracle_evaluate(mdp, p1).occupancy;
  const auto d2 = oracle_evaluate(mdp, p2).occupancy;
  double e = 0.0;
  for (std::size_t s = 0; s < f.size(); ++s) e += (d1[s] - d2[s]) * f[s];
  return std::abs(e);
}

// (1/(1-gamma)) * sum_s d_prev(s) sum_a next(a|s) A_prev(s,a): the sequence surrogate
// of next against the intermediate policy that produced `prev`.
template <TeamPolicy P>
double exact_surrogate(const TabularMdp& mdp, const OracleValues& prev, const P& next) {
  double total = 0.0;
  for (std::size_t s = 0; s < mdp.num_states(); ++s) {
    const auto dist = joint_dist(next, mdp, s);
    double inner = 0.0;
    for (std::size_t k = 0; k < dist.size(); ++k) inner += dist[k] * prev.advantage[mdp.joint_offset(s) + k];
    total += prev.occupancy[s] * inner;
  }
  return total / (1.0 - mdp.gamma());
}

// The surrogate as a function of one agent's factor, everything else frozen at pi-hat^{i-1}.
struct SurrogateAnchor {
  std::size_t agent = 0;
  double gamma = 0.0;
  std::vector<double> occupancy;
  MatrixXd marginal_advantage;  // (s, a_j)
  std::vector<bool> active;

  double value(const AgentPolicy& cand) const {
    double total = 0.0;
    for (std::size_t s = 0; s < occupancy.size(); ++s) {
      if (!active[s]) continue;
      double inner = 0.0;
      for (Eigen::Index a = 0; a < marginal_advantage.cols(); ++a)
        inner += cand.prob(s, std::size_t(a)) * marginal_advantage(Eigen::Index(s), a);
      total += occupancy[s] * inner;
    }
    return total / (1.0 - gamma);
  }

  MatrixXd gradient(const AgentPolicy& cand) const {
    MatrixXd grad = MatrixXd::Zero(marginal_advantage.rows(), marginal_advantage.cols());
    for (std::size_t s = 0; s < occupancy.size(); ++s) {
      if (!active[s]) continue;
      const Eigen::Index si = Eigen::Index(s);
      double mean = 0.0;
      for (Eigen::Index a = 0; a < grad.cols(); ++a) mean += cand.prob(s, std::size_t(a)) * marginal_advantage(si, a);
      for (Eigen::Index a = 0; a < grad.cols(); ++a)
        grad(si, a) = occupancy[s] * cand.prob(s, std::size_t(a)) * (marginal_advantage(si, a) - mean) / (1.0 - gamma);
    }
    return grad;
  }
};

template <TeamPolicy P>
SurrogateAnchor make_surrogate_anchor(const TabularMdp& mdp, const P& prev_policy, const OracleValues& prev,
                                      std::size_t agent) {
  require(agent < mdp.num_agents(), "make_surrogate_anchor: agent out of range");
  SurrogateAnchor a;
  a.agent = agent;
  a.gamma = mdp.gamma();
  a.occupancy = prev.occupancy;
  a.marginal_advantage = MatrixXd::Zero(Eigen::Index(mdp.num_states()), Eigen::Index(mdp.action_count(agent)));
  a.active.assign(mdp.num_states(), false);
  for (std::size_t s = 0; s < mdp.num_states(); ++s) {
    if (!mdp.is_active(s, agent)) continue;
    a.active[s] = true;
    for (std::size_t k = 0; k < mdp.joint_count(s); ++k) {
      double others = 1.0;
      for (std::size_t j : mdp.active_agents(s))
        if (j != agent) others *= prev_policy.agent(j).prob(s, mdp.agent_action(s, k, j));
      a.marginal_advantage(Eigen::Index(s), Eigen::Index(mdp.agent_action(s, k, agent))) +=
          others * prev.advantage[mdp.joint_offset(s) + k];
    }
  }
  return a;
}

}  // namespace sat
