#pragma once

#include <gtest/gtest.h>

#include "sat/commands.hpp"

namespace sat::testing {

// Single state, 2x2 coordination: reward 1 iff both agents pick action 0.
inline TabularMdp coop_mdp(double gamma = 0.9) {
  MdpSpec s;
  s.states = 1;
  s.actions = {2, 2};
  s.transition = {{{1.0}, {1.0}, {1.0}, {1.0}}};
  s.reward = {{1.0, 0.0, 0.0, 0.0}};
  s.gamma = gamma;
  s.initial = {1.0};
  return build_mdp(s);
}

// One agent, one action, two states; V solves a 2x2 system.
inline TabularMdp chain2() {
  MdpSpec s;
  s.states = 2;
  s.actions = {1};
  s.transition = {{{0.5, 0.5}}, {{0.2, 0.8}}};
  s.reward = {{1.0}, {0.0}};
  s.gamma = 0.9;
  s.initial = {1.0, 0.0};
  return build_mdp(s);
}

inline TabularMdp suite_member(std::uint64_t seed, std::size_t states, std::vector<std::size_t> actions,
                               double gamma, double mask = 0.0) {
  RandomMdpSizes sz;
  sz.states = states;
  sz.actions = std::move(actions);
  sz.gamma = gamma;
  sz.mask_prob = mask;
  return random_mdp(seed, sz);
}

inline AgentPolicy agent_from_rows(std::size_t j, const std::vector<std::vector<double>>& probs) {
  MatrixXd l(Eigen::Index(probs.size()), Eigen::Index(probs[0].size()));
  for (std::size_t s = 0; s < probs.size(); ++s)
    for (std::size_t a = 0; a < probs[s].size(); ++a) l(Eigen::Index(s), Eigen::Index(a)) = std::log(probs[s][a]);
  return {j, l};
}

// Plain Bellman iteration on the joint MDP, independent of the linear solve.
template <TeamPolicy P>
std::vector<double> value_iteration(const TabularMdp& mdp, const P& pi, double tol = 1e-14) {
  std::vector<double> v(mdp.num_states(), 0.0);
  for (int it = 0; it < 200000; ++it) {
    std::vector<double> nv(v.size(), 0.0);
    for (std::size_t s = 0; s < v.size(); ++s) {
      const auto d = joint_dist(pi, mdp, s);
      for (std::size_t k = 0; k < d.size(); ++k) {
        double q = mdp.reward(s, k);
        const auto row = mdp.transition_row(s, k);
        for (std::size_t s2 = 0; s2 < v.size(); ++s2) q += mdp.gamma() * row[s2] * v[s2];
        nv[s] += d[k] * q;
      }
    }
    double diff = 0.0;
    for (std::size_t s = 0; s < v.size(); ++s) diff = std::max(diff, std::abs(nv[s] - v[s]));
    v = nv;
    if (diff < tol) break;
  }
  return v;
}

inline std::vector<double> random_simplex(Rng& rng, std::size_t n, double spread = 2.0) {
  std::vector<double> p(n);
  double z = 0.0;
  for (double& x : p) z += (x = std::exp(spread * rng.normal()));
  for (double& x : p) x /= z;
  return p;
}

}  // namespace sat::testing
