#include "helpers.hpp"

using namespace sat;
using namespace sat::testing;

namespace {

// p over two actions with KL(p || uniform) = target, by bisection on p0 in [0.5, 1).
std::vector<double> two_point_with_kl(double target) {
  double lo = 0.5, hi = 1.0 - 1e-15;
  const std::vector<double> u{0.5, 0.5};
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (kl_divergence(std::vector<double>{mid, 1 - mid}, u) < target ? lo : hi) = mid;
  }
  return {lo, 1 - lo};
}

}  // namespace

TEST(Policy, UniformProductIsQuarter) {
  const auto m = coop_mdp();
  const auto pi = FactorizedPolicy::uniform(m);
  for (double p : joint_dist(pi, m, 0)) EXPECT_DOUBLE_EQ(p, 0.25);
}

TEST(Policy, ProductArithmetic) {
  const auto m = coop_mdp();
  const FactorizedPolicy pi({agent_from_rows(0, {{0.9, 0.1}}), agent_from_rows(1, {{0.5, 0.5}})});
  const auto d = joint_dist(pi, m, 0);
  const std::vector<double> want{0.45, 0.45, 0.05, 0.05};
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(d[k], want[k], 1e-15);
}

TEST(Policy, MaskedStateUsesActiveAgentOnly) {
  const auto m = suite_member(5, 4, {2, 3}, 0.9, 0.5);
  const auto pi = FactorizedPolicy::random(m, 3, 1.0);
  for (std::size_t s = 0; s < m.num_states(); ++s) {
    const auto d = joint_dist(pi, m, s);
    ASSERT_EQ(d.size(), m.joint_count(s));
    if (m.active_agents(s).size() == 1) {
      const std::size_t j = m.active_agents(s)[0];
      for (std::size_t k = 0; k < d.size(); ++k) EXPECT_NEAR(d[k], pi.agent(j).prob(s, k), 1e-15);
    }
    double sum = 0.0;
    for (double p : d) sum += p;
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(Policy, IntermediateComposition) {
  const auto m = suite_member(2, 3, {2, 2, 2}, 0.9);
  const auto cur = FactorizedPolicy::random(m, 1, 1.0);
  const auto tgt = FactorizedPolicy::random(m, 2, 1.0);
  std::map<std::size_t, AgentPolicy> targets;
  for (std::size_t j = 0; j < 3; ++j) targets.emplace(j, tgt.agent(j));
  const std::vector<std::size_t> order{1, 0, 2};

  const auto p0 = compose_intermediate(cur, targets, order, 0);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_TRUE(p0.agent(j) == cur.agent(j));
  const auto p1 = compose_intermediate(cur, targets, order, 1);
  EXPECT_TRUE(p1.agent(1) == tgt.agent(1));
  EXPECT_TRUE(p1.agent(0) == cur.agent(0));
  EXPECT_TRUE(p1.agent(2) == cur.agent(2));
  const auto p3 = compose_intermediate(cur, targets, order, 3);
  EXPECT_TRUE(p3.materialize() == tgt);
  EXPECT_THROW(compose_intermediate(cur, targets, {0, 0, 1}, 1), ValidationError);
}

TEST(Policy, IdenticalPoliciesHaveZeroDivergence) {
  const auto m = suite_member(4, 4, {3, 2}, 0.9);
  const auto pi = FactorizedPolicy::random(m, 4, 2.0);
  const auto d = divergence(pi, pi, m);
  for (std::size_t s = 0; s < m.num_states(); ++s) {
    EXPECT_EQ(d.per_state_kl[s], 0.0);
    EXPECT_EQ(d.per_state_tv[s], 0.0);
  }
}

TEST(Policy, PeakedSoftmaxKlAndPinsker) {
  MatrixXd l(1, 2);
  l << 10.0, 0.0;
  const AgentPolicy p(0, l), q = AgentPolicy::uniform(0, 1, 2);
  const auto r = single_block_divergence(p, q);
  const double p0 = 1.0 / (1.0 + std::exp(-10.0));
  const double want = p0 * std::log(p0 / 0.5) + (1 - p0) * std::log((1 - p0) / 0.5);
  EXPECT_NEAR(r.kl_max, want, 1e-12);
  EXPECT_GE(r.kl_max, 0.0);
  EXPECT_LE(r.tv_max, std::sqrt(r.kl_max / 2.0));
}

TEST(Policy, HandSummedKl) {
  const auto t = agent_from_rows(0, {{0.75, 0.25}});
  const auto c = agent_from_rows(0, {{0.5, 0.5}});
  EXPECT_NEAR(single_block_divergence(t, c).kl_max, 0.75 * std::log(1.5) + 0.25 * std::log(0.5), 1e-15);
  EXPECT_NEAR(single_block_divergence(t, c).kl_max, 0.1308120, 1e-6);
}

TEST(Policy, KlAdditivityAcrossAgents) {
  const auto m = coop_mdp();
  const FactorizedPolicy q({agent_from_rows(0, {{0.5, 0.5}}), agent_from_rows(1, {{0.5, 0.5}})});
  const FactorizedPolicy p({agent_from_rows(0, {two_point_with_kl(0.1)}), agent_from_rows(1, {two_point_with_kl(0.2)})});
  EXPECT_NEAR(divergence(p, q, m).kl_max, 0.3, 1e-9);
}

TEST(Policy, SingleBlockEqualsJointWhenOthersFixed) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto m = suite_member(seed, 4, {2, 3}, 0.9, 0.3);
    const auto cur = FactorizedPolicy::random(m, seed, 1.0);
    const auto alt = FactorizedPolicy::random(m, seed + 100, 1.0);
    const auto next = cur.with_agent(alt.agent(1));
    const auto joint = divergence(next, cur, m);
    const auto block = single_block_divergence(next.agent(1), cur.agent(1), {}, 0.05, &m);
    for (std::size_t s = 0; s < m.num_states(); ++s) EXPECT_NEAR(joint.per_state_kl[s], block.per_state_kl[s], 1e-9);
  }
}

TEST(Policy, PinskerOnRandomPairs) {
  Rng rng(77);
  std::size_t violations = 0;
  for (int i = 0; i < 10000; ++i) {
    const std::size_t n = 2 + rng.below(5);
    const auto p = random_simplex(rng, n), q = random_simplex(rng, n);
    if (tv_distance(p, q) > std::sqrt(kl_divergence(p, q) / 2.0) + 1e-15) ++violations;
  }
  EXPECT_EQ(violations, 0u);
}

TEST(Policy, JsonRoundTripAndDigest) {
  const auto m = suite_member(8, 3, {2, 4}, 0.9);
  const auto pi = FactorizedPolicy::random(m, 8, 1.5);
  const auto back = policy_from_json(json::parse(policy_to_json(pi).dump()));
  EXPECT_TRUE(back == pi);
  EXPECT_EQ(policy_digest(back), policy_digest(pi));
  EXPECT_NE(policy_digest(pi), policy_digest(FactorizedPolicy::uniform(m)));
}
