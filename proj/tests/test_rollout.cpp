#include "helpers.hpp"

using namespace sat;
using namespace sat::testing;

TEST(Rollout, CollapsedRandomnessGivesIdenticalEpisodes) {
  // deterministic cycle 0 -> 1 -> 2 -> 0 for every action, near-deterministic policy
  MdpSpec s;
  s.states = 3;
  s.actions = {2};
  s.transition = {{{0, 1, 0}, {0, 1, 0}}, {{0, 0, 1}, {0, 0, 1}}, {{1, 0, 0}, {1, 0, 0}}};
  s.reward = {{1, 0}, {0, 1}, {0.5, 0.5}};
  s.initial = {1, 0, 0};
  const auto m = build_mdp(s);
  MatrixXd l = MatrixXd::Zero(3, 2);
  l.col(0).setConstant(20.0);
  const FactorizedPolicy pi({AgentPolicy(0, l)});
  const auto b = sample_batch(m, pi, 50, 12, 3);
  for (const auto& ep : b.episodes) EXPECT_EQ(ep.steps, b.episodes[0].steps);
}

TEST(Rollout, SameSeedSameBatch) {
  const auto m = suite_member(2, 4, {2, 3}, 0.9, 0.3);
  const auto pi = FactorizedPolicy::random(m, 2, 1.0);
  EXPECT_TRUE(sample_batch(m, pi, 40, 30, 11, 4) == sample_batch(m, pi, 40, 30, 11, 4));
  EXPECT_FALSE(sample_batch(m, pi, 40, 30, 11, 4) == sample_batch(m, pi, 40, 30, 12, 4));
}

TEST(Rollout, GroupsShareInitialState) {
  const auto m = suite_member(5, 6, {2}, 0.9);
  const auto b = sample_batch(m, FactorizedPolicy::uniform(m), 64, 5, 1, 4);
  for (std::size_t e = 0; e < b.size(); ++e) {
    EXPECT_EQ(b.episodes[e].group, e / 4);
    EXPECT_EQ(b.episodes[e].initial_state, b.episodes[e - e % 4].initial_state);
    EXPECT_EQ(b.episodes[e].steps.front().state, b.episodes[e].initial_state);
  }
}

TEST(Rollout, LoggedLogProbsMatchPolicy) {
  const auto m = suite_member(7, 4, {2, 3}, 0.9, 0.4);
  const auto pi = FactorizedPolicy::random(m, 7, 1.0);
  const auto b = sample_batch(m, pi, 10, 20, 5);
  for (const auto& ep : b.episodes)
    for (const auto& st : ep.steps) {
      EXPECT_NEAR(joint_log_prob(pi, m, st.state, st.joint), st.log_probs[0] + st.log_probs[1], 1e-12);
      EXPECT_EQ(st.reward, m.reward(st.state, st.joint));
    }
}

TEST(Rollout, EmpiricalOccupancyMatchesOracle) {
  const auto m = suite_member(13, 3, {2, 2}, 0.9);
  const auto pi = FactorizedPolicy::random(m, 13, 1.0);
  const auto b = sample_batch(m, pi, 20000, 120, 99);
  const auto emp = empirical_occupancy(b, 3, m.gamma());
  EXPECT_LE(tv_distance(emp, oracle_evaluate(m, pi).occupancy), 0.02);
}

TEST(Rollout, DefaultHorizonTailBound) {
  const std::size_t h = default_horizon(0.9, 1.0, 1e-3);
  EXPECT_LE(std::pow(0.9, double(h)) / 0.1, 1e-3 + 1e-12);
  EXPECT_GT(std::pow(0.9, double(h - 1)) / 0.1, 1e-3);
}

TEST(Rollout, JsonlRoundTrip) {
  const auto m = suite_member(4, 5, {3, 2}, 0.9, 0.2);
  const auto pi = FactorizedPolicy::random(m, 4, 1.0);
  const auto b = sample_batch(m, pi, 12, 9, 8, 3);
  std::stringstream ss;
  write_batch_jsonl(ss, b);
  EXPECT_TRUE(read_batch_jsonl(ss) == b);
}
