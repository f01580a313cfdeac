#include "helpers.hpp"

using namespace sat;
using namespace sat::testing;

TEST(Mdp, DegenerateChainIsValid) {
  MdpSpec s;
  s.states = 1;
  s.actions = {1};
  s.transition = {{{1.0}}};
  s.reward = {{1.0}};
  s.gamma = 0.9;
  s.initial = {1.0};
  const auto m = build_mdp(s);
  EXPECT_EQ(m.num_states(), 1u);
  EXPECT_DOUBLE_EQ(m.r_max(), 1.0);
  EXPECT_EQ(m.total_joint(), 1u);
}

TEST(Mdp, RejectsSubstochasticRow) {
  MdpSpec s;
  s.states = 2;
  s.actions = {1};
  s.transition = {{{0.5, 0.4}}, {{0.0, 1.0}}};
  s.reward = {{0.0}, {0.0}};
  s.initial = {1.0, 0.0};
  EXPECT_THROW(build_mdp(s), ValidationError);
}

TEST(Mdp, RejectsBadInitialAndActivation) {
  MdpSpec s;
  s.states = 1;
  s.actions = {1};
  s.transition = {{{1.0}}};
  s.reward = {{0.0}};
  s.initial = {0.5};
  EXPECT_THROW(build_mdp(s), ValidationError);
  s.initial = {1.0};
  s.activation = {{}};
  EXPECT_THROW(build_mdp(s), ValidationError);
  s.activation = {{3}};
  EXPECT_THROW(build_mdp(s), ValidationError);
}

TEST(Mdp, MaskedActivationEnumeratesActiveAgentOnly) {
  MdpSpec s;
  s.states = 3;
  s.actions = {2, 2};
  s.activation = {{0}, {0, 1}, {0, 1}};
  s.transition.resize(3);
  s.reward.resize(3);
  for (std::size_t st = 0; st < 3; ++st) {
    const std::size_t k = st == 0 ? 2 : 4;
    s.transition[st].assign(k, {1.0 / 3, 1.0 / 3, 1.0 / 3});
    s.reward[st].assign(k, 0.5);
  }
  s.initial = {1.0, 0.0, 0.0};
  const auto m = build_mdp(s);
  EXPECT_EQ(m.joint_count(0), 2u);
  EXPECT_EQ(m.joint_count(1), 4u);
  EXPECT_FALSE(m.is_active(0, 1));
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_EQ(m.agent_action(0, k, 0), k);
    EXPECT_EQ(m.agent_action(0, k, 1), 0u);
  }
  // lowest agent index most significant
  EXPECT_EQ(m.agent_action(1, 2, 0), 1u);
  EXPECT_EQ(m.agent_action(1, 2, 1), 0u);
  const std::vector<std::size_t> acts{1, 1};
  EXPECT_EQ(m.joint_index(1, acts), 3u);
}

TEST(Mdp, GeneratorDeterministicAndSeedSensitive) {
  RandomMdpSizes sz;
  sz.states = 5;
  sz.actions = {2, 3};
  const auto a = random_mdp(1, sz), b = random_mdp(1, sz), c = random_mdp(2, sz);
  EXPECT_TRUE(a.spec() == b.spec());
  EXPECT_NE(a.spec().transition, c.spec().transition);
}

TEST(Mdp, FullDensityGivesPositiveTransitions) {
  RandomMdpSizes sz;
  sz.states = 6;
  sz.actions = {3};
  sz.density = 1.0;
  const auto m = random_mdp(9, sz);
  for (std::size_t s = 0; s < m.num_states(); ++s)
    for (std::size_t k = 0; k < m.joint_count(s); ++k)
      for (double p : m.transition_row(s, k)) EXPECT_GT(p, 0.0);
}

TEST(Mdp, GeneratedInvariants) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto m = suite_member(seed, 2 + seed % 5, {2, 3}, 0.9, 0.3);
    for (std::size_t s = 0; s < m.num_states(); ++s) {
      EXPECT_FALSE(m.active_agents(s).empty());
      for (std::size_t k = 0; k < m.joint_count(s); ++k) {
        double sum = 0.0;
        for (double p : m.transition_row(s, k)) {
          EXPECT_GE(p, 0.0);
          sum += p;
        }
        EXPECT_NEAR(sum, 1.0, 1e-9);
        EXPECT_LE(std::abs(m.reward(s, k)), m.r_max());
      }
    }
    double isum = 0.0;
    for (double p : m.initial()) isum += p;
    EXPECT_NEAR(isum, 1.0, 1e-9);
  }
}

TEST(Mdp, JsonRoundTripAndStrictKeys) {
  const auto m = suite_member(3, 4, {2, 2}, 0.85, 0.25);
  const json j = mdp_to_json(m.spec());
  EXPECT_TRUE(mdp_spec_from_json(j) == m.spec());
  json bad = j;
  bad["extra"] = 1;
  EXPECT_THROW(mdp_spec_from_json(bad), ValidationError);
  bad = j;
  bad["agents"] = 5;
  EXPECT_THROW(mdp_spec_from_json(bad), ValidationError);
}
