#pragma once

#include <json.hpp>

#include "sat/common.hpp"

namespace sat {

using json = nlohmann::json;

// Plain description, validated by build_mdp. Joint actions at a state enumerate the active
// agents' actions in mixed radix: lowest active agent index most significant.
struct MdpSpec {
  std::size_t states = 0;
  std::vector<std::size_t> actions;                        // per agent
  std::vector<std::vector<std::vector<double>>> transition;  // [s][k][s']
  std::vector<std::vector<double>> reward;                   // [s][k]
  double gamma = 0.9;
  std::vector<double> initial;
  std::vector<std::vector<std::size_t>> activation;  // per state; empty outer = all active

  bool operator==(const MdpSpec&) const = default;
};

class TabularMdp {
 public:
  std::size_t num_states() const { return states_; }
  std::size_t num_agents() const { return actions_.size(); }
  std::size_t action_count(std::size_t agent) const { return actions_.at(agent); }
  const std::vector<std::size_t>& action_counts() const { return actions_; }
  double gamma() const { return gamma_; }
  double r_max() const { return r_max_; }
  const std::vector<double>& initial() const { return initial_; }

  std::size_t joint_count(std::size_t s) const { return offsets_[s + 1] - offsets_[s]; }
  std::size_t joint_offset(std::size_t s) const { return offsets_[s]; }
  std::size_t total_joint() const { return offsets_.back(); }

  const std::vector<std::size_t>& active_agents(std::size_t s) const { return active_[s]; }
  bool is_active(std::size_t s, std::size_t agent) const { return active_mask_[s][agent]; }
  bool fully_active() const { return fully_active_; }

  // Per-agent action of joint action k at state s (inactive agents read 0).
  std::size_t agent_action(std::size_t s, std::size_t k, std::size_t agent) const {
    return decoded_[(offsets_[s] + k) * actions_.size() + agent];
  }

  std::size_t joint_index(std::size_t s, std::span<const std::size_t> agent_actions) const {
    std::size_t k = 0;
    for (std::size_t j : active_[s]) k = k * actions_[j] + agent_actions[j];
    return k;
  }

  std::span<const double> transition_row(std::size_t s, std::size_t k) const {
    return {transition_.data() + (offsets_[s] + k) * states_, states_};
  }
  double transition(std::size_t s, std::size_t k, std::size_t s2) const {
    return transition_[(offsets_[s] + k) * states_ + s2];
  }
  double reward(std::size_t s, std::size_t k) const { return reward_[offsets_[s] + k]; }

  const MdpSpec& spec() const { return spec_; }

  friend TabularMdp build_mdp(MdpSpec spec);

 private:
  std::size_t states_ = 0;
  std::vector<std::size_t> actions_;
  double gamma_ = 0.0;
  double r_max_ = 0.0;
  std::vector<double> initial_;
  std::vector<std::size_t> offsets_;
  std::vector<std::vector<std::size_t>> active_;
  std::vector<std::vector<bool>> active_mask_;
  bool fully_active_ = true;
  std::vector<std::size_t> decoded_;
  std::vector<double> transition_;
  std::vector<double> reward_;
  MdpSpec spec_;
};

inline TabularMdp build_mdp(MdpSpec spec) {
  constexpr double tol = 1e-9;
  const std::size_t S = spec.states;
  const std::size_t n = spec.actions.size();
  require(S > 0, "mdp: need at least one state");
  require(n > 0, "mdp: need at least one agent");
  for (std::size_t j = 0; j < n; ++j)
    require(spec.actions[j] > 0, "mdp: agent " + std::to_string(j) + " has no actions");
  require(spec.gamma > 0.0 && spec.gamma < 1.0, "mdp: gamma must lie in (0,1)");

  TabularMdp m;
  m.states_ = S;
  m.actions_ = spec.actions;
  m.gamma_ = spec.gamma;

  if (spec.activation.empty()) {
    spec.activation.assign(S, {});
    for (auto& a : spec.activation)
      for (std::size_t j = 0; j < n; ++j) a.push_back(j);
  }
  require(spec.activation.size() == S, "mdp: activation needs one entry per state");
  m.active_.resize(S);
  m.active_mask_.assign(S, std::vector<bool>(n, false));
  m.offsets_.assign(S + 1, 0);
  for (std::size_t s = 0; s < S; ++s) {
    auto act = spec.activation[s];
    require(!act.empty(), "mdp: empty activation set at state " + std::to_string(s));
    std::sort(act.begin(), act.end());
    require(std::adjacent_find(act.begin(), act.end()) == act.end(),
            "mdp: duplicate agent in activation at state " + std::to_string(s));
    require(act.back() < n, "mdp: activation index out of range at state " + std::to_string(s));
    if (act.size() != n) m.fully_active_ = false;
    std::size_t count = 1;
    for (std::size_t j : act) {
      count *= spec.actions[j];
      m.active_mask_[s][j] = true;
    }
    m.active_[s] = act;
    m.offsets_[s + 1] = m.offsets_[s] + count;
  }

  const std::size_t total = m.offsets_.back();
  m.decoded_.assign(total * n, 0);
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t k = 0; k < m.joint_count(s); ++k) {
      std::size_t rem = k;
      for (auto it = m.active_[s].rbegin(); it != m.active_[s].rend(); ++it) {
        m.decoded_[(m.offsets_[s] + k) * n + *it] = rem % spec.actions[*it];
        rem /= spec.actions[*it];
      }
    }
  }

  require(spec.transition.size() == S, "mdp: transition needs one block per state");
  require(spec.reward.size() == S, "mdp: reward needs one row per state");
  m.transition_.assign(total * S, 0.0);
  m.reward_.assign(total, 0.0);
  for (std::size_t s = 0; s < S; ++s) {
    const std::string where = " at state " + std::to_string(s);
    require(spec.transition[s].size() == m.joint_count(s), "mdp: transition block size mismatch" + where);
    require(spec.reward[s].size() == m.joint_count(s), "mdp: reward row size mismatch" + where);
    for (std::size_t k = 0; k < m.joint_count(s); ++k) {
      const auto& row = spec.transition[s][k];
      require(row.size() == S, "mdp: transition row length mismatch" + where);
      double sum = 0.0;
      for (std::size_t s2 = 0; s2 < S; ++s2) {
        require(std::isfinite(row[s2]) && row[s2] >= 0.0, "mdp: negative or non-finite transition" + where);
        sum += row[s2];
        m.transition_[(m.offsets_[s] + k) * S + s2] = row[s2];
      }
      require(std::abs(sum - 1.0) <= tol, "mdp: transition row does not sum to 1" + where);
      const double r = spec.reward[s][k];
      require(std::isfinite(r), "mdp: non-finite reward" + where);
      m.reward_[m.offsets_[s] + k] = r;
      m.r_max_ = std::max(m.r_max_, std::abs(r));
    }
  }

  require(spec.initial.size() == S, "mdp: initial distribution length mismatch");
  double isum = 0.0;
  for (double p : spec.initial) {
    require(std::isfinite(p) && p >= 0.0, "mdp: negative initial probability");
    isum += p;
  }
  require(std::abs(isum - 1.0) <= tol, "mdp: initial distribution does not sum to 1");
  m.initial_ = spec.initial;
  m.spec_ = std::move(spec);
  return m;
}

struct RandomMdpSizes {
  std::size_t states = 4;
  std::vector<std::size_t> actions{2, 2};
  double density = 1.0;     // fraction of next states reachable from each (s, a)
  double gamma = 0.9;
  double mask_prob = 0.0;   // probability an agent is inactive at a state
};

inline constexpr std::size_t kMaxStates = 12;
inline constexpr std::size_t kMaxActions = 4;
inline constexpr std::size_t kMaxAgents = 4;

inline TabularMdp random_mdp(std::uint64_t seed, const RandomMdpSizes& sz) {
  require(sz.states >= 1 && sz.states <= kMaxStates, "random_mdp: states must be in [1, 12]");
  require(!sz.actions.empty() && sz.actions.size() <= kMaxAgents, "random_mdp: agents must be in [1, 4]");
  for (std::size_t a : sz.actions) require(a >= 1 && a <= kMaxActions, "random_mdp: actions must be in [1, 4]");
  require(sz.density > 0.0 && sz.density <= 1.0, "random_mdp: density must be in (0, 1]");
  require(sz.mask_prob >= 0.0 && sz.mask_prob < 1.0, "random_mdp: mask_prob must be in [0, 1)");

  Rng rng(mix_seed(seed, 0x6d6470));
  const std::size_t S = sz.states, n = sz.actions.size();
  MdpSpec spec;
  spec.states = S;
  spec.actions = sz.actions;
  spec.gamma = sz.gamma;

  spec.activation.resize(S);
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t j = 0; j < n; ++j)
      if (sz.mask_prob == 0.0 || rng.uniform() >= sz.mask_prob) spec.activation[s].push_back(j);
    if (spec.activation[s].empty()) spec.activation[s].push_back(rng.below(n));
  }
  if (sz.mask_prob == 0.0) spec.activation.clear();

  const std::size_t reach = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(sz.density * S)));
  spec.transition.resize(S);
  spec.reward.resize(S);
  for (std::size_t s = 0; s < S; ++s) {
    std::size_t count = 1;
    if (spec.activation.empty()) {
      for (std::size_t a : sz.actions) count *= a;
    } else {
      for (std::size_t j : spec.activation[s]) count *= sz.actions[j];
    }
    for (std::size_t k = 0; k < count; ++k) {
      std::vector<double> row(S, 0.0);
      std::vector<std::size_t> targets(S);
      std::iota(targets.begin(), targets.end(), 0);
      rng.shuffle(targets);
      double sum = 0.0;
      for (std::size_t t = 0; t < reach; ++t) {
        const double w = 0.05 + rng.uniform();
        row[targets[t]] = w;
        sum += w;
      }
      for (double& p : row) p /= sum;
      spec.transition[s].push_back(std::move(row));
      spec.reward[s].push_back(rng.uniform(-1.0, 1.0));
    }
  }
  spec.initial.assign(S, 0.0);
  double isum = 0.0;
  for (double& p : spec.initial) isum += (p = 0.05 + rng.uniform());
  for (double& p : spec.initial) p /= isum;
  return build_mdp(std::move(spec));
}

inline json mdp_to_json(const MdpSpec& spec) {
  json j;
  j["states"] = spec.states;
  j["agents"] = spec.actions.size();
  j["actions"] = spec.actions;
  j["transition"] = spec.transition;
  j["reward"] = spec.reward;
  j["gamma"] = spec.gamma;
  j["initial"] = spec.initial;
  if (!spec.activation.empty()) j["activation"] = spec.activation;
  return j;
}

inline MdpSpec mdp_spec_from_json(const json& j) {
  static const std::vector<std::string> known{"states", "agents", "actions", "transition",
                                              "reward", "gamma", "initial", "activation"};
  require(j.is_object(), "mdp document must be an object");
  for (const auto& [key, _] : j.items())
    require(std::find(known.begin(), known.end(), key) != known.end(), "mdp document: unknown key '" + key + "'");
  MdpSpec spec;
  try {
    spec.states = j.at("states").get<std::size_t>();
    spec.actions = j.at("actions").get<std::vector<std::size_t>>();
    if (j.contains("agents"))
      require(j.at("agents").get<std::size_t>() == spec.actions.size(), "mdp document: agents != len(actions)");
    spec.transition = j.at("transition").get<decltype(spec.transition)>();
    spec.reward = j.at("reward").get<decltype(spec.reward)>();
    spec.gamma = j.at("gamma").get<double>();
    spec.initial = j.at("initial").get<std::vector<double>>();
    if (j.contains("activation")) spec.activation = j.at("activation").get<decltype(spec.activation)>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("mdp document: ") + e.what());
  }
  return spec;
}

}  // namespace sat
