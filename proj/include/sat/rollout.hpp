#pragma once

#include <istream>
#include <ostream>
#include <sstream>

#include "sat/policy.hpp"

namespace sat {

struct Step {
  std::size_t state = 0;
  std::size_t joint = 0;  // local joint-action index at `state`
  double reward = 0.0;
  std::vector<double> log_probs;  // per agent under the sampling policy; 0 for inactive agents

  bool operator==(const Step&) const = default;
};

struct Episode {
  std::size_t group = 0;
  std::size_t initial_state = 0;
  std::size_t final_state = 0;  // state reached after the last step, used to bootstrap
  std::vector<Step> steps;

  bool operator==(const Episode&) const = default;
};

struct TrajectoryBatch {
  std::vector<Episode> episodes;
  std::size_t horizon = 0;
  std::uint64_t sampling_policy_id = 0;
  std::uint64_t seed = 0;

  std::size_t size() const { return episodes.size(); }
  // Groups are keyed by initial state.
  std::size_t group_key(std::size_t e) const { return episodes[e].initial_state; }
  bool operator==(const TrajectoryBatch&) const = default;
};

inline std::size_t default_horizon(double gamma, double r_max, double tail_tol = 1e-3) {
  require(gamma > 0.0 && gamma < 1.0, "default_horizon: gamma must lie in (0,1)");
  if (r_max <= 0.0) return 1;
  const double h = std::ceil(std::log(tail_tol * (1.0 - gamma) / r_max) / std::log(gamma));
  return static_cast<std::size_t>(std::clamp(h, 1.0, 100000.0));
}

// Episodes come in blocks of `group_size` that share one initial-state draw.
template <TeamPolicy P>
TrajectoryBatch sample_batch(const TabularMdp& mdp, const P& pi, std::size_t episodes, std::size_t horizon,
                             std::uint64_t seed, std::size_t group_size = 1) {
  require(episodes >= 1, "sample_batch: need at least one episode");
  require(horizon >= 1, "sample_batch: horizon must be >= 1");
  require(group_size >= 1, "sample_batch: group size must be >= 1");
  check_compatible(pi, mdp);

  const std::size_t S = mdp.num_states(), n = mdp.num_agents();
  std::vector<std::vector<double>> dist(S);
  for (std::size_t s = 0; s < S; ++s) dist[s] = joint_dist(pi, mdp, s);

  TrajectoryBatch b;
  b.horizon = horizon;
  b.seed = seed;
  b.sampling_policy_id = policy_digest(pi);
  b.episodes.resize(episodes);
  std::size_t s0 = 0;
  for (std::size_t e = 0; e < episodes; ++e) {
    const std::size_t g = e / group_size;
    if (e % group_size == 0) {
      Rng init(mix_seed(seed, (std::uint64_t(1) << 62) + g));
      s0 = init.categorical(mdp.initial());
    }
    Rng rng(mix_seed(seed, e));
    Episode& ep = b.episodes[e];
    ep.group = g;
    ep.initial_state = s0;
    ep.steps.reserve(horizon);
    std::size_t s = s0;
    for (std::size_t t = 0; t < horizon; ++t) {
      Step st;
      st.state = s;
      st.joint = rng.categorical(dist[s]);
      st.reward = mdp.reward(s, st.joint);
      st.log_probs.assign(n, 0.0);
      for (std::size_t j : mdp.active_agents(s)) st.log_probs[j] = pi.agent(j).log_prob(s, mdp.agent_action(s, st.joint, j));
      s = rng.categorical(mdp.transition_row(s, st.joint));
      ep.steps.push_back(std::move(st));
    }
    ep.final_state = s;
  }
  return b;
}

inline std::vector<double> empirical_occupancy(const TrajectoryBatch& b, std::size_t num_states, double gamma) {
  std::vector<double> occ(num_states, 0.0);
  double total = 0.0;
  for (const auto& ep : b.episodes) {
    double w = 1.0;
    for (const auto& st : ep.steps) {
      occ[st.state] += w;
      total += w;
      w *= gamma;
    }
  }
  for (double& o : occ) o /= total;
  return occ;
}

inline constexpr int kBatchFormatVersion = 1;

// Line 1: header. Then one episode per line: steps as [state, joint, reward, [log-probs]].
inline void write_batch_jsonl(std::ostream& os, const TrajectoryBatch& b) {
  json head{{"format", "sat-batch"}, {"version", kBatchFormatVersion}, {"horizon", b.horizon},
            {"seed", b.seed}, {"sampling_policy", hex64(b.sampling_policy_id)}, {"episodes", b.size()}};
  os << head.dump() << '\n';
  for (std::size_t e = 0; e < b.size(); ++e) {
    const auto& ep = b.episodes[e];
    json steps = json::array();
    for (const auto& st : ep.steps) steps.push_back(json::array({st.state, st.joint, st.reward, st.log_probs}));
    os << json{{"episode", e}, {"group", ep.group}, {"initial", ep.initial_state}, {"final", ep.final_state},
               {"steps", steps}}.dump()
       << '\n';
  }
}

inline TrajectoryBatch read_batch_jsonl(std::istream& is) {
  std::string line;
  require(static_cast<bool>(std::getline(is, line)), "batch log: empty stream");
  const json head = json::parse(line);
  require(head.value("format", "") == "sat-batch" && head.value("version", 0) == kBatchFormatVersion,
          "batch log: unsupported format");
  TrajectoryBatch b;
  b.horizon = head.at("horizon").get<std::size_t>();
  b.seed = head.at("seed").get<std::uint64_t>();
  b.sampling_policy_id = std::stoull(head.at("sampling_policy").get<std::string>(), nullptr, 16);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    Episode ep;
    ep.group = j.at("group").get<std::size_t>();
    ep.initial_state = j.at("initial").get<std::size_t>();
    ep.final_state = j.at("final").get<std::size_t>();
    for (const auto& s : j.at("steps"))
      ep.steps.push_back(Step{s[0].get<std::size_t>(), s[1].get<std::size_t>(), s[2].get<double>(),
                              s[3].get<std::vector<double>>()});
    b.episodes.push_back(std::move(ep));
  }
  require(b.size() == head.at("episodes").get<std::size_t>(), "batch log: episode count mismatch");
  return b;
}

}  // namespace sat
