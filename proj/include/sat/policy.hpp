#pragma once

#include <Eigen/Dense>
#include <concepts>
#include <map>
#include <optional>

#include "sat/mdp.hpp"

namespace sat {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Softmax table for one agent: logits(s, a).
class AgentPolicy {
 public:
  AgentPolicy() = default;
  AgentPolicy(std::size_t agent_index, MatrixXd logits) : agent_(agent_index), logits_(std::move(logits)) {
    require(logits_.rows() > 0 && logits_.cols() > 0, "AgentPolicy: empty logits table");
    require(logits_.allFinite(), "AgentPolicy: non-finite logits");
    refresh();
  }

  static AgentPolicy uniform(std::size_t agent_index, std::size_t states, std::size_t actions) {
    return {agent_index, MatrixXd::Zero(static_cast<Eigen::Index>(states), static_cast<Eigen::Index>(actions))};
  }

  std::size_t agent_index() const { return agent_; }
  std::size_t num_states() const { return static_cast<std::size_t>(logits_.rows()); }
  std::size_t num_actions() const { return static_cast<std::size_t>(logits_.cols()); }
  std::size_t parameter_count() const { return static_cast<std::size_t>(logits_.size()); }
  const MatrixXd& logits() const { return logits_; }
  const MatrixXd& probs() const { return probs_; }
  const MatrixXd& log_probs() const { return log_probs_; }
  double prob(std::size_t s, std::size_t a) const { return probs_(Eigen::Index(s), Eigen::Index(a)); }
  double log_prob(std::size_t s, std::size_t a) const { return log_probs_(Eigen::Index(s), Eigen::Index(a)); }
  std::vector<double> row(std::size_t s) const {
    std::vector<double> r(num_actions());
    for (std::size_t a = 0; a < r.size(); ++a) r[a] = prob(s, a);
    return r;
  }

  bool operator==(const AgentPolicy& o) const { return agent_ == o.agent_ && logits_ == o.logits_; }

 private:
  void refresh() {
    log_probs_.resize(logits_.rows(), logits_.cols());
    probs_.resize(logits_.rows(), logits_.cols());
    for (Eigen::Index s = 0; s < logits_.rows(); ++s) {
      const double m = logits_.row(s).maxCoeff();
      const double lse = m + std::log((logits_.row(s).array() - m).exp().sum());
      log_probs_.row(s) = logits_.row(s).array() - lse;
      probs_.row(s) = log_probs_.row(s).array().exp();
    }
  }

  std::size_t agent_ = 0;
  MatrixXd logits_;
  MatrixXd probs_;
  MatrixXd log_probs_;
};

template <class T>
concept TeamPolicy = requires(const T& t, std::size_t j) {
  { t.num_agents() } -> std::convertible_to<std::size_t>;
  { t.agent(j) } -> std::same_as<const AgentPolicy&>;
};

class FactorizedPolicy {
 public:
  FactorizedPolicy() = default;
  explicit FactorizedPolicy(std::vector<AgentPolicy> agents) : agents_(std::move(agents)) {
    for (std::size_t j = 0; j < agents_.size(); ++j)
      require(agents_[j].agent_index() == j, "FactorizedPolicy: agent " + std::to_string(j) + " has wrong index");
  }

  static FactorizedPolicy uniform(const TabularMdp& mdp) {
    std::vector<AgentPolicy> a;
    for (std::size_t j = 0; j < mdp.num_agents(); ++j)
      a.push_back(AgentPolicy::uniform(j, mdp.num_states(), mdp.action_count(j)));
    return FactorizedPolicy(std::move(a));
  }

  static FactorizedPolicy random(const TabularMdp& mdp, std::uint64_t seed, double scale) {
    Rng rng(mix_seed(seed, 0x706f6c));
    std::vector<AgentPolicy> a;
    for (std::size_t j = 0; j < mdp.num_agents(); ++j) {
      MatrixXd l(Eigen::Index(mdp.num_states()), Eigen::Index(mdp.action_count(j)));
      for (Eigen::Index s = 0; s < l.rows(); ++s)
        for (Eigen::Index b = 0; b < l.cols(); ++b) l(s, b) = scale * rng.normal();
      a.emplace_back(j, std::move(l));
    }
    return FactorizedPolicy(std::move(a));
  }

  std::size_t num_agents() const { return agents_.size(); }
  const AgentPolicy& agent(std::size_t j) const { return agents_.at(j); }
  const std::vector<AgentPolicy>& agents() const { return agents_; }

  FactorizedPolicy with_agent(const AgentPolicy& p) const {
    require(p.agent_index() < agents_.size(), "with_agent: index out of range");
    FactorizedPolicy out = *this;
    out.agents_[p.agent_index()] = p;
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t c = 0;
    for (const auto& a : agents_) c += a.parameter_count();
    return c;
  }

  bool operator==(const FactorizedPolicy&) const = default;

 private:
  std::vector<AgentPolicy> agents_;
};

// pi-hat^i: the base team with the first `num_updated` agents of `order` replaced by targets.
class IntermediatePolicy {
 public:
  IntermediatePolicy(const FactorizedPolicy& base, std::map<std::size_t, AgentPolicy> overrides,
                     std::vector<std::size_t> order, std::size_t num_updated)
      : base_(&base), overrides_(std::move(overrides)), order_(std::move(order)), num_updated_(num_updated) {}

  std::size_t num_agents() const { return base_->num_agents(); }
  const AgentPolicy& agent(std::size_t j) const {
    auto it = overrides_.find(j);
    return it == overrides_.end() ? base_->agent(j) : it->second;
  }
  const FactorizedPolicy& base() const { return *base_; }
  const std::vector<std::size_t>& order() const { return order_; }
  std::size_t num_updated() const { return num_updated_; }
  const std::map<std::size_t, AgentPolicy>& overrides() const { return overrides_; }

  FactorizedPolicy materialize() const {
    std::vector<AgentPolicy> a;
    for (std::size_t j = 0; j < num_agents(); ++j) a.push_back(agent(j));
    return FactorizedPolicy(std::move(a));
  }

 private:
  const FactorizedPolicy* base_;
  std::map<std::size_t, AgentPolicy> overrides_;
  std::vector<std::size_t> order_;
  std::size_t num_updated_;
};

inline void check_permutation(const std::vector<std::size_t>& order, std::size_t n) {
  require(order.size() == n, "order: length must equal the number of agents");
  std::vector<bool> seen(n, false);
  for (std::size_t j : order) {
    require(j < n && !seen[j], "order: not a permutation");
    seen[j] = true;
  }
}

inline IntermediatePolicy compose_intermediate(const FactorizedPolicy& current,
                                               const std::map<std::size_t, AgentPolicy>& targets,
                                               const std::vector<std::size_t>& order, std::size_t num_updated) {
  check_permutation(order, current.num_agents());
  require(num_updated <= order.size(), "compose_intermediate: step beyond the last agent");
  std::map<std::size_t, AgentPolicy> ov;
  for (std::size_t k = 0; k < num_updated; ++k) {
    auto it = targets.find(order[k]);
    require(it != targets.end(), "compose_intermediate: missing target for agent " + std::to_string(order[k]));
    ov.emplace(order[k], it->second);
  }
  return {current, std::move(ov), order, num_updated};
}

template <TeamPolicy P>
void check_compatible(const P& pi, const TabularMdp& mdp) {
  require(pi.num_agents() == mdp.num_agents(), "policy/mdp agent count mismatch");
  for (std::size_t j = 0; j < pi.num_agents(); ++j) {
    require(pi.agent(j).num_states() == mdp.num_states(), "policy/mdp state count mismatch for agent " + std::to_string(j));
    require(pi.agent(j).num_actions() == mdp.action_count(j), "policy/mdp action count mismatch for agent " + std::to_string(j));
  }
}

template <TeamPolicy P>
double joint_log_prob(const P& pi, const TabularMdp& mdp, std::size_t s, std::size_t k) {
  double lp = 0.0;
  for (std::size_t j : mdp.active_agents(s)) lp += pi.agent(j).log_prob(s, mdp.agent_action(s, k, j));
  return lp;
}

template <TeamPolicy P>
std::vector<double> joint_dist(const P& pi, const TabularMdp& mdp, std::size_t s) {
  std::vector<double> d(mdp.joint_count(s));
  for (std::size_t k = 0; k < d.size(); ++k) {
    double p = 1.0;
    for (std::size_t j : mdp.active_agents(s)) p *= pi.agent(j).prob(s, mdp.agent_action(s, k, j));
    d[k] = p;
  }
  return d;
}

inline json agent_to_json(const AgentPolicy& a) {
  json rows = json::array();
  for (Eigen::Index s = 0; s < a.logits().rows(); ++s) {
    std::vector<double> r;
    for (Eigen::Index b = 0; b < a.logits().cols(); ++b) r.push_back(a.logits()(s, b));
    rows.push_back(r);
  }
  return json{{"agent", a.agent_index()}, {"logits", rows}};
}

inline AgentPolicy agent_from_json(const json& j) {
  try {
    const auto idx = j.at("agent").get<std::size_t>();
    const auto rows = j.at("logits").get<std::vector<std::vector<double>>>();
    require(!rows.empty() && !rows[0].empty(), "policy document: empty logits");
    MatrixXd l(Eigen::Index(rows.size()), Eigen::Index(rows[0].size()));
    for (std::size_t s = 0; s < rows.size(); ++s) {
      require(rows[s].size() == rows[0].size(), "policy document: ragged logits");
      for (std::size_t b = 0; b < rows[s].size(); ++b) l(Eigen::Index(s), Eigen::Index(b)) = rows[s][b];
    }
    return {idx, std::move(l)};
  } catch (const json::exception& e) {
    throw ValidationError(std::string("policy document: ") + e.what());
  }
}

template <TeamPolicy P>
json policy_to_json(const P& pi) {
  json agents = json::array();
  for (std::size_t j = 0; j < pi.num_agents(); ++j) agents.push_back(agent_to_json(pi.agent(j)));
  return json{{"agents", agents}};
}

inline FactorizedPolicy policy_from_json(const json& j) {
  require(j.is_object() && j.contains("agents") && j.at("agents").is_array(), "policy document: missing 'agents'");
  std::vector<AgentPolicy> a;
  for (const auto& e : j.at("agents")) a.push_back(agent_from_json(e));
  std::sort(a.begin(), a.end(), [](const auto& x, const auto& y) { return x.agent_index() < y.agent_index(); });
  return FactorizedPolicy(std::move(a));
}

inline std::uint64_t agent_digest(const AgentPolicy& a) {
  Fnv1a h;
  h.add(std::uint64_t(a.agent_index()));
  h.add(std::uint64_t(a.logits().rows()));
  h.add(std::uint64_t(a.logits().cols()));
  for (Eigen::Index s = 0; s < a.logits().rows(); ++s)
    for (Eigen::Index b = 0; b < a.logits().cols(); ++b) h.add(a.logits()(s, b));
  return h.value();
}

template <TeamPolicy P>
std::uint64_t policy_digest(const P& pi) {
  Fnv1a h;
  for (std::size_t j = 0; j < pi.num_agents(); ++j) h.add(agent_digest(pi.agent(j)));
  return h.value();
}

// ---- divergences ----------------------------------------------------------

struct DivergenceReport {
  std::vector<double> per_state_kl;
  std::vector<double> per_state_tv;
  double kl_max = 0.0;
  double tv_max = 0.0;
  double kl_quantile = 0.0;
  double expected_kl = 0.0;
};

inline DivergenceReport summarize_divergence(std::vector<double> kl, std::vector<double> tv,
                                             std::span<const double> weights, double alpha) {
  DivergenceReport r;
  r.per_state_kl = std::move(kl);
  r.per_state_tv = std::move(tv);
  for (std::size_t s = 0; s < r.per_state_kl.size(); ++s) {
    r.kl_max = std::max(r.kl_max, r.per_state_kl[s]);
    r.tv_max = std::max(r.tv_max, r.per_state_tv[s]);
  }
  if (!weights.empty()) {
    require(weights.size() == r.per_state_kl.size(), "divergence: weights length mismatch");
    for (std::size_t s = 0; s < weights.size(); ++s) r.expected_kl += weights[s] * r.per_state_kl[s];
    r.expected_kl = std::min(r.expected_kl, r.kl_max);
    r.kl_quantile = weighted_quantile(r.per_state_kl, weights, 1.0 - alpha);
  } else {
    std::vector<double> w(r.per_state_kl.size(), 1.0 / double(r.per_state_kl.size()));
    for (std::size_t s = 0; s < w.size(); ++s) r.expected_kl += w[s] * r.per_state_kl[s];
    r.expected_kl = std::min(r.expected_kl, r.kl_max);
    r.kl_quantile = weighted_quantile(r.per_state_kl, w, 1.0 - alpha);
  }
  return r;
}

template <TeamPolicy P, TeamPolicy Q>
DivergenceReport divergence(const P& p, const Q& q, const TabularMdp& mdp, std::span<const double> weights = {},
                            double alpha = 0.05) {
  check_compatible(p, mdp);
  check_compatible(q, mdp);
  std::vector<double> kl(mdp.num_states()), tv(mdp.num_states());
  for (std::size_t s = 0; s < mdp.num_states(); ++s) {
    const auto dp = joint_dist(p, mdp, s);
    const auto dq = joint_dist(q, mdp, s);
    kl[s] = kl_divergence(dp, dq);
    tv[s] = tv_distance(dp, dq);
  }
  return summarize_divergence(std::move(kl), std::move(tv), weights, alpha);
}

// Per-state KL of one factor; states where the agent is inactive (mdp given) contribute 0.
inline DivergenceReport single_block_divergence(const AgentPolicy& target, const AgentPolicy& current,
                                                std::span<const double> weights = {}, double alpha = 0.05,
                                                const TabularMdp* mdp = nullptr) {
  require(target.agent_index() == current.agent_index(), "single_block_divergence: agent index mismatch");
  require(target.num_states() == current.num_states() && target.num_actions() == current.num_actions(),
          "single_block_divergence: shape mismatch");
  std::vector<double> kl(target.num_states(), 0.0), tv(target.num_states(), 0.0);
  for (std::size_t s = 0; s < kl.size(); ++s) {
    if (mdp && !mdp->is_active(s, target.agent_index())) continue;
    const auto p = target.row(s), q = current.row(s);
    kl[s] = kl_divergence(p, q);
    tv[s] = tv_distance(p, q);
  }
  return summarize_divergence(std::move(kl), std::move(tv), weights, alpha);
}

}  // namespace sat
