#pragma once

#include <fstream>
#include <functional>
#include <set>

#include "sat/trust_region.hpp"

namespace sat {

struct MdpSource {
  std::uint64_t seed = 1;
  std::size_t states = 4;
  std::vector<std::size_t> actions;  // empty = 2 per agent
  double density = 1.0;
  double gamma = 0.9;
  double mask_prob = 0.0;
  std::string file;
  std::optional<MdpSpec> spec;

  bool operator==(const MdpSource&) const = default;
};

struct TeamConfig {
  std::size_t agents = 2;
  std::string init = "uniform";  // uniform | random
  double init_scale = 1.0;
  std::uint64_t init_seed = 0;

  bool operator==(const TeamConfig&) const = default;
};

struct EstimatorConfig {
  double lambda = 0.95;
  std::size_t horizon = 0;  // 0 = derived from gamma, R_max and tail_tol
  double tail_tol = 1e-3;
  std::size_t episodes = 64;
  std::size_t group_size = 4;
  double eps = 1e-8;
  double clip = 3.0;
  bool reweight = true;
  std::size_t zeta_probes = 16;

  bool operator==(const EstimatorConfig&) const = default;
};

struct SuiteConfig {
  std::size_t count = 0;
  std::uint64_t seed = 0;
  std::array<std::size_t, 2> states{2, 6};
  std::array<std::size_t, 2> actions{2, 3};
  std::array<std::size_t, 2> agents{1, 3};
  std::array<double, 2> gamma{0.8, 0.95};
  double density = 1.0;

  bool operator==(const SuiteConfig&) const = default;
};

struct RunConfig {
  MdpSource mdp;
  TeamConfig team;
  std::size_t stages = 1;
  std::vector<std::vector<double>> radii{{0.01}};  // one table for all agents, or one per agent
  EstimatorConfig estimator;
  TrustRegionConfig trust_region;  // delta is overwritten per agent
  std::string ordering = "fixed";  // fixed | random | greedy-surrogate
  std::string mode = "exact";      // exact | sampled
  double confidence = 0.05;
  std::uint64_t seed = 0;
  SuiteConfig suite;

  const std::vector<double>& radius_of(std::size_t agent) const {
    return radii.size() == 1 ? radii[0] : radii.at(agent);
  }
  bool sampled() const { return mode == "sampled"; }
  bool operator==(const RunConfig&) const = default;
};

namespace detail {

class ConfigReader {
 public:
  ConfigReader(bool strict, std::vector<std::string>* warnings) : strict_(strict), warnings_(warnings) {}

  void check_keys(const json& obj, const std::string& path, std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) throw ConfigError(path.empty() ? "<root>" : path, "expected an object");
    for (const auto& [key, _] : obj.items()) {
      bool ok = false;
      for (const char* a : allowed) ok = ok || key == a;
      if (ok) continue;
      const std::string full = path.empty() ? key : path + "." + key;
      if (strict_) throw ConfigError(full, "unknown key");
      if (warnings_) warnings_->push_back("ignoring unknown key " + full);
    }
  }

  template <class T>
  void get(const json& obj, const std::string& path, const char* key, T& out) {
    if (!obj.contains(key)) return;
    const std::string full = path.empty() ? std::string(key) : path + "." + key;
    const json& v = obj.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError(full, "expected a boolean");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError(full, "expected a string");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError(full, "expected a number");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0))
          throw ConfigError(full, "expected a non-negative integer");
      }
      out = v.get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(full, std::string("type error: ") + e.what());
    }
  }

 private:
  bool strict_;
  std::vector<std::string>* warnings_;
};

inline void range(bool ok, const std::string& path, const std::string& what) {
  if (!ok) throw ConfigError(path, "out of range: " + what);
}

inline std::vector<double> numbers(const json& v, const std::string& path) {
  if (v.is_number()) return {v.get<double>()};
  if (!v.is_array()) throw ConfigError(path, "expected a number or an array of numbers");
  std::vector<double> out;
  for (const auto& x : v) {
    if (!x.is_number()) throw ConfigError(path, "expected numbers");
    out.push_back(x.get<double>());
  }
  return out;
}

template <class T>
std::array<T, 2> pair_of(const json& v, const std::string& path) {
  if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
    throw ConfigError(path, "expected [lo, hi]");
  std::array<T, 2> r{v[0].get<T>(), v[1].get<T>()};
  range(r[0] <= r[1], path, "lo must not exceed hi");
  return r;
}

}  // namespace detail

inline RunConfig parse_config(const json& doc, bool strict = true, std::vector<std::string>* warnings = nullptr) {
  using detail::range;
  detail::ConfigReader rd(strict, warnings);
  RunConfig c;
  rd.check_keys(doc, "", {"mdp", "team", "stages", "radii", "estimator", "trust_region", "ordering", "mode",
                          "confidence", "seed", "suite"});

  if (doc.contains("mdp")) {
    const json& m = doc.at("mdp");
    rd.check_keys(m, "mdp", {"seed", "states", "actions", "density", "gamma", "mask_prob", "file", "spec"});
    rd.get(m, "mdp", "seed", c.mdp.seed);
    rd.get(m, "mdp", "states", c.mdp.states);
    if (m.contains("actions")) {
      for (double a : detail::numbers(m.at("actions"), "mdp.actions")) {
        range(a >= 1 && a <= double(kMaxActions) && a == std::floor(a), "mdp.actions", "integers in [1, 4]");
        c.mdp.actions.push_back(std::size_t(a));
      }
    }
    rd.get(m, "mdp", "density", c.mdp.density);
    rd.get(m, "mdp", "gamma", c.mdp.gamma);
    rd.get(m, "mdp", "mask_prob", c.mdp.mask_prob);
    rd.get(m, "mdp", "file", c.mdp.file);
    if (m.contains("spec")) {
      try {
        c.mdp.spec = mdp_spec_from_json(m.at("spec"));
      } catch (const ValidationError& e) {
        throw ConfigError("mdp.spec", e.what());
      }
    }
    range(c.mdp.gamma > 0.0 && c.mdp.gamma < 1.0, "mdp.gamma", "must lie in (0, 1)");
    range(c.mdp.states >= 1 && c.mdp.states <= kMaxStates, "mdp.states", "must lie in [1, 12]");
    range(c.mdp.density > 0.0 && c.mdp.density <= 1.0, "mdp.density", "must lie in (0, 1]");
    range(c.mdp.mask_prob >= 0.0 && c.mdp.mask_prob < 1.0, "mdp.mask_prob", "must lie in [0, 1)");
  }

  if (doc.contains("team")) {
    const json& t = doc.at("team");
    rd.check_keys(t, "team", {"agents", "init", "init_scale", "init_seed"});
    rd.get(t, "team", "agents", c.team.agents);
    rd.get(t, "team", "init", c.team.init);
    rd.get(t, "team", "init_scale", c.team.init_scale);
    rd.get(t, "team", "init_seed", c.team.init_seed);
    range(c.team.agents >= 1 && c.team.agents <= kMaxAgents, "team.agents", "must lie in [1, 4]");
    range(c.team.init == "uniform" || c.team.init == "random", "team.init", "must be 'uniform' or 'random'");
    range(c.team.init_scale >= 0.0, "team.init_scale", "must be >= 0");
  }
  if (!c.mdp.actions.empty() && !c.mdp.spec && c.mdp.file.empty())
    range(c.mdp.actions.size() == 1 || c.mdp.actions.size() == c.team.agents, "mdp.actions",
          "needs one entry or one per agent");

  rd.get(doc, "", "stages", c.stages);

  if (doc.contains("radii")) {
    const json& r = doc.at("radii");
    c.radii.clear();
    if (r.is_array() && !r.empty() && r[0].is_array()) {
      for (std::size_t j = 0; j < r.size(); ++j) c.radii.push_back(detail::numbers(r[j], "radii[" + std::to_string(j) + "]"));
    } else if (r.is_array()) {
      for (double x : detail::numbers(r, "radii")) c.radii.push_back({x});
    } else {
      c.radii.push_back(detail::numbers(r, "radii"));
    }
    range(!c.radii.empty(), "radii", "must not be empty");
    for (const auto& t : c.radii) {
      range(!t.empty(), "radii", "empty radius table");
      for (double x : t) range(std::isfinite(x) && x >= 0.0, "radii", "radii must be finite and >= 0");
    }
  }

  if (doc.contains("estimator")) {
    const json& e = doc.at("estimator");
    rd.check_keys(e, "estimator", {"lambda", "horizon", "tail_tol", "episodes", "group_size", "eps", "clip",
                                   "reweight", "zeta_probes"});
    auto& E = c.estimator;
    rd.get(e, "estimator", "lambda", E.lambda);
    rd.get(e, "estimator", "horizon", E.horizon);
    rd.get(e, "estimator", "tail_tol", E.tail_tol);
    rd.get(e, "estimator", "episodes", E.episodes);
    rd.get(e, "estimator", "group_size", E.group_size);
    rd.get(e, "estimator", "eps", E.eps);
    rd.get(e, "estimator", "clip", E.clip);
    rd.get(e, "estimator", "reweight", E.reweight);
    rd.get(e, "estimator", "zeta_probes", E.zeta_probes);
    range(E.lambda >= 0.0 && E.lambda <= 1.0, "estimator.lambda", "must lie in [0, 1]");
    range(E.tail_tol > 0.0 && E.tail_tol < 1.0, "estimator.tail_tol", "must lie in (0, 1)");
    range(E.episodes >= 1, "estimator.episodes", "must be >= 1");
    range(E.group_size >= 2, "estimator.group_size", "must be >= 2");
    range(E.eps >= 0.0, "estimator.eps", "must be >= 0");
    range(E.clip > 0.0, "estimator.clip", "must be > 0");
  }

  if (doc.contains("trust_region")) {
    const json& t = doc.at("trust_region");
    rd.check_keys(t, "trust_region", {"eps_clip", "beta", "beta_growth", "beta_decay", "alpha", "eta", "epochs",
                                      "max_backtracks"});
    auto& T = c.trust_region;
    rd.get(t, "trust_region", "eps_clip", T.eps_clip);
    rd.get(t, "trust_region", "beta", T.beta);
    rd.get(t, "trust_region", "beta_growth", T.beta_growth);
    rd.get(t, "trust_region", "beta_decay", T.beta_decay);
    rd.get(t, "trust_region", "alpha", T.alpha);
    rd.get(t, "trust_region", "epochs", T.epochs);
    rd.get(t, "trust_region", "max_backtracks", T.max_backtracks);
    if (t.contains("eta")) {
      const json& v = t.at("eta");
      if (v.is_string()) {
        range(v.get<std::string>() == "auto", "trust_region.eta", "must be 'auto' or a positive number");
        T.eta.reset();
      } else if (v.is_number()) {
        T.eta = v.get<double>();
        range(*T.eta > 0.0, "trust_region.eta", "must be > 0");
      } else {
        throw ConfigError("trust_region.eta", "expected 'auto' or a number");
      }
    }
    range(T.eps_clip > 0.0 && T.eps_clip < 1.0, "trust_region.eps_clip", "must lie in (0, 1)");
    range(T.beta >= 0.0, "trust_region.beta", "must be >= 0");
    range(T.beta_growth > 1.0, "trust_region.beta_growth", "must be > 1");
    range(T.beta_decay > 0.0 && T.beta_decay <= 1.0, "trust_region.beta_decay", "must lie in (0, 1]");
    range(T.alpha > 0.0 && T.alpha < 1.0, "trust_region.alpha", "must lie in (0, 1)");
    range(T.epochs >= 1, "trust_region.epochs", "must be >= 1");
  }

  rd.get(doc, "", "ordering", c.ordering);
  range(c.ordering == "fixed" || c.ordering == "random" || c.ordering == "greedy-surrogate", "ordering",
        "must be fixed, random or greedy-surrogate");
  rd.get(doc, "", "mode", c.mode);
  range(c.mode == "exact" || c.mode == "sampled", "mode", "must be exact or sampled");
  rd.get(doc, "", "confidence", c.confidence);
  range(c.confidence > 0.0 && c.confidence < 1.0, "confidence", "must lie in (0, 1)");
  rd.get(doc, "", "seed", c.seed);

  if (doc.contains("suite")) {
    const json& s = doc.at("suite");
    rd.check_keys(s, "suite", {"count", "seed", "states", "actions", "agents", "gamma", "density"});
    rd.get(s, "suite", "count", c.suite.count);
    rd.get(s, "suite", "seed", c.suite.seed);
    if (s.contains("states")) c.suite.states = detail::pair_of<std::size_t>(s.at("states"), "suite.states");
    if (s.contains("actions")) c.suite.actions = detail::pair_of<std::size_t>(s.at("actions"), "suite.actions");
    if (s.contains("agents")) c.suite.agents = detail::pair_of<std::size_t>(s.at("agents"), "suite.agents");
    if (s.contains("gamma")) c.suite.gamma = detail::pair_of<double>(s.at("gamma"), "suite.gamma");
    rd.get(s, "suite", "density", c.suite.density);
    range(c.suite.states[0] >= 1 && c.suite.states[1] <= kMaxStates, "suite.states", "must lie in [1, 12]");
    range(c.suite.actions[0] >= 1 && c.suite.actions[1] <= kMaxActions, "suite.actions", "must lie in [1, 4]");
    range(c.suite.agents[0] >= 1 && c.suite.agents[1] <= kMaxAgents, "suite.agents", "must lie in [1, 4]");
    range(c.suite.gamma[0] > 0.0 && c.suite.gamma[1] < 1.0, "suite.gamma", "must lie in (0, 1)");
    range(c.suite.density > 0.0 && c.suite.density <= 1.0, "suite.density", "must lie in (0, 1]");
  }
  if (c.mdp.spec) {
    range(c.mdp.spec->actions.size() == c.team.agents || !doc.contains("team") || !doc.at("team").contains("agents"),
          "team.agents", "must match the inline MDP");
    c.team.agents = c.mdp.spec->actions.size();
  }
  range(c.radii.size() == 1 || c.radii.size() == c.team.agents || c.suite.count > 0, "radii",
        "needs one entry or one per agent");
  return c;
}

inline json config_to_json(const RunConfig& c) {
  json j;
  json m{{"seed", c.mdp.seed}, {"states", c.mdp.states}, {"actions", c.mdp.actions}, {"density", c.mdp.density},
         {"gamma", c.mdp.gamma}, {"mask_prob", c.mdp.mask_prob}};
  if (!c.mdp.file.empty()) m["file"] = c.mdp.file;
  if (c.mdp.spec) m["spec"] = mdp_to_json(*c.mdp.spec);
  j["mdp"] = m;
  j["team"] = {{"agents", c.team.agents}, {"init", c.team.init}, {"init_scale", c.team.init_scale},
               {"init_seed", c.team.init_seed}};
  j["stages"] = c.stages;
  j["radii"] = c.radii;
  const auto& E = c.estimator;
  j["estimator"] = {{"lambda", E.lambda}, {"horizon", E.horizon}, {"tail_tol", E.tail_tol}, {"episodes", E.episodes},
                    {"group_size", E.group_size}, {"eps", E.eps}, {"clip", E.clip}, {"reweight", E.reweight},
                    {"zeta_probes", E.zeta_probes}};
  const auto& T = c.trust_region;
  j["trust_region"] = {{"eps_clip", T.eps_clip}, {"beta", T.beta}, {"beta_growth", T.beta_growth},
                       {"beta_decay", T.beta_decay}, {"alpha", T.alpha},
                       {"eta", T.eta ? json(*T.eta) : json("auto")}, {"epochs", T.epochs},
                       {"max_backtracks", T.max_backtracks}};
  j["ordering"] = c.ordering;
  j["mode"] = c.mode;
  j["confidence"] = c.confidence;
  j["seed"] = c.seed;
  j["suite"] = {{"count", c.suite.count}, {"seed", c.suite.seed}, {"states", c.suite.states},
                {"actions", c.suite.actions}, {"agents", c.suite.agents}, {"gamma", c.suite.gamma},
                {"density", c.suite.density}};
  return j;
}

inline std::string config_digest(const RunConfig& c) {
  Fnv1a h;
  h.add(config_to_json(c).dump());
  return hex64(h.value());
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error("malformed JSON in " + path + ": " + e.what());
  }
}

}  // namespace sat
