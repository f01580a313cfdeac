#pragma once

#include <optional>

#include "sat/oracle.hpp"

namespace sat {

inline constexpr double kCertTol = 1e-10;

inline double occupancy_shift_bound(double tv_max, double kl_max, double gamma) {
  require(gamma > 0.0 && gamma < 1.0, "occupancy_shift_bound: gamma must lie in (0,1)");
  const double c = 2.0 * gamma / (1.0 - gamma);
  return std::min(c * tv_max, c * std::sqrt(kl_max / 2.0));
}

inline double occupancy_shift_bound(const DivergenceReport& d, double gamma) {
  return occupancy_shift_bound(d.tv_max, d.kl_max, gamma);
}

inline double shift_penalty(double a_max, double kl_max, double gamma) {
  return 2.0 * gamma / ((1.0 - gamma) * (1.0 - gamma)) * a_max * std::sqrt(kl_max / 2.0);
}

inline double shift_penalty_rmax(double r_max, double kl_max, double gamma) {
  return 4.0 * gamma * r_max / std::pow(1.0 - gamma, 3) * std::sqrt(kl_max / 2.0);
}

inline double oracle_envelope(double delta, double a_max, double gamma) {
  return a_max / (1.0 - gamma) * std::sqrt(2.0 * delta);
}

// B * sqrt(log(2/conf) / (2 N_eff)) with N_eff = N / (1 + 2 * mixing_sum). N = inf gives 0.
inline double hoeffding_radius(double n, double conf, double bound, double mixing_sum = 0.0) {
  require(n >= 1.0, "hoeffding_radius: N must be >= 1");
  require(conf > 0.0 && conf < 1.0, "hoeffding_radius: conf must lie in (0,1)");
  if (std::isinf(n)) return 0.0;
  const double n_eff = n / (1.0 + 2.0 * mixing_sum);
  return bound * std::sqrt(std::log(2.0 / conf) / (2.0 * n_eff));
}

inline double finite_budget_envelope(double delta, double a_max, double gamma, double n, double conf) {
  return oracle_envelope(delta, a_max, gamma) + hoeffding_radius(n, conf, a_max / (1.0 - gamma));
}

struct StepInputs {
  std::size_t stage = 0, step = 0, agent = 0;
  double gamma = 0.9, r_max = 1.0;
  double surrogate_exact = 0.0;
  std::optional<double> surrogate_empirical;
  double radius = 0.0;
  double kl_max = 0.0;
  double expected_kl = 0.0;
  double a_max = 0.0;
  double zeta = 0.0;
  std::string zeta_method = "exact-oracle";
  double episodes = kInf;  // inf in oracle mode
  double conf = 0.05;
  double j_before = 0.0, j_after = 0.0;
};

struct StepCertificate {
  StepInputs in;
  double surrogate = 0.0;  // the one the bound is built on
  double delta_used = 0.0;
  double penalty_shift = 0.0;
  double penalty_rmax = 0.0;
  double lower_bound = 0.0;
  double oracle_upper = 0.0;
  double budget_upper = 0.0;
  double sampling_radius = 0.0;
  double realized_gain = 0.0;
  bool kl_within_radius = true;
  bool lower_ok = true;
  bool upper_ok = true;
  bool budget_ok = true;
};

inline StepCertificate single_step_certificate(const StepInputs& in) {
  StepCertificate c;
  c.in = in;
  const double g = in.gamma;
  c.surrogate = in.surrogate_empirical.value_or(in.surrogate_exact);
  c.kl_within_radius = in.kl_max <= in.radius + 1e-9;
  c.delta_used = c.kl_within_radius ? std::min(in.radius, in.kl_max) : in.radius;
  c.penalty_shift = shift_penalty(in.a_max, in.kl_max, g);
  c.penalty_rmax = shift_penalty_rmax(in.r_max, in.kl_max, g);
  c.lower_bound = c.surrogate - c.penalty_shift - in.zeta / (1.0 - g);
  c.oracle_upper = oracle_envelope(c.delta_used, in.a_max, g);
  c.budget_upper = finite_budget_envelope(c.delta_used, in.a_max, g, in.episodes, in.conf);
  c.sampling_radius = hoeffding_radius(in.episodes, in.conf, in.a_max / (1.0 - g));
  c.realized_gain = in.j_after - in.j_before;
  c.lower_ok = c.realized_gain >= c.lower_bound - c.sampling_radius - kCertTol;
  c.upper_ok = c.realized_gain <= c.oracle_upper + kCertTol;
  c.budget_ok = c.realized_gain <= c.budget_upper + kCertTol;
  return c;
}

struct InfoGeometry {
  VectorXd g;
  MatrixXd fisher;
  double eps_reg = 0.0;
  double kappa = 0.0;
  double a_reg = 0.0;
  double l_loc = 0.0;
  double delta_bar = 0.0;
  double gain = 0.0;

  double gain_at(double db) const { return kappa * std::sqrt(db) - a_reg * db; }
  double best_radius() const { return a_reg > 0.0 ? std::pow(kappa / (2.0 * a_reg), 2) : kInf; }
};

// Fisher of one agent's logits under the anchor occupancy (inactive states contribute nothing).
inline InfoGeometry fisher_and_gain(const SurrogateAnchor& anchor, const AgentPolicy& at, std::optional<double> eps_reg,
                                    double l_loc, double delta_bar) {
  const Eigen::Index S = Eigen::Index(at.num_states()), A = Eigen::Index(at.num_actions());
  const Eigen::Index dim = S * A;
  InfoGeometry ig;
  ig.fisher = MatrixXd::Zero(dim, dim);
  const MatrixXd grad = anchor.gradient(at);
  ig.g.resize(dim);
  for (Eigen::Index s = 0; s < S; ++s) {
    for (Eigen::Index a = 0; a < A; ++a) ig.g(s * A + a) = grad(s, a);
    if (!anchor.active[std::size_t(s)]) continue;
    const double d = anchor.occupancy[std::size_t(s)];
    for (Eigen::Index a = 0; a < A; ++a)
      for (Eigen::Index b = 0; b < A; ++b)
        ig.fisher(s * A + a, s * A + b) = d * ((a == b ? at.prob(s, a) : 0.0) - at.prob(s, a) * at.prob(s, b));
  }
  const double tr = ig.fisher.trace();
  ig.eps_reg = eps_reg.value_or(tr > 0.0 ? 1e-6 * tr / double(dim) : 1e-12);
  const MatrixXd reg = ig.fisher + ig.eps_reg * MatrixXd::Identity(dim, dim);
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(reg, Eigen::EigenvaluesOnly);
  const double lmin = eig.eigenvalues().minCoeff();
  if (!(lmin > 0.0)) throw ValidationError("fisher_and_gain: singular Fisher, eps_reg must be positive");
  const VectorXd sol = reg.ldlt().solve(ig.g);
  ig.kappa = std::sqrt(std::max(0.0, 2.0 * ig.g.dot(sol)));
  ig.l_loc = l_loc;
  ig.a_reg = l_loc / lmin;
  ig.delta_bar = delta_bar;
  ig.gain = ig.gain_at(delta_bar);
  return ig;
}

template <TeamPolicy P>
InfoGeometry fisher_and_gain(const TabularMdp& mdp, const P& intermediate, std::size_t agent,
                             std::optional<double> eps_reg, double l_loc, double delta_bar) {
  const auto values = oracle_evaluate(mdp, intermediate);
  return fisher_and_gain(make_surrogate_anchor(mdp, intermediate, values, agent), intermediate.agent(agent), eps_reg,
                         l_loc, delta_bar);
}

struct MainStatement {
  double composite = 0.0;
  double info_gain = 0.0;
  double occupancy_penalty = 0.0;
  double bias_penalty = 0.0;
  double sampling_error = 0.0;
};

struct StageCertificate {
  std::size_t stage = 0;
  std::vector<std::size_t> order;
  std::vector<StepCertificate> steps;
  std::vector<InfoGeometry> info;
  double conf = 0.05;
  double stage_lower = 0.0;
  double realized_stage_gain = 0.0;
  double sum_step_gains = 0.0;
  double telescoping_gap = 0.0;
  std::vector<double> sampling_terms;
  MainStatement main;
  double j_start = 0.0, j_end = 0.0;
  bool lower_ok = true;
  bool main_ok = true;
};

// The composite one-stage bound with the log(2n/conf) union bound.
inline MainStatement main_statement_bound(const std::vector<StepCertificate>& steps,
                                          const std::vector<double>& gains, double gamma, double conf) {
  require(steps.size() == gains.size(), "main_statement_bound: one gain term per step");
  MainStatement m;
  if (steps.empty()) return m;
  const double n = double(steps.size());
  double a_max = 0.0;
  for (const auto& s : steps) a_max = std::max(a_max, s.in.a_max);
  double sum_sqrt = 0.0;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    m.info_gain += gains[i];
    sum_sqrt += std::sqrt(0.5 * steps[i].delta_used);
    m.bias_penalty += steps[i].in.zeta;
    if (!std::isinf(steps[i].in.episodes))
      m.sampling_error += a_max / (1.0 - gamma) * std::sqrt(std::log(2.0 * n / conf) / (2.0 * steps[i].in.episodes));
  }
  m.occupancy_penalty = 2.0 * gamma / ((1.0 - gamma) * (1.0 - gamma)) * a_max * sum_sqrt;
  m.bias_penalty /= (1.0 - gamma);
  m.composite = m.info_gain - m.occupancy_penalty - m.bias_penalty - m.sampling_error;
  return m;
}

inline StageCertificate joint_stage_certificate(std::size_t stage, std::vector<std::size_t> order,
                                                std::vector<StepCertificate> steps, std::vector<InfoGeometry> info,
                                                double j_start, double j_end, double conf) {
  require(!steps.empty(), "joint_stage_certificate: no steps");
  StageCertificate c;
  c.stage = stage;
  c.order = std::move(order);
  c.conf = conf;
  c.j_start = j_start;
  c.j_end = j_end;
  std::vector<double> gains;
  for (const auto& ig : info) gains.push_back(ig.gain);
  if (gains.size() != steps.size()) gains.assign(steps.size(), 0.0);
  double slack = 0.0;
  for (const auto& s : steps) {
    c.stage_lower += s.lower_bound;
    c.sum_step_gains += s.realized_gain;
    c.sampling_terms.push_back(s.sampling_radius);
    slack += s.sampling_radius;
  }
  c.realized_stage_gain = j_end - j_start;
  c.telescoping_gap = std::abs(c.sum_step_gains - c.realized_stage_gain);
  c.main = main_statement_bound(steps, gains, steps.front().in.gamma, conf);
  c.lower_ok = c.realized_stage_gain >= c.stage_lower - slack - double(steps.size()) * kCertTol;
  c.main_ok = c.realized_stage_gain >= c.main.composite - kCertTol;
  c.steps = std::move(steps);
  c.info = std::move(info);
  return c;
}

}  // namespace sat
