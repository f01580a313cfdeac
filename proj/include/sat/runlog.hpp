#pragma once

#include <charconv>
#include <ostream>
#include <sstream>

#include "sat/driver.hpp"

namespace sat {

inline constexpr int kRunLogVersion = 1;

// Shortest round-trip text, independent of the C locale.
inline std::string fmt(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return {buf, r.ptr};
}

inline json num_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

inline double num_from(const json& v) {
  if (v.is_null()) return kInf;
  return v.get<double>();
}

struct SeedInfo {
  std::uint64_t seed = 0;
  std::string source = "config";  // config | env:SAT_MASTER_SEED | flag
};

inline json header_record(const RunConfig& cfg, const SeedInfo& seed, const std::string& command) {
  return {{"type", "header"},
          {"format", "sat-runlog"},
          {"version", kRunLogVersion},
          {"command", command},
          {"config", config_to_json(cfg)},
          {"config_digest", config_digest(cfg)},
          {"seed", seed.seed},
          {"seed_source", seed.source}};
}

inline json step_inputs_json(const StepInputs& in) {
  return {{"gamma", in.gamma},
          {"r_max", in.r_max},
          {"surrogate_exact", in.surrogate_exact},
          {"surrogate_empirical", in.surrogate_empirical ? json(*in.surrogate_empirical) : json(nullptr)},
          {"radius", in.radius},
          {"kl_max", in.kl_max},
          {"expected_kl", in.expected_kl},
          {"a_max", in.a_max},
          {"zeta", in.zeta},
          {"zeta_method", in.zeta_method},
          {"episodes", num_or_null(in.episodes)},
          {"conf", in.conf},
          {"j_before", in.j_before},
          {"j_after", in.j_after}};
}

inline StepInputs step_inputs_from(const json& rec) {
  const json& i = rec.at("inputs");
  StepInputs in;
  in.stage = rec.at("stage").get<std::size_t>();
  in.step = rec.at("step").get<std::size_t>();
  in.agent = rec.at("agent").get<std::size_t>();
  in.gamma = i.at("gamma").get<double>();
  in.r_max = i.at("r_max").get<double>();
  in.surrogate_exact = i.at("surrogate_exact").get<double>();
  if (!i.at("surrogate_empirical").is_null()) in.surrogate_empirical = i.at("surrogate_empirical").get<double>();
  in.radius = i.at("radius").get<double>();
  in.kl_max = i.at("kl_max").get<double>();
  in.expected_kl = i.at("expected_kl").get<double>();
  in.a_max = i.at("a_max").get<double>();
  in.zeta = i.at("zeta").get<double>();
  in.zeta_method = i.at("zeta_method").get<std::string>();
  in.episodes = num_from(i.at("episodes"));
  in.conf = i.at("conf").get<double>();
  in.j_before = i.at("j_before").get<double>();
  in.j_after = i.at("j_after").get<double>();
  return in;
}

inline json step_bounds_json(const StepCertificate& c) {
  return {{"surrogate", c.surrogate},       {"delta_used", c.delta_used},     {"penalty_shift", c.penalty_shift},
          {"penalty_rmax", c.penalty_rmax}, {"lower_bound", c.lower_bound},   {"oracle_upper", c.oracle_upper},
          {"budget_upper", c.budget_upper}, {"sampling_radius", c.sampling_radius},
          {"realized_gain", c.realized_gain}};
}

inline json step_record(const StageReport& rep, std::size_t i) {
  const StepReport& s = rep.steps[i];
  const auto& d = s.diag;
  return {{"type", "step"},
          {"run", rep.run},
          {"stage", rep.stage},
          {"step", i},
          {"agent", s.agent},
          {"target_digest", s.target_digest},
          {"inputs", step_inputs_json(s.cert.in)},
          {"bounds", step_bounds_json(s.cert)},
          {"verdicts",
           {{"kl_within_radius", s.cert.kl_within_radius},
            {"lower_ok", s.cert.lower_ok},
            {"upper_ok", s.cert.upper_ok},
            {"budget_ok", s.cert.budget_ok},
            {"sampled_envelope_ok", s.sampled_envelope_ok}}},
          {"info",
           {{"kappa", s.info.kappa},
            {"a_reg", s.info.a_reg},
            {"l_loc", s.info.l_loc},
            {"eps_reg", s.info.eps_reg},
            {"delta_bar", s.info.delta_bar},
            {"gain", s.info.gain}}},
          {"diagnostics",
           {{"eta", d.eta},
            {"l_blk", d.l_blk},
            {"epochs_accepted", d.step_eta.size()},
            {"backtracks", d.backtracks},
            {"abandoned", d.abandoned},
            {"min_ascent_margin", d.ascent_margin.empty()
                                      ? json(nullptr)
                                      : json(*std::min_element(d.ascent_margin.begin(), d.ascent_margin.end()))},
            {"final_kl_max", d.final_kl_max},
            {"final_kl_quantile", d.final_kl_quantile},
            {"final_beta", d.final_beta},
            {"raw_proposals", d.raw_proposals},
            {"raw_state_checks", d.raw_state_checks},
            {"raw_violations", d.raw_violations}}},
          {"advantages",
           {{"episodes", s.adv.episodes},
            {"mean_raw", s.adv.mean_raw},
            {"sd_raw", s.adv.sd_raw},
            {"clip_fraction", s.adv.clip_fraction}}}};
}

inline json stage_record(const StageReport& rep) {
  const auto& c = rep.cert;
  return {{"type", "stage"},
          {"run", rep.run},
          {"stage", rep.stage},
          {"step", nullptr},
          {"mode", rep.mode},
          {"order", rep.order},
          {"digest_before", rep.digest_before},
          {"digest_after", rep.digest_after},
          {"seeds", {{"stage", rep.stage_seed}, {"rollout", rep.rollout_seed}, {"order", rep.order_seed}}},
          {"j_start", c.j_start},
          {"j_end", c.j_end},
          {"bounds",
           {{"stage_lower", c.stage_lower},
            {"realized_stage_gain", c.realized_stage_gain},
            {"sum_step_gains", c.sum_step_gains},
            {"telescoping_gap", c.telescoping_gap},
            {"main_composite", c.main.composite},
            {"main_info_gain", c.main.info_gain},
            {"main_occupancy_penalty", c.main.occupancy_penalty},
            {"main_bias_penalty", c.main.bias_penalty},
            {"main_sampling_error", c.main.sampling_error}}},
          {"verdicts", {{"lower_ok", c.lower_ok}, {"main_ok", c.main_ok}}},
          {"raw_state_checks", rep.raw_state_checks()},
          {"raw_violations", rep.raw_violations()}};
}

inline json swap_record(const SwapRecord& s) {
  const auto& r = s.stage0;
  double lmin = kInf, lmax = 0.0, lmean = 0.0, kmax = 0.0;
  for (std::size_t i = 0; i < r.lambda.size(); ++i) {
    lmin = std::min(lmin, r.lambda[i]);
    lmax = std::max(lmax, r.lambda[i]);
    lmean += r.lambda[i] / double(r.lambda.size());
    kmax = std::max(kmax, r.kl_to_incumbent[i]);
  }
  std::vector<int> binding(r.binding.begin(), r.binding.end());
  return {{"type", "swap"},
          {"run", s.run},
          {"stage", s.stage},
          {"step", nullptr},
          {"agent", s.agent},
          {"pretrained_digest", s.pretrained_digest},
          {"projected_digest", s.projected_digest},
          {"lambda", {{"min", lmin}, {"max", lmax}, {"mean", lmean}, {"per_state", r.lambda}}},
          {"binding", binding},
          {"binding_count", r.binding_count()},
          {"kl_to_incumbent_max", kmax}};
}

struct RunTotals {
  std::size_t runs = 0, stages = 0, steps = 0;
  std::vector<double> final_j;
  double certified_lower = 0.0;
  double realized_gain = 0.0;
  std::size_t step_lower = 0, step_upper = 0, step_budget = 0, stage_lower = 0, stage_main = 0,
              sampled_envelope = 0, kl_radius = 0;
  std::size_t raw_checks = 0, raw_violations = 0;

  void add(const StageReport& rep) {
    ++stages;
    for (const auto& s : rep.steps) {
      ++steps;
      step_lower += !s.cert.lower_ok;
      step_upper += !s.cert.upper_ok;
      step_budget += !s.cert.budget_ok;
      sampled_envelope += !s.sampled_envelope_ok;
      kl_radius += !s.cert.kl_within_radius;
    }
    stage_lower += !rep.cert.lower_ok;
    stage_main += !rep.cert.main_ok;
    certified_lower += rep.cert.stage_lower;
    realized_gain += rep.cert.realized_stage_gain;
    raw_checks += rep.raw_state_checks();
    raw_violations += rep.raw_violations();
  }
  double raw_rate() const { return raw_checks ? double(raw_violations) / double(raw_checks) : 0.0; }
};

inline json summary_record(const RunTotals& t) {
  return {{"type", "summary"},
          {"runs", t.runs},
          {"stages", t.stages},
          {"steps", t.steps},
          {"final_j", t.final_j},
          {"total_certified_lower", t.certified_lower},
          {"total_realized_gain", t.realized_gain},
          {"violations",
           {{"step_lower", t.step_lower},
            {"step_upper", t.step_upper},
            {"step_budget", t.step_budget},
            {"stage_lower", t.stage_lower},
            {"stage_main", t.stage_main},
            {"sampled_envelope", t.sampled_envelope},
            {"kl_radius", t.kl_radius}}},
          {"raw_state_checks", t.raw_checks},
          {"raw_violations", t.raw_violations}};
}

// Oracle mode tolerates nothing. Sampled mode tolerates the probabilistic checks up to conf * steps.
inline bool totals_violate(const RunTotals& t, bool sampled, double conf) {
  if (t.step_upper || t.step_budget || t.kl_radius) return true;
  if (!sampled) return t.step_lower || t.stage_lower || t.stage_main || t.sampled_envelope;
  const double allow = conf * double(std::max<std::size_t>(t.steps, 1));
  return double(t.step_lower) > allow || double(t.sampled_envelope) > allow ||
         double(t.stage_lower) > conf * double(std::max<std::size_t>(t.stages, 1)) ||
         double(t.stage_main) > conf * double(std::max<std::size_t>(t.stages, 1));
}

// ---- CSV tables -----------------------------------------------------------

inline const char* kStageCsvHeader =
    "run,stage,order,j_start,j_end,realized_gain,stage_lower,main_composite,lower_ok,main_ok,raw_violations,"
    "raw_state_checks";
inline const char* kStepCsvHeader =
    "run,stage,step,agent,radius,kl_max,surrogate,lower_bound,realized_gain,oracle_upper,budget_upper,zeta,lower_ok,"
    "upper_ok,budget_ok";

inline std::string stage_csv_row(const StageReport& rep) {
  std::ostringstream os;
  std::string order;
  for (std::size_t k = 0; k < rep.order.size(); ++k) order += (k ? "-" : "") + std::to_string(rep.order[k]);
  const auto& c = rep.cert;
  os << rep.run << ',' << rep.stage << ',' << order << ',' << fmt(c.j_start) << ',' << fmt(c.j_end) << ','
     << fmt(c.realized_stage_gain) << ',' << fmt(c.stage_lower) << ',' << fmt(c.main.composite) << ',' << c.lower_ok
     << ',' << c.main_ok << ',' << rep.raw_violations() << ',' << rep.raw_state_checks();
  return os.str();
}

inline std::string step_csv_row(const StageReport& rep, std::size_t i) {
  const auto& s = rep.steps[i];
  const auto& c = s.cert;
  std::ostringstream os;
  os << rep.run << ',' << rep.stage << ',' << i << ',' << s.agent << ',' << fmt(c.in.radius) << ','
     << fmt(c.in.kl_max) << ',' << fmt(c.surrogate) << ',' << fmt(c.lower_bound) << ',' << fmt(c.realized_gain)
     << ',' << fmt(c.oracle_upper) << ',' << fmt(c.budget_upper) << ',' << fmt(c.in.zeta) << ',' << c.lower_ok
     << ',' << c.upper_ok << ',' << c.budget_ok;
  return os.str();
}

// ---- offline verification -------------------------------------------------

inline constexpr double kDriftTol = 1e-12;

struct CertifyReport {
  std::size_t records = 0, steps = 0, stages = 0, swaps = 0;
  std::vector<std::string> mismatches;  // tampering or drift; any entry fails
  RunTotals totals;
  bool sampled = false;
  double conf = 0.05;
  bool violation = false;

  bool ok() const { return mismatches.empty() && !violation; }
};

namespace detail {

inline bool drifted(double a, double b) {
  if (std::isinf(a) || std::isinf(b)) return a != b;
  return std::abs(a - b) > kDriftTol * std::max({1.0, std::abs(a), std::abs(b)});
}

struct RecordTag {
  std::size_t line;
  std::string type;
  json run, stage, step;
  std::string str() const {
    std::ostringstream os;
    os << "line " << line << ": " << type << " record (run " << run.dump() << ", stage " << stage.dump() << ", step "
       << step.dump() << ")";
    return os.str();
  }
};

}  // namespace detail

inline CertifyReport certify_log(std::istream& in) {
  CertifyReport out;
  std::string line;
  std::size_t lineno = 0;
  std::optional<RunConfig> cfg;
  bool saw_summary = false;

  // Steps of the stage currently being read, keyed by run.
  std::map<std::size_t, std::vector<StepCertificate>> pending;
  std::map<std::size_t, std::vector<InfoGeometry>> pending_info;

  auto mismatch = [&](const detail::RecordTag& tag, const std::string& field, const std::string& what) {
    out.mismatches.push_back(tag.str() + ": field " + field + " " + what);
  };
  auto cmp = [&](const detail::RecordTag& tag, const std::string& field, double logged, double recomputed) {
    if (detail::drifted(logged, recomputed))
      mismatch(tag, field, "logged " + fmt(logged) + " but recomputes to " + fmt(recomputed));
  };
  auto cmpb = [&](const detail::RecordTag& tag, const std::string& field, bool logged, bool recomputed) {
    if (logged != recomputed)
      mismatch(tag, field, std::string("logged ") + (logged ? "true" : "false") + " but recomputes to " +
                               (recomputed ? "true" : "false"));
  };

  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw ValidationError("line " + std::to_string(lineno) + ": corrupt record: " + e.what());
    }
    ++out.records;
    if (!rec.is_object() || !rec.contains("type"))
      throw ValidationError("line " + std::to_string(lineno) + ": record without a type tag");
    detail::RecordTag tag{lineno, rec.at("type").get<std::string>(), rec.value("run", json(nullptr)),
                          rec.value("stage", json(nullptr)), rec.value("step", json(nullptr))};
    try {
      if (lineno == 1) {
        if (tag.type != "header") throw ValidationError("line 1: expected a header record");
        if (rec.at("version").get<int>() != kRunLogVersion) throw ValidationError("line 1: unsupported log version");
        cfg = parse_config(rec.at("config"), true);
        const std::string d = config_digest(*cfg);
        if (d != rec.at("config_digest").get<std::string>())
          mismatch(tag, "config_digest", "does not match the embedded config (" + d + ")");
        if (rec.at("seed").get<std::uint64_t>() != cfg->seed)
          mismatch(tag, "seed", "differs from the embedded config seed");
        out.sampled = cfg->sampled();
        out.conf = cfg->confidence;
        continue;
      }
      if (!cfg) throw ValidationError("log does not start with a header");
      if (saw_summary) throw ValidationError("line " + std::to_string(lineno) + ": record after the summary");

      if (tag.type == "step") {
        ++out.steps;
        const std::size_t run = rec.at("run").get<std::size_t>();
        const StepInputs inputs = step_inputs_from(rec);
        const StepCertificate c = single_step_certificate(inputs);
        const json& b = rec.at("bounds");
        const json want = step_bounds_json(c);
        for (const auto& [k, v] : want.items()) {
          if (!b.contains(k)) {
            mismatch(tag, "bounds." + k, "is missing");
            continue;
          }
          cmp(tag, "bounds." + k, num_from(b.at(k)), v.get<double>());
        }
        const json& v = rec.at("verdicts");
        cmpb(tag, "verdicts.kl_within_radius", v.at("kl_within_radius").get<bool>(), c.kl_within_radius);
        cmpb(tag, "verdicts.lower_ok", v.at("lower_ok").get<bool>(), c.lower_ok);
        cmpb(tag, "verdicts.upper_ok", v.at("upper_ok").get<bool>(), c.upper_ok);
        cmpb(tag, "verdicts.budget_ok", v.at("budget_ok").get<bool>(), c.budget_ok);
        bool env_ok = true;
        if (inputs.surrogate_empirical) env_ok = *inputs.surrogate_empirical <= c.budget_upper + kCertTol;
        cmpb(tag, "verdicts.sampled_envelope_ok", v.at("sampled_envelope_ok").get<bool>(), env_ok);

        InfoGeometry ig;
        const json& inf = rec.at("info");
        ig.kappa = inf.at("kappa").get<double>();
        ig.a_reg = inf.at("a_reg").get<double>();
        ig.l_loc = inf.at("l_loc").get<double>();
        ig.eps_reg = inf.at("eps_reg").get<double>();
        ig.delta_bar = inf.at("delta_bar").get<double>();
        ig.gain = ig.gain_at(ig.delta_bar);
        cmp(tag, "info.delta_bar", ig.delta_bar, c.delta_used);
        cmp(tag, "info.gain", inf.at("gain").get<double>(), ig.gain);

        auto& steps = pending[run];
        if (!steps.empty()) cmp(tag, "inputs.j_before", inputs.j_before, steps.back().in.j_after);
        if (inputs.step != steps.size()) mismatch(tag, "step", "is out of sequence");
        steps.push_back(c);
        pending_info[run].push_back(ig);
        out.totals.steps++;
        out.totals.step_lower += !c.lower_ok;
        out.totals.step_upper += !c.upper_ok;
        out.totals.step_budget += !c.budget_ok;
        out.totals.kl_radius += !c.kl_within_radius;
        out.totals.sampled_envelope += !env_ok;
        const json& d = rec.at("diagnostics");
        out.totals.raw_checks += d.at("raw_state_checks").get<std::size_t>();
        out.totals.raw_violations += d.at("raw_violations").get<std::size_t>();
      } else if (tag.type == "stage") {
        ++out.stages;
        const std::size_t run = rec.at("run").get<std::size_t>();
        auto steps = std::move(pending[run]);
        auto info = std::move(pending_info[run]);
        pending.erase(run);
        pending_info.erase(run);
        const auto order = rec.at("order").get<std::vector<std::size_t>>();
        if (steps.empty() || steps.size() != order.size()) {
          mismatch(tag, "order", "does not match the number of step records");
          continue;
        }
        for (std::size_t i = 0; i < steps.size(); ++i) {
          if (steps[i].in.agent != order[i]) mismatch(tag, "order", "disagrees with the step agents");
          if (steps[i].in.stage != rec.at("stage").get<std::size_t>()) mismatch(tag, "stage", "disagrees with its steps");
        }
        const double j_start = rec.at("j_start").get<double>(), j_end = rec.at("j_end").get<double>();
        cmp(tag, "j_start", j_start, steps.front().in.j_before);
        cmp(tag, "j_end", j_end, steps.back().in.j_after);
        const auto c = joint_stage_certificate(rec.at("stage").get<std::size_t>(), order, steps, info, j_start, j_end,
                                               cfg->confidence);
        const json& b = rec.at("bounds");
        cmp(tag, "bounds.stage_lower", b.at("stage_lower").get<double>(), c.stage_lower);
        cmp(tag, "bounds.realized_stage_gain", b.at("realized_stage_gain").get<double>(), c.realized_stage_gain);
        cmp(tag, "bounds.sum_step_gains", b.at("sum_step_gains").get<double>(), c.sum_step_gains);
        cmp(tag, "bounds.telescoping_gap", b.at("telescoping_gap").get<double>(), c.telescoping_gap);
        cmp(tag, "bounds.main_composite", b.at("main_composite").get<double>(), c.main.composite);
        cmp(tag, "bounds.main_info_gain", b.at("main_info_gain").get<double>(), c.main.info_gain);
        cmp(tag, "bounds.main_occupancy_penalty", b.at("main_occupancy_penalty").get<double>(),
            c.main.occupancy_penalty);
        cmp(tag, "bounds.main_bias_penalty", b.at("main_bias_penalty").get<double>(), c.main.bias_penalty);
        cmp(tag, "bounds.main_sampling_error", b.at("main_sampling_error").get<double>(), c.main.sampling_error);
        cmpb(tag, "verdicts.lower_ok", rec.at("verdicts").at("lower_ok").get<bool>(), c.lower_ok);
        cmpb(tag, "verdicts.main_ok", rec.at("verdicts").at("main_ok").get<bool>(), c.main_ok);
        if (c.telescoping_gap > 1e-8) mismatch(tag, "bounds.telescoping_gap", "exceeds 1e-8");
        out.totals.stages++;
        out.totals.stage_lower += !c.lower_ok;
        out.totals.stage_main += !c.main_ok;
        out.totals.certified_lower += c.stage_lower;
        out.totals.realized_gain += c.realized_stage_gain;
      } else if (tag.type == "swap") {
        ++out.swaps;
        const json& l = rec.at("lambda");
        const auto per_state = l.at("per_state").get<std::vector<double>>();
        const auto binding = rec.at("binding").get<std::vector<int>>();
        std::size_t bc = 0;
        for (std::size_t s = 0; s < per_state.size(); ++s) {
          if (s < binding.size() && binding[s]) ++bc;
          if (s < binding.size() && !binding[s] && per_state[s] != 0.0)
            mismatch(tag, "lambda.per_state", "is nonzero on a slack state");
        }
        if (bc != rec.at("binding_count").get<std::size_t>()) mismatch(tag, "binding_count", "disagrees with binding");
      } else if (tag.type == "summary") {
        saw_summary = true;
        if (!pending.empty()) mismatch(tag, "steps", "step records without a closing stage record");
        out.totals.runs = rec.at("runs").get<std::size_t>();
        const json& v = rec.at("violations");
        const auto& t = out.totals;
        auto cnt = [&](const char* k, std::size_t want) {
          if (v.at(k).get<std::size_t>() != want)
            mismatch(tag, std::string("violations.") + k, "disagrees with the records (" + std::to_string(want) + ")");
        };
        cnt("step_lower", t.step_lower);
        cnt("step_upper", t.step_upper);
        cnt("step_budget", t.step_budget);
        cnt("stage_lower", t.stage_lower);
        cnt("stage_main", t.stage_main);
        cnt("sampled_envelope", t.sampled_envelope);
        cnt("kl_radius", t.kl_radius);
        if (rec.at("stages").get<std::size_t>() != t.stages) mismatch(tag, "stages", "disagrees with the records");
        if (rec.at("steps").get<std::size_t>() != t.steps) mismatch(tag, "steps", "disagrees with the records");
        cmp(tag, "total_certified_lower", rec.at("total_certified_lower").get<double>(), t.certified_lower);
        cmp(tag, "total_realized_gain", rec.at("total_realized_gain").get<double>(), t.realized_gain);
        if (rec.at("raw_state_checks").get<std::size_t>() != t.raw_checks ||
            rec.at("raw_violations").get<std::size_t>() != t.raw_violations)
          mismatch(tag, "raw_violations", "disagrees with the records");
      } else {
        throw ValidationError(tag.str() + ": unknown record type");
      }
    } catch (const json::exception& e) {
      throw ValidationError(tag.str() + ": malformed record: " + e.what());
    }
  }
  if (!cfg) throw ValidationError("empty log");
  if (!saw_summary) throw ValidationError("log has no summary record (truncated run?)");
  out.violation = totals_violate(out.totals, out.sampled, out.conf);
  return out;
}

}  // namespace sat
