#include <CLI11.hpp>

#include "sat/commands.hpp"

namespace {

void add_common(CLI::App* cmd, sat::CliOptions& o, std::string& seed_text, bool need_out) {
  cmd->add_option("--config", o.config, "run configuration (JSON)")->required();
  auto* out = cmd->add_option("--out", o.out, "output directory");
  if (need_out) out->required();
  cmd->add_option("--seed", seed_text, "master seed (overrides SAT_MASTER_SEED and the config)");
  cmd->add_option("--mode", o.mode, "advantage mode")->check(CLI::IsMember({"exact", "sampled"}));
  cmd->add_flag("--strict-config", o.strict, "reject unknown configuration keys");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sequential agent tuning on tabular MDPs with exact certificates"};
  app.require_subcommand(1);

  sat::CliOptions o;
  std::string seed_text, resume, log_path, swap_path, policy_path;
  std::vector<double> radii;

  auto* train = app.add_subcommand("train", "run training stages and write a run log");
  add_common(train, o, seed_text, true);
  train->add_option("--resume", resume, "checkpoint written by a previous train run");

  auto* certify = app.add_subcommand("certify", "re-verify every certificate in a run log");
  certify->add_option("log", log_path, "run log (JSONL)")->required();

  auto* sweep = app.add_subcommand("sweep-delta", "trust-region violation rate against the KL radius");
  add_common(sweep, o, seed_text, true);
  sweep->add_option("--radii", radii, "ascending list of radii")->required()->expected(1, -1)->delimiter(',');

  auto* pnp = app.add_subcommand("plugplay", "paired continuations with and without an agent swap");
  add_common(pnp, o, seed_text, true);
  pnp->add_option("--swap", swap_path, "swap specification (JSON)")->required();

  auto* oracle = app.add_subcommand("oracle", "dump exact values for an MDP and team policy");
  add_common(oracle, o, seed_text, false);
  oracle->add_option("--policy", policy_path, "team policy (JSON); default is the configured initial team");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? sat::kExitOk : sat::kExitError;
  }

  try {
    if (!seed_text.empty()) o.seed = sat::parse_seed_text(seed_text, "--seed");
    if (*train) return sat::cmd_train(o, resume, std::cout, std::cerr);
    if (*certify) return sat::cmd_certify(log_path, std::cout);
    if (*sweep) return sat::cmd_sweep_delta(o, radii, std::cout, std::cerr);
    if (*pnp) return sat::cmd_plugplay(o, swap_path, std::cout, std::cerr);
    if (*oracle) return sat::cmd_oracle(o, policy_path, std::cout, std::cerr);
  } catch (const sat::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return sat::kExitError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return sat::kExitError;
  }
  return sat::kExitError;
}
