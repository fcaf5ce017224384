// regmarket: config-driven runner for regression-market experiments.
//
//   regmarket run <config.json>       honest markets, optional attack and curve
//   regmarket validate <config.json>  list config violations without running
//   regmarket curve <config.json>     replication sweep only
//
// Exit codes: 0 success, 2 config error, 3 runtime error.

#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "regmarket/experiment.hpp"

namespace {

constexpr int exit_config = 2;
constexpr int exit_runtime = 3;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  unsigned threads = 1;
};

regmarket::ExperimentConfig configure(const Options& o) {
  auto c = regmarket::load_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.out_dir) c.output_dir = *o.out_dir;
  c.threads = o.threads;
  return c;
}

int validate(const Options& o) {
  const auto json = regmarket::read_json_file(o.config);
  const auto [config, violations] = regmarket::parse_config(json, std::filesystem::path(o.config).parent_path());
  if (violations.empty()) {
    std::cout << o.config << ": valid\n";
    return 0;
  }
  std::cout << o.config << ": invalid\n";
  for (const auto& v : violations) std::cout << "  " << v << "\n";
  return exit_config;
}

int execute(const Options& o, bool curve_only) {
  const auto config = configure(o);
  const auto dir = regmarket::output_dir(config);
  const auto report = regmarket::run_experiment(config, dir, curve_only);
  for (const auto& f : report.files) std::cout << (dir / f).string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Regression-market experiment runner"};
  app.require_subcommand(1);
  Options opts;

  auto add_common = [&](CLI::App* cmd, bool runs) {
    cmd->add_option("config", opts.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    if (!runs) return;
    cmd->add_option("--seed", opts.seed, "Override the config seed");
    cmd->add_option("--out-dir", opts.out_dir,
                    std::string("Output directory (default: config output.dir, then $") + regmarket::out_dir_env + ")");
    cmd->add_option("--threads", opts.threads, "Worker threads for sampled allocations")->check(CLI::PositiveNumber);
  };
  auto* run = app.add_subcommand("run", "Run honest markets, then the attack and curve sections if present");
  auto* val = app.add_subcommand("validate", "Check a config and list every violation");
  auto* curve = app.add_subcommand("curve", "Run only the replication sweep");
  add_common(run, true);
  add_common(val, false);
  add_common(curve, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : exit_config;
  }

  try {
    if (val->parsed()) return validate(opts);
    return execute(opts, curve->parsed());
  } catch (const regmarket::Error& e) {
    std::cerr << "regmarket: " << e.what() << "\n";
    return e.kind() == regmarket::ErrorKind::config ? exit_config : exit_runtime;
  } catch (const std::exception& e) {
    std::cerr << "regmarket: runtime error: " << e.what() << "\n";
    return exit_runtime;
  }
}
