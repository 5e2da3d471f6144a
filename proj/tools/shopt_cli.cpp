#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "shopt/harness.hpp"

namespace {

// exit codes: 0 success, 1 config error, 2 runtime failure, 3 violations
constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;
constexpr int kViolations = 3;

shopt::ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw shopt::ConfigError("cannot open config file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw shopt::ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return shopt::ExperimentConfig::from_json(j);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"finite-sum optimization experiments: gated full-matrix "
               "adaptive methods and SGD baselines"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::string in_dir;
  int workers = 1;
  double eps = 0.0;

  auto* run_cmd = app.add_subcommand("run", "execute the experiment matrix");
  run_cmd->add_option("--config", config_path, "JSON config file")->required();
  run_cmd->add_option("--out", out_dir, "output directory (default: config out_dir)");
  run_cmd->add_option("--workers", workers, "concurrent cells")->check(CLI::PositiveNumber);

  auto* compare_cmd = app.add_subcommand("compare", "summarize finished runs");
  compare_cmd->add_option("--in", in_dir, "experiment output directory")->required();
  compare_cmd->add_option("--eps", eps, "weighted-metric threshold for epochs_to_eps");

  auto* verify_cmd = app.add_subcommand("verify", "run the numerical verifiers");
  verify_cmd->add_option("--config", config_path, "JSON config file")->required();
  verify_cmd->add_option("--out", out_dir, "output directory (default: config out_dir)");
  verify_cmd->add_option("--workers", workers, "concurrent cells")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfigError;
  }

  try {
    if (run_cmd->parsed()) {
      const shopt::ExperimentConfig cfg = load_config(config_path);
      const std::string dir = out_dir.empty() ? cfg.out_dir : out_dir;
      for (const auto& w : cfg.warnings) std::cerr << "warning: " << w << "\n";
      const auto ids = shopt::run_experiment(cfg, dir, workers);
      std::cout << "wrote " << ids.size() << " cells to " << dir << "\n";
      return kOk;
    }
    if (compare_cmd->parsed()) {
      const shopt::CompareSummary summary = shopt::compare(in_dir, eps);
      std::cout << summary.table;
      return kOk;
    }
    if (verify_cmd->parsed()) {
      const shopt::ExperimentConfig cfg = load_config(config_path);
      if (!cfg.diagnostics) {
        std::cout << "diagnostics disabled in config; nothing to verify\n";
        return kOk;
      }
      const std::string dir = out_dir.empty() ? cfg.out_dir : out_dir;
      for (const auto& w : cfg.warnings) std::cerr << "warning: " << w << "\n";
      const shopt::VerifyOutcome outcome = shopt::verify(cfg, dir, workers);
      std::cout << outcome.bundle.dump(2) << "\n";
      if (outcome.violations > 0) {
        std::cerr << outcome.violations << " check violation(s)\n";
        return kViolations;
      }
      return kOk;
    }
  } catch (const shopt::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kConfigError;
}
