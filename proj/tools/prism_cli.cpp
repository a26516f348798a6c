#include "prism/harness.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

namespace {

constexpr int kContractViolation = 1;
constexpr int kVerificationFailure = 2;

prism::ExperimentConfig config_from(const std::string& path) {
  return path.empty() ? prism::standard_config() : prism::load_config(path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Per-expert gradient-subspace protection for federated MoE-LoRA continual learning"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  std::string run_config;
  std::string run_out = "results";
  auto* run = app.add_subcommand("run", "Run one experiment and write its reports");
  run->add_option("config", run_config, "INI config file")->required()->check(CLI::ExistingFile);
  run->add_option("-o,--out", run_out, "Output directory");

  std::string verify_out;
  std::uint64_t verify_seed = 0;
  auto* verify = app.add_subcommand("verify", "Run the oracle checks");
  verify->add_option("-o,--out", verify_out, "Write the pass/fail table to this CSV");
  verify->add_option("--seed", verify_seed, "Seed for the randomized checks");

  std::string diag_config;
  std::string diag_out = "results";
  auto* diagnose = app.add_subcommand("diagnose", "Measure the interference landscape and budget only");
  diagnose->add_option("config", diag_config, "INI config file")->required()->check(CLI::ExistingFile);
  diagnose->add_option("-o,--out", diag_out, "Output directory for gamma.csv");

  std::string sweep_config;
  std::string sweep_out = "sweep";
  std::string axis;
  std::vector<std::string> values;
  std::vector<std::uint64_t> seeds;
  auto* sweep = app.add_subcommand("sweep", "Repeat a run over values of one parameter");
  sweep->add_option("config", sweep_config, "INI config file")->required()->check(CLI::ExistingFile);
  sweep->add_option("--axis", axis, "Parameter to vary")
      ->required()
      ->check(CLI::IsMember({"beta", "n_clients", "s_0", "k_bar", "opposition"}));
  sweep->add_option("--values", values, "Comma-separated values")->required()->delimiter(',');
  sweep->add_option("--seeds", seeds, "Comma-separated seeds (default: the config seed)")->delimiter(',');
  sweep->add_option("-o,--out", sweep_out, "Output directory");

  std::string scenario = "standard";
  auto* defaults = app.add_subcommand("defaults", "Print a built-in scenario as an INI config");
  defaults->add_option("scenario", scenario, "Scenario name")->check(CLI::IsMember({"standard", "long", "overlap"}));

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);

  try {
    if (*defaults) {
      std::cout << prism::format_config(prism::scenario_config(scenario));
    } else if (*run) {
      const auto report = prism::run_experiment(config_from(run_config));
      prism::write_report(report, run_out);
      std::cout << "AA " << report.transfer.aa;
      if (report.transfer.bwt) std::cout << "  BWT " << *report.transfer.bwt;
      if (report.transfer.fwt) std::cout << "  FWT " << *report.transfer.fwt;
      std::cout << "\nreports written to " << run_out << '\n';
    } else if (*verify) {
      const auto rows = prism::run_verification(verify_seed);
      bool ok = true;
      for (const auto& r : rows) {
        std::cout << (r.pass ? "PASS  " : "FAIL  ") << r.name << "  value=" << r.value
                  << "  threshold=" << r.threshold << '\n';
        ok = ok && r.pass;
      }
      if (!verify_out.empty()) prism::write_verification_csv(verify_out, rows);
      if (!ok) return kVerificationFailure;
    } else if (*diagnose) {
      const auto config = config_from(diag_config);
      const auto landscape = prism::diagnose(config);
      const auto budget = prism::waterfill_budget(landscape.gamma, config.k_bar, config.model.dim);
      std::vector<prism::Index> layers = config.model.adapted_layers;
      std::sort(layers.begin(), layers.end());
      std::filesystem::create_directories(diag_out);
      prism::write_gamma_csv(std::filesystem::path(diag_out) / "gamma.csv", layers, landscape, budget);
      for (std::size_t l = 0; l < layers.size(); ++l) {
        std::cout << "layer " << layers[l] << "  gamma " << landscape.gamma[l] << "  k " << budget.k[l] << '\n';
      }
    } else if (*sweep) {
      auto config = config_from(sweep_config);
      if (seeds.empty()) seeds.push_back(config.seed);
      const auto points = prism::sweep(config, axis, values, seeds, sweep_out);
      for (const auto& p : points) {
        std::cout << axis << '=' << p.value << " seed " << p.seed << "  AA " << p.transfer.aa << '\n';
      }
    }
  } catch (const prism::ContractViolation& e) {
    spdlog::error("contract violation: {}", e.what());
    return kContractViolation;
  }
  return 0;
}
