#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "scoreflow/checks.hpp"
#include "scoreflow/experiment.hpp"
#include "scoreflow/kernels.hpp"

using namespace scoreflow;

namespace {

int select_kernels(const std::string& name) {
  if (name.empty()) return 0;
  if (!kernels::select(name)) {
    std::cerr << "error: kernel variant '" << name << "' is not available on this build or CPU\n";
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Score-based normalizing flows for second-order mean-field control"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  std::string kernel_name;
  app.add_option("--kernels", kernel_name, "Force a kernel variant (scalar or avx2)");

  // run
  auto* run = app.add_subcommand("run", "Train and evaluate an experiment config");
  std::string config_path, out_dir;
  int threads = 1;
  run->add_option("config", config_path, "Experiment config (JSON)")->required();
  run->add_option("--out", out_dir, "Output directory (overrides the config and SCOREFLOW_OUTPUT_DIR)");
  run->add_option("--threads", threads, "Worker pool size")->check(CLI::PositiveNumber);

  // check
  auto* check = app.add_subcommand("check", "Run an invariant suite");
  std::string suite;
  std::vector<double> dts;
  std::size_t instances = 100, n_z = 10000;
  std::uint64_t seed = 1;
  check->add_option("suite", suite, "derivatives | info-equality | score-oracle | all")
      ->required()
      ->check(CLI::IsMember({"derivatives", "info-equality", "score-oracle", "all"}));
  check->add_option("--dt", dts, "Step sizes for info-equality (repeatable)");
  check->add_option("--instances", instances, "Random instances for derivatives");
  check->add_option("--n-z", n_z, "Particles for info-equality");
  check->add_option("--seed", seed, "Random seed");

  // reference
  auto* ref = app.add_subcommand("reference", "Write the quadrature reference for a problem");
  std::string ref_problem = "double_well", ref_out;
  std::size_t ref_dim = 1;
  QuadratureSettings qs;
  double ref_gamma = 0.1, ref_c = 0.25;
  ref->add_option("--problem", ref_problem, "Problem name")->capture_default_str();
  ref->add_option("--dim", ref_dim, "Dimension (1 or 2)")->capture_default_str();
  ref->add_option("--step", qs.step, "Grid step (default 0.01 in 1d, 0.05 in 2d)");
  ref->add_option("--inner", qs.inner, "Half-width of the integration box")->capture_default_str();
  ref->add_option("--outer", qs.outer, "Half-width of the evaluation box")->capture_default_str();
  ref->add_option("--gamma", ref_gamma, "Diffusion coefficient")->capture_default_str();
  ref->add_option("--c", ref_c, "Double-well depth")->capture_default_str();
  ref->add_option("--out", ref_out, "Output directory");

  // report
  auto* rep = app.add_subcommand("report", "Tabulate errors.json files (or run directories)");
  std::vector<std::string> paths;
  rep->add_option("paths", paths, "errors.json files or directories")->required();

  CLI11_PARSE(app, argc, argv);
  if (select_kernels(kernel_name) != 0) return 1;

  try {
    if (*run) {
      const ExperimentConfig cfg = load_config(config_path);
      RunOptions opts;
      opts.output_dir = out_dir;
      opts.threads = threads;
      return run_experiment(cfg, opts, std::cout);
    }
    if (*check) {
      std::vector<CheckResult> results;
      if (suite == "derivatives" || suite == "all") {
        const auto r = check_derivatives(seed, instances);
        results.insert(results.end(), r.begin(), r.end());
      }
      if (suite == "info-equality" || suite == "all") {
        if (dts.empty()) dts = {0.01, 0.005};
        const auto r = check_info_equality(dts, n_z, seed);
        results.insert(results.end(), r.begin(), r.end());
      }
      if (suite == "score-oracle" || suite == "all") {
        const auto r = check_score_oracle(seed);
        results.insert(results.end(), r.begin(), r.end());
      }
      return print_checks(results, std::cout);
    }
    if (*ref) {
      std::map<std::string, double> params{{"gamma", ref_gamma}, {"c", ref_c}};
      if (qs.step == 0.0) qs.step = QuadratureSettings::default_step(ref_dim);
      write_reference(ref_problem, ref_dim, qs, params, resolve_output_dir(ref_out, ""), std::cout);
      return 0;
    }
    if (*rep) return report(paths, std::cout);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
