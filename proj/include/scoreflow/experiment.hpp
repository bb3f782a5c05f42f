#pragma once

// Experiment configuration and the run / reference / report drivers behind
// the command-line tool.

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "scoreflow/problems.hpp"
#include "scoreflow/reference.hpp"
#include "scoreflow/training.hpp"

namespace scoreflow {

constexpr const char* kVersion = "0.3.0";

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
  std::string problem = "rwpo";  // rwpo | ou_flow_matching | lq_entropy | double_well | double_moon
  std::size_t dim = 1;
  std::map<std::string, double> problem_params;  // gamma, a, beta, c
  std::string algorithm = "standard";            // standard | regularized_lq | regularized_fm | multistage
  std::size_t width = 20;
  TrainConfig train;
  std::vector<std::pair<double, double>> stages;
  double stage_l2 = 0.1;
  std::size_t runs = 1;
  std::string output_dir;
  std::size_t eval_n_z = 1000;
  bool eval_h = true;
  std::uint64_t eval_seed_offset = 1000003;
  QuadratureSettings reference;
  bool trajectories = false;
  std::size_t trajectory_particles = 200;
  bool sde = false;
  std::size_t sde_paths = 500;
};

// Parses and validates a JSON config. Unknown keys, wrong types and invalid
// values raise ConfigError with "source:line: message".
ExperimentConfig parse_config(const std::string& text, const std::string& source = "config");
ExperimentConfig load_config(const std::string& path);
// Canonical JSON with every default filled in.
std::string config_to_json(const ExperimentConfig& cfg);
// FNV-1a 64 of the canonical JSON, as 16 hex digits.
std::string config_digest(const ExperimentConfig& cfg);
std::string fnv1a_hex(const std::string& bytes);

ProblemSpec make_problem(const std::string& name, std::size_t dim,
                         const std::map<std::string, double>& params);
ProblemSpec make_problem(const ExperimentConfig& cfg);

struct RunOptions {
  std::string output_dir;  // overrides the config when non-empty
  int threads = 1;
};

// Trains cfg.runs seeds (train.seed + r) and writes cost_curve.csv,
// errors.json, manifest.json, per-run checkpoints and optional trajectory and
// SDE dumps. Returns the process exit code.
int run_experiment(const ExperimentConfig& cfg, const RunOptions& opts, std::ostream& log);

// Writes rho_T.csv, score_T.csv, f_0.csv, f_T.csv and reference.json.
void write_reference(const std::string& problem, std::size_t dim, const QuadratureSettings& settings,
                     const std::map<std::string, double>& params, const std::string& out_dir,
                     std::ostream& log);

// Table of mean +- std per metric for each errors.json (file or directory).
int report(const std::vector<std::string>& paths, std::ostream& out);

// Euler-Maruyama paths of dX = drift(t, X) dt + sqrt(2 gamma) dW, for visual
// comparison only. Returns [n_steps + 1] snapshots of [n x d].
std::vector<Eigen::MatrixXd> euler_maruyama(
    const std::function<Eigen::VectorXd(double t, const Eigen::VectorXd& x)>& drift, double gamma,
    const Eigen::MatrixXd& x0, double t0, double dt, std::size_t n_steps, std::mt19937_64& rng);

// Output directory: explicit value, else $SCOREFLOW_OUTPUT_DIR, else "out".
std::string resolve_output_dir(const std::string& explicit_dir, const std::string& config_dir);

}  // namespace scoreflow
