#include "scoreflow/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <functional>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "scoreflow/checkpoint.hpp"
#include "scoreflow/csv.hpp"
#include "scoreflow/kernels.hpp"
#include "scoreflow/metrics.hpp"

namespace scoreflow {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

namespace {

struct ConfigReader {
  const std::string& text;
  const std::string& source;

  std::size_t line_of(const std::string& key) const {
    const std::size_t pos = text.find("\"" + key + "\"");
    if (pos == std::string::npos) return 1;
    return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<long>(pos), '\n'));
  }

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    throw ConfigError(source + ":" + std::to_string(line_of(key)) + ": " + msg);
  }

  void only(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) const {
    if (!obj.is_object()) fail(where, "'" + where + "' must be an object");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
      bool ok = false;
      for (const char* a : allowed) ok = ok || it.key() == a;
      if (!ok) fail(it.key(), "unknown key '" + it.key() + "' in " + where);
    }
  }

  double number(const json& obj, const char* key, double def) const {
    if (!obj.contains(key)) return def;
    if (!obj.at(key).is_number()) fail(key, std::string("'") + key + "' must be a number");
    return obj.at(key).get<double>();
  }

  std::size_t count(const json& obj, const char* key, std::size_t def) const {
    if (!obj.contains(key)) return def;
    const json& v = obj.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0) {
      fail(key, std::string("'") + key + "' must be a non-negative integer");
    }
    return v.get<std::size_t>();
  }

  bool flag(const json& obj, const char* key, bool def) const {
    if (!obj.contains(key)) return def;
    if (!obj.at(key).is_boolean()) fail(key, std::string("'") + key + "' must be true or false");
    return obj.at(key).get<bool>();
  }

  std::string str(const json& obj, const char* key, const std::string& def) const {
    if (!obj.contains(key)) return def;
    if (!obj.at(key).is_string()) fail(key, std::string("'") + key + "' must be a string");
    return obj.at(key).get<std::string>();
  }
};

double problem_horizon(const std::string& problem) { return problem == "double_moon" ? 0.4 : 1.0; }

std::size_t default_width(const std::string& problem, std::size_t dim) {
  if (problem == "double_moon") return 200;
  if (problem == "double_well") return dim == 1 ? 50 : (dim == 2 ? 100 : 200);
  return dim == 1 ? 20 : (dim == 2 ? 50 : 200);
}

std::size_t default_iters(const std::string& problem, std::size_t dim) {
  if (problem == "double_moon" || problem == "double_well") return 500;
  return dim <= 2 ? 200 : 300;
}

const std::map<std::string, std::set<std::string>>& problem_param_names() {
  static const std::map<std::string, std::set<std::string>> names = {
      {"rwpo", {"gamma"}},
      {"ou_flow_matching", {"gamma", "a"}},
      {"lq_entropy", {"beta"}},
      {"double_well", {"gamma", "c"}},
      {"double_moon", {"gamma"}},
  };
  return names;
}

}  // namespace

ExperimentConfig parse_config(const std::string& text, const std::string& source) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    const std::size_t pos = std::min(e.byte, text.size());
    const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<long>(pos), '\n');
    throw ConfigError(source + ":" + std::to_string(line) + ": JSON syntax error: " + e.what());
  }
  const ConfigReader r{text, source};
  r.only(j, "config",
         {"problem", "dim", "params", "algorithm", "width", "train", "stages", "stage_l2", "runs",
          "output_dir", "eval", "reference", "output"});

  ExperimentConfig c;
  c.problem = r.str(j, "problem", c.problem);
  const auto& names = problem_param_names();
  if (!names.count(c.problem)) r.fail("problem", "unknown problem '" + c.problem + "'");
  c.dim = r.count(j, "dim", 1);
  if (c.dim == 0) r.fail("dim", "'dim' must be >= 1");
  if (c.problem == "double_moon" && c.dim != 2) r.fail("dim", "double_moon is two-dimensional");
  if (j.contains("params")) {
    const json& p = j.at("params");
    if (!p.is_object()) r.fail("params", "'params' must be an object");
    for (auto it = p.begin(); it != p.end(); ++it) {
      if (!names.at(c.problem).count(it.key())) {
        r.fail(it.key(), "unknown parameter '" + it.key() + "' for problem " + c.problem);
      }
      c.problem_params[it.key()] = r.number(p, it.key().c_str(), 0.0);
    }
  }
  c.algorithm = r.str(j, "algorithm", c.problem == "double_moon" ? "multistage" : "standard");
  if (c.algorithm != "standard" && c.algorithm != "regularized_lq" && c.algorithm != "regularized_fm" &&
      c.algorithm != "multistage") {
    r.fail("algorithm", "unknown algorithm '" + c.algorithm + "'");
  }
  if (c.algorithm == "regularized_lq" && c.problem != "rwpo") {
    r.fail("algorithm", "regularized_lq needs the rwpo problem");
  }
  if (c.algorithm == "regularized_fm" && c.problem != "ou_flow_matching") {
    r.fail("algorithm", "regularized_fm needs the ou_flow_matching problem");
  }
  c.width = r.count(j, "width", default_width(c.problem, c.dim));
  if (c.width == 0) r.fail("width", "'width' must be >= 1");

  const json tr = j.value("train", json::object());
  r.only(tr, "train", {"dt", "n_z", "lr", "iters", "lambda", "l2_weight", "seed", "resample"});
  const double dt = r.number(tr, "dt", 0.01);
  if (!(dt > 0.0)) r.fail("dt", "'dt' must be > 0");
  c.train.n_z = r.count(tr, "n_z", c.dim <= 2 ? 1000 : 2000);
  c.train.lr = r.number(tr, "lr", 0.01);
  c.train.iters = r.count(tr, "iters", default_iters(c.problem, c.dim));
  c.train.lambda = r.number(tr, "lambda", c.algorithm.rfind("regularized", 0) == 0 ? 1e-3 : 0.0);
  c.train.l2_weight = r.number(tr, "l2_weight", 0.0);
  c.train.seed = r.count(tr, "seed", 0);
  c.train.resample = r.flag(tr, "resample", true);

  if (j.contains("stages")) {
    const json& s = j.at("stages");
    if (!s.is_array() || s.empty()) r.fail("stages", "'stages' must be a non-empty array of [t0, t1]");
    for (const json& e : s) {
      if (!e.is_array() || e.size() != 2 || !e[0].is_number() || !e[1].is_number()) {
        r.fail("stages", "each stage must be [t0, t1]");
      }
      c.stages.emplace_back(e[0].get<double>(), e[1].get<double>());
    }
  } else if (c.algorithm == "multistage") {
    c.stages = c.problem == "double_moon" ? std::vector<std::pair<double, double>>{{0.0, 0.2}, {0.2, 0.4}}
                                          : std::vector<std::pair<double, double>>{{0.0, problem_horizon(c.problem)}};
  }
  if (c.algorithm != "multistage" && !c.stages.empty()) r.fail("stages", "'stages' needs algorithm multistage");
  c.stage_l2 = r.number(j, "stage_l2", 0.1);
  const double first_len = c.stages.empty() ? problem_horizon(c.problem) : c.stages.front().second - c.stages.front().first;
  c.train.n_steps = static_cast<std::size_t>(std::llround(first_len / dt));
  if (c.train.n_steps == 0) r.fail("dt", "'dt' exceeds the horizon");
  c.runs = r.count(j, "runs", 1);
  if (c.runs == 0) r.fail("runs", "'runs' must be >= 1");
  c.output_dir = r.str(j, "output_dir", "");

  const json ev = j.value("eval", json::object());
  r.only(ev, "eval", {"n_z", "hessian", "seed_offset"});
  c.eval_n_z = r.count(ev, "n_z", c.train.n_z);
  c.eval_h = r.flag(ev, "hessian", c.dim <= 2);
  c.eval_seed_offset = r.count(ev, "seed_offset", c.eval_seed_offset);
  if (c.eval_n_z == 0) r.fail("n_z", "'eval.n_z' must be >= 1");

  const json rf = j.value("reference", json::object());
  r.only(rf, "reference", {"inner", "outer", "step"});
  c.reference.inner = r.number(rf, "inner", 6.0);
  c.reference.outer = r.number(rf, "outer", 4.0);
  c.reference.step = r.number(rf, "step", QuadratureSettings::default_step(c.dim));
  if (!(c.reference.step > 0.0) || !(c.reference.inner >= c.reference.outer) || !(c.reference.outer > 0.0)) {
    r.fail("reference", "reference needs step > 0 and inner >= outer > 0");
  }

  const json out = j.value("output", json::object());
  r.only(out, "output", {"trajectories", "trajectory_particles", "sde", "sde_paths"});
  c.trajectories = r.flag(out, "trajectories", false);
  c.trajectory_particles = r.count(out, "trajectory_particles", 200);
  c.sde = r.flag(out, "sde", c.problem == "double_moon");
  c.sde_paths = r.count(out, "sde_paths", 500);

  try {
    c.train.validate();
    for (const auto& [k, v] : make_problem(c).parameters) {
      if (names.at(c.problem).count(k)) c.problem_params.emplace(k, v);
    }
  } catch (const std::invalid_argument& e) {
    throw ConfigError(source + ":1: " + e.what());
  }
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError(path + ":0: cannot open config file");
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), path);
}

std::string config_to_json(const ExperimentConfig& c) {
  json j;
  j["problem"] = c.problem;
  j["dim"] = c.dim;
  j["params"] = c.problem_params;
  j["algorithm"] = c.algorithm;
  j["width"] = c.width;
  const double horizon = c.stages.empty() ? problem_horizon(c.problem) : c.stages.front().second - c.stages.front().first;
  j["train"] = {{"dt", horizon / static_cast<double>(c.train.n_steps)},
                {"n_z", c.train.n_z},
                {"lr", c.train.lr},
                {"iters", c.train.iters},
                {"lambda", c.train.lambda},
                {"l2_weight", c.train.l2_weight},
                {"seed", c.train.seed},
                {"resample", c.train.resample}};
  json st = json::array();
  for (const auto& [a, b] : c.stages) st.push_back({a, b});
  if (!c.stages.empty()) j["stages"] = st;
  j["stage_l2"] = c.stage_l2;
  j["runs"] = c.runs;
  j["output_dir"] = c.output_dir;
  j["eval"] = {{"n_z", c.eval_n_z}, {"hessian", c.eval_h}, {"seed_offset", c.eval_seed_offset}};
  j["reference"] = {{"inner", c.reference.inner}, {"outer", c.reference.outer}, {"step", c.reference.step}};
  j["output"] = {{"trajectories", c.trajectories},
                 {"trajectory_particles", c.trajectory_particles},
                 {"sde", c.sde},
                 {"sde_paths", c.sde_paths}};
  return j.dump(1);
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string config_digest(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  c.output_dir.clear();  // where results go does not change them
  return fnv1a_hex(config_to_json(c));
}

ProblemSpec make_problem(const std::string& name, std::size_t dim, const std::map<std::string, double>& p) {
  auto get = [&p](const char* k, double def) {
    const auto it = p.find(k);
    return it == p.end() ? def : it->second;
  };
  if (name == "rwpo") return make_rwpo(dim, get("gamma", 1.0));
  if (name == "ou_flow_matching") return make_ou_flow_matching(dim, get("gamma", 1.0), get("a", 1.0));
  if (name == "lq_entropy") return make_lq_entropy(dim, get("beta", 0.1));
  if (name == "double_well") return make_double_well(dim, get("gamma", 0.1), get("c", 0.25));
  if (name == "double_moon") {
    if (dim != 2) throw std::invalid_argument("double_moon: dimension must be 2");
    return make_double_moon(get("gamma", 1.0));
  }
  throw std::invalid_argument("unknown problem '" + name + "'");
}

ProblemSpec make_problem(const ExperimentConfig& cfg) { return make_problem(cfg.problem, cfg.dim, cfg.problem_params); }

std::string resolve_output_dir(const std::string& explicit_dir, const std::string& config_dir) {
  if (!explicit_dir.empty()) return explicit_dir;
  if (!config_dir.empty()) return config_dir;
  if (const char* env = std::getenv("SCOREFLOW_OUTPUT_DIR"); env && *env) return env;
  return "out";
}

// ---------------------------------------------------------------- SDE

std::vector<Eigen::MatrixXd> euler_maruyama(
    const std::function<Eigen::VectorXd(double t, const Eigen::VectorXd& x)>& drift, double gamma,
    const Eigen::MatrixXd& x0, double t0, double dt, std::size_t n_steps, std::mt19937_64& rng) {
  if (!(dt > 0.0) || !(gamma >= 0.0)) throw std::invalid_argument("euler_maruyama: need dt > 0, gamma >= 0");
  std::normal_distribution<double> normal(0.0, 1.0);
  const double noise = std::sqrt(2.0 * gamma * dt);
  std::vector<Eigen::MatrixXd> out{x0};
  Eigen::MatrixXd x = x0;
  for (std::size_t j = 0; j < n_steps; ++j) {
    const double t = t0 + static_cast<double>(j) * dt;
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const Eigen::VectorXd b = drift(t, x.row(r).transpose());
      for (Eigen::Index i = 0; i < x.cols(); ++i) x(r, i) += dt * b[i] + noise * normal(rng);
    }
    out.push_back(x);
  }
  return out;
}

// ---------------------------------------------------------------- run

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

json report_json(const ErrorReport& rep) {
  json j;
  j["metrics"] = rep.metrics;
  json info = json::array();
  for (const InfoResidual& r : rep.info) info.push_back({{"t", r.t}, {"value", r.value}, {"stderr", r.stderr_}});
  j["info_residual"] = info;
  j["outside_grid"] = rep.outside_grid;
  j["warnings"] = rep.warnings;
  return j;
}

// Drift of the comparison SDE: the problem drift when there is one,
// otherwise the optimal control v* = f* + gamma s* of the Gaussian solution.
std::function<Eigen::VectorXd(double, const Eigen::VectorXd&)> sde_drift(const ProblemSpec& spec) {
  if (spec.drift) return spec.drift->point;
  if (!spec.analytic) return {};
  const AnalyticSolution sol = *spec.analytic;
  const double gamma = spec.gamma;
  return [sol, gamma](double t, const Eigen::VectorXd& x) {
    Tensor z(Shape{1, static_cast<std::size_t>(x.size())}, std::vector<double>(x.data(), x.data() + x.size()));
    const Tensor f = sol.velocity(t, z);
    const Tensor s = sol.score(t, z);
    Eigen::VectorXd v(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) v[i] = f[static_cast<std::size_t>(i)] + gamma * s[static_cast<std::size_t>(i)];
    return v;
  };
}

}  // namespace

int run_experiment(const ExperimentConfig& cfg, const RunOptions& opts, std::ostream& log) {
  const auto wall0 = std::chrono::steady_clock::now();
  const ProblemSpec spec = make_problem(cfg);
  const fs::path out = resolve_output_dir(opts.output_dir, cfg.output_dir);
  fs::create_directories(out);
  if (opts.threads != 1) {
    log << "note: --threads " << opts.threads << " accepted; execution is single-threaded\n";
  }

  std::optional<QuadratureGrid> grid;
  std::optional<TerminalReference> terminal;
  std::optional<GridFunction> initial_velocity;
  if (cfg.problem == "double_well" && cfg.dim <= 2) {
    grid = make_quadrature_grid(spec, cfg.reference);
    terminal = reference_terminal(spec, *grid);
    initial_velocity = reference_initial_velocity(spec, *grid);
  }

  std::ostringstream curve;
  curve << "run,stage,iter,loss_cost,loss_hjb,loss_total\n";
  std::vector<ErrorReport> reports;
  json runs = json::array();
  std::vector<std::string> files;

  for (std::size_t r = 0; r < cfg.runs; ++r) {
    TrainConfig tc = cfg.train;
    tc.seed = cfg.train.seed + r;
    EvalOptions eo;
    eo.n_z = cfg.eval_n_z;
    eo.seed = tc.seed + cfg.eval_seed_offset;
    eo.n_steps = tc.n_steps;
    eo.propagate_h = cfg.eval_h;
    eo.terminal = terminal ? &*terminal : nullptr;
    eo.initial_velocity = initial_velocity ? &*initial_velocity : nullptr;

    std::unique_ptr<VelocityField> field;
    std::vector<RunReport> stages;
    ErrorReport rep;
    try {
      if (cfg.algorithm == "regularized_lq" || cfg.algorithm == "regularized_fm") {
        const double rate = spec.drift && spec.drift->linear_rate ? *spec.drift->linear_rate : 0.0;
        auto q = std::make_unique<QuadraticPsiField>(cfg.dim, tc.n_steps, step_size(spec.t0, spec.t_end, tc.n_steps),
                                                     spec.t0, rate);
        stages.push_back(train_regularized(spec, *q, tc,
                                           cfg.algorithm == "regularized_lq" ? Algorithm::RegularizedLq
                                                                             : Algorithm::RegularizedFm));
        field = std::move(q);
        rep = evaluate_field(spec, *field, eo);
      } else if (cfg.algorithm == "multistage") {
        auto m = std::make_unique<MlpField>(cfg.dim, cfg.width, tc.seed);
        stages = train_multistage(spec, *m, tc, cfg.stages, cfg.stage_l2);
        field = std::move(m);
        // the final parameters are only meaningful on the last stage
        const FlowBatch* start = stages.size() > 1 ? &stages[stages.size() - 2].terminal : nullptr;
        eo.interval = cfg.stages.back();
        eo.init = start;
        if (!start) eo.interval.reset();
        rep = evaluate_field(spec, *field, eo);
      } else {
        auto m = std::make_unique<MlpField>(cfg.dim, cfg.width, tc.seed);
        stages.push_back(train(spec, *m, tc));
        field = std::move(m);
        rep = evaluate_field(spec, *field, eo);
      }
    } catch (const TrainingError& e) {
      log << "error: run " << r << ": " << e.what() << '\n';
      return 3;
    }

    for (std::size_t s = 0; s < stages.size(); ++s) {
      for (const CurvePoint& p : stages[s].curve) {
        curve << r << ',' << s + 1 << ',' << p.iter << ',' << fmt_double(p.loss_cost) << ','
              << fmt_double(p.loss_hjb) << ',' << fmt_double(p.loss_total) << '\n';
      }
      for (const std::string& w : stages[s].warnings) rep.warnings.push_back(w);
    }
    {
      const std::string name = "checkpoint_run" + std::to_string(r) + ".json";
      save_checkpoint((out / name).string(), make_checkpoint(spec.name, *field, stages.back()));
      files.push_back(name);
    }

    if (r == 0 && cfg.trajectories) {
      std::mt19937_64 rng(eo.seed);
      const FlowBatch init = eo.init ? *eo.init : sample_initial_batch(spec, std::min(cfg.trajectory_particles, eo.n_z), rng, false);
      RolloutOptions ro;
      ro.n_steps = eo.n_steps;
      ro.t0 = eo.interval ? eo.interval->first : spec.t0;
      ro.dt = step_size(ro.t0, eo.interval ? eo.interval->second : spec.t_end, eo.n_steps);
      const auto bound = field->bind(nullptr);
      std::ostringstream tr;
      write_trajectory_header(tr, cfg.dim);
      write_trajectory_rows(tr, rollout(init, *bound, ro), r, cfg.trajectory_particles);
      write_text(out / "trajectories.csv", tr.str());
      files.push_back("trajectories.csv");
    }

    log << "run " << r << " (seed " << tc.seed << "):";
    for (const auto& [k, v] : rep.metrics) log << ' ' << k << '=' << fmt_double(v);
    log << '\n';
    json jr = report_json(rep);
    jr["run"] = r;
    jr["seed"] = tc.seed;
    runs.push_back(jr);
    reports.push_back(std::move(rep));
  }

  if (cfg.sde) {
    if (const auto drift = sde_drift(spec)) {
      std::mt19937_64 rng(cfg.train.seed + 7);
      const Eigen::MatrixXd x0 = spec.init.sample(cfg.sde_paths, rng);
      const std::size_t n = static_cast<std::size_t>(std::llround((spec.t_end - spec.t0) / 0.01));
      const auto paths = euler_maruyama(drift, spec.gamma, x0, spec.t0, (spec.t_end - spec.t0) / static_cast<double>(n), n, rng);
      std::ostringstream os;
      os << "# visual comparison only\npath,j,t";
      for (std::size_t i = 1; i <= cfg.dim; ++i) os << ",x_" << i;
      os << '\n';
      for (std::size_t j = 0; j < paths.size(); ++j) {
        const double t = spec.t0 + static_cast<double>(j) * (spec.t_end - spec.t0) / static_cast<double>(n);
        for (Eigen::Index p = 0; p < paths[j].rows(); ++p) {
          os << p << ',' << j << ',' << fmt_double(t);
          for (Eigen::Index i = 0; i < paths[j].cols(); ++i) os << ',' << fmt_double(paths[j](p, i));
          os << '\n';
        }
      }
      write_text(out / "sde_paths.csv", os.str());
      files.push_back("sde_paths.csv");
    }
  }

  write_text(out / "cost_curve.csv", curve.str());
  files.push_back("cost_curve.csv");

  json errors;
  errors["problem"] = cfg.problem;
  errors["dim"] = cfg.dim;
  errors["algorithm"] = cfg.algorithm;
  errors["config_digest"] = config_digest(cfg);
  errors["runs"] = runs;
  json mean = json::object(), std = json::object();
  for (const auto& [k, a] : aggregate_reports(reports)) {
    mean[k] = a.mean;
    std[k] = a.std;
  }
  errors["mean"] = mean;
  errors["std"] = std;
  write_text(out / "errors.json", errors.dump(1) + "\n");
  files.push_back("errors.json");

  json manifest;
  manifest["version"] = kVersion;
  manifest["config_digest"] = config_digest(cfg);
  manifest["seed"] = cfg.train.seed;
  manifest["runs"] = cfg.runs;
  manifest["threads"] = opts.threads;
  manifest["kernels"] = std::string(kernels::active().name);
  manifest["files"] = files;
  manifest["config"] = json::parse(config_to_json(cfg));
  manifest["wall_time_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
  write_text(out / "manifest.json", manifest.dump(1) + "\n");
  log << "wrote " << out.string() << '\n';
  return 0;
}

// ---------------------------------------------------------------- reference

namespace {

void write_grid_csv(const fs::path& path, const GridFunction& g, const std::string& name) {
  std::ostringstream os;
  for (std::size_t i = 1; i <= g.dim(); ++i) os << "x_" << i << ',';
  if (g.comps() == 1) {
    os << name << '\n';
  } else {
    for (std::size_t c = 1; c <= g.comps(); ++c) os << name << '_' << c << (c == g.comps() ? '\n' : ',');
  }
  for (std::size_t p = 0; p < g.points(); ++p) {
    const Eigen::VectorXd x = g.node(p);
    for (Eigen::Index i = 0; i < x.size(); ++i) os << fmt_double(x[i]) << ',';
    for (std::size_t c = 0; c < g.comps(); ++c) os << fmt_double(g.at(p, c)) << (c + 1 == g.comps() ? '\n' : ',');
  }
  write_text(path, os.str());
}

}  // namespace

void write_reference(const std::string& problem, std::size_t dim, const QuadratureSettings& settings,
                     const std::map<std::string, double>& params, const std::string& out_dir, std::ostream& log) {
  if (problem != "double_well") {
    throw std::invalid_argument("reference: only double_well needs a quadrature reference; got '" + problem + "'");
  }
  if (dim != 1 && dim != 2) {
    throw std::invalid_argument("reference: d = " + std::to_string(dim) + " is not supported (d must be 1 or 2)");
  }
  const ProblemSpec spec = make_problem(problem, dim, params);
  const QuadratureGrid grid = make_quadrature_grid(spec, settings);
  const TerminalReference term = reference_terminal(spec, grid);
  const GridFunction f0 = reference_initial_velocity(spec, grid);

  const fs::path out = out_dir;
  fs::create_directories(out);
  write_grid_csv(out / "rho_T.csv", term.rho, "rho");
  write_grid_csv(out / "score_T.csv", term.score, "score");
  write_grid_csv(out / "f_0.csv", f0, "f");
  write_grid_csv(out / "f_T.csv", term.f, "f");

  // step-convergence: compare against a grid with twice the step
  QuadratureSettings coarse = grid.settings;
  coarse.step *= 2.0;
  const QuadratureGrid cgrid = make_quadrature_grid(spec, coarse);
  const TerminalReference cterm = reference_terminal(spec, cgrid);
  double d_rho = 0.0, d_score = 0.0;
  for (std::size_t p = 0; p < cterm.rho.points(); ++p) {
    const Eigen::VectorXd x = cterm.rho.node(p);
    const double fine = term.rho(x)[0];
    d_rho = std::max(d_rho, std::fabs(fine - cterm.rho.at(p, 0)));
    if (fine > 1e-3) d_score = std::max(d_score, (term.score(x) - cterm.score(x)).norm());
  }
  QuadratureSettings half = grid.settings;
  half.step *= 0.5;
  const Eigen::VectorXd origin = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim));
  const double h0 = kernel_h(origin, spec, grid);
  const QuadratureGrid hgrid = make_quadrature_grid(spec, half);
  const double h0_half = kernel_h(origin, spec, hgrid);

  json j;
  j["problem"] = problem;
  j["dim"] = dim;
  j["gamma"] = spec.gamma;
  j["t_end"] = spec.t_end;
  j["settings"] = {{"inner", grid.settings.inner}, {"outer", grid.settings.outer}, {"step", grid.settings.step},
                   {"rule", dim == 1 ? "trapezoid" : "box"}};
  j["grid_points"] = term.rho.points();
  j["rho_mass"] = term.mass;
  j["convergence"] = {{"coarse_step", coarse.step},
                      {"max_abs_diff_rho", d_rho},
                      {"max_abs_diff_score_where_rho_gt_1e-3", d_score},
                      {"h0", h0},
                      {"h0_half_step", h0_half},
                      {"h0_diff", std::fabs(h0 - h0_half)}};
  write_text(out / "reference.json", j.dump(1) + "\n");
  log << "reference: " << term.rho.points() << " grid points, mass " << fmt_double(term.mass) << ", wrote "
      << out.string() << '\n';
}

// ---------------------------------------------------------------- report

int report(const std::vector<std::string>& paths, std::ostream& out) {
  struct Row {
    std::string label;
    json j;
  };
  std::vector<Row> rows;
  std::set<std::string> metrics;
  for (const std::string& p : paths) {
    fs::path f = p;
    if (fs::is_directory(f)) f /= "errors.json";
    std::ifstream is(f);
    if (!is) {
      out << "error: cannot read " << f.string() << '\n';
      return 1;
    }
    json j;
    try {
      is >> j;
    } catch (const json::exception& e) {
      out << "error: " << f.string() << ": " << e.what() << '\n';
      return 1;
    }
    for (auto it = j.at("mean").begin(); it != j.at("mean").end(); ++it) metrics.insert(it.key());
    std::ostringstream label;
    label << j.value("problem", "?") << " d=" << j.value("dim", 0) << " " << j.value("algorithm", "") << " (R="
          << j.at("runs").size() << ")";
    rows.push_back({label.str(), j});
  }
  out << "| experiment |";
  for (const std::string& m : metrics) out << ' ' << m << " |";
  out << "\n|---|";
  for (std::size_t i = 0; i < metrics.size(); ++i) out << "---|";
  out << '\n';
  char buf[64];
  for (const Row& r : rows) {
    out << "| " << r.label << " |";
    for (const std::string& m : metrics) {
      if (r.j.at("mean").contains(m)) {
        std::snprintf(buf, sizeof(buf), " %.3e ± %.1e |", r.j.at("mean").at(m).get<double>(),
                      r.j.at("std").at(m).get<double>());
        out << buf;
      } else {
        out << " - |";
      }
    }
    out << '\n';
  }
  return 0;
}

}  // namespace scoreflow
