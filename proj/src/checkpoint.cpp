#include "scoreflow/checkpoint.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace scoreflow {

using nlohmann::json;

namespace {

json tensor_json(const Tensor& t) { return json{{"shape", t.shape()}, {"data", t.values()}}; }

Tensor tensor_from(const json& j) {
  Shape shape = j.at("shape").get<Shape>();
  std::vector<double> data = j.at("data").get<std::vector<double>>();
  if (shape_size(shape) != data.size()) throw std::runtime_error("checkpoint: tensor size mismatch");
  return Tensor(std::move(shape), std::move(data));
}

json tensors_json(const std::vector<Tensor>& ts) {
  json a = json::array();
  for (const Tensor& t : ts) a.push_back(tensor_json(t));
  return a;
}

std::vector<Tensor> tensors_from(const json& j) {
  std::vector<Tensor> out;
  for (const json& e : j) out.push_back(tensor_from(e));
  return out;
}

}  // namespace

Checkpoint make_checkpoint(const std::string& problem, const VelocityField& field,
                           const RunReport& report) {
  Checkpoint ck;
  ck.problem = problem;
  ck.field_kind = field.kind();
  ck.dim = field.dim();
  if (const auto* mlp = dynamic_cast<const MlpField*>(&field)) ck.width = mlp->width();
  if (const auto* q = dynamic_cast<const QuadraticPsiField*>(&field)) {
    ck.n_steps = q->n_steps();
    ck.dt = q->dt();
    ck.t0 = q->t0();
    ck.ou_rate = q->ou_rate();
  }
  ck.stage_t0 = report.t0;
  ck.stage_t_end = report.t_end;
  ck.params = field.params();
  ck.adam = report.adam;
  std::ostringstream rs;
  rs << report.rng;
  ck.rng_state = rs.str();
  return ck;
}

std::string checkpoint_to_json(const Checkpoint& ck) {
  json j;
  j["version"] = ck.version;
  j["problem"] = ck.problem;
  j["field"] = {{"kind", ck.field_kind}, {"dim", ck.dim},     {"width", ck.width},
                {"n_steps", ck.n_steps}, {"dt", ck.dt},       {"t0", ck.t0},
                {"ou_rate", ck.ou_rate}};
  j["stage"] = {ck.stage_t0, ck.stage_t_end};
  j["params"] = tensors_json(ck.params);
  j["adam"] = {{"step", ck.adam.step}, {"beta1", ck.adam.beta1}, {"beta2", ck.adam.beta2},
               {"eps", ck.adam.eps},   {"m", tensors_json(ck.adam.m)}, {"v", tensors_json(ck.adam.v)}};
  j["rng"] = ck.rng_state;
  return j.dump(1);
}

Checkpoint checkpoint_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    Checkpoint ck;
    ck.version = j.at("version").get<int>();
    if (ck.version != kCheckpointVersion) {
      throw std::runtime_error("checkpoint: unsupported version " + std::to_string(ck.version));
    }
    ck.problem = j.at("problem").get<std::string>();
    const json& f = j.at("field");
    ck.field_kind = f.at("kind").get<std::string>();
    ck.dim = f.at("dim").get<std::size_t>();
    ck.width = f.at("width").get<std::size_t>();
    ck.n_steps = f.at("n_steps").get<std::size_t>();
    ck.dt = f.at("dt").get<double>();
    ck.t0 = f.at("t0").get<double>();
    ck.ou_rate = f.at("ou_rate").get<double>();
    ck.stage_t0 = j.at("stage").at(0).get<double>();
    ck.stage_t_end = j.at("stage").at(1).get<double>();
    ck.params = tensors_from(j.at("params"));
    const json& a = j.at("adam");
    ck.adam.step = a.at("step").get<std::size_t>();
    ck.adam.beta1 = a.at("beta1").get<double>();
    ck.adam.beta2 = a.at("beta2").get<double>();
    ck.adam.eps = a.at("eps").get<double>();
    ck.adam.m = tensors_from(a.at("m"));
    ck.adam.v = tensors_from(a.at("v"));
    ck.rng_state = j.at("rng").get<std::string>();
    return ck;
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: malformed file: ") + e.what());
  }
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot write " + path);
  os << checkpoint_to_json(ck) << '\n';
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot read " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return checkpoint_from_json(ss.str());
}

std::unique_ptr<VelocityField> field_from_checkpoint(const Checkpoint& ck) {
  std::unique_ptr<VelocityField> field;
  if (ck.field_kind == "mlp") {
    field = std::make_unique<MlpField>(ck.dim, ck.width);
  } else if (ck.field_kind == "quadratic") {
    field = std::make_unique<QuadraticPsiField>(ck.dim, ck.n_steps, ck.dt, ck.t0, ck.ou_rate);
  } else {
    throw std::runtime_error("checkpoint: unknown field kind '" + ck.field_kind + "'");
  }
  std::vector<Tensor>& p = field->params();
  if (p.size() != ck.params.size()) throw std::runtime_error("checkpoint: parameter count mismatch");
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i].shape() != ck.params[i].shape()) {
      throw std::runtime_error("checkpoint: shape mismatch for parameter " + std::to_string(i));
    }
    p[i] = ck.params[i];
  }
  return field;
}

std::mt19937_64 rng_from_checkpoint(const Checkpoint& ck) {
  std::mt19937_64 rng;
  std::istringstream is(ck.rng_state);
  is >> rng;
  if (!is) throw std::runtime_error("checkpoint: bad rng state");
  return rng;
}

}  // namespace scoreflow
