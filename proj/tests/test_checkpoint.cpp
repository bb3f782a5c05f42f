#include <cstdio>
#include <filesystem>

#include "doctest.h"
#include "scoreflow/checkpoint.hpp"
#include "scoreflow/problems.hpp"

using namespace scoreflow;

namespace {

RunReport short_run(const ProblemSpec& p, VelocityField& f, Algorithm alg) {
  TrainConfig c;
  c.iters = 2;
  c.n_z = 20;
  c.seed = 7;
  if (auto* q = dynamic_cast<QuadraticPsiField*>(&f)) {
    c.n_steps = q->n_steps();
    c.lambda = 1e-3;
    return train_regularized(p, *q, c, alg);
  }
  return train(p, static_cast<MlpField&>(f), c);
}

}  // namespace

TEST_CASE("mlp checkpoint round trip") {
  const ProblemSpec p = make_rwpo(2);
  MlpField f(2, 6, 3);
  const RunReport r = short_run(p, f, Algorithm::Standard);
  const Checkpoint ck = make_checkpoint("rwpo", f, r);
  const Checkpoint back = checkpoint_from_json(checkpoint_to_json(ck));
  CHECK(back.version == kCheckpointVersion);
  CHECK(back.field_kind == "mlp");
  CHECK(back.width == 6);
  CHECK(back.adam.step == 2);
  REQUIRE(back.params.size() == f.params().size());
  for (std::size_t k = 0; k < f.params().size(); ++k) {
    CHECK(back.params[k].values() == f.params()[k].values());
    CHECK(back.params[k].shape() == f.params()[k].shape());
    CHECK(back.adam.m[k].values() == r.adam.m[k].values());
  }
  const auto g = field_from_checkpoint(back);
  const Eigen::Vector2d z(0.3, -0.2);
  CHECK((g->eval(0.5, z) - f.eval(0.5, z)).norm() == 0.0);

  std::mt19937_64 rng = rng_from_checkpoint(back);
  std::mt19937_64 orig = r.rng;
  CHECK(rng() == orig());
}

TEST_CASE("quadratic checkpoint round trip through a file") {
  const ProblemSpec p = make_ou_flow_matching(1);
  QuadraticPsiField q(1, 10, 0.1, 0.0, 1.0);
  const RunReport r = short_run(p, q, Algorithm::RegularizedFm);
  const auto path = std::filesystem::temp_directory_path() / "scoreflow_ck_test.json";
  save_checkpoint(path.string(), make_checkpoint("ou_flow_matching", q, r));
  const Checkpoint back = load_checkpoint(path.string());
  std::filesystem::remove(path);
  CHECK(back.field_kind == "quadratic");
  CHECK(back.n_steps == 10);
  CHECK(back.ou_rate == 1.0);
  const auto g = field_from_checkpoint(back);
  const auto* gq = dynamic_cast<const QuadraticPsiField*>(g.get());
  REQUIRE(gq != nullptr);
  for (std::size_t j = 0; j <= 10; ++j) {
    CHECK((gq->A(j) - q.A(j)).norm() == 0.0);
    CHECK(gq->C(j) == q.C(j));
  }
}

TEST_CASE("malformed checkpoints are rejected") {
  CHECK_THROWS_AS(checkpoint_from_json("{"), std::runtime_error);
  CHECK_THROWS_AS(checkpoint_from_json("{}"), std::runtime_error);
  const ProblemSpec p = make_rwpo(1);
  MlpField f(1, 2, 1);
  std::string text = checkpoint_to_json(make_checkpoint("rwpo", f, short_run(p, f, Algorithm::Standard)));
  const auto pos = text.find("\"version\"");
  REQUIRE(pos != std::string::npos);
  const auto colon = text.find(':', pos);
  const auto end = text.find_first_of(",}", colon);
  text.replace(colon + 1, end - colon - 1, " 99");
  CHECK_THROWS_WITH_AS(checkpoint_from_json(text), doctest::Contains("version"), std::runtime_error);
  CHECK_THROWS(load_checkpoint("/nonexistent/ck.json"));
}
