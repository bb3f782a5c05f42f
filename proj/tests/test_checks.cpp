#include <sstream>

#include "doctest.h"
#include "scoreflow/checks.hpp"

using namespace scoreflow;

TEST_CASE("derivative suite passes") {
  const auto r = check_derivatives(3, 30);
  CHECK(r.size() == 6);
  for (const CheckResult& c : r) {
    INFO(c.name << ": " << c.detail);
    CHECK(c.passed);
  }
}

TEST_CASE("information equality converges") {
  const auto pts = info_equality_points({0.02, 0.01}, 4000, 2);
  REQUIRE(pts.size() == 6);
  CHECK(pts[0].excess == doctest::Approx(0.0).epsilon(1e-12));  // t = 0 is exact
  CHECK(std::abs(pts[5].excess) < std::abs(pts[2].excess));
  const auto r = check_info_equality({0.02, 0.01}, 4000, 2);
  for (const CheckResult& c : r) {
    INFO(c.name << ": " << c.detail);
    CHECK(c.passed);
  }
  CHECK_FALSE(check_info_equality({0.01}, 100, 1).front().passed);
}

TEST_CASE("score oracle report") {
  const ScoreOracleReport rep = score_oracle_report(3, {0.02, 0.01});
  CHECK(rep.mlp_discrepancy.size() == 2);
  CHECK(rep.mlp_discrepancy[0] / rep.mlp_discrepancy[1] == doctest::Approx(2.0).epsilon(0.15));
  // the linear case differs at O(dt) overall, see the check's note
  CHECK(rep.linear_max_diff > 0.0);
  CHECK(rep.linear_max_diff < 0.01);
}

TEST_CASE("printing and exit status") {
  std::ostringstream os;
  CHECK(print_checks({{"a", true, false, "ok"}, {"b", false, true, "known"}}, os) == 0);
  CHECK(os.str() == "PASS a: ok\nFAIL b: known [known limitation]\n");
  std::ostringstream os2;
  CHECK(print_checks({{"c", false, false, "bad"}}, os2) == 1);
  CHECK(relative_error(1e-9, 0.0) == doctest::Approx(1e-3));
}
