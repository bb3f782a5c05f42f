#include <cmath>

#include "doctest.h"
#include "scoreflow/tape.hpp"
#include "scoreflow/tensor.hpp"

using namespace scoreflow;

TEST_CASE("construction and shapes") {
  Tensor t(Shape{2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  CHECK(t.at(1, 2) == 1.5);
  CHECK(shape_string(t.shape()) == "[2x3]");
  CHECK(Tensor::scalar(4.0).item() == 4.0);
  CHECK_THROWS(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}));
  CHECK_THROWS(t.item());
  Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
  CHECK(m.at(1, 0) == 3);
  CHECK(m.reshaped({4})[3] == 4);
  CHECK_THROWS(m.reshaped({3}));
}

TEST_CASE("finiteness") {
  Tensor t = Tensor::vector({1, 2});
  CHECK(t.all_finite());
  t[1] = std::nan("");
  CHECK_FALSE(t.all_finite());
}

TEST_CASE("basic op values") {
  const Var a(Tensor::matrix({{1, 2}, {3, 4}}));
  const Var x(Tensor::vector({1, 1}));
  const Tensor y = ad::matvec(a, x).value();
  CHECK(y[0] == 3);
  CHECK(y[1] == 7);
  CHECK(ad::tanh(Var(Tensor::vector({0}))).value()[0] == 0.0);
  CHECK(ad::trace(Var(Tensor::matrix({{2, 9}, {9, 5}}))).item() == 7.0);
  const Tensor p = ad::matmul(a, a).value();
  CHECK(p.at(0, 0) == 7);
  CHECK(p.at(1, 1) == 22);
  CHECK_THROWS(ad::add(a, x));
  CHECK_THROWS(ad::matmul(a, Var(Tensor(Shape{3, 2}))));
}

TEST_CASE("batched ops") {
  Tensor h(Shape{2, 2, 2});
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = static_cast<double>(i);
  const Tensor tr = ad::batch_trace(Var(h)).value();
  CHECK(tr[0] == 0 + 3);
  CHECK(tr[1] == 4 + 7);
  const Tensor ht = ad::batch_transpose(Var(h)).value();
  CHECK(ht.at(0, 0, 1) == h.at(0, 1, 0));
  const Tensor sq = ad::batch_matmul(Var(h), Var(h)).value();
  CHECK(sq.at(1, 0, 0) == 4 * 4 + 5 * 6);
  const Tensor s = ad::sym_from_upper(Var(Tensor::vector({1, 2, 3})), 2).value();
  CHECK(s.at(0, 1) == 2);
  CHECK(s.at(1, 0) == 2);
  CHECK(s.at(1, 1) == 3);
}
