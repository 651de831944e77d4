#include "doctest.h"
#include "qcaps/autodiff.hpp"
#include "qcaps/error.hpp"
#include "qcaps/gradcheck.hpp"
#include "qcaps/gradcheck_suite.hpp"

using namespace qcaps;
using V = Var<double>;
using T = Tensor<double>;

TEST_CASE("forward values of basic primitives") {
  CHECK(add(constant(T::vector({1, 2})), constant(T::vector({3, 4}))).value() == T::vector({4, 6}));
  CHECK(relu(constant(T::vector({-1, 0, 2}))).value() == T::vector({0, 0, 2}));
  const V m = matmul(constant(T(Shape{2, 2}, {1, 2, 3, 4})), constant(T(Shape{2, 1}, {1, 1})));
  CHECK(m.value() == T(Shape{2, 1}, {3, 7}));
}

TEST_CASE("broadcasting follows numpy rules") {
  const V a = constant(T(Shape{2, 1, 3}, 1.0));
  const V b = constant(T(Shape{4, 1}, 2.0));
  CHECK(add(a, b).shape() == Shape{2, 4, 3});
  CHECK_THROWS_AS(add(constant(T(Shape{2, 3})), constant(T(Shape{4}))), ShapeMismatch);
}

TEST_CASE("same-padded strided convolution shape") {
  const V x = constant(T(Shape{1, 1, 5, 5}, 1.0));
  const V w = constant(T(Shape{1, 1, 3, 3}, 1.0));
  const V y = conv2d(x, w, 2, 1);
  CHECK(y.shape() == Shape{1, 1, 3, 3});
  // Corner window sees 2x2 ones, centre sees 3x3.
  CHECK(y.value()[0] == 4.0);
  CHECK(y.value()[4] == 9.0);
  CHECK(conv_output_extent(32, 3, 2, 1) == 16);
}

TEST_CASE("reverse-mode examples") {
  V p(T::vector({1, 2, 3}), true);
  backward(sum_all(mul(p, p)));
  CHECK(p.grad() == T::vector({2, 4, 6}));

  V z(T::scalar(0.0), true);
  backward(sigmoid(z));
  CHECK(z.grad()[0] == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("gradients accumulate over shared subexpressions") {
  V x(T::vector({2.0}), true);
  const V y = mul(x, x);
  backward(sum_all(add(y, y)));
  CHECK(x.grad()[0] == doctest::Approx(8.0));
}

TEST_CASE("non-scalar loss is rejected") {
  V x(T::vector({1, 2}), true);
  CHECK_THROWS_AS(backward(mul(x, x)), NonScalarLoss);
}

TEST_CASE("no-grad mode records nothing") {
  V x(T::vector({1, 2}), true);
  NoGradGuard guard;
  const V y = mul(x, x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("parameter store backpropagation covers unreachable parameters") {
  ParameterStore<double> store;
  const V a = store.add("a", T::vector({1.0, -2.0}));
  store.add("unused", T::vector({3.0}));
  const GradientMap<double> grads = backpropagate(sum_all(square(a)), store);
  CHECK(grads.at("a") == T::vector({2.0, -4.0}));
  CHECK(grads.at("unused") == T::vector({0.0}));
}

TEST_CASE("finite differences of a quadratic") {
  V x(T::scalar(3.0), true);
  const GradcheckResult r = finite_difference_check([&] { return square(x); }, {x}, {"x"});
  CHECK(r.max_relative_error <= 1e-9);
  CHECK(r.coordinates_checked == 1);
}

TEST_CASE("gradient-check suite passes every row and catches a negated gradient") {
  bool saw_self_test = false;
  for (const GradcheckRow& row : run_gradcheck_suite()) {
    CAPTURE(row.component);
    CAPTURE(row.result.max_relative_error);
    CHECK(row.passed());
    if (row.expect_failure) {
      saw_self_test = true;
      CHECK(row.result.max_relative_error > row.tolerance);
    }
  }
  CHECK(saw_self_test);
}
