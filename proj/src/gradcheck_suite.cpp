#include "qcaps/gradcheck_suite.hpp"

#include <random>

#include "qcaps/capsules.hpp"
#include "qcaps/em_routing.hpp"
#include "qcaps/model.hpp"
#include "qcaps/nn_blocks.hpp"
#include "qcaps/objective.hpp"

namespace qcaps {

namespace {

using V = Var<double>;
using T = Tensor<double>;

class Case {
 public:
  explicit Case(std::uint64_t seed) : rng_(seed) {}

  V leaf(const Shape& shape, double lo, double hi) {
    T t(shape);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& v : t.storage()) v = dist(rng_);
    return V(std::move(t), true);
  }

  /// Values in [lo, hi] with random sign, keeping away from zero.
  V signed_leaf(const Shape& shape, double lo, double hi) {
    V v = leaf(shape, lo, hi);
    std::bernoulli_distribution sign(0.5);
    for (double& x : v.mutable_value().storage()) x = sign(rng_) ? x : -x;
    return v;
  }

  /// Scalar readout sum(W * op()) with a fixed random W of op's output shape.
  std::function<V()> readout(std::function<V()> op) {
    T w;
    {
      NoGradGuard guard;
      w = T(op().shape());
    }
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    for (double& v : w.storage()) v = dist(rng_);
    return [op = std::move(op), w = std::move(w)] { return sum_all(mul(op(), constant(w))); };
  }

 private:
  std::mt19937_64 rng_;
};

GradcheckRow check(const std::string& name, const std::function<V()>& f, const std::vector<V>& inputs,
                   double tolerance, const GradcheckOptions& options = {}) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < inputs.size(); ++i) names.push_back(name + "[" + std::to_string(i) + "]");
  return GradcheckRow{name, finite_difference_check(f, inputs, names, options), tolerance};
}

void primitive_rows(std::vector<GradcheckRow>& rows, std::uint64_t seed, double tol) {
  Case c(seed);
  auto unary = [&](const std::string& name, V x, V (*op)(const V&)) {
    rows.push_back(check(name, c.readout([x, op] { return op(x); }), {x}, tol));
  };
  auto binary = [&](const std::string& name, V a, V b, V (*op)(const V&, const V&)) {
    rows.push_back(check(name, c.readout([a, b, op] { return op(a, b); }), {a, b}, tol));
  };
  binary("add", c.leaf({3, 4}, -1, 1), c.leaf({4}, -1, 1), add<double>);
  binary("sub", c.leaf({2, 1, 3}, -1, 1), c.leaf({2, 4, 3}, -1, 1), sub<double>);
  binary("mul", c.leaf({3, 4}, -1, 1), c.leaf({3, 1}, -1, 1), mul<double>);
  binary("div", c.leaf({3, 4}, -1, 1), c.leaf({3, 4}, 0.5, 2), div<double>);
  unary("neg", c.leaf({5}, -1, 1), neg<double>);
  {
    V x = c.leaf({4, 2}, -1, 1);
    rows.push_back(check("add_scalar", c.readout([x] { return add_scalar(x, 0.3); }), {x}, tol));
    rows.push_back(check("mul_scalar", c.readout([x] { return mul_scalar(x, -1.7); }), {x}, tol));
  }
  unary("relu", c.signed_leaf({6, 3}, 0.05, 1), relu<double>);
  unary("sigmoid", c.leaf({6}, -3, 3), sigmoid<double>);
  unary("log", c.leaf({6}, 0.2, 3), log<double>);
  unary("exp", c.leaf({6}, -2, 2), exp<double>);
  unary("sqrt", c.leaf({6}, 0.2, 3), sqrt<double>);
  unary("square", c.leaf({6}, -2, 2), square<double>);
  unary("cos", c.leaf({6}, -3, 3), cos<double>);
  unary("sin", c.leaf({6}, -3, 3), sin<double>);
  binary("matmul_batched", c.leaf({2, 3, 4}, -1, 1), c.leaf({2, 4, 5}, -1, 1), matmul<double>);
  binary("matmul_shared", c.leaf({2, 3, 4}, -1, 1), c.leaf({4, 5}, -1, 1), matmul<double>);
  {
    V x = c.leaf({2, 3, 6, 5}, -1, 1);
    V w3 = c.leaf({4, 3, 3, 3}, -1, 1);
    V w1 = c.leaf({4, 3, 1, 1}, -1, 1);
    rows.push_back(check("conv2d_3x3_s1_p1", c.readout([x, w3] { return conv2d(x, w3, 1, 1); }), {x, w3}, tol));
    rows.push_back(check("conv2d_3x3_s2_p1", c.readout([x, w3] { return conv2d(x, w3, 2, 1); }), {x, w3}, tol));
    rows.push_back(check("conv2d_1x1_s2", c.readout([x, w1] { return conv2d(x, w1, 2, 0); }), {x, w1}, tol));
  }
  {
    V x = c.leaf({2, 3, 4}, -1, 1);
    rows.push_back(check("permute", c.readout([x] { return permute(x, {2, 0, 1}); }), {x}, tol));
    rows.push_back(check("reshape", c.readout([x] { return reshape(x, Shape{6, 4}); }), {x}, tol));
    rows.push_back(check("slice", c.readout([x] { return slice(x, 2, 1, 3); }), {x}, tol));
    rows.push_back(check("index_select", c.readout([x] { return index_select(x, 1, {2, 0, 2, 1}); }), {x}, tol));
    rows.push_back(check("broadcast_to", c.readout([x] { return broadcast_to(x, Shape{3, 2, 3, 4}); }), {x}, tol));
    rows.push_back(check("softmax", c.readout([x] { return softmax(x, 1); }), {x}, tol));
    rows.push_back(check("sum", c.readout([x] { return sum(x, 1, true); }), {x}, tol));
    rows.push_back(check("mean", c.readout([x] { return mean(x, -1); }), {x}, tol));
    rows.push_back(check("max", c.readout([x] { return max(x, 2); }), {x}, tol));
    rows.push_back(check("sum_all", c.readout([x] { return sum_all(x); }), {x}, tol));
    rows.push_back(check("mean_all", c.readout([x] { return mean_all(x); }), {x}, tol));
    V y = c.leaf({2, 1, 4}, -1, 1);
    rows.push_back(check("concat", c.readout([x, y] { return concat<double>({x, y}, 1); }), {x, y}, tol));
  }
  for (bool training : {true, false}) {
    V x = c.leaf({3, 2, 3, 3}, -1, 1);
    BatchNormParams<double> p{c.leaf({2}, 0.5, 1.5), c.leaf({2}, -0.5, 0.5), V(T(Shape{2})), V(T(Shape{2}))};
    p.running_var.mutable_value().fill(0.8);
    BatchNormOptions o;
    o.training = training;
    o.update_running = false;
    rows.push_back(check(training ? "batch_norm_train" : "batch_norm_inference",
                         c.readout([x, p, o] { return batch_norm(x, p, o); }), {x, p.scale, p.shift}, tol));
  }
  {
    V acts = c.leaf({4, 5}, 0, 1);
    const std::vector<std::int64_t> targets{0, 3, 1, 4};
    rows.push_back(check("spread_loss", [acts, targets] { return spread_loss(acts, targets, 0.4); }, {acts}, tol));
  }
}

}  // namespace

std::vector<GradcheckRow> run_gradcheck_suite(const GradcheckSuiteOptions& options) {
  const auto tol = [&](double fallback) { return options.tolerance > 0 ? options.tolerance : fallback; };
  std::vector<GradcheckRow> rows;
  if (options.primitives) primitive_rows(rows, options.seed, tol(1e-6));

  Case c(options.seed + 1);
  // Rotor layer in isolation: (theta, axis) -> unit rotor -> rotation block -> votes.
  V theta = c.leaf({1, 3, 2}, -3, 3);
  V axis = c.signed_leaf({1, 3, 2, 3}, 0.2, 1);
  V poses = c.leaf({2, 4, 3, 3}, -1, 1);
  const auto rotor_f =
      c.readout([=] { return rotate_votes(poses, rotation_matrices(rotor_quaternions(theta, axis))); });
  rows.push_back(check("rotor_layer", rotor_f, {theta, axis, poses}, tol(1e-6)));

  // EM routing, two unrolled iterations, two overlapping windows.
  V votes = c.leaf({2, 4, 3, 2, 3}, -1, 1);
  V acts = c.leaf({2, 4, 3}, 0.1, 1);
  V beta_a = c.leaf({2}, -1, 1);
  V beta_u = c.leaf({2}, -1, 1);
  WindowTable windows{2, 3, {0, 1, 2, 1, 2, 3}};
  const RoutingConfig routing;
  rows.push_back(check("em_routing_T2",
                       c.readout([=] { return em_routing(votes, acts, beta_a, beta_u, windows, routing); }),
                       {votes, acts, beta_a, beta_u}, tol(1e-4)));
  // A steeper inverse temperature makes the activation path dominate the readout.
  RoutingConfig steep;
  steep.lambda_base = 0.5;
  steep.lambda_growth = 0.5;
  rows.push_back(check("em_routing_T2_steep",
                       c.readout([=] { return em_routing(votes, acts, beta_a, beta_u, windows, steep); }),
                       {votes, acts, beta_a, beta_u}, tol(1e-4)));

  // Miniature network end to end through the spread loss and the class poses.
  CapsNet<double> net(ModelConfig::miniature(), options.seed);
  const V image(c.leaf({2, 1, 8, 8}, -1, 1).value());
  BatchNormOptions bn;
  bn.update_running = false;
  T pose_w;
  {
    NoGradGuard guard;
    pose_w = T(net.forward(image, bn).classes.poses.shape());
  }
  std::mt19937_64 rng(options.seed + 2);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  for (double& v : pose_w.storage()) v = dist(rng);
  const std::vector<std::int64_t> targets{2, 0};
  const auto net_f = [&] {
    const ForwardOutput<double> out = net.forward(image, bn);
    return add(spread_loss(out.classes.acts, targets, 0.5), sum_all(mul(out.classes.poses, constant(pose_w))));
  };
  GradcheckRow net_row{"miniature_network", finite_difference_check(net_f, net.params()), tol(1e-4)};
  rows.push_back(net_row);

  GradcheckOptions corrupt;
  corrupt.corrupt_gradient = [](Tensor<double>& g) {
    for (double& v : g.storage()) v = -v;
  };
  GradcheckRow self_test = check("self_test_negated_gradient", rotor_f, {theta, axis, poses}, tol(1e-6), corrupt);
  self_test.expect_failure = true;
  rows.push_back(self_test);
  return rows;
}

}  // namespace qcaps
