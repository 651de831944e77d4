#include <random>

#include "doctest.h"
#include "qcaps/error.hpp"
#include "qcaps/nn_blocks.hpp"

using namespace qcaps;
using V = Var<double>;
using T = Tensor<double>;

namespace {

T random_tensor(const Shape& shape, std::mt19937_64& rng, double lo, double hi) {
  T t(shape);
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.storage()) v = u(rng);
  return t;
}

BatchNormParams<double> unit_norm(Index c) {
  return {V(T(Shape{c}, 1.0), true), V(T(Shape{c}), true), V(T(Shape{c})), V(T(Shape{c}, 1.0))};
}

ResidualBlockParams<double> random_block(Index cin, Index c, Index stride, std::mt19937_64& rng) {
  return {stride,
          V(random_tensor({c, cin, 3, 3}, rng, -0.3, 0.3), true),
          unit_norm(c),
          V(random_tensor({c, c, 3, 3}, rng, -0.3, 0.3), true),
          unit_norm(c),
          V(random_tensor({c, cin, 1, 1}, rng, -0.5, 0.5), true),
          unit_norm(c)};
}

/// Per-channel mean and biased variance of [N, C, H, W].
std::pair<std::vector<double>, std::vector<double>> channel_stats(const T& x) {
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<double> mean(static_cast<std::size_t>(c)), var(static_cast<std::size_t>(c));
  for (Index k = 0; k < c; ++k) {
    double s = 0, sq = 0;
    for (Index b = 0; b < n; ++b)
      for (Index i = 0; i < hw; ++i) {
        const double v = x[(b * c + k) * hw + i];
        s += v;
        sq += v * v;
      }
    const double m = s / static_cast<double>(n * hw);
    mean[static_cast<std::size_t>(k)] = m;
    var[static_cast<std::size_t>(k)] = sq / static_cast<double>(n * hw) - m * m;
  }
  return {mean, var};
}

}  // namespace

TEST_CASE("training-mode normalization standardizes and updates running stats") {
  std::mt19937_64 rng(1);
  const T x = random_tensor({4, 3, 5, 5}, rng, -2, 3);
  BatchNormParams<double> p = unit_norm(3);
  p.running_mean.mutable_value().fill(0.5);
  const auto [mean, var] = channel_stats(x);
  const T y = batch_norm(constant(x), p, BatchNormOptions{}).value();
  const auto [ym, yv] = channel_stats(y);
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(std::abs(ym[k]) <= 1e-12);
    CHECK(std::abs(yv[k] - var[k] / (var[k] + 1e-5)) <= 1e-12);
    CHECK(std::abs(p.running_mean.value()[static_cast<Index>(k)] - (0.9 * 0.5 + 0.1 * mean[k])) <= 1e-14);
    CHECK(std::abs(p.running_var.value()[static_cast<Index>(k)] - (0.9 + 0.1 * var[k])) <= 1e-14);
  }
}

TEST_CASE("inference-mode normalization uses the running statistics") {
  std::mt19937_64 rng(2);
  const T x = random_tensor({2, 2, 3, 3}, rng, -1, 1);
  BatchNormParams<double> p{V(T::vector({2.0, 0.5}), true), V(T::vector({0.1, -0.3}), true),
                            V(T::vector({0.2, -0.4})), V(T::vector({1.5, 0.25}))};
  BatchNormOptions o;
  o.training = false;
  const T y = batch_norm(constant(x), p, o).value();
  for (Index b = 0; b < 2; ++b)
    for (Index c = 0; c < 2; ++c)
      for (Index i = 0; i < 9; ++i) {
        const Index k = (b * 2 + c) * 9 + i;
        const double want = (x[k] - p.running_mean.value()[c]) / std::sqrt(p.running_var.value()[c] + 1e-5) *
                                p.scale.value()[c] +
                            p.shift.value()[c];
        CHECK(std::abs(y[k] - want) <= 1e-14);
      }
  CHECK(p.running_mean.value() == T::vector({0.2, -0.4}));

  // With running stats equal to the batch stats, both modes agree.
  const auto [mean, var] = channel_stats(x);
  BatchNormParams<double> q = unit_norm(2);
  q.running_mean.mutable_value() = T::vector({mean[0], mean[1]});
  q.running_var.mutable_value() = T::vector({var[0], var[1]});
  BatchNormOptions train;
  train.update_running = false;
  const T a = batch_norm(constant(x), q, train).value();
  const T b = batch_norm(constant(x), q, o).value();
  CHECK(max_abs_diff(a, b) <= 1e-12);
}

TEST_CASE("residual block output shapes") {
  std::mt19937_64 rng(3);
  const V x = constant(random_tensor({1, 2, 32, 32}, rng, 0, 1));
  const V a = residual_block(x, random_block(2, 32, 1, rng), BatchNormOptions{});
  CHECK(a.shape() == Shape{1, 32, 32, 32});
  const V b = residual_block(a, random_block(32, 64, 2, rng), BatchNormOptions{});
  CHECK(b.shape() == Shape{1, 64, 16, 16});
  for (double v : b.value().storage()) CHECK(v >= 0.0);
}

TEST_CASE("with a zeroed main path the block is relu of the normalized skip") {
  std::mt19937_64 rng(4);
  const V x = constant(random_tensor({2, 3, 6, 6}, rng, -1, 1));
  ResidualBlockParams<double> p = random_block(3, 4, 2, rng);
  p.conv1.mutable_value().fill(0);
  p.conv2.mutable_value().fill(0);
  BatchNormOptions o;
  o.update_running = false;
  const T y = residual_block(x, p, o).value();
  const T skip = relu(batch_norm(conv2d(x, p.skip, 2, 0), p.norm_skip, o)).value();
  CHECK(y.shape() == Shape{2, 4, 3, 3});
  CHECK(max_abs_diff(y, skip) <= 1e-12);
}

TEST_CASE("primary capsule assembly") {
  const V poses = constant(T(Shape{1, 4, 3, 5, 5}));
  std::mt19937_64 rng(5);
  const V acts = constant(random_tensor({1, 4, 5, 5}, rng, 0, 1));
  const CapsuleField<double> f = assemble_primary_capsules(BranchOutput<double>{poses, acts});
  CHECK(f.poses.shape() == Shape{1, 5, 5, 4, 3});
  CHECK(f.acts.shape() == Shape{1, 5, 5, 4});
  for (double v : f.poses.value().storage()) CHECK(v == 0.0);
  CHECK(f.acts_channels_first() == acts.value());

  const V shifted = constant(random_tensor({1, 4, 3, 5, 5}, rng, -1, 1));
  const CapsuleField<double> g = assemble_primary_capsules(BranchOutput<double>{shifted, acts});
  CHECK(g.poses_channels_first() == shifted.value());
  // Type 2, component 1 at (3, 4).
  CHECK(g.poses.value()[((3 * 5 + 4) * 4 + 2) * 3 + 1] == shifted.value()[((2 * 3 + 1) * 5 + 3) * 5 + 4]);

  const V bad_acts = constant(T(Shape{1, 4, 4, 4}));
  CHECK_THROWS_AS(assemble_primary_capsules(BranchOutput<double>{poses, bad_acts}), AlignmentError);
}
