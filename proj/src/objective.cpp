#include "qcaps/objective.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "qcaps/error.hpp"

namespace qcaps {

namespace {

void check_target(std::int64_t target, Index classes) {
  if (target < 0 || target >= classes) {
    throw BadTarget("BadTarget: target " + std::to_string(target) + " outside [0, " + std::to_string(classes) + ")");
  }
}

}  // namespace

template <typename Scalar>
Var<Scalar> spread_loss(const Var<Scalar>& acts, const std::vector<std::int64_t>& targets, Scalar margin) {
  if (acts.ndim() != 2 || acts.dim(0) != static_cast<Index>(targets.size())) {
    throw ShapeMismatch("ShapeMismatch: spread_loss acts " + shape_string(acts.shape()) + " for " +
                        std::to_string(targets.size()) + " targets");
  }
  const Index batch = acts.dim(0), classes = acts.dim(1);
  Tensor<Scalar> onehot(Shape{batch, classes});
  Tensor<Scalar> others(Shape{batch, classes});
  others.fill(Scalar(1));
  for (Index b = 0; b < batch; ++b) {
    check_target(targets[static_cast<std::size_t>(b)], classes);
    onehot.at({b, targets[static_cast<std::size_t>(b)]}) = Scalar(1);
    others.at({b, targets[static_cast<std::size_t>(b)]}) = Scalar(0);
  }
  const Var<Scalar> a_t = sum(mul(acts, constant(std::move(onehot))), 1, true);
  // The target term itself is masked out: its hinge would contribute m^2.
  const Var<Scalar> hinge = relu(add_scalar(sub(acts, a_t), margin));
  return mul_scalar(sum_all(mul(square(hinge), constant(std::move(others)))), Scalar(1) / static_cast<Scalar>(batch));
}

double spread_loss(std::span<const double> acts, std::int64_t target, double margin) {
  check_target(target, static_cast<Index>(acts.size()));
  const double a_t = acts[static_cast<std::size_t>(target)];
  double loss = 0;
  for (std::size_t i = 0; i < acts.size(); ++i) {
    if (static_cast<std::int64_t>(i) == target) continue;
    const double h = std::max(0.0, margin - (a_t - acts[i]));
    loss += h * h;
  }
  return loss;
}

double margin_schedule(std::int64_t step, bool clamp) {
  const double z = std::min(10.0, static_cast<double>(step) / 50000.0 - 4.0);
  const double m = 0.2 + 0.79 / (1.0 + std::exp(-z));
  return clamp ? std::min(m, kMarginCeiling) : m;
}

template <typename Scalar>
std::int64_t predict(std::span<const Scalar> acts) {
  std::int64_t best = 0;
  for (std::size_t i = 1; i < acts.size(); ++i) {
    if (acts[i] > acts[static_cast<std::size_t>(best)]) best = static_cast<std::int64_t>(i);
  }
  return best;
}

template <typename Scalar>
std::vector<std::int64_t> predict_batch(const Tensor<Scalar>& acts) {
  if (acts.ndim() != 2) throw ShapeMismatch("ShapeMismatch: predict_batch expects [B, C]");
  const Index batch = acts.dim(0), classes = acts.dim(1);
  std::vector<std::int64_t> out(static_cast<std::size_t>(batch));
  for (Index b = 0; b < batch; ++b) {
    out[static_cast<std::size_t>(b)] =
        predict(std::span<const Scalar>(acts.data() + b * classes, static_cast<std::size_t>(classes)));
  }
  return out;
}

template Var<float> spread_loss(const Var<float>&, const std::vector<std::int64_t>&, float);
template Var<double> spread_loss(const Var<double>&, const std::vector<std::int64_t>&, double);
template std::int64_t predict(std::span<const float>);
template std::int64_t predict(std::span<const double>);
template std::vector<std::int64_t> predict_batch(const Tensor<float>&);
template std::vector<std::int64_t> predict_batch(const Tensor<double>&);

}  // namespace qcaps
