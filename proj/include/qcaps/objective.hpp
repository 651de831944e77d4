#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "qcaps/autodiff.hpp"

namespace qcaps {

/// Mean over the batch of sum_{i != t} max(0, m - (a_t - a_i))^2.
/// acts [B, C], targets of length B. Throws BadTarget for targets outside [0, C).
template <typename Scalar>
Var<Scalar> spread_loss(const Var<Scalar>& acts, const std::vector<std::int64_t>& targets, Scalar margin);

/// Unbatched form over acts [C].
double spread_loss(std::span<const double> acts, std::int64_t target, double margin);

/// m = 0.2 + 0.79 sigmoid(min(10, step / 50000 - 4)), capped at 0.9 when `clamp`.
double margin_schedule(std::int64_t step, bool clamp = true);

inline constexpr double kMarginCeiling = 0.9;

/// Index of the largest activation; the lowest index wins ties.
template <typename Scalar>
std::int64_t predict(std::span<const Scalar> acts);

/// Row-wise predict over acts [B, C].
template <typename Scalar>
std::vector<std::int64_t> predict_batch(const Tensor<Scalar>& acts);

}  // namespace qcaps
