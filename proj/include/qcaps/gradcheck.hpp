#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "qcaps/autodiff.hpp"

namespace qcaps {

struct GradcheckOptions {
  /// Central-difference step; must lie in [1e-7, 1e-3].
  double step = 1e-5;
  /// Coordinates probed per input tensor; 0 probes all of them.
  Index max_coords_per_input = 0;
  std::uint64_t seed = 0;
  /// Applied to each reverse-mode gradient before comparison (harness self-test).
  std::function<void(Tensor<double>&)> corrupt_gradient;
};

struct GradcheckResult {
  /// max over probed coordinates of |fd - g| / max(1, |g|)
  double max_relative_error = 0.0;
  std::string worst_input;
  Index worst_coordinate = -1;
  Index coordinates_checked = 0;
};

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences with respect to every leaf in `inputs`. `f` must rebuild its
/// graph from the current leaf values on each call.
GradcheckResult finite_difference_check(const std::function<Var<double>()>& f, const std::vector<Var<double>>& inputs,
                                        const std::vector<std::string>& names, const GradcheckOptions& options = {});

GradcheckResult finite_difference_check(const std::function<Var<double>()>& f, ParameterStore<double>& params,
                                        const GradcheckOptions& options = {});

}  // namespace qcaps
