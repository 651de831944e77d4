#pragma once

#include <string>
#include <vector>

#include "qcaps/gradcheck.hpp"

namespace qcaps {

struct GradcheckRow {
  std::string component;
  GradcheckResult result;
  double tolerance = 0;
  /// The negated-gradient self-test passes when the harness reports a failure.
  bool expect_failure = false;

  bool passed() const {
    const bool within = result.max_relative_error <= tolerance;
    return expect_failure ? !within : within;
  }
};

struct GradcheckSuiteOptions {
  /// Overrides every per-component tolerance when positive.
  double tolerance = 0;
  bool primitives = true;
  std::uint64_t seed = 7;
};

/// float64 checks of every differentiable primitive, the rotor layer in
/// isolation, EM routing unrolled over two iterations, the miniature network,
/// and a corrupted-gradient self-test.
std::vector<GradcheckRow> run_gradcheck_suite(const GradcheckSuiteOptions& options = {});

}  // namespace qcaps
