#pragma once

// EM routing-by-agreement over rotated votes.
//
// Per routing instance (children n, parents j, pose dims h):
//   M-step  r_nj = R_nj a_n,   m_j = sum_n r_nj + eps_mass
//           mu_jh = sum_n r_nj V_njh / sum_n r_nj
//           var_jh = sum_n r_nj (V_njh - mu_jh)^2 / m_j + eps_var
//           cost_jh = (beta_u_j + 0.5 log var_jh) sum_n r_nj
//           a_j = sigmoid(lambda (beta_a_j - sum_h cost_jh))
//   E-step  log p_nj = sum_h [-(V_njh - mu_jh)^2 / (2 var_jh) - 0.5 log(2 pi var_jh)]
//           R_nj = softmax_j(log a_j + log p_nj)
// R starts uniform; T iterations run M-steps, with an E-step between them.
// A parent whose raw mass is exactly zero takes the unweighted vote mean.

#include <cstdint>
#include <vector>

#include "qcaps/autodiff.hpp"

namespace qcaps {

struct RoutingConfig {
  int iterations = 2;
  double lambda_base = 0.01;
  double lambda_growth = 0.01;
  double eps_var = 1e-6;
  double eps_mass = 1e-8;

  /// Inverse temperature of iteration t (0-based).
  double inverse_temperature(int t) const { return lambda_base + lambda_growth * t; }
};

template <typename Scalar>
struct MStepResult {
  Tensor<Scalar> means;        // [P, D]
  Tensor<Scalar> variances;    // [P, D], eps_var included
  Tensor<Scalar> activations;  // [P]
};

template <typename Scalar>
struct RoutingState {
  Tensor<Scalar> responsibilities;  // [N, P] consumed by the final M-step
  Tensor<Scalar> means;
  Tensor<Scalar> variances;
  Tensor<Scalar> activations;
  Scalar inverse_temperature = 0;
};

/// votes [N, P, D], child_acts [N], beta_a/beta_u [P].
template <typename Scalar>
MStepResult<Scalar> m_step(const Tensor<Scalar>& responsibilities, const Tensor<Scalar>& child_acts,
                           const Tensor<Scalar>& votes, const Tensor<Scalar>& beta_a, const Tensor<Scalar>& beta_u,
                           Scalar inverse_temperature, const RoutingConfig& config = {});

/// Returns responsibilities [N, P]; every row sums to one.
template <typename Scalar>
Tensor<Scalar> e_step(const Tensor<Scalar>& means, const Tensor<Scalar>& variances,
                      const Tensor<Scalar>& parent_acts, const Tensor<Scalar>& votes);

/// Full routing of one instance. Throws ConfigError for iterations < 1.
template <typename Scalar>
RoutingState<Scalar> em_route(const Tensor<Scalar>& votes, const Tensor<Scalar>& child_acts,
                              const Tensor<Scalar>& beta_a, const Tensor<Scalar>& beta_u,
                              const RoutingConfig& config = {});

/// Which vote locations feed each output position: `locations[p * width + s]`.
struct WindowTable {
  Index positions = 0;
  Index width = 0;
  std::vector<Index> locations;

  /// Single position gathering every location (fully connected routing).
  static WindowTable all(Index locations);
};

/// Batched, differentiable routing. votes [B, V, Tin, Tout, D] and
/// acts [B, V, Tin] are indexed by vote location V; instance (b, p) routes the
/// children (slot s, type i) for s over windows.locations of p. Returns
/// [B, positions, Tout, D + 1]: pose components followed by the activation.
/// Backward differentiates through every unrolled iteration. Throws
/// EmptyChildren when a window has no children.
template <typename Scalar>
Var<Scalar> em_routing(const Var<Scalar>& votes, const Var<Scalar>& acts, const Var<Scalar>& beta_a,
                       const Var<Scalar>& beta_u, const WindowTable& windows, const RoutingConfig& config = {});

}  // namespace qcaps
