#pragma once

#include "qcaps/autodiff.hpp"
#include "qcaps/em_routing.hpp"

namespace qcaps {

/// Spatial grid of capsules stored position-major: poses [B, H, W, T, 3]
/// hold the imaginary parts of pure quaternions, acts [B, H, W, T] lie in [0, 1].
template <typename Scalar>
struct CapsuleField {
  Var<Scalar> poses;
  Var<Scalar> acts;

  Index batch() const { return poses.dim(0); }
  Index height() const { return poses.dim(1); }
  Index width() const { return poses.dim(2); }
  Index types() const { return poses.dim(3); }

  /// Poses as [B, T, 3, H, W].
  Tensor<Scalar> poses_channels_first() const;
  /// Activations as [B, T, H, W].
  Tensor<Scalar> acts_channels_first() const;
};

/// Valid (unpadded) sliding windows; children of a window are ordered
/// (kernel row, kernel col, type).
struct ReceptiveFields {
  Index in_height = 0, in_width = 0;
  Index kernel = 1, stride = 1;
  Index out_height = 0, out_width = 0;
  WindowTable table;  // locations index the flattened H*W input grid
};

/// Throws FieldTooSmall when the grid is smaller than the kernel.
ReceptiveFields receptive_fields(Index height, Index width, Index kernel, Index stride);

/// Windowed view of a field's poses: [B, H' * W', K * K * T, 3].
template <typename Scalar>
Var<Scalar> extract_receptive_fields(const CapsuleField<Scalar>& field, const ReceptiveFields& rf);

/// theta [...], axis [..., 3] -> unit rotors [..., 4] = [cos t, sin t * axis / |axis|].
/// Throws DegenerateAxis when any |axis| < kAxisEpsilon.
template <typename Scalar>
Var<Scalar> rotor_quaternions(const Var<Scalar>& theta, const Var<Scalar>& axis);

/// rotors [..., 4] -> [..., 3, 3], the rotation block of rotation_operator.
template <typename Scalar>
Var<Scalar> rotation_matrices(const Var<Scalar>& rotors);

/// poses [B, V, Tin, 3], mats [G, Tin, Tout, 3, 3] -> votes [B, V, Tin, Tout, 3]
/// with vote (b, v, i, j) = mats[v % G, i, j] * pose(b, v, i).
template <typename Scalar>
Var<Scalar> rotate_votes(const Var<Scalar>& poses, const Var<Scalar>& mats);

/// Votes from unit rotors [G, Tin, Tout, 4] through their rotation operators.
template <typename Scalar>
Var<Scalar> compute_votes(const Var<Scalar>& poses, const Var<Scalar>& rotors) {
  return rotate_votes(poses, rotation_matrices(rotors));
}

/// Rotor parameters between two capsule layers.
template <typename Scalar>
struct CapsLayerParams {
  Var<Scalar> theta;   // [G, Tin, Tout]
  Var<Scalar> axis;    // [G, Tin, Tout, 3]
  Var<Scalar> beta_a;  // [Tout]
  Var<Scalar> beta_u;  // [Tout]
};

struct CapsLayerOptions {
  Index kernel = 5;
  Index stride = 1;
  /// One rotor per kernel offset (G = K*K) instead of one per type pair.
  bool per_kernel_offset_rotors = false;
  /// Class layer only: add scaled (row, col) centres to the first two vote components.
  bool coordinate_addition = false;
  RoutingConfig routing;
};

template <typename Scalar>
CapsuleField<Scalar> conv_capsule_layer(const CapsuleField<Scalar>& field, const CapsLayerParams<Scalar>& params,
                                        const CapsLayerOptions& options);

template <typename Scalar>
struct ClassCapsules {
  Var<Scalar> acts;   // [B, C]
  Var<Scalar> poses;  // [B, C, 3]
};

/// Every capsule of every position votes for each class; one routing pass.
template <typename Scalar>
ClassCapsules<Scalar> class_capsule_layer(const CapsuleField<Scalar>& field, const CapsLayerParams<Scalar>& params,
                                          const CapsLayerOptions& options);

}  // namespace qcaps
