#pragma once

#include "qcaps/autodiff.hpp"
#include "qcaps/capsules.hpp"

namespace qcaps {

/// Per-channel normalization over (batch, height, width) of [N, C, H, W].
/// running_mean / running_var are non-trainable buffers updated in training mode
/// as running = momentum * running + (1 - momentum) * batch (biased variance).
template <typename Scalar>
struct BatchNormParams {
  Var<Scalar> scale;  // [C]
  Var<Scalar> shift;  // [C]
  Var<Scalar> running_mean;
  Var<Scalar> running_var;
};

struct BatchNormOptions {
  bool training = true;
  /// Training mode only.
  bool update_running = true;
  double momentum = 0.9;
  double eps = 1e-5;
};

template <typename Scalar>
Var<Scalar> batch_norm(const Var<Scalar>& x, const BatchNormParams<Scalar>& params, const BatchNormOptions& options);

/// conv3x3(s) -> norm -> relu -> conv3x3 -> norm, skip conv1x1(s) -> norm,
/// output relu(main + skip). Padding 1 on the 3x3 convolutions.
template <typename Scalar>
struct ResidualBlockParams {
  Index stride = 1;
  Var<Scalar> conv1;  // [c, cin, 3, 3]
  BatchNormParams<Scalar> norm1;
  Var<Scalar> conv2;  // [c, c, 3, 3]
  BatchNormParams<Scalar> norm2;
  Var<Scalar> skip;  // [c, cin, 1, 1]
  BatchNormParams<Scalar> norm_skip;
};

template <typename Scalar>
Var<Scalar> residual_block(const Var<Scalar>& x, const ResidualBlockParams<Scalar>& params,
                           const BatchNormOptions& norm);

/// 1x1 convolution followed by normalization.
template <typename Scalar>
struct ProjectionParams {
  Var<Scalar> weight;  // [cout, cin, 1, 1]
  BatchNormParams<Scalar> norm;
};

template <typename Scalar>
Var<Scalar> projection(const Var<Scalar>& x, const ProjectionParams<Scalar>& params, const BatchNormOptions& norm);

template <typename Scalar>
struct PoseBranchParams {
  std::vector<ResidualBlockParams<Scalar>> blocks;
  ProjectionParams<Scalar> head;  // to 3 * types channels
};

template <typename Scalar>
struct ActivationBranchParams {
  std::vector<ResidualBlockParams<Scalar>> blocks;
  ProjectionParams<Scalar> head;  // to types channels
};

/// Returns the pose grid [B, types, 3, H, W]; channel 3 * t + c is component c of type t.
template <typename Scalar>
Var<Scalar> pose_branch(const Var<Scalar>& image, const PoseBranchParams<Scalar>& params,
                        const BatchNormOptions& norm);

/// Returns the activation grid [B, types, H, W] in (0, 1).
template <typename Scalar>
Var<Scalar> activation_branch(const Var<Scalar>& image, const ActivationBranchParams<Scalar>& params,
                              const BatchNormOptions& norm);

template <typename Scalar>
struct BranchOutput {
  Var<Scalar> poses;  // [B, N, 3, H, W]
  Var<Scalar> acts;   // [B, N, H, W]
};

/// Shared trunk feeding both heads, for the non-branched variant.
template <typename Scalar>
struct TrunkParams {
  std::vector<ResidualBlockParams<Scalar>> blocks;
  ProjectionParams<Scalar> pose_head;
  ProjectionParams<Scalar> act_head;
};

template <typename Scalar>
BranchOutput<Scalar> shared_trunk(const Var<Scalar>& image, const TrunkParams<Scalar>& params,
                                  const BatchNormOptions& norm);

/// Repackages aligned grids as a capsule field. Throws AlignmentError when the
/// batch, type or spatial extents differ.
template <typename Scalar>
CapsuleField<Scalar> assemble_primary_capsules(const BranchOutput<Scalar>& branches);

}  // namespace qcaps
