#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qcaps/capsules.hpp"
#include "qcaps/nn_blocks.hpp"

namespace qcaps {

/// Architecture knobs. Defaults are the 32x32 stereo smallNORB network.
struct ModelConfig {
  Index in_channels = 2;
  Index input_size = 32;
  Index classes = 5;
  /// Pose branch residual blocks (channels, stride).
  std::vector<Index> pose_channels{32, 64};
  std::vector<Index> pose_strides{1, 2};
  /// Activation branch: a single residual block.
  Index act_channels = 32;
  Index act_stride = 2;
  /// Shared trunk of the non-branched variant.
  std::vector<Index> trunk_channels{64, 96};
  std::vector<Index> trunk_strides{1, 2};
  bool branched = true;
  Index primary_types = 96;
  Index caps_types = 16;
  int caps_layers = 3;
  Index caps_kernel = 5;
  Index caps_stride = 1;
  bool per_kernel_offset_rotors = false;
  bool coordinate_addition = false;
  RoutingConfig routing;

  /// 8x8 single-channel input, 4 primary types, one 3x3 conv capsule layer
  /// with 2 types and 3 classes; used by gradient checks.
  static ModelConfig miniature();
  /// Throws ConfigError on inconsistent values.
  void validate() const;
};

/// Spatial extent after every stage: primary grid, each conv capsule layer.
std::vector<Index> grid_chain(const ModelConfig& config);

template <typename Scalar>
struct ForwardOutput {
  CapsuleField<Scalar> primary;
  std::vector<CapsuleField<Scalar>> conv_caps;
  ClassCapsules<Scalar> classes;
};

struct ModuleCount {
  std::string module;
  Index params = 0;
};

struct ParamCensus {
  std::vector<ModuleCount> modules;
  Index total = 0;
  /// Rotor parameters (theta plus 3 axis components per pair).
  Index transform_params = 0;
  /// The same pairs parameterized by 4x4 matrices.
  Index matrix_transform_params = 0;
  double transform_ratio() const {
    return static_cast<double>(transform_params) / static_cast<double>(matrix_transform_params);
  }
};

template <typename Scalar>
class CapsNet {
 public:
  /// Registers every parameter and buffer in a fixed order, then initializes them from `seed`.
  CapsNet(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParameterStore<Scalar>& params() { return store_; }
  const ParameterStore<Scalar>& params() const { return store_; }

  /// Redraws every parameter: Kaiming-uniform residual convs, Xavier-uniform
  /// 1x1 heads, rotor axes U(-1, 1), angles U(-pi, pi), unit scales, zero
  /// shifts, zero betas, running stats (0, 1).
  void init_parameters(std::uint64_t seed);

  /// image [B, in_channels, H, W].
  ForwardOutput<Scalar> forward(const Var<Scalar>& image, const BatchNormOptions& norm) const;

  ParamCensus census() const;

 private:
  BatchNormParams<Scalar> add_norm(const std::string& prefix, Index channels);
  ResidualBlockParams<Scalar> add_block(const std::string& prefix, Index cin, Index c, Index stride);
  ProjectionParams<Scalar> add_projection(const std::string& prefix, Index cin, Index cout);
  CapsLayerParams<Scalar> add_caps(const std::string& prefix, Index groups, Index tin, Index tout);

  ModelConfig config_;
  ParameterStore<Scalar> store_;
  PoseBranchParams<Scalar> pose_;
  ActivationBranchParams<Scalar> act_;
  TrunkParams<Scalar> trunk_;
  std::vector<CapsLayerParams<Scalar>> caps_;
  CapsLayerParams<Scalar> class_;
};

/// Census of the configured model without allocating activations.
ParamCensus param_count(const ModelConfig& config);

}  // namespace qcaps
