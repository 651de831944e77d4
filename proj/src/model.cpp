#include "qcaps/model.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "qcaps/error.hpp"

namespace qcaps {

namespace {

Index ceil_div(Index a, Index b) { return (a + b - 1) / b; }

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::string module_of(const std::string& name) { return name.substr(0, name.find('.')); }

}  // namespace

ModelConfig ModelConfig::miniature() {
  ModelConfig c;
  c.in_channels = 1;
  c.input_size = 8;
  c.classes = 3;
  c.pose_channels = {3, 4};
  c.act_channels = 3;
  c.trunk_channels = {3, 4};
  c.primary_types = 4;
  c.caps_types = 2;
  c.caps_layers = 1;
  c.caps_kernel = 3;
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("invalid model config: " + msg); };
  if (in_channels < 1 || input_size < 1 || classes < 1) fail("in_channels, input_size and classes must be >= 1");
  if (pose_channels.empty() || pose_channels.size() != pose_strides.size()) fail("pose_channels / pose_strides");
  if (trunk_channels.empty() || trunk_channels.size() != trunk_strides.size()) fail("trunk_channels / trunk_strides");
  for (Index v : pose_channels) if (v < 1) fail("pose channel count < 1");
  for (Index v : trunk_channels) if (v < 1) fail("trunk channel count < 1");
  for (Index v : pose_strides) if (v < 1) fail("pose stride < 1");
  for (Index v : trunk_strides) if (v < 1) fail("trunk stride < 1");
  if (act_channels < 1 || act_stride < 1) fail("activation branch channels / stride");
  if (primary_types < 1 || caps_types < 1 || caps_layers < 0 || caps_kernel < 1 || caps_stride < 1) {
    fail("capsule layer sizes");
  }
  if (routing.iterations < 1) fail("routing iterations must be >= 1");
  if (branched) {
    Index pose = input_size;
    for (Index s : pose_strides) pose = ceil_div(pose, s);
    if (pose != ceil_div(input_size, act_stride)) fail("pose and activation branches yield different grids");
  }
  grid_chain(*this);
}

std::vector<Index> grid_chain(const ModelConfig& config) {
  Index g = config.input_size;
  for (Index s : config.branched ? config.pose_strides : config.trunk_strides) g = ceil_div(g, s);
  std::vector<Index> chain{g};
  for (int l = 0; l < config.caps_layers; ++l) {
    if (g < config.caps_kernel) {
      throw ConfigError("invalid model config: conv capsule layer " + std::to_string(l + 1) + " sees a " +
                        std::to_string(g) + "x" + std::to_string(g) + " grid, smaller than the kernel");
    }
    g = (g - config.caps_kernel) / config.caps_stride + 1;
    chain.push_back(g);
  }
  return chain;
}

template <typename Scalar>
BatchNormParams<Scalar> CapsNet<Scalar>::add_norm(const std::string& prefix, Index channels) {
  return {store_.add(prefix + ".scale", Tensor<Scalar>(Shape{channels})),
          store_.add(prefix + ".shift", Tensor<Scalar>(Shape{channels})),
          store_.add(prefix + ".running_mean", Tensor<Scalar>(Shape{channels}), false),
          store_.add(prefix + ".running_var", Tensor<Scalar>(Shape{channels}), false)};
}

template <typename Scalar>
ResidualBlockParams<Scalar> CapsNet<Scalar>::add_block(const std::string& prefix, Index cin, Index c, Index stride) {
  ResidualBlockParams<Scalar> p;
  p.stride = stride;
  p.conv1 = store_.add(prefix + ".conv1", Tensor<Scalar>(Shape{c, cin, 3, 3}));
  p.norm1 = add_norm(prefix + ".norm1", c);
  p.conv2 = store_.add(prefix + ".conv2", Tensor<Scalar>(Shape{c, c, 3, 3}));
  p.norm2 = add_norm(prefix + ".norm2", c);
  p.skip = store_.add(prefix + ".skip", Tensor<Scalar>(Shape{c, cin, 1, 1}));
  p.norm_skip = add_norm(prefix + ".norm_skip", c);
  return p;
}

template <typename Scalar>
ProjectionParams<Scalar> CapsNet<Scalar>::add_projection(const std::string& prefix, Index cin, Index cout) {
  return {store_.add(prefix + ".weight", Tensor<Scalar>(Shape{cout, cin, 1, 1})), add_norm(prefix + ".norm", cout)};
}

template <typename Scalar>
CapsLayerParams<Scalar> CapsNet<Scalar>::add_caps(const std::string& prefix, Index groups, Index tin, Index tout) {
  return {store_.add(prefix + ".theta", Tensor<Scalar>(Shape{groups, tin, tout})),
          store_.add(prefix + ".axis", Tensor<Scalar>(Shape{groups, tin, tout, 3})),
          store_.add(prefix + ".beta_a", Tensor<Scalar>(Shape{tout})),
          store_.add(prefix + ".beta_u", Tensor<Scalar>(Shape{tout}))};
}

template <typename Scalar>
CapsNet<Scalar>::CapsNet(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const ModelConfig& c = config_;
  if (c.branched) {
    Index cin = c.in_channels;
    for (std::size_t i = 0; i < c.pose_channels.size(); ++i) {
      pose_.blocks.push_back(add_block("pose.block" + std::to_string(i), cin, c.pose_channels[i], c.pose_strides[i]));
      cin = c.pose_channels[i];
    }
    pose_.head = add_projection("pose.head", cin, 3 * c.primary_types);
    act_.blocks.push_back(add_block("act.block0", c.in_channels, c.act_channels, c.act_stride));
    act_.head = add_projection("act.head", c.act_channels, c.primary_types);
  } else {
    Index cin = c.in_channels;
    for (std::size_t i = 0; i < c.trunk_channels.size(); ++i) {
      trunk_.blocks.push_back(
          add_block("trunk.block" + std::to_string(i), cin, c.trunk_channels[i], c.trunk_strides[i]));
      cin = c.trunk_channels[i];
    }
    trunk_.pose_head = add_projection("trunk.pose_head", cin, 3 * c.primary_types);
    trunk_.act_head = add_projection("trunk.act_head", cin, c.primary_types);
  }
  Index tin = c.primary_types;
  const Index groups = c.per_kernel_offset_rotors ? c.caps_kernel * c.caps_kernel : 1;
  for (int l = 0; l < c.caps_layers; ++l) {
    caps_.push_back(add_caps("caps" + std::to_string(l + 1), groups, tin, c.caps_types));
    tin = c.caps_types;
  }
  class_ = add_caps("class", 1, tin, c.classes);
  init_parameters(seed);
}

template <typename Scalar>
void CapsNet<Scalar>::init_parameters(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto fill_uniform = [&rng](Tensor<Scalar>& t, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Scalar& v : t.storage()) v = static_cast<Scalar>(dist(rng));
  };
  for (auto& p : store_.all()) {
    Tensor<Scalar>& t = p.var.mutable_value();
    const std::string& n = p.name;
    if (ends_with(n, ".conv1") || ends_with(n, ".conv2") || ends_with(n, ".skip")) {
      const double fan_in = static_cast<double>(t.dim(1) * t.dim(2) * t.dim(3));
      fill_uniform(t, std::sqrt(2.0) * std::sqrt(3.0 / fan_in));
    } else if (ends_with(n, ".weight")) {
      const double fan_in = static_cast<double>(t.dim(1) * t.dim(2) * t.dim(3));
      const double fan_out = static_cast<double>(t.dim(0) * t.dim(2) * t.dim(3));
      fill_uniform(t, std::sqrt(6.0 / (fan_in + fan_out)));
    } else if (ends_with(n, ".theta")) {
      fill_uniform(t, std::numbers::pi);
    } else if (ends_with(n, ".axis")) {
      fill_uniform(t, 1.0);
      // Redraw the (measure-zero) axes that would trip the degenerate-axis floor.
      for (Index k = 0; k < t.size(); k += 3) {
        while (std::sqrt(double(t[k]) * t[k] + double(t[k + 1]) * t[k + 1] + double(t[k + 2]) * t[k + 2]) < 1e-6) {
          std::uniform_real_distribution<double> dist(-1.0, 1.0);
          for (int j = 0; j < 3; ++j) t[k + j] = static_cast<Scalar>(dist(rng));
        }
      }
    } else if (ends_with(n, ".scale") || ends_with(n, ".running_var")) {
      t.fill(Scalar(1));
    } else {
      t.fill(Scalar(0));
    }
  }
}

template <typename Scalar>
ForwardOutput<Scalar> CapsNet<Scalar>::forward(const Var<Scalar>& image, const BatchNormOptions& norm) const {
  if (image.ndim() != 4 || image.dim(1) != config_.in_channels) {
    throw ShapeMismatch("ShapeMismatch: model expects [B, " + std::to_string(config_.in_channels) +
                        ", H, W] input, got " + shape_string(image.shape()));
  }
  BranchOutput<Scalar> branches;
  if (config_.branched) {
    branches.poses = pose_branch(image, pose_, norm);
    branches.acts = activation_branch(image, act_, norm);
  } else {
    branches = shared_trunk(image, trunk_, norm);
  }
  ForwardOutput<Scalar> out;
  out.primary = assemble_primary_capsules(branches);
  CapsLayerOptions options;
  options.kernel = config_.caps_kernel;
  options.stride = config_.caps_stride;
  options.per_kernel_offset_rotors = config_.per_kernel_offset_rotors;
  options.routing = config_.routing;
  const CapsuleField<Scalar>* field = &out.primary;
  for (const auto& layer : caps_) {
    out.conv_caps.push_back(conv_capsule_layer(*field, layer, options));
    field = &out.conv_caps.back();
  }
  options.coordinate_addition = config_.coordinate_addition;
  out.classes = class_capsule_layer(*field, class_, options);
  return out;
}

template <typename Scalar>
ParamCensus CapsNet<Scalar>::census() const {
  ParamCensus census;
  for (const auto& p : store_.all()) {
    if (!p.trainable) continue;
    const std::string module = module_of(p.name);
    if (census.modules.empty() || census.modules.back().module != module) census.modules.push_back({module, 0});
    const Index n = p.var.value().size();
    census.modules.back().params += n;
    census.total += n;
    if (ends_with(p.name, ".theta")) {
      census.transform_params += 4 * n;
      census.matrix_transform_params += 16 * n;
    }
  }
  return census;
}

ParamCensus param_count(const ModelConfig& config) {
  // A census over a real float model; parameters are small next to activations.
  return CapsNet<float>(config, 0).census();
}

template class CapsNet<float>;
template class CapsNet<double>;

}  // namespace qcaps
