#include <numbers>
#include <random>

#include "doctest.h"
#include "qcaps/error.hpp"
#include "qcaps/model.hpp"

using namespace qcaps;

namespace {

template <typename S>
Tensor<S> random_image(const Shape& shape, std::uint64_t seed) {
  Tensor<S> t(shape);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  for (S& v : t.storage()) v = static_cast<S>(u(rng));
  return t;
}

Index module_params(const ParamCensus& c, const std::string& module) {
  for (const ModuleCount& m : c.modules)
    if (m.module == module) return m.params;
  return -1;
}

}  // namespace

TEST_CASE("default architecture shape chain") {
  const ModelConfig config;
  CHECK(grid_chain(config) == std::vector<Index>{16, 12, 8, 4});
  const CapsNet<float> net(config, 1);
  NoGradGuard guard;
  BatchNormOptions bn;
  bn.update_running = false;
  const ForwardOutput<float> out = net.forward(Var<float>(random_image<float>({1, 2, 32, 32}, 2)), bn);
  CHECK(out.primary.poses.shape() == Shape{1, 16, 16, 96, 3});
  CHECK(out.primary.acts.shape() == Shape{1, 16, 16, 96});
  REQUIRE(out.conv_caps.size() == 3);
  CHECK(out.conv_caps[0].poses.shape() == Shape{1, 12, 12, 16, 3});
  CHECK(out.conv_caps[1].poses.shape() == Shape{1, 8, 8, 16, 3});
  CHECK(out.conv_caps[2].acts.shape() == Shape{1, 4, 4, 16});
  CHECK(out.classes.acts.shape() == Shape{1, 5});
  CHECK(out.classes.poses.shape() == Shape{1, 5, 3});
  for (float a : out.classes.acts.value().storage()) {
    CHECK(a >= 0.0f);
    CHECK(a <= 1.0f);
  }
}

TEST_CASE("parameter census") {
  const ModelConfig config;
  const ParamCensus c = param_count(config);
  CHECK(c.transform_ratio() == 0.25);
  CHECK(c.total >= 100000);
  CHECK(c.total <= 300000);
  // Rotor pairs: 96x16, 16x16, 16x16 and 16x5, four numbers each.
  CHECK(module_params(c, "caps1") == 96 * 16 * 4 + 2 * 16);
  CHECK(module_params(c, "class") == 16 * 5 * 4 + 2 * 5);
  CHECK(c.transform_params == (96 * 16 + 16 * 16 * 2 + 16 * 5) * 4);

  const CapsNet<double> net(config, 3);
  const ParamCensus from_net = net.census();
  CHECK(from_net.total == c.total);
  CHECK(net.params().trainable_count() == c.total);

  ModelConfig mnist = config;
  mnist.in_channels = 1;
  mnist.classes = 10;
  CHECK(module_params(param_count(mnist), "class") == 16 * 10 * 4 + 2 * 10);

  ModelConfig per_offset = config;
  per_offset.per_kernel_offset_rotors = true;
  CHECK(module_params(param_count(per_offset), "caps1") == 25 * 96 * 16 * 4 + 2 * 16);
}

TEST_CASE("initialization ranges and determinism") {
  const ModelConfig config = ModelConfig::miniature();
  const CapsNet<double> a(config, 42), b(config, 42), c(config, 43);
  bool any_difference = false;
  for (std::size_t i = 0; i < a.params().all().size(); ++i) {
    const Parameter<double>& p = a.params().all()[i];
    CHECK(p.var.value() == b.params().all()[i].var.value());
    any_difference = any_difference || !(p.var.value() == c.params().all()[i].var.value());
    const auto& v = p.var.value().storage();
    const std::string& n = p.name;
    auto ends = [&](const std::string& s) { return n.size() >= s.size() && n.compare(n.size() - s.size(), s.size(), s) == 0; };
    if (ends(".theta")) {
      for (double x : v) CHECK(std::abs(x) <= std::numbers::pi);
    } else if (ends(".axis")) {
      for (double x : v) CHECK(std::abs(x) <= 1.0);
    } else if (ends(".conv1") || ends(".conv2") || ends(".skip")) {
      const Shape& s = p.var.shape();
      const double bound = std::sqrt(6.0 / static_cast<double>(s[1] * s[2] * s[3]));
      for (double x : v) CHECK(std::abs(x) <= bound);
    } else if (ends(".scale") || ends(".running_var")) {
      for (double x : v) CHECK(x == 1.0);
    } else if (ends(".shift") || ends(".running_mean") || ends(".beta_a") || ends(".beta_u")) {
      for (double x : v) CHECK(x == 0.0);
    }
  }
  CHECK(any_difference);
}

TEST_CASE("branches do not share parameters") {
  CapsNet<double> net(ModelConfig::miniature(), 5);
  BatchNormOptions bn;
  bn.update_running = false;
  const Var<double> image(random_image<double>({2, 1, 8, 8}, 6));
  const ForwardOutput<double> out = net.forward(image, bn);
  const GradientMap<double> pose_grads = backpropagate(sum_all(square(out.primary.poses)), net.params());
  const ForwardOutput<double> out2 = net.forward(image, bn);
  const GradientMap<double> act_grads = backpropagate(sum_all(out2.primary.acts), net.params());
  for (const auto& [name, g] : pose_grads) {
    double pose_mass = 0, act_mass = 0;
    for (double v : g.storage()) pose_mass += std::abs(v);
    for (double v : act_grads.at(name).storage()) act_mass += std::abs(v);
    CAPTURE(name);
    if (name.rfind("pose.", 0) == 0) {
      CHECK(pose_mass > 0);
      CHECK(act_mass == 0);
    } else if (name.rfind("act.", 0) == 0) {
      CHECK(pose_mass == 0);
      CHECK(act_mass > 0);
    }
  }
}

TEST_CASE("activation and pose branches produce aligned grids") {
  const CapsNet<double> net(ModelConfig::miniature(), 7);
  NoGradGuard guard;
  const ForwardOutput<double> out = net.forward(Var<double>(random_image<double>({3, 1, 8, 8}, 8)), BatchNormOptions{});
  CHECK(out.primary.poses.shape() == Shape{3, 4, 4, 4, 3});
  for (double a : out.primary.acts.value().storage()) {
    CHECK(a > 0.0);
    CHECK(a < 1.0);
  }
  CHECK(out.conv_caps[0].acts.shape() == Shape{3, 2, 2, 2});
  CHECK(out.classes.acts.shape() == Shape{3, 3});
}

TEST_CASE("single-trunk variant yields the same capsule field shape") {
  ModelConfig config = ModelConfig::miniature();
  config.branched = false;
  const CapsNet<double> net(config, 9);
  CHECK(net.params().contains("trunk.block0.conv1"));
  CHECK_FALSE(net.params().contains("act.block0.conv1"));
  NoGradGuard guard;
  const ForwardOutput<double> out = net.forward(Var<double>(random_image<double>({2, 1, 8, 8}, 10)), BatchNormOptions{});
  CHECK(out.primary.poses.shape() == Shape{2, 4, 4, 4, 3});
  CHECK(out.classes.acts.shape() == Shape{2, 3});

  ModelConfig full;
  full.branched = false;
  CHECK(grid_chain(full) == std::vector<Index>{16, 12, 8, 4});
}

TEST_CASE("invalid architectures are rejected") {
  ModelConfig config;
  config.caps_layers = 4;
  CHECK_THROWS_AS(config.validate(), ConfigError);
  config = ModelConfig{};
  config.act_stride = 1;
  CHECK_THROWS_AS(config.validate(), ConfigError);
  config = ModelConfig{};
  config.routing.iterations = 0;
  CHECK_THROWS_AS(config.validate(), ConfigError);
}
