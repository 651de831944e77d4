#include "qcaps/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "qcaps/error.hpp"

namespace qcaps {

GradcheckResult finite_difference_check(const std::function<Var<double>()>& f, const std::vector<Var<double>>& inputs,
                                        const std::vector<std::string>& names, const GradcheckOptions& options) {
  if (!(options.step >= 1e-7 && options.step <= 1e-3)) {
    throw ConfigError("gradcheck step must lie in [1e-7, 1e-3]");
  }
  for (const auto& in : inputs) in.node()->grad = Tensor<double>();
  {
    const Var<double> loss = f();
    backward(loss);
  }
  std::vector<Tensor<double>> analytic;
  analytic.reserve(inputs.size());
  for (const auto& in : inputs) {
    Tensor<double> g = in.grad().empty() ? Tensor<double>(in.shape()) : in.grad();
    if (options.corrupt_gradient) options.corrupt_gradient(g);
    analytic.push_back(std::move(g));
  }

  NoGradGuard no_grad;
  std::mt19937_64 rng(options.seed);
  GradcheckResult result;
  const double h = options.step;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Var<double> in = inputs[k];
    Tensor<double>& x = in.mutable_value();
    std::vector<Index> coords(static_cast<std::size_t>(x.size()));
    std::iota(coords.begin(), coords.end(), Index{0});
    if (options.max_coords_per_input > 0 && x.size() > options.max_coords_per_input) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<std::size_t>(options.max_coords_per_input));
      std::sort(coords.begin(), coords.end());
    }
    for (Index c : coords) {
      const double saved = x[c];
      x[c] = saved + h;
      const double up = f().value().item();
      x[c] = saved - h;
      const double down = f().value().item();
      x[c] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double g = analytic[k][c];
      const double rel = std::abs(fd - g) / std::max(1.0, std::abs(g));
      ++result.coordinates_checked;
      if (!(rel <= result.max_relative_error)) {
        result.max_relative_error = std::isnan(rel) ? INFINITY : rel;
        result.worst_input = k < names.size() ? names[k] : std::to_string(k);
        result.worst_coordinate = c;
      }
    }
  }
  return result;
}

GradcheckResult finite_difference_check(const std::function<Var<double>()>& f, ParameterStore<double>& params,
                                        const GradcheckOptions& options) {
  std::vector<Var<double>> inputs;
  std::vector<std::string> names;
  for (const auto& p : params.all()) {
    if (!p.trainable) continue;
    inputs.push_back(p.var);
    names.push_back(p.name);
  }
  return finite_difference_check(f, inputs, names, options);
}

}  // namespace qcaps
