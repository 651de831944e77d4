#include "qcaps/nn_blocks.hpp"

#include <cmath>
#include <vector>

#include "qcaps/error.hpp"

namespace qcaps {

template <typename Scalar>
Var<Scalar> batch_norm(const Var<Scalar>& x, const BatchNormParams<Scalar>& params, const BatchNormOptions& options) {
  if (x.ndim() != 4) throw ShapeMismatch("ShapeMismatch: batch_norm expects [N, C, H, W], got " + shape_string(x.shape()));
  const Index n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  const Shape cs{c};
  if (params.scale.shape() != cs || params.shift.shape() != cs || params.running_mean.shape() != cs ||
      params.running_var.shape() != cs) {
    throw ShapeMismatch("ShapeMismatch: batch_norm parameters for " + std::to_string(c) + " channels");
  }
  const Index count = n * plane;
  const Scalar* px = x.value().data();
  std::vector<Scalar> mean(static_cast<std::size_t>(c)), inv_std(static_cast<std::size_t>(c));
  if (options.training) {
    Scalar* rm = params.running_mean.node()->value.data();
    Scalar* rv = params.running_var.node()->value.data();
    for (Index ch = 0; ch < c; ++ch) {
      double s = 0, ss = 0;
      for (Index b = 0; b < n; ++b) {
        const Scalar* p = px + (b * c + ch) * plane;
        for (Index k = 0; k < plane; ++k) s += p[k];
      }
      const double mu = s / static_cast<double>(count);
      for (Index b = 0; b < n; ++b) {
        const Scalar* p = px + (b * c + ch) * plane;
        for (Index k = 0; k < plane; ++k) ss += (p[k] - mu) * (p[k] - mu);
      }
      const double var = ss / static_cast<double>(count);
      mean[ch] = static_cast<Scalar>(mu);
      inv_std[ch] = static_cast<Scalar>(1.0 / std::sqrt(var + options.eps));
      if (options.update_running) {
        rm[ch] = static_cast<Scalar>(options.momentum * rm[ch] + (1.0 - options.momentum) * mu);
        rv[ch] = static_cast<Scalar>(options.momentum * rv[ch] + (1.0 - options.momentum) * var);
      }
    }
  } else {
    for (Index ch = 0; ch < c; ++ch) {
      mean[ch] = params.running_mean.value()[ch];
      inv_std[ch] = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(params.running_var.value()[ch]) + options.eps));
    }
  }

  Tensor<Scalar> xhat(x.shape());
  Tensor<Scalar> out(x.shape());
  const Scalar* gamma = params.scale.value().data();
  const Scalar* beta = params.shift.value().data();
  for (Index b = 0; b < n; ++b) {
    for (Index ch = 0; ch < c; ++ch) {
      const Index base = (b * c + ch) * plane;
      for (Index k = 0; k < plane; ++k) {
        const Scalar h = (px[base + k] - mean[ch]) * inv_std[ch];
        xhat[base + k] = h;
        out[base + k] = gamma[ch] * h + beta[ch];
      }
    }
  }

  const bool training = options.training;
  return make_op<Scalar>(
      std::move(out), {x, params.scale, params.shift},
      [x, scale = params.scale, shift = params.shift, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c,
       plane, count, training](Node<Scalar>& self) {
        const Scalar* g = self.grad.data();
        const Scalar* gamma = scale.value().data();
        for (Index ch = 0; ch < c; ++ch) {
          double sum_g = 0, sum_gh = 0;
          for (Index b = 0; b < n; ++b) {
            const Index base = (b * c + ch) * plane;
            for (Index k = 0; k < plane; ++k) {
              sum_g += g[base + k];
              sum_gh += static_cast<double>(g[base + k]) * xhat[base + k];
            }
          }
          if (scale.requires_grad()) scale.node()->grad_ref()[ch] += static_cast<Scalar>(sum_gh);
          if (shift.requires_grad()) shift.node()->grad_ref()[ch] += static_cast<Scalar>(sum_g);
          if (!x.requires_grad()) continue;
          Scalar* gx = x.node()->grad_ref().data();
          const double k_scale = static_cast<double>(gamma[ch]) * inv_std[ch];
          const double mean_g = sum_g / static_cast<double>(count);
          const double mean_gh = sum_gh / static_cast<double>(count);
          for (Index b = 0; b < n; ++b) {
            const Index base = (b * c + ch) * plane;
            for (Index k = 0; k < plane; ++k) {
              const double d = training ? g[base + k] - mean_g - xhat[base + k] * mean_gh : g[base + k];
              gx[base + k] += static_cast<Scalar>(k_scale * d);
            }
          }
        }
      });
}

template <typename Scalar>
Var<Scalar> residual_block(const Var<Scalar>& x, const ResidualBlockParams<Scalar>& params,
                           const BatchNormOptions& norm) {
  if (x.ndim() != 4 || x.dim(1) != params.conv1.dim(1) || x.dim(1) != params.skip.dim(1)) {
    throw ShapeMismatch("ShapeMismatch: residual block expects " + std::to_string(params.conv1.dim(1)) +
                        " input channels, got " + shape_string(x.shape()));
  }
  if (x.dim(2) < 3 || x.dim(3) < 3) throw ShapeMismatch("ShapeMismatch: residual block input smaller than 3x3");
  Var<Scalar> main = relu(batch_norm(conv2d(x, params.conv1, params.stride, 1), params.norm1, norm));
  main = batch_norm(conv2d(main, params.conv2, 1, 1), params.norm2, norm);
  const Var<Scalar> skip = batch_norm(conv2d(x, params.skip, params.stride, 0), params.norm_skip, norm);
  return relu(add(main, skip));
}

template <typename Scalar>
Var<Scalar> projection(const Var<Scalar>& x, const ProjectionParams<Scalar>& params, const BatchNormOptions& norm) {
  return batch_norm(conv2d(x, params.weight, 1, 0), params.norm, norm);
}

namespace {

template <typename Scalar>
Var<Scalar> run_blocks(Var<Scalar> x, const std::vector<ResidualBlockParams<Scalar>>& blocks,
                       const BatchNormOptions& norm) {
  for (const auto& block : blocks) x = residual_block(x, block, norm);
  return x;
}

template <typename Scalar>
Var<Scalar> split_pose_channels(const Var<Scalar>& features) {
  const Index ch = features.dim(1);
  if (ch % 3 != 0) throw ShapeMismatch("ShapeMismatch: pose head channels not a multiple of 3");
  return reshape(features, Shape{features.dim(0), ch / 3, 3, features.dim(2), features.dim(3)});
}

}  // namespace

template <typename Scalar>
Var<Scalar> pose_branch(const Var<Scalar>& image, const PoseBranchParams<Scalar>& params,
                        const BatchNormOptions& norm) {
  return split_pose_channels(projection(run_blocks(image, params.blocks, norm), params.head, norm));
}

template <typename Scalar>
Var<Scalar> activation_branch(const Var<Scalar>& image, const ActivationBranchParams<Scalar>& params,
                              const BatchNormOptions& norm) {
  return sigmoid(projection(run_blocks(image, params.blocks, norm), params.head, norm));
}

template <typename Scalar>
BranchOutput<Scalar> shared_trunk(const Var<Scalar>& image, const TrunkParams<Scalar>& params,
                                  const BatchNormOptions& norm) {
  const Var<Scalar> features = run_blocks(image, params.blocks, norm);
  return {split_pose_channels(projection(features, params.pose_head, norm)),
          sigmoid(projection(features, params.act_head, norm))};
}

template <typename Scalar>
CapsuleField<Scalar> assemble_primary_capsules(const BranchOutput<Scalar>& branches) {
  const Shape& ps = branches.poses.shape();
  const Shape& as = branches.acts.shape();
  if (ps.size() != 5 || ps[2] != 3 || as.size() != 4 || ps[0] != as[0] || ps[1] != as[1] || ps[3] != as[2] ||
      ps[4] != as[3]) {
    throw AlignmentError("AlignmentError: pose grid " + shape_string(ps) + " and activation grid " +
                         shape_string(as) + " are not aligned");
  }
  return CapsuleField<Scalar>{permute(branches.poses, {0, 3, 4, 1, 2}), permute(branches.acts, {0, 2, 3, 1})};
}

#define QCAPS_INSTANTIATE_NN(S)                                                                                  \
  template Var<S> batch_norm(const Var<S>&, const BatchNormParams<S>&, const BatchNormOptions&);                \
  template Var<S> residual_block(const Var<S>&, const ResidualBlockParams<S>&, const BatchNormOptions&);         \
  template Var<S> projection(const Var<S>&, const ProjectionParams<S>&, const BatchNormOptions&);               \
  template Var<S> pose_branch(const Var<S>&, const PoseBranchParams<S>&, const BatchNormOptions&);              \
  template Var<S> activation_branch(const Var<S>&, const ActivationBranchParams<S>&, const BatchNormOptions&);  \
  template BranchOutput<S> shared_trunk(const Var<S>&, const TrunkParams<S>&, const BatchNormOptions&);         \
  template CapsuleField<S> assemble_primary_capsules(const BranchOutput<S>&);

QCAPS_INSTANTIATE_NN(float)
QCAPS_INSTANTIATE_NN(double)

}  // namespace qcaps
