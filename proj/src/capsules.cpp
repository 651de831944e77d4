#include "qcaps/capsules.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "qcaps/error.hpp"
#include "qcaps/quaternion.hpp"

namespace qcaps {

template <typename Scalar>
Tensor<Scalar> CapsuleField<Scalar>::poses_channels_first() const {
  const Index b = batch(), h = height(), w = width(), t = types();
  Tensor<Scalar> out(Shape{b, t, 3, h, w});
  const Tensor<Scalar>& p = poses.value();
  for (Index n = 0; n < b; ++n)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x)
        for (Index k = 0; k < t; ++k)
          for (Index c = 0; c < 3; ++c) out.at({n, k, c, y, x}) = p.at({n, y, x, k, c});
  return out;
}

template <typename Scalar>
Tensor<Scalar> CapsuleField<Scalar>::acts_channels_first() const {
  const Index b = batch(), h = height(), w = width(), t = types();
  Tensor<Scalar> out(Shape{b, t, h, w});
  const Tensor<Scalar>& a = acts.value();
  for (Index n = 0; n < b; ++n)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x)
        for (Index k = 0; k < t; ++k) out.at({n, k, y, x}) = a.at({n, y, x, k});
  return out;
}

ReceptiveFields receptive_fields(Index height, Index width, Index kernel, Index stride) {
  if (kernel < 1 || stride < 1) throw ConfigError("kernel and stride must be >= 1");
  if (height < kernel || width < kernel) {
    std::ostringstream msg;
    msg << "FieldTooSmall: " << height << "x" << width << " grid for kernel " << kernel;
    throw FieldTooSmall(msg.str());
  }
  ReceptiveFields rf;
  rf.in_height = height;
  rf.in_width = width;
  rf.kernel = kernel;
  rf.stride = stride;
  rf.out_height = (height - kernel) / stride + 1;
  rf.out_width = (width - kernel) / stride + 1;
  rf.table.positions = rf.out_height * rf.out_width;
  rf.table.width = kernel * kernel;
  rf.table.locations.reserve(static_cast<std::size_t>(rf.table.positions * rf.table.width));
  for (Index oy = 0; oy < rf.out_height; ++oy)
    for (Index ox = 0; ox < rf.out_width; ++ox)
      for (Index ky = 0; ky < kernel; ++ky)
        for (Index kx = 0; kx < kernel; ++kx)
          rf.table.locations.push_back((oy * stride + ky) * width + ox * stride + kx);
  return rf;
}

template <typename Scalar>
Var<Scalar> extract_receptive_fields(const CapsuleField<Scalar>& field, const ReceptiveFields& rf) {
  const Index b = field.batch(), t = field.types();
  if (field.height() != rf.in_height || field.width() != rf.in_width) {
    throw ShapeMismatch("ShapeMismatch: receptive fields built for a different grid");
  }
  Var<Scalar> flat = reshape(field.poses, Shape{b, field.height() * field.width(), t, 3});
  Var<Scalar> gathered = index_select(flat, 1, rf.table.locations);
  return reshape(gathered, Shape{b, rf.table.positions, rf.table.width * t, 3});
}

template <typename Scalar>
Var<Scalar> rotor_quaternions(const Var<Scalar>& theta, const Var<Scalar>& axis) {
  Shape lead = axis.shape();
  if (lead.empty() || lead.back() != 3) {
    throw ShapeMismatch("ShapeMismatch: rotor axis must end in 3, got " + shape_string(axis.shape()));
  }
  lead.pop_back();
  if (theta.shape() != lead) {
    throw ShapeMismatch("ShapeMismatch: theta " + shape_string(theta.shape()) + " for axis " +
                        shape_string(axis.shape()));
  }
  Var<Scalar> len = sqrt(sum(square(axis), -1, true));
  for (Scalar v : len.value().values()) {
    if (!(v >= Scalar(kAxisEpsilon))) {
      std::ostringstream msg;
      msg << "DegenerateAxis: rotor axis norm " << v << " below " << kAxisEpsilon;
      throw DegenerateAxis(msg.str());
    }
  }
  Shape col = lead;
  col.push_back(1);
  Var<Scalar> unit = div(axis, len);
  Var<Scalar> c = reshape(cos(theta), col);
  Var<Scalar> s = reshape(sin(theta), col);
  return concat<Scalar>({c, mul(s, unit)}, -1);
}

template <typename Scalar>
Var<Scalar> rotation_matrices(const Var<Scalar>& rotors) {
  if (rotors.ndim() < 1 || rotors.shape().back() != 4) {
    throw ShapeMismatch("ShapeMismatch: rotors must end in 4, got " + shape_string(rotors.shape()));
  }
  Shape out_shape = rotors.shape();
  out_shape.back() = 3;
  out_shape.push_back(3);
  const Index count = rotors.value().size() / 4;
  Tensor<Scalar> out(out_shape);
  for (Index k = 0; k < count; ++k) {
    const Scalar* q = rotors.value().data() + 4 * k;
    const Eigen::Matrix<Scalar, 3, 3> r = rotation_block(Quaternion<Scalar>(q[0], q[1], q[2], q[3]));
    Scalar* dst = out.data() + 9 * k;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) dst[3 * i + j] = r(i, j);
  }
  return make_op<Scalar>(std::move(out), {rotors}, [rotors, count](Node<Scalar>& self) {
    Scalar* gq = rotors.node()->grad_ref().data();
    for (Index k = 0; k < count; ++k) {
      const Scalar* q = rotors.value().data() + 4 * k;
      const Scalar* g = self.grad.data() + 9 * k;
      const Scalar a = q[0], b = q[1], c = q[2], d = q[3];
      // Partial derivatives of each entry w.r.t. (a, b, c, d), row-major entries.
      const Scalar jac[9][4] = {
          {2 * a, 2 * b, -2 * c, -2 * d}, {-2 * d, 2 * c, 2 * b, -2 * a}, {2 * c, 2 * d, 2 * a, 2 * b},
          {2 * d, 2 * c, 2 * b, 2 * a},   {2 * a, -2 * b, 2 * c, -2 * d}, {-2 * b, -2 * a, 2 * d, 2 * c},
          {-2 * c, 2 * d, -2 * a, 2 * b}, {2 * b, 2 * a, 2 * d, 2 * c},   {2 * a, -2 * b, -2 * c, 2 * d},
      };
      Scalar* dst = gq + 4 * k;
      for (int e = 0; e < 9; ++e)
        for (int m = 0; m < 4; ++m) dst[m] += g[e] * jac[e][m];
    }
  });
}

template <typename Scalar>
Var<Scalar> rotate_votes(const Var<Scalar>& poses, const Var<Scalar>& mats) {
  const Shape& ps = poses.shape();
  const Shape& ms = mats.shape();
  if (ps.size() != 4 || ps[3] != 3 || ms.size() != 5 || ms[1] != ps[2] || ms[3] != 3 || ms[4] != 3) {
    throw ShapeMismatch("ShapeMismatch: rotate_votes poses " + shape_string(ps) + " mats " + shape_string(ms));
  }
  const Index batch = ps[0], locs = ps[1], tin = ps[2];
  const Index groups = ms[0], tout = ms[2];
  Tensor<Scalar> out(Shape{batch, locs, tin, tout, 3});
  const Scalar* pp = poses.value().data();
  const Scalar* pm = mats.value().data();
  Scalar* po = out.data();
  for (Index b = 0; b < batch; ++b) {
    for (Index v = 0; v < locs; ++v) {
      const Index g = v % groups;
      for (Index i = 0; i < tin; ++i) {
        const Scalar* u = pp + ((b * locs + v) * tin + i) * 3;
        const Scalar* m = pm + (g * tin + i) * tout * 9;
        Scalar* o = po + ((b * locs + v) * tin + i) * tout * 3;
        for (Index j = 0; j < tout; ++j) {
          const Scalar* mj = m + j * 9;
          o[3 * j + 0] = mj[0] * u[0] + mj[1] * u[1] + mj[2] * u[2];
          o[3 * j + 1] = mj[3] * u[0] + mj[4] * u[1] + mj[5] * u[2];
          o[3 * j + 2] = mj[6] * u[0] + mj[7] * u[1] + mj[8] * u[2];
        }
      }
    }
  }
  return make_op<Scalar>(std::move(out), {poses, mats}, [poses, mats, batch, locs, tin, groups, tout](Node<Scalar>& self) {
    const Scalar* pp = poses.value().data();
    const Scalar* pm = mats.value().data();
    Scalar* gp = poses.requires_grad() ? poses.node()->grad_ref().data() : nullptr;
    Scalar* gm = mats.requires_grad() ? mats.node()->grad_ref().data() : nullptr;
    for (Index b = 0; b < batch; ++b) {
      for (Index v = 0; v < locs; ++v) {
        const Index grp = v % groups;
        for (Index i = 0; i < tin; ++i) {
          const Index pidx = ((b * locs + v) * tin + i) * 3;
          const Scalar* u = pp + pidx;
          const Scalar* m = pm + (grp * tin + i) * tout * 9;
          const Scalar* g = self.grad.data() + ((b * locs + v) * tin + i) * tout * 3;
          Scalar gu0 = 0, gu1 = 0, gu2 = 0;
          for (Index j = 0; j < tout; ++j) {
            const Scalar* mj = m + j * 9;
            const Scalar* gj = g + 3 * j;
            gu0 += mj[0] * gj[0] + mj[3] * gj[1] + mj[6] * gj[2];
            gu1 += mj[1] * gj[0] + mj[4] * gj[1] + mj[7] * gj[2];
            gu2 += mj[2] * gj[0] + mj[5] * gj[1] + mj[8] * gj[2];
            if (gm) {
              Scalar* dm = gm + (grp * tin + i) * tout * 9 + j * 9;
              for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 3; ++c) dm[3 * r + c] += gj[r] * u[c];
            }
          }
          if (gp) {
            gp[pidx + 0] += gu0;
            gp[pidx + 1] += gu1;
            gp[pidx + 2] += gu2;
          }
        }
      }
    }
  });
}

namespace {

template <typename Scalar>
void check_params(const CapsLayerParams<Scalar>& p, Index groups, Index tin) {
  const Shape& ts = p.theta.shape();
  if (ts.size() != 3 || ts[0] != groups || ts[1] != tin || p.axis.shape() != Shape{ts[0], ts[1], ts[2], 3} ||
      p.beta_a.shape() != Shape{ts[2]} || p.beta_u.shape() != Shape{ts[2]}) {
    throw ShapeMismatch("ShapeMismatch: capsule layer parameters theta " + shape_string(ts) + " for " +
                        std::to_string(groups) + " rotor groups and " + std::to_string(tin) + " input types");
  }
}

template <typename Scalar>
void check_field(const CapsuleField<Scalar>& f) {
  const Shape& ps = f.poses.shape();
  if (ps.size() != 5 || ps[4] != 3 || f.acts.shape() != Shape{ps[0], ps[1], ps[2], ps[3]}) {
    throw ShapeMismatch("ShapeMismatch: capsule field poses " + shape_string(ps) + " acts " +
                        shape_string(f.acts.shape()));
  }
}

}  // namespace

template <typename Scalar>
CapsuleField<Scalar> conv_capsule_layer(const CapsuleField<Scalar>& field, const CapsLayerParams<Scalar>& params,
                                        const CapsLayerOptions& options) {
  check_field(field);
  const Index b = field.batch(), h = field.height(), w = field.width(), tin = field.types();
  const ReceptiveFields rf = receptive_fields(h, w, options.kernel, options.stride);
  const Index groups = options.per_kernel_offset_rotors ? rf.table.width : 1;
  check_params(params, groups, tin);
  const Index tout = params.theta.dim(2);

  const Var<Scalar> mats = rotation_matrices(rotor_quaternions(params.theta, params.axis));
  Var<Scalar> poses = reshape(field.poses, Shape{b, h * w, tin, 3});
  Var<Scalar> acts = reshape(field.acts, Shape{b, h * w, tin});
  WindowTable table = rf.table;
  if (options.per_kernel_offset_rotors) {
    // Gather windows first so that vote slot v % (K*K) is the kernel offset.
    poses = index_select(poses, 1, rf.table.locations);
    acts = index_select(acts, 1, rf.table.locations);
    for (Index i = 0; i < static_cast<Index>(table.locations.size()); ++i) table.locations[i] = i;
  }
  const Var<Scalar> votes = rotate_votes(poses, mats);
  const Var<Scalar> routed = em_routing(votes, acts, params.beta_a, params.beta_u, table, options.routing);
  const Shape grid{b, rf.out_height, rf.out_width, tout};
  Shape pose_shape = grid;
  pose_shape.push_back(3);
  return CapsuleField<Scalar>{reshape(slice(routed, -1, 0, 3), pose_shape), reshape(slice(routed, -1, 3, 4), grid)};
}

template <typename Scalar>
ClassCapsules<Scalar> class_capsule_layer(const CapsuleField<Scalar>& field, const CapsLayerParams<Scalar>& params,
                                          const CapsLayerOptions& options) {
  check_field(field);
  const Index b = field.batch(), h = field.height(), w = field.width(), tin = field.types();
  check_params(params, 1, tin);
  const Index classes = params.theta.dim(2);

  const Var<Scalar> mats = rotation_matrices(rotor_quaternions(params.theta, params.axis));
  const Var<Scalar> poses = reshape(field.poses, Shape{b, h * w, tin, 3});
  const Var<Scalar> acts = reshape(field.acts, Shape{b, h * w, tin});
  Var<Scalar> votes = rotate_votes(poses, mats);
  if (options.coordinate_addition) {
    Tensor<Scalar> coords(Shape{1, h * w, 1, 1, 3});
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) {
        coords.at({0, y * w + x, 0, 0, 0}) = (static_cast<Scalar>(y) + Scalar(0.5)) / static_cast<Scalar>(h);
        coords.at({0, y * w + x, 0, 0, 1}) = (static_cast<Scalar>(x) + Scalar(0.5)) / static_cast<Scalar>(w);
      }
    }
    votes = add(votes, constant(std::move(coords)));
  }
  const Var<Scalar> routed =
      em_routing(votes, acts, params.beta_a, params.beta_u, WindowTable::all(h * w), options.routing);
  return ClassCapsules<Scalar>{reshape(slice(routed, -1, 3, 4), Shape{b, classes}),
                               reshape(slice(routed, -1, 0, 3), Shape{b, classes, 3})};
}

#define QCAPS_INSTANTIATE_CAPSULES(S)                                                                         \
  template struct CapsuleField<S>;                                                                            \
  template Var<S> extract_receptive_fields(const CapsuleField<S>&, const ReceptiveFields&);                   \
  template Var<S> rotor_quaternions(const Var<S>&, const Var<S>&);                                            \
  template Var<S> rotation_matrices(const Var<S>&);                                                           \
  template Var<S> rotate_votes(const Var<S>&, const Var<S>&);                                                 \
  template CapsuleField<S> conv_capsule_layer(const CapsuleField<S>&, const CapsLayerParams<S>&,              \
                                              const CapsLayerOptions&);                                       \
  template ClassCapsules<S> class_capsule_layer(const CapsuleField<S>&, const CapsLayerParams<S>&,            \
                                                const CapsLayerOptions&);

QCAPS_INSTANTIATE_CAPSULES(float)
QCAPS_INSTANTIATE_CAPSULES(double)

}  // namespace qcaps
