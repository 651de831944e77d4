#pragma once

// Quaternion algebra used by the capsule layers: Hamilton product, conjugate,
// reparameterized unit rotors, rotation of pure quaternions and the real 4x4
// embeddings that turn left/right multiplication into matrix products.
//
// Everything here is a pure function over values and is templated on the
// scalar type; float and double are the two supported instantiations.

#include <Eigen/Dense>

#include <cassert>
#include <cmath>
#include <ostream>
#include <sstream>
#include <type_traits>

#include "qcaps/error.hpp"

namespace qcaps {

/// Tolerances quoted for 64-bit; 32-bit ones are relaxed by 1e4.
template <typename Scalar>
constexpr Scalar precision_relax() {
  return std::is_same_v<Scalar, float> ? Scalar(1e4) : Scalar(1);
}

/// Smallest admissible raw rotor axis length.
inline constexpr double kAxisEpsilon = 1e-8;

/// Deviation of ||rotor|| from 1 above which `rotate` refuses the rotor.
template <typename Scalar>
constexpr Scalar unit_rotor_tolerance() {
  return std::is_same_v<Scalar, float> ? Scalar(1e-4) : Scalar(1e-6);
}

template <typename Scalar>
class Quaternion {
 public:
  using Vector3 = Eigen::Matrix<Scalar, 3, 1>;
  using Vector4 = Eigen::Matrix<Scalar, 4, 1>;

  Quaternion() : coeffs_(Vector4::Zero()) {}
  Quaternion(Scalar q0, Scalar q1, Scalar q2, Scalar q3) : coeffs_(q0, q1, q2, q3) {}
  explicit Quaternion(const Vector4& coeffs) : coeffs_(coeffs) {}
  Quaternion(Scalar s, const Vector3& v) : coeffs_(s, v.x(), v.y(), v.z()) {}

  static Quaternion identity() { return {Scalar(1), Scalar(0), Scalar(0), Scalar(0)}; }

  Scalar scalar() const { return coeffs_[0]; }
  Vector3 vec() const { return coeffs_.template tail<3>(); }
  const Vector4& coeffs() const { return coeffs_; }
  Scalar operator[](int i) const { return coeffs_[i]; }
  Scalar& operator[](int i) { return coeffs_[i]; }

  Scalar squared_norm() const { return coeffs_.squaredNorm(); }
  Scalar norm() const { return coeffs_.norm(); }

  bool operator==(const Quaternion& o) const { return coeffs_ == o.coeffs_; }

 private:
  Vector4 coeffs_;
};

/// Quaternion with the scalar part fixed at zero; capsule poses and votes.
template <typename Scalar>
class PureQuaternion {
 public:
  using Vector3 = Eigen::Matrix<Scalar, 3, 1>;

  PureQuaternion() : v_(Vector3::Zero()) {}
  PureQuaternion(Scalar v1, Scalar v2, Scalar v3) : v_(v1, v2, v3) {}
  explicit PureQuaternion(const Vector3& v) : v_(v) {}

  const Vector3& vec() const { return v_; }
  Scalar operator[](int i) const { return v_[i]; }
  Scalar norm() const { return v_.norm(); }
  Quaternion<Scalar> quaternion() const { return Quaternion<Scalar>(Scalar(0), v_); }

 private:
  Vector3 v_;
};

/// Learnable rotor: angle plus unnormalized axis. The materialized rotor is
/// [cos(theta), sin(theta) * axis / |axis|], which rotates by 2*theta.
template <typename Scalar>
struct RotorWeight {
  Scalar theta = Scalar(0);
  Eigen::Matrix<Scalar, 3, 1> raw_axis = Eigen::Matrix<Scalar, 3, 1>::UnitX();
};

template <typename Scalar>
using QuatMatrix4 = Eigen::Matrix<Scalar, 4, 4, Eigen::RowMajor>;

template <typename Scalar>
Quaternion<Scalar> hamilton_product(const Quaternion<Scalar>& q, const Quaternion<Scalar>& p) {
  const Scalar sq = q.scalar();
  const Scalar sp = p.scalar();
  const auto vq = q.vec();
  const auto vp = p.vec();
  return Quaternion<Scalar>(sq * sp - vq.dot(vp), sq * vp + sp * vq + vq.cross(vp));
}

template <typename Scalar>
Quaternion<Scalar> operator*(const Quaternion<Scalar>& q, const Quaternion<Scalar>& p) {
  return hamilton_product(q, p);
}

template <typename Scalar>
Quaternion<Scalar> conjugate(const Quaternion<Scalar>& q) {
  return Quaternion<Scalar>(q.scalar(), -q.vec());
}

template <typename Scalar>
Quaternion<Scalar> normalize_rotor(const RotorWeight<Scalar>& w) {
  const Scalar len = w.raw_axis.norm();
  if (!(len >= Scalar(kAxisEpsilon))) {
    std::ostringstream msg;
    msg << "DegenerateAxis: rotor axis norm " << len << " below " << kAxisEpsilon;
    throw DegenerateAxis(msg.str());
  }
  return Quaternion<Scalar>(std::cos(w.theta), std::sin(w.theta) * (w.raw_axis / len).eval());
}

/// rotor * r * conj(rotor). The scalar residual is clamped to exactly zero.
template <typename Scalar>
PureQuaternion<Scalar> rotate(const Quaternion<Scalar>& rotor, const PureQuaternion<Scalar>& r) {
  const Scalar deviation = std::abs(rotor.norm() - Scalar(1));
  if (!(deviation <= unit_rotor_tolerance<Scalar>())) {
    std::ostringstream msg;
    msg << "NonUnitRotor: |rotor| deviates from 1 by " << deviation;
    throw NonUnitRotor(msg.str());
  }
  const Quaternion<Scalar> out = hamilton_product(hamilton_product(rotor, r.quaternion()), conjugate(rotor));
  assert(std::abs(out.scalar()) <= Scalar(1e-10) * precision_relax<Scalar>() * (Scalar(1) + r.norm()));
  return PureQuaternion<Scalar>(out.vec());
}

/// Matrix M with M * vec(p) == vec(q * p) (q multiplies from the left).
template <typename Scalar>
QuatMatrix4<Scalar> right_embed(const Quaternion<Scalar>& q) {
  const Scalar a = q[0], b = q[1], c = q[2], d = q[3];
  QuatMatrix4<Scalar> m;
  m << a, -b, -c, -d,
       b,  a, -d,  c,
       c,  d,  a, -b,
       d, -c,  b,  a;
  return m;
}

/// Matrix M with M * vec(p) == vec(p * q) (q multiplies from the right).
template <typename Scalar>
QuatMatrix4<Scalar> left_embed(const Quaternion<Scalar>& q) {
  const Scalar a = q[0], b = q[1], c = q[2], d = q[3];
  QuatMatrix4<Scalar> m;
  m << a, -b, -c, -d,
       b,  a,  d, -c,
       c, -d,  a,  b,
       d,  c, -b,  a;
  return m;
}

/// Composed operator M = left_embed(w*) * right_embed(w), so M * vec(u) = vec(w * u * w*).
template <typename Scalar>
QuatMatrix4<Scalar> rotation_operator(const Quaternion<Scalar>& rotor) {
  return left_embed(conjugate(rotor)) * right_embed(rotor);
}

template <typename Scalar>
QuatMatrix4<Scalar> rotation_operator(const RotorWeight<Scalar>& w) {
  return rotation_operator(normalize_rotor(w));
}

/// Rotation matrix of a unit rotor (lower-right block of `rotation_operator`),
/// written out in closed form.
template <typename Scalar>
Eigen::Matrix<Scalar, 3, 3> rotation_block(const Quaternion<Scalar>& q) {
  const Scalar a = q[0], b = q[1], c = q[2], d = q[3];
  Eigen::Matrix<Scalar, 3, 3> r;
  r << a * a + b * b - c * c - d * d, Scalar(2) * (b * c - a * d), Scalar(2) * (b * d + a * c),
       Scalar(2) * (b * c + a * d), a * a - b * b + c * c - d * d, Scalar(2) * (c * d - a * b),
       Scalar(2) * (b * d - a * c), Scalar(2) * (c * d + a * b), a * a - b * b - c * c + d * d;
  return r;
}

template <typename Scalar>
std::ostream& operator<<(std::ostream& os, const Quaternion<Scalar>& q) {
  return os << '(' << q[0] << ", " << q[1] << ", " << q[2] << ", " << q[3] << ')';
}

}  // namespace qcaps
