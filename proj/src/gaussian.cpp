#include "skelsplat/gaussian.hpp"

#include <stdexcept>

namespace skelsplat {

void GaussianSet::resize(int n) {
  positions.resize(n, 3);
  rotations.resize(n, 4);
  log_scales.resize(n, 3);
  opacity_logits.resize(n);
  colors.resize(n, 3);
}

Gaussian3D GaussianSet::get(int i) const {
  Gaussian3D g;
  g.position = positions.row(i).transpose();
  g.rotation = rotations.row(i).transpose();
  g.log_scale = log_scales.row(i).transpose();
  g.opacity_logit = opacity_logits[i];
  g.color = colors.row(i).transpose();
  return g;
}

void GaussianSet::set(int i, const Gaussian3D& g) {
  positions.row(i) = g.position.transpose();
  rotations.row(i) = g.rotation.transpose();
  log_scales.row(i) = g.log_scale.transpose();
  opacity_logits[i] = g.opacity_logit;
  colors.row(i) = g.color.transpose();
}

void GaussianSet::push_back(const Gaussian3D& g) {
  const int n = size();
  positions.conservativeResize(n + 1, 3);
  rotations.conservativeResize(n + 1, 4);
  log_scales.conservativeResize(n + 1, 3);
  opacity_logits.conservativeResize(n + 1);
  colors.conservativeResize(n + 1, 3);
  set(n, g);
}

void GaussianSet::append(const GaussianSet& other) {
  const int n = size();
  const int m = other.size();
  positions.conservativeResize(n + m, 3);
  rotations.conservativeResize(n + m, 4);
  log_scales.conservativeResize(n + m, 3);
  opacity_logits.conservativeResize(n + m);
  colors.conservativeResize(n + m, 3);
  if (m == 0) return;
  positions.bottomRows(m) = other.positions;
  rotations.bottomRows(m) = other.rotations;
  log_scales.bottomRows(m) = other.log_scales;
  opacity_logits.tail(m) = other.opacity_logits;
  colors.bottomRows(m) = other.colors;
}

void GaussianSet::validate() const {
  if (!positions.allFinite() || !rotations.allFinite() || !log_scales.allFinite() ||
      !opacity_logits.allFinite() || !colors.allFinite()) {
    throw std::invalid_argument("Gaussian attributes must be finite");
  }
  for (int i = 0; i < size(); ++i) {
    if (rotations.row(i).norm() == 0.0) throw std::invalid_argument("zero quaternion in Gaussian set");
  }
}

Mat3 covariance(const Gaussian3D& g) {
  const Mat3 r = rotation_of(g.rotation);
  const Vec3 s2 = (2.0 * g.log_scale).array().exp();
  return r * s2.asDiagonal() * r.transpose();
}

double evaluate(const Gaussian3D& g, const Vec3& x) {
  // Σ⁻¹ = R diag(1/s²) Rᵀ, so the quadratic form is Σ_k ((Rᵀd)_k / s_k)².
  const Mat3 r = rotation_of(g.rotation);
  const Vec3 local = r.transpose() * (x - g.position);
  const Vec3 inv_s = (-g.log_scale).array().exp();
  const double q = (local.array() * inv_s.array()).square().sum();
  return std::exp(-0.5 * q);
}

Vec4 rotation_matrix_backward(const Vec4& q_raw, const Mat3& g) {
  const double norm = q_raw.norm();
  const Vec4 q = q_raw / norm;
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Vec4 dq;
  dq[0] = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
  dq[1] = 2.0 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) +
                 z * g(2, 0) + w * g(2, 1) - 2.0 * x * g(2, 2));
  dq[2] = 2.0 * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) -
                 w * g(2, 0) + z * g(2, 1) - 2.0 * y * g(2, 2));
  dq[3] = 2.0 * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1) +
                 y * g(1, 2) + x * g(2, 0) + y * g(2, 1));
  // through the normalization q / |q|
  return (dq - q * q.dot(dq)) / norm;
}

CovarianceGrad covariance_backward(const Gaussian3D& g, const Mat3& d_sigma) {
  const Mat3 r = rotation_of(g.rotation);
  const Vec3 s = g.scale();
  const Mat3 m = r * s.asDiagonal();
  // Σ = M Mᵀ
  const Mat3 d_m = (d_sigma + d_sigma.transpose()) * m;
  const Mat3 rt_dm = r.transpose() * d_m;
  CovarianceGrad out;
  for (int k = 0; k < 3; ++k) out.log_scale[k] = rt_dm(k, k) * s[k];
  const Mat3 d_r = d_m * s.asDiagonal();
  out.rotation = rotation_matrix_backward(g.rotation, d_r);
  return out;
}

int HybridAvatar::count(GaussianKind k) const {
  int c = 0;
  for (auto v : kind) c += (v == k);
  return c;
}

void HybridAvatar::validate(int num_joints) const {
  const int n = size();
  if (static_cast<int>(kind.size()) != n || static_cast<int>(bindings.size()) != n) {
    throw std::invalid_argument("avatar kind/binding tables do not match Gaussian count");
  }
  if (lbs_weights.rows() != n || lbs_weights.cols() != num_joints) {
    throw std::invalid_argument("avatar lbs_weights have wrong dimensions");
  }
  if (static_cast<int>(anchor_vertices.size()) != n) {
    throw std::invalid_argument("avatar anchor table does not match Gaussian count");
  }
  for (int i = 0; i < n; ++i) {
    if (kind[i] == GaussianKind::unconstrained) {
      if (lbs_weights.row(i).minCoeff() < 0.0 || std::abs(lbs_weights.row(i).sum() - 1.0) > 1e-6) {
        throw std::invalid_argument("lbs weight row " + std::to_string(i) + " is not stochastic");
      }
    } else {
      const Vec3& b = bindings[i].barycentric;
      if (b.minCoeff() < 0.0 || std::abs(b.sum() - 1.0) > 1e-6) {
        throw std::invalid_argument("barycentric coordinates of " + std::to_string(i) + " are invalid");
      }
      if (bindings[i].triangle < 0) throw std::invalid_argument("mesh-binding Gaussian without triangle");
    }
  }
  gaussians.validate();
}

}  // namespace skelsplat
