#pragma once

#include "skelsplat/math.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace skelsplat {

using Quats = Eigen::Matrix<double, Eigen::Dynamic, 4, Eigen::RowMajor>;

/// One 3D Gaussian primitive. Rotation is a (w, x, y, z) quaternion; it is
/// normalized wherever a rotation matrix is formed.
struct Gaussian3D {
  Vec3 position = Vec3::Zero();
  Vec4 rotation = Vec4(1, 0, 0, 0);
  Vec3 log_scale = Vec3::Zero();
  double opacity_logit = 0.0;
  Vec3 color = Vec3::Constant(0.5);

  double opacity() const { return sigmoid(opacity_logit); }
  Vec3 scale() const { return log_scale.array().exp(); }
};

/// Struct-of-arrays storage for Gaussian primitives.
struct GaussianSet {
  Points positions;
  Quats rotations;
  Points log_scales;
  VecX opacity_logits;
  Points colors;

  GaussianSet() = default;
  explicit GaussianSet(int n) { resize(n); }

  int size() const { return static_cast<int>(positions.rows()); }
  void resize(int n);
  Gaussian3D get(int i) const;
  void set(int i, const Gaussian3D& g);
  void push_back(const Gaussian3D& g);
  /// Appends every member of other.
  void append(const GaussianSet& other);
  /// Throws std::invalid_argument on non-finite attributes or zero quaternions.
  void validate() const;
};

/// Σ = R diag(s²) Rᵀ.
Mat3 covariance(const Gaussian3D& g);

/// exp(-½ (x-p)ᵀ Σ⁻¹ (x-p)).
double evaluate(const Gaussian3D& g, const Vec3& x);

/// Gradients of a scalar through Σ(q, log_scale), given dL/dΣ (full 3x3).
struct CovarianceGrad {
  Vec4 rotation = Vec4::Zero();
  Vec3 log_scale = Vec3::Zero();
};
CovarianceGrad covariance_backward(const Gaussian3D& g, const Mat3& d_sigma);

/// dL/dq (raw, un-normalized quaternion) given dL/dR where R = R(q/|q|).
Vec4 rotation_matrix_backward(const Vec4& q_raw, const Mat3& d_rotation);

// ---- hybrid avatar ---------------------------------------------------------------

enum class GaussianKind : std::uint8_t { unconstrained = 0, mesh_binding = 1 };

/// Attachment of a mesh-binding Gaussian to a template triangle.
struct MeshBinding {
  std::string part;
  int triangle = -1;
  Vec3 barycentric = Vec3::Zero();
  double normal_offset = 0.0;
};

/// Unconstrained plus mesh-binding Gaussians in canonical space.
struct HybridAvatar {
  GaussianSet gaussians;
  std::vector<GaussianKind> kind;
  std::vector<MeshBinding> bindings;  // entries meaningful for mesh_binding members only
  MatX lbs_weights;                   // N x N_j, zero rows for mesh_binding members
  VecX part_shape;                    // shape then expression coefficients
  std::vector<int> anchor_vertices;   // nearest template vertex per Gaussian (-1 for bound)
  std::string template_path;
  std::string field_path;

  int size() const { return gaussians.size(); }
  int count(GaussianKind k) const;
  /// Checks partition, weight-row and barycentric invariants.
  void validate(int num_joints) const;
};

}  // namespace skelsplat
