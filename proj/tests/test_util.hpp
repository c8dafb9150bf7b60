#pragma once

#include "skelsplat/body_model.hpp"
#include "skelsplat/camera.hpp"
#include "skelsplat/gaussian.hpp"
#include "skelsplat/rng.hpp"

#include <algorithm>
#include <cmath>

namespace skelsplat::testing {

inline double relative_error(double analytic, double numeric, double floor = 1e-4) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

inline Quat random_rotation(Rng& rng) {
  Vec4 v(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  v.normalize();
  return to_quat(v);
}

inline Vec3 random_vec(Rng& rng, double lo, double hi) {
  return Vec3(rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi));
}

/// Chain of `joints` joints along +x with `verts_per_joint` vertices each, one-hot
/// skinned to their joint. Joint j sits at x = j; its vertices scatter around x = j + 0.5.
/// Two random shape columns, no expression columns, no faces.
inline BodyTemplate chain_template(int joints, int verts_per_joint, std::uint64_t seed = 1) {
  Rng rng(seed);
  BodyTemplate t;
  const int nv = joints * verts_per_joint;
  t.vertices_rest.resize(nv, 3);
  t.skin_weights = MatX::Zero(nv, joints);
  t.joint_regressor = MatX::Zero(joints, nv);
  for (int j = 0; j < joints; ++j) {
    t.parents.push_back(j - 1);
    t.joint_names.push_back("j" + std::to_string(j));
    for (int k = 0; k < verts_per_joint; ++k) {
      const int v = j * verts_per_joint + k;
      t.vertices_rest.row(v) = Vec3(j + 0.5 + rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3),
                                    rng.uniform(-0.3, 0.3)).transpose();
      t.skin_weights(v, j) = 1.0;
    }
  }
  // joint j is regressed from two dedicated vertices mirrored about (j, 0, 0)
  const int extra = 2 * joints;
  t.vertices_rest.conservativeResize(nv + extra, 3);
  t.skin_weights.conservativeResize(nv + extra, joints);
  t.skin_weights.bottomRows(extra).setZero();
  t.joint_regressor.conservativeResize(joints, nv + extra);
  t.joint_regressor.rightCols(extra).setZero();
  for (int j = 0; j < joints; ++j) {
    const int a = nv + 2 * j, b = a + 1;
    t.vertices_rest.row(a) = Vec3(j, 0.1, 0.0).transpose();
    t.vertices_rest.row(b) = Vec3(j, -0.1, 0.0).transpose();
    t.skin_weights(a, j) = 1.0;
    t.skin_weights(b, j) = 1.0;
    t.joint_regressor(j, a) = 0.5;
    t.joint_regressor(j, b) = 0.5;
  }
  const int total = nv + extra;
  t.num_shape = 2;
  t.num_expression = 0;
  t.shape_basis = MatX::Zero(3 * total, 2);
  for (int r = 0; r < 3 * total; ++r) {
    t.shape_basis(r, 0) = rng.uniform(-0.1, 0.1);
    t.shape_basis(r, 1) = rng.uniform(-0.1, 0.1);
  }
  t.faces.resize(0, 3);
  t.validate();
  return t;
}

inline Camera test_camera(int w, int h, double distance = 3.0, double fov_deg = 50.0) {
  return Camera::look_at(Vec3(0, 0, distance), Vec3::Zero(), Vec3::UnitY(), fov_deg * kPi / 180.0, w, h);
}

inline GaussianSet random_gaussians(Rng& rng, int n, double extent, double scale_lo, double scale_hi,
                                    double opacity_lo = 0.2, double opacity_hi = 0.8) {
  GaussianSet gs(n);
  for (int i = 0; i < n; ++i) {
    Gaussian3D g;
    g.position = random_vec(rng, -extent, extent);
    g.rotation = to_wxyz(random_rotation(rng));
    for (int k = 0; k < 3; ++k) g.log_scale[k] = std::log(rng.uniform(scale_lo, scale_hi));
    g.opacity_logit = logit(rng.uniform(opacity_lo, opacity_hi));
    g.color = random_vec(rng, 0.0, 1.0);
    gs.set(i, g);
  }
  return gs;
}

}  // namespace skelsplat::testing
