#pragma once

#include "skelsplat/rigging.hpp"
#include "test_util.hpp"

namespace skelsplat::testing {

/// Unconstrained Gaussians scattered around template vertices plus K=1 bindings on hand_l.
inline HybridAvatar test_avatar(const BodyTemplate& t, int n, std::uint64_t seed, bool smooth = true) {
  Rng rng(seed);
  HybridAvatar a;
  a.part_shape = VecX::Zero(t.num_coefficients());
  Points pos(n, 3);
  for (int i = 0; i < n; ++i) {
    const int v = static_cast<int>(rng.below(t.num_vertices()));
    pos.row(i) = t.vertices_rest.row(v) + random_vec(rng, -0.01, 0.01).transpose();
    Gaussian3D g;
    g.position = pos.row(i).transpose();
    g.rotation = to_wxyz(random_rotation(rng));
    g.log_scale = random_vec(rng, -5, -3);
    g.opacity_logit = rng.uniform(-1, 1);
    g.color = random_vec(rng, 0, 1);
    a.gaussians.push_back(g);
    a.kind.push_back(GaussianKind::unconstrained);
    a.bindings.emplace_back();
  }
  a.lbs_weights = init_lbs_weights(pos, t, t.vertices_rest, &a.anchor_vertices);
  if (smooth) a.lbs_weights = knn_smooth_lbs(a.lbs_weights, pos, t, t.vertices_rest, {8, 3, 1e-8});
  const BoundGaussians b = bind_to_mesh(t, "hand_l", 1, t.vertices_rest);
  a.gaussians.append(b.gaussians);
  for (const MeshBinding& mb : b.bindings) {
    a.kind.push_back(GaussianKind::mesh_binding);
    a.bindings.push_back(mb);
    a.anchor_vertices.push_back(-1);
  }
  a.lbs_weights.conservativeResize(a.size(), t.num_joints());
  a.lbs_weights.bottomRows(b.gaussians.size()).setZero();
  a.validate(t.num_joints());
  return a;
}

}  // namespace skelsplat::testing
