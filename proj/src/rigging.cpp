#include "skelsplat/rigging.hpp"

#include <omp.h>

#include <algorithm>
#include <array>
#include <queue>
#include <stdexcept>

namespace skelsplat {

namespace {

/// Uniform bucket grid over a point set.
class PointGrid {
 public:
  PointGrid(const Points& pts, int per_cell) : pts_(pts) {
    const int n = static_cast<int>(pts.rows());
    lo_ = pts.colwise().minCoeff().transpose();
    const Vec3 extent = (pts.colwise().maxCoeff().transpose() - lo_).cwiseMax(1e-9);
    const double volume = extent.prod();
    h_ = std::cbrt(volume * per_cell / std::max(n, 1));
    h_ = std::max(h_, extent.maxCoeff() / 256.0);
    for (int a = 0; a < 3; ++a) dims_[a] = static_cast<int>(extent[a] / h_) + 1;
    const std::size_t cells = static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2];
    std::vector<int> count(cells + 1, 0);
    std::vector<std::size_t> cell_of(n);
    for (int i = 0; i < n; ++i) {
      cell_of[i] = flat(cell_coords(pts.row(i).transpose()));
      ++count[cell_of[i] + 1];
    }
    for (std::size_t c = 0; c < cells; ++c) count[c + 1] += count[c];
    start_ = count;
    order_.resize(n);
    for (int i = 0; i < n; ++i) order_[count[cell_of[i]]++] = i;  // ascending index within a cell
  }

  /// k best (squared distance, index) pairs, sorted.
  void query(const Vec3& q, int k, std::vector<std::pair<double, int>>& out) const {
    std::priority_queue<std::pair<double, int>> heap;  // max-heap on (d², index)
    const std::array<int, 3> c = cell_coords(q);
    const int max_ring = std::max({dims_[0], dims_[1], dims_[2]});
    for (int r = 0; r <= max_ring; ++r) {
      for (int z = c[2] - r; z <= c[2] + r; ++z) {
        if (z < 0 || z >= dims_[2]) continue;
        for (int y = c[1] - r; y <= c[1] + r; ++y) {
          if (y < 0 || y >= dims_[1]) continue;
          const bool shell_zy = std::abs(z - c[2]) == r || std::abs(y - c[1]) == r;
          for (int x = c[0] - r; x <= c[0] + r; ++x) {
            if (x < 0 || x >= dims_[0]) continue;
            if (!shell_zy && std::abs(x - c[0]) != r) continue;
            const std::size_t cell = flat({x, y, z});
            for (int s = start_[cell]; s < start_[cell + 1]; ++s) {
              const int i = order_[s];
              const std::pair<double, int> cand((pts_.row(i).transpose() - q).squaredNorm(), i);
              if (static_cast<int>(heap.size()) < k) {
                heap.push(cand);
              } else if (cand < heap.top()) {
                heap.pop();
                heap.push(cand);
              }
            }
          }
        }
      }
      // anything in a later ring is at least r cells away
      if (static_cast<int>(heap.size()) == k && heap.top().first < (r * h_) * (r * h_)) break;
    }
    out.resize(heap.size());
    for (int j = static_cast<int>(heap.size()) - 1; j >= 0; --j) {
      out[j] = heap.top();
      heap.pop();
    }
  }

 private:
  std::array<int, 3> cell_coords(const Vec3& p) const {
    std::array<int, 3> c{};
    for (int a = 0; a < 3; ++a) {
      c[a] = std::clamp(static_cast<int>(std::floor((p[a] - lo_[a]) / h_)), 0, dims_[a] - 1);
    }
    return c;
  }
  std::size_t flat(const std::array<int, 3>& c) const {
    return (static_cast<std::size_t>(c[2]) * dims_[1] + c[1]) * dims_[0] + c[0];
  }

  const Points& pts_;
  Vec3 lo_;
  double h_ = 1.0;
  std::array<int, 3> dims_{1, 1, 1};
  std::vector<int> start_;
  std::vector<int> order_;
};

Vec3 row3(const Points& p, int i) { return p.row(i).transpose(); }

}  // namespace

KnnResult knn(const Points& points, const Points& queries, int k) {
  KnnResult r;
  const int n = static_cast<int>(points.rows());
  r.k = std::min(k, n);
  const int m = static_cast<int>(queries.rows());
  r.index.assign(static_cast<std::size_t>(m) * r.k, -1);
  r.sq_distance.assign(static_cast<std::size_t>(m) * r.k, 0.0);
  if (r.k <= 0) return r;
  const PointGrid grid(points, std::max(2, r.k / 2));
#pragma omp parallel
  {
    std::vector<std::pair<double, int>> best;
#pragma omp for schedule(static)
    for (int q = 0; q < m; ++q) {
      grid.query(row3(queries, q), r.k, best);
      for (int j = 0; j < r.k; ++j) {
        r.index[static_cast<std::size_t>(q) * r.k + j] = best[j].second;
        r.sq_distance[static_cast<std::size_t>(q) * r.k + j] = best[j].first;
      }
    }
  }
  return r;
}

KnnResult nearest(const Points& points, const Points& queries) { return knn(points, queries, 1); }

// ---- skinning weights ----------------------------------------------------------------

MatX init_lbs_weights(const Points& positions, const BodyTemplate& tmpl, const Points& canonical_vertices,
                      std::vector<int>* anchors) {
  if (tmpl.num_vertices() == 0 || canonical_vertices.rows() == 0) {
    throw std::invalid_argument("template has no vertices");
  }
  if (canonical_vertices.rows() != tmpl.num_vertices()) {
    throw std::invalid_argument("canonical vertex count does not match template");
  }
  const KnnResult nn = nearest(canonical_vertices, positions);
  const int n = static_cast<int>(positions.rows());
  MatX w(n, tmpl.num_joints());
  if (anchors) anchors->resize(n);
  for (int i = 0; i < n; ++i) {
    w.row(i) = tmpl.skin_weights.row(nn.at(i, 0));
    if (anchors) (*anchors)[i] = nn.at(i, 0);
  }
  return w;
}

MatX knn_smooth_lbs(const MatX& weights, const Points& positions, const BodyTemplate& tmpl,
                    const Points& canonical_vertices, const KnnSmoothingConfig& cfg) {
  if (cfg.k_neighbors < 1 || cfg.iterations < 0 || !(cfg.distance_epsilon > 0.0)) {
    throw std::invalid_argument("invalid KNN smoothing config");
  }
  if (weights.rows() != positions.rows()) throw std::invalid_argument("weights and positions disagree");
  if (cfg.iterations == 0 || positions.rows() == 0) return weights;
  if (canonical_vertices.rows() != tmpl.num_vertices() || tmpl.num_vertices() == 0) {
    throw std::invalid_argument("canonical vertex count does not match template");
  }
  const int n = static_cast<int>(positions.rows());
  const KnnResult nbr = knn(positions, positions, cfg.k_neighbors);
  const KnnResult nv = nearest(canonical_vertices, positions);
  const double eps = cfg.distance_epsilon;
  // aggregation coefficients are fixed across iterations
  std::vector<double> coef(static_cast<std::size_t>(n) * nbr.k);
  for (int i = 0; i < n; ++i) {
    double z = 0.0;
    for (int j = 0; j < nbr.k; ++j) {
      const int k = nbr.at(i, j);
      const double d_ng = std::max(nbr.dist2(i, j), eps);
      const double d_nv = std::max(nv.dist2(k, 0), eps);
      coef[static_cast<std::size_t>(i) * nbr.k + j] = 1.0 / (d_ng * d_nv);
      z += coef[static_cast<std::size_t>(i) * nbr.k + j];
    }
    for (int j = 0; j < nbr.k; ++j) coef[static_cast<std::size_t>(i) * nbr.k + j] /= z;
  }
  MatX cur = weights, next(weights.rows(), weights.cols());
  for (int it = 0; it < cfg.iterations; ++it) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
      next.row(i).setZero();
      for (int j = 0; j < nbr.k; ++j) {
        next.row(i) += coef[static_cast<std::size_t>(i) * nbr.k + j] * cur.row(nbr.at(i, j));
      }
    }
    std::swap(cur, next);
  }
  return cur;
}

// ---- mesh binding --------------------------------------------------------------------

bool place_on_triangle(const Points& vertices, const Faces& faces, const MeshBinding& b, Gaussian3D& g) {
  const Vec3 a = row3(vertices, faces(b.triangle, 0));
  const Vec3 v1 = row3(vertices, faces(b.triangle, 1));
  const Vec3 v2 = row3(vertices, faces(b.triangle, 2));
  const Vec3 edge = v1 - a;
  const Vec3 cross = edge.cross(v2 - a);
  const double area = 0.5 * cross.norm();
  if (!(area > 1e-14) || edge.norm() == 0.0) return false;
  const Vec3 e1 = edge.normalized();
  const Vec3 n = cross.normalized();
  Mat3 r;
  r.col(0) = e1;
  r.col(1) = n.cross(e1);
  r.col(2) = n;
  g.position = b.barycentric[0] * a + b.barycentric[1] * v1 + b.barycentric[2] * v2 + b.normal_offset * n;
  g.rotation = to_wxyz(Quat(r));
  const double root = std::sqrt(area);
  g.log_scale = Vec3(std::log(0.5 * root), std::log(0.5 * root), std::log(0.05 * root));
  return true;
}

BoundGaussians bind_to_mesh(const BodyTemplate& tmpl, const std::string& part, int per_triangle,
                            const Points& canonical_vertices) {
  auto it = tmpl.part_labels.find(part);
  if (it == tmpl.part_labels.end()) throw std::invalid_argument("template has no part '" + part + "'");
  std::vector<Vec3> sites;
  if (per_triangle == 1) {
    sites = {Vec3::Constant(1.0 / 3.0)};
  } else if (per_triangle == 3) {
    sites = {Vec3(0.5, 0.25, 0.25), Vec3(0.25, 0.5, 0.25), Vec3(0.25, 0.25, 0.5)};
  } else {
    throw std::invalid_argument("mesh binding supports 1 or 3 Gaussians per triangle");
  }
  BoundGaussians out;
  for (int f : it->second) {
    for (const Vec3& site : sites) {
      MeshBinding b{part, f, site, 0.0};
      Gaussian3D g;
      if (!place_on_triangle(canonical_vertices, tmpl.faces, b, g)) {
        ++out.skipped_degenerate;
        break;
      }
      out.gaussians.push_back(g);
      out.bindings.push_back(b);
    }
  }
  return out;
}

// ---- pose-corrective network ----------------------------------------------------------

DeformNet::DeformNet(const DeformNetConfig& cfg, int pose_dim, std::uint64_t seed)
    : cfg_(cfg), pose_dim_(pose_dim) {
  if (!(cfg.output_scale > 0.0)) throw std::invalid_argument("deform output scale must be positive");
  enc_.bands = cfg.bands;
  enc_.center = cfg.center;
  enc_.radius = cfg.radius;
  mlp_ = Mlp(enc_.dim() + pose_dim, cfg.hidden, 9);
  Rng rng(seed);
  mlp_.init(rng, 0.0);
}

Block DeformNet::inputs(const Points& positions, const VecX& pose) const {
  if (pose.size() != pose_dim_) throw std::invalid_argument("deform pose vector has the wrong length");
  Block in(enc_.dim() + pose_dim_, positions.rows());
  in.topRows(enc_.dim()) = enc_.encode(positions);
  in.bottomRows(pose_dim_) = pose.replicate(1, positions.rows());
  return in;
}

namespace {
constexpr int kDeformChunk = 1024;
}

DeformOffsets DeformNet::forward(const Points& positions, const VecX& pose) const {
  const int m = static_cast<int>(positions.rows());
  DeformOffsets out{Points(m, 3), Points(m, 3), Points(m, 3)};
  const double s = cfg_.output_scale;
  for_each_chunk(m, kDeformChunk, kGradientLanes, 0, [&](int begin, int end, int) {
    const Block o = mlp_.forward(inputs(positions.middleRows(begin, end - begin), pose));
    for (int i = begin; i < end; ++i) {
      for (int c = 0; c < 3; ++c) {
        out.dp(i, c) = s * std::tanh(o(c, i - begin));
        out.ds(i, c) = s * std::tanh(o(3 + c, i - begin));
        out.dq(i, c) = s * std::tanh(o(6 + c, i - begin));
      }
    }
  });
  return out;
}

void DeformNet::backward(const Points& positions, const VecX& pose, const DeformOffsets& d_out, VecX& d_params,
                         Points* d_positions, int threads) const {
  const int m = static_cast<int>(positions.rows());
  if (d_params.size() != num_params()) d_params = VecX::Zero(num_params());
  if (d_positions) d_positions->setZero(m, 3);
  std::vector<VecX> lanes(kGradientLanes, VecX::Zero(num_params()));
  const double s = cfg_.output_scale;
  for_each_chunk(m, kDeformChunk, kGradientLanes, threads, [&](int begin, int end, int lane) {
    const Points pts = positions.middleRows(begin, end - begin);
    std::vector<Block> cache;
    const Block o = mlp_.forward(inputs(pts, pose), &cache);
    Block d_o(9, end - begin);
    for (int i = begin; i < end; ++i) {
      for (int c = 0; c < 3; ++c) {
        const int k = i - begin;
        auto dt = [&](int row) {
          const double t = std::tanh(o(row, k));
          return s * (1.0 - t * t);
        };
        d_o(c, k) = d_out.dp(i, c) * dt(c);
        d_o(3 + c, k) = d_out.ds(i, c) * dt(3 + c);
        d_o(6 + c, k) = d_out.dq(i, c) * dt(6 + c);
      }
    }
    Block d_in;
    mlp_.backward(cache, d_o, lanes[lane], d_positions ? &d_in : nullptr);
    if (d_positions) d_positions->middleRows(begin, end - begin) = enc_.backward(pts, d_in.topRows(enc_.dim()));
  });
  for (const VecX& g : lanes) d_params += g;
}

// ---- articulation ----------------------------------------------------------------------

Points avatar_canonical_mesh(const BodyTemplate& tmpl, const HybridAvatar& avatar, const Pose& pose) {
  VecX shape = VecX::Zero(tmpl.num_shape), expression = VecX::Zero(tmpl.num_expression);
  shape.head(pose.shape.size()) = pose.shape;
  expression.head(pose.expression.size()) = pose.expression;
  if (avatar.part_shape.size() != 0) {
    if (avatar.part_shape.size() != tmpl.num_coefficients()) {
      throw std::invalid_argument("avatar part_shape does not match template coefficients");
    }
    shape += avatar.part_shape.head(tmpl.num_shape);
    expression += avatar.part_shape.tail(tmpl.num_expression);
  }
  return canonical_mesh(tmpl, shape, expression);
}

namespace {

bool all_identity(const std::vector<Rigid>& transforms) {
  for (const Rigid& t : transforms) {
    if (t.rotation != Mat3::Identity() || t.translation != Vec3::Zero()) return false;
  }
  return true;
}

}  // namespace

GaussianSet articulate(const HybridAvatar& avatar, const BodyTemplate& tmpl, const Pose& pose,
                       const DeformNet* deform, ArticulationCache* cache) {
  const int n = avatar.size(), nj = tmpl.num_joints();
  if (static_cast<int>(avatar.kind.size()) != n) throw std::logic_error("avatar kind table is incomplete");
  if (avatar.lbs_weights.rows() != n || avatar.lbs_weights.cols() != nj) {
    throw std::logic_error("avatar has no skinning weights for this template");
  }
  const Points canon = avatar_canonical_mesh(tmpl, avatar, pose);
  const LbsResult lbs = lbs_from_canonical(tmpl, canon, pose);
  const std::vector<Rigid>& A = lbs.joint_transforms;

  ArticulationCache local;
  ArticulationCache& c = cache ? *cache : local;
  c = ArticulationCache{};
  c.identity = all_identity(A);
  for (int i = 0; i < n; ++i) {
    (avatar.kind[i] == GaussianKind::unconstrained ? c.unconstrained : c.bound).push_back(i);
  }
  const int nu = static_cast<int>(c.unconstrained.size());

  GaussianSet out = avatar.gaussians;
  Points base(nu, 3);
  for (int u = 0; u < nu; ++u) base.row(u) = avatar.gaussians.positions.row(c.unconstrained[u]);
  DeformOffsets off;
  if (deform) {
    if (deform->pose_dim() != 3 * nj) throw std::invalid_argument("deform network expects another skeleton");
    c.pose_vector = pose.joint_axis_angles();
    off = deform->forward(base, c.pose_vector);
    c.offset_dq = off.dq;
  }
  c.blend.assign(nu, Mat3::Identity());
  c.blend_rotation.assign(nu, Vec4(1, 0, 0, 0));
  c.offset_rotation.assign(nu, Vec4(1, 0, 0, 0));

#pragma omp parallel for schedule(static)
  for (int u = 0; u < nu; ++u) {
    const int i = c.unconstrained[u];
    Vec3 p = base.row(u).transpose();
    Vec4 q = avatar.gaussians.rotations.row(i).transpose();
    if (deform) {
      p += off.dp.row(u).transpose();
      out.log_scales.row(i) += off.ds.row(u);
      c.offset_rotation[u] = quat_exp(off.dq.row(u).transpose());
      q = quat_mul(c.offset_rotation[u], q);
    }
    if (!c.identity) {
      Mat3 m = Mat3::Identity();
      Vec3 y = p;
      for (int j = 0; j < nj; ++j) {
        const double w = avatar.lbs_weights(i, j);
        if (w == 0.0) continue;
        y += w * (A[j].apply(p) - p);
        m += w * (A[j].rotation - Mat3::Identity());
      }
      p = y;
      c.blend[u] = m;
      c.blend_rotation[u] = to_wxyz(Quat(polar_rotation(m)));
      q = quat_mul(c.blend_rotation[u], q);
    }
    out.positions.row(i) = p.transpose();
    out.rotations.row(i) = q.transpose();
  }

  if (!c.bound.empty()) {
    for (int b : c.bound) {
      Gaussian3D g = avatar.gaussians.get(b);
      if (!place_on_triangle(lbs.vertices, tmpl.faces, avatar.bindings[b], g)) {
        throw std::runtime_error("mesh-binding triangle became degenerate");
      }
      out.positions.row(b) = g.position.transpose();
      out.rotations.row(b) = g.rotation.transpose();
      out.log_scales.row(b) = g.log_scale.transpose();
    }
    c.vertex_blend.assign(tmpl.num_vertices(), Mat3::Identity());
    for (int v = 0; v < tmpl.num_vertices(); ++v) {
      for (int j = 0; j < nj; ++j) {
        const double w = tmpl.skin_weights(v, j);
        if (w != 0.0) c.vertex_blend[v] += w * (A[j].rotation - Mat3::Identity());
      }
    }
  }
  return out;
}

AvatarGrads articulate_backward(const HybridAvatar& avatar, const BodyTemplate& tmpl, const DeformNet* deform,
                                const ArticulationCache& c, const GaussianGrads& g) {
  const int n = avatar.size();
  if (g.size() != n) throw std::invalid_argument("posed gradients do not match the avatar");
  AvatarGrads out;
  out.gaussians.zero(n);
  out.gaussians.opacity_logit = g.opacity_logit;
  out.gaussians.color = g.color;
  const int nu = static_cast<int>(c.unconstrained.size());
  DeformOffsets d_off{Points::Zero(nu, 3), Points::Zero(nu, 3), Points::Zero(nu, 3)};
  Points base(nu, 3);
#pragma omp parallel for schedule(static)
  for (int u = 0; u < nu; ++u) {
    const int i = c.unconstrained[u];
    base.row(u) = avatar.gaussians.positions.row(i);
    const Vec3 gp = c.blend[u].transpose() * g.position.row(i).transpose();
    Vec4 gq = g.rotation.row(i).transpose();
    if (!c.identity) gq = left_mul(c.blend_rotation[u]).transpose() * gq;
    out.gaussians.position.row(i) = gp.transpose();
    out.gaussians.log_scale.row(i) = g.log_scale.row(i);
    if (deform) {
      const Vec4 q = avatar.gaussians.rotations.row(i).transpose();
      const Vec4 g_exp = right_mul(q).transpose() * gq;
      gq = left_mul(c.offset_rotation[u]).transpose() * gq;
      d_off.dp.row(u) = gp.transpose();
      d_off.ds.row(u) = g.log_scale.row(i);
      d_off.dq.row(u) = (quat_exp_jacobian(c.offset_dq.row(u).transpose()).transpose() * g_exp).transpose();
    }
    out.gaussians.rotation.row(i) = gq.transpose();
  }
  if (deform) {
    Points d_pos;
    out.deform = VecX::Zero(deform->num_params());
    deform->backward(base, c.pose_vector, d_off, out.deform, &d_pos);
    for (int u = 0; u < nu; ++u) out.gaussians.position.row(c.unconstrained[u]) += d_pos.row(u);
  }
  if (avatar.part_shape.size() != 0) {
    out.part_shape = VecX::Zero(avatar.part_shape.size());
    const int nc = tmpl.num_coefficients();
    for (int b : c.bound) {
      const MeshBinding& mb = avatar.bindings[b];
      const Vec3 gp = g.position.row(b).transpose();
      for (int k = 0; k < 3; ++k) {
        const int v = tmpl.faces(mb.triangle, k);
        const Vec3 gv = mb.barycentric[k] * (c.vertex_blend[v].transpose() * gp);
        for (int col = 0; col < nc; ++col) {
          out.part_shape[col] += gv.x() * tmpl.shape_basis(3 * v, col) + gv.y() * tmpl.shape_basis(3 * v + 1, col) +
                                 gv.z() * tmpl.shape_basis(3 * v + 2, col);
        }
      }
    }
  }
  return out;
}

void refresh_bound(HybridAvatar& avatar, const BodyTemplate& tmpl) {
  const Points canon = avatar_canonical_mesh(tmpl, avatar, Pose::identity(tmpl));
  for (int i = 0; i < avatar.size(); ++i) {
    if (avatar.kind[i] != GaussianKind::mesh_binding) continue;
    Gaussian3D g = avatar.gaussians.get(i);
    if (!place_on_triangle(canon, tmpl.faces, avatar.bindings[i], g)) {
      throw std::runtime_error("mesh-binding triangle became degenerate");
    }
    avatar.gaussians.set(i, g);
  }
}

HybridAvatar apply_shape_edit(const HybridAvatar& avatar, const BodyTemplate& tmpl, const VecX& delta) {
  const int nc = tmpl.num_coefficients();
  if (delta.size() != nc) throw std::invalid_argument("shape delta length does not match template coefficients");
  if (avatar.part_shape.size() != 0 && avatar.part_shape.size() != nc) {
    throw std::invalid_argument("avatar part_shape does not match template coefficients");
  }
  HybridAvatar out = avatar;
  if (out.part_shape.size() == 0) out.part_shape = VecX::Zero(nc);
  if (delta.isZero(0.0)) return out;
  for (int i = 0; i < out.size(); ++i) {
    if (out.kind[i] != GaussianKind::unconstrained) continue;
    if (i >= static_cast<int>(out.anchor_vertices.size()) || out.anchor_vertices[i] < 0) {
      throw std::logic_error("unconstrained Gaussian has no anchor vertex");
    }
    const int v = out.anchor_vertices[i];
    out.gaussians.positions.row(i) += (tmpl.shape_basis.middleRows(3 * v, 3) * delta).transpose();
  }
  out.part_shape += delta;
  refresh_bound(out, tmpl);
  return out;
}

}  // namespace skelsplat
