#pragma once

#include "skelsplat/body_model.hpp"
#include "skelsplat/gaussian.hpp"
#include "skelsplat/mlp.hpp"
#include "skelsplat/splat_renderer.hpp"

#include <optional>
#include <string>
#include <vector>

namespace skelsplat {

// ---- neighbor queries -----------------------------------------------------------------

/// k nearest points of `points` for every query row, ordered by (squared distance, index).
/// Returned as row-major N x k index / squared-distance tables; k is clamped to the point count.
struct KnnResult {
  int k = 0;
  std::vector<int> index;
  std::vector<double> sq_distance;

  int at(int row, int j) const { return index[static_cast<std::size_t>(row) * k + j]; }
  double dist2(int row, int j) const { return sq_distance[static_cast<std::size_t>(row) * k + j]; }
};
KnnResult knn(const Points& points, const Points& queries, int k);

/// Nearest point per query, lowest index on ties.
KnnResult nearest(const Points& points, const Points& queries);

// ---- skinning weights ----------------------------------------------------------------

struct KnnSmoothingConfig {
  int k_neighbors = 16;
  int iterations = 10;
  double distance_epsilon = 1e-8;  // floor on squared distances
};

/// Copies the skin weights of each position's nearest template vertex. anchors, when
/// given, receives the chosen vertex indices.
MatX init_lbs_weights(const Points& positions, const BodyTemplate& tmpl, const Points& canonical_vertices,
                      std::vector<int>* anchors = nullptr);

/// Geometry-aware smoothing: each row becomes a normalized 1/(d_ng d_nv) blend of its
/// k nearest rows (itself included), repeated `iterations` times synchronously.
MatX knn_smooth_lbs(const MatX& weights, const Points& positions, const BodyTemplate& tmpl,
                    const Points& canonical_vertices, const KnnSmoothingConfig& cfg = {});

// ---- mesh binding --------------------------------------------------------------------

struct BoundGaussians {
  GaussianSet gaussians;
  std::vector<MeshBinding> bindings;
  int skipped_degenerate = 0;
};

/// Gaussians on every triangle of a part: 1 per triangle at the centroid or 3 at the
/// (1/2, 1/4, 1/4) sites.
BoundGaussians bind_to_mesh(const BodyTemplate& tmpl, const std::string& part, int per_triangle,
                            const Points& canonical_vertices);

/// Position, rotation and scale of a bound Gaussian on the given vertices.
/// Returns false for a degenerate triangle.
bool place_on_triangle(const Points& vertices, const Faces& faces, const MeshBinding& binding, Gaussian3D& g);

// ---- pose-corrective network ----------------------------------------------------------

struct DeformNetConfig {
  int bands = 4;
  std::vector<int> hidden{64, 64};
  double output_scale = 0.05;
  Vec3 center = Vec3::Zero();
  double radius = 1.0;
};

/// Per-Gaussian canonical-space offsets; dq is an axis-angle vector.
struct DeformOffsets {
  Points dp, ds, dq;
};

/// MLP on (encoded canonical position, flattened joint axis-angles) with tanh-bounded
/// outputs. The output layer starts at zero, so a fresh network is the identity.
class DeformNet {
 public:
  DeformNet() = default;
  DeformNet(const DeformNetConfig& cfg, int pose_dim, std::uint64_t seed);

  DeformOffsets forward(const Points& positions, const VecX& pose) const;

  /// d_params += ∂/∂θ and, when d_positions is given, it is set to ∂/∂positions of
  /// Σ d_out·offsets.
  void backward(const Points& positions, const VecX& pose, const DeformOffsets& d_out, VecX& d_params,
                Points* d_positions = nullptr, int threads = 0) const;

  const DeformNetConfig& config() const { return cfg_; }
  int pose_dim() const { return pose_dim_; }
  int num_params() const { return mlp_.num_params(); }
  VecX& params() { return mlp_.params; }
  const VecX& params() const { return mlp_.params; }
  const Mlp& mlp() const { return mlp_; }

 private:
  Block inputs(const Points& positions, const VecX& pose) const;

  DeformNetConfig cfg_;
  FrequencyEncoding enc_;
  Mlp mlp_;
  int pose_dim_ = 0;
};

// ---- articulation ----------------------------------------------------------------------

/// Shape and expression coefficients actually used to build the mesh for a pose:
/// the pose's own coefficients plus the avatar's part_shape.
Points avatar_canonical_mesh(const BodyTemplate& tmpl, const HybridAvatar& avatar, const Pose& pose);

/// Intermediate values kept for articulate_backward.
struct ArticulationCache {
  std::vector<Mat3> blend;            // Σ_j w_j R_j per unconstrained Gaussian
  std::vector<Vec4> blend_rotation;   // polar factor of blend, as a quaternion
  std::vector<Vec4> offset_rotation;  // exp(dq) per unconstrained Gaussian
  Points offset_dq;                   // network dq per unconstrained Gaussian
  std::vector<int> unconstrained;     // indices of unconstrained members
  std::vector<int> bound;             // indices of mesh-binding members
  std::vector<Mat3> vertex_blend;     // per template vertex, for the part_shape gradient
  VecX pose_vector;
  bool identity = false;
};

/// Poses the avatar: LBS (with optional pose-corrective offsets) for unconstrained
/// members, re-placement on the posed part mesh for mesh-binding members.
GaussianSet articulate(const HybridAvatar& avatar, const BodyTemplate& tmpl, const Pose& pose,
                       const DeformNet* deform = nullptr, ArticulationCache* cache = nullptr);

/// Gradients with respect to the canonical avatar given gradients of the posed set.
struct AvatarGrads {
  GaussianGrads gaussians;  // canonical attributes; bound members get color/opacity only
  VecX deform;              // DeformNet parameters (empty without a network)
  VecX part_shape;          // through bound positions only
};
AvatarGrads articulate_backward(const HybridAvatar& avatar, const BodyTemplate& tmpl, const DeformNet* deform,
                                const ArticulationCache& cache, const GaussianGrads& posed_grads);

/// Recomputes the canonical position, rotation and scale of every mesh-binding member
/// from the avatar's part_shape.
void refresh_bound(HybridAvatar& avatar, const BodyTemplate& tmpl);

/// Moves unconstrained members by their anchor vertex's shape displacement and
/// re-places bound members; part_shape += delta.
HybridAvatar apply_shape_edit(const HybridAvatar& avatar, const BodyTemplate& tmpl, const VecX& delta);

}  // namespace skelsplat
