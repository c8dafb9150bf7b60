#pragma once

#include "skelsplat/math.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace skelsplat {

using Faces = Eigen::Matrix<int, Eigen::Dynamic, 3, Eigen::RowMajor>;

/// Skeleton-image keypoint: either a joint origin or a template vertex.
struct Keypoint {
  enum class Source : std::uint8_t { joint = 0, vertex = 1 };
  Source source = Source::joint;
  int index = 0;
  std::string name;
  bool facial = false;
};

/// Parametric skinned body template.
///
/// shape_basis is (3 * N_v) x (num_shape + num_expression); column k holds the
/// per-vertex displacement (x, y, z interleaved) for coefficient k. The first
/// num_shape columns are body shape, the remaining ones are expression columns
/// supported on the "face" part.
struct BodyTemplate {
  Points vertices_rest;
  MatX shape_basis;
  int num_shape = 0;
  int num_expression = 0;
  MatX joint_regressor;  // N_j x N_v
  std::vector<int> parents;  // parents[root] == -1
  std::vector<std::string> joint_names;
  MatX skin_weights;  // N_v x N_j
  Faces faces;
  std::map<std::string, std::vector<int>> part_labels;  // part -> triangle indices
  std::vector<Keypoint> keypoints;
  std::vector<std::pair<int, int>> bones;  // keypoint index pairs

  int num_vertices() const { return static_cast<int>(vertices_rest.rows()); }
  int num_joints() const { return static_cast<int>(parents.size()); }
  int num_faces() const { return static_cast<int>(faces.rows()); }
  int num_coefficients() const { return num_shape + num_expression; }

  int joint_index(const std::string& name) const;  // -1 when absent
  /// Sorted unique vertex indices touched by a part's triangles.
  std::vector<int> part_vertices(const std::string& part) const;
  /// Axis-aligned bounds of the rest vertices.
  std::pair<Vec3, Vec3> bounds() const;

  /// Throws std::invalid_argument describing the first violated invariant.
  void validate() const;
};

struct Pose {
  Quat global_rotation = Quat::Identity();
  Vec3 global_translation = Vec3::Zero();
  std::vector<Quat> joint_rotations;
  VecX shape;
  VecX expression;

  static Pose identity(const BodyTemplate& tmpl);
  /// Flattened axis-angle joint rotations (N_j * 3), used as a network input.
  VecX joint_axis_angles() const;
  void validate(const BodyTemplate& tmpl) const;
};

struct LbsResult {
  Points vertices;
  std::vector<Rigid> joint_transforms;  // world transforms, global motion included
};

/// T̄ + B_S(shape) + B_E(expression). Coefficients beyond the supplied lengths are zero.
Points canonical_mesh(const BodyTemplate& tmpl, const VecX& shape, const VecX& expression);
Points canonical_mesh(const BodyTemplate& tmpl, const Pose& pose);

Points joint_positions(const BodyTemplate& tmpl, const Points& canonical_vertices);

/// Forward kinematics: child = parent ∘ (rotation about the joint's canonical position),
/// followed by the global rigid motion.
std::vector<Rigid> forward_kinematics(const BodyTemplate& tmpl, const Points& joints,
                                      const Pose& pose);

/// Blends joint transforms by the template skin weights.
Points skin_points(const MatX& weights, const Points& canonical,
                   const std::vector<Rigid>& transforms);

/// Poses explicitly given canonical vertices (joints regressed from them).
LbsResult lbs_from_canonical(const BodyTemplate& tmpl, const Points& canonical_vertices,
                             const Pose& pose);

LbsResult lbs_transform(const BodyTemplate& tmpl, const Pose& pose);

// ---- procedural test template -------------------------------------------------

/// 12-joint capsule mannequin standing in A-pose, unit height, facing +z.
/// Seed 0 gives the reference proportions; other seeds jitter segment lengths.
BodyTemplate make_mannequin(std::uint64_t seed = 0);

/// Named canonical poses ("a_pose", "t_pose", "y_pose"); rotations are keyed by
/// joint name so any template with l_shoulder / r_shoulder joints can use them.
Pose named_pose(const BodyTemplate& tmpl, const std::string& name);
std::vector<std::string> named_pose_list();

}  // namespace skelsplat
