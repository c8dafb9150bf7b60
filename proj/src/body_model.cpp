#include "skelsplat/body_model.hpp"

#include "skelsplat/rng.hpp"

#include <algorithm>
#include <array>
#include <set>
#include <stdexcept>

namespace skelsplat {

int BodyTemplate::joint_index(const std::string& name) const {
  for (std::size_t j = 0; j < joint_names.size(); ++j) {
    if (joint_names[j] == name) return static_cast<int>(j);
  }
  return -1;
}

std::vector<int> BodyTemplate::part_vertices(const std::string& part) const {
  auto it = part_labels.find(part);
  if (it == part_labels.end()) return {};
  std::set<int> verts;
  for (int f : it->second) {
    for (int k = 0; k < 3; ++k) verts.insert(faces(f, k));
  }
  return {verts.begin(), verts.end()};
}

std::pair<Vec3, Vec3> BodyTemplate::bounds() const {
  Vec3 lo = vertices_rest.colwise().minCoeff().transpose();
  Vec3 hi = vertices_rest.colwise().maxCoeff().transpose();
  return {lo, hi};
}

void BodyTemplate::validate() const {
  const int nv = num_vertices();
  const int nj = num_joints();
  if (nv == 0) throw std::invalid_argument("template has no vertices");
  if (nj == 0) throw std::invalid_argument("template has no joints");
  if (static_cast<int>(joint_names.size()) != nj) {
    throw std::invalid_argument("joint_names size does not match parents");
  }
  if (shape_basis.rows() != 3 * nv || shape_basis.cols() != num_coefficients()) {
    throw std::invalid_argument("shape_basis dimensions do not match template");
  }
  if (skin_weights.rows() != nv || skin_weights.cols() != nj) {
    throw std::invalid_argument("skin_weights dimensions do not match template");
  }
  if (joint_regressor.rows() != nj || joint_regressor.cols() != nv) {
    throw std::invalid_argument("joint_regressor dimensions do not match template");
  }
  for (int v = 0; v < nv; ++v) {
    if (skin_weights.row(v).minCoeff() < 0.0 || std::abs(skin_weights.row(v).sum() - 1.0) > 1e-6) {
      throw std::invalid_argument("skin_weights row " + std::to_string(v) + " is not stochastic");
    }
  }
  for (int j = 0; j < nj; ++j) {
    if (joint_regressor.row(j).minCoeff() < 0.0 ||
        std::abs(joint_regressor.row(j).sum() - 1.0) > 1e-6) {
      throw std::invalid_argument("joint_regressor row " + std::to_string(j) + " is not convex");
    }
  }
  int roots = 0;
  for (int j = 0; j < nj; ++j) {
    const int p = parents[j];
    if (p == -1) {
      ++roots;
    } else if (p < 0 || p >= nj) {
      throw std::invalid_argument("parent index out of range");
    }
    // walk to the root; a walk longer than nj means a cycle
    int cur = j, steps = 0;
    while (cur != -1) {
      cur = parents[cur];
      if (++steps > nj) throw std::invalid_argument("kinematic tree has a cycle");
    }
  }
  if (roots != 1) throw std::invalid_argument("kinematic tree must have exactly one root");
  for (int f = 0; f < num_faces(); ++f) {
    for (int k = 0; k < 3; ++k) {
      if (faces(f, k) < 0 || faces(f, k) >= nv) throw std::invalid_argument("face index out of range");
    }
  }
  std::set<int> seen;
  for (const auto& [name, tris] : part_labels) {
    for (int t : tris) {
      if (t < 0 || t >= num_faces()) throw std::invalid_argument("part '" + name + "' has invalid triangle");
      if (!seen.insert(t).second) throw std::invalid_argument("parts overlap at triangle " + std::to_string(t));
    }
  }
  for (const auto& kp : keypoints) {
    const int limit = kp.source == Keypoint::Source::joint ? nj : nv;
    if (kp.index < 0 || kp.index >= limit) throw std::invalid_argument("keypoint '" + kp.name + "' out of range");
  }
  const int nk = static_cast<int>(keypoints.size());
  for (const auto& [a, b] : bones) {
    if (a < 0 || a >= nk || b < 0 || b >= nk) throw std::invalid_argument("bone references invalid keypoint");
  }
}

Pose Pose::identity(const BodyTemplate& tmpl) {
  Pose pose;
  pose.joint_rotations.assign(tmpl.num_joints(), Quat::Identity());
  pose.shape = VecX::Zero(tmpl.num_shape);
  pose.expression = VecX::Zero(tmpl.num_expression);
  return pose;
}

VecX Pose::joint_axis_angles() const {
  VecX out(3 * joint_rotations.size());
  for (std::size_t j = 0; j < joint_rotations.size(); ++j) {
    out.segment<3>(3 * j) = quat_log(joint_rotations[j]);
  }
  return out;
}

void Pose::validate(const BodyTemplate& tmpl) const {
  if (static_cast<int>(joint_rotations.size()) != tmpl.num_joints()) {
    throw std::invalid_argument("pose joint count does not match template");
  }
  if (!is_unit(global_rotation)) throw std::invalid_argument("global rotation is not unit-norm");
  for (const auto& q : joint_rotations) {
    if (!is_unit(q)) throw std::invalid_argument("joint rotation is not unit-norm");
  }
  if (shape.size() > tmpl.num_shape) throw std::invalid_argument("shape vector longer than shape basis");
  if (expression.size() > tmpl.num_expression) {
    throw std::invalid_argument("expression vector longer than expression basis");
  }
}

Points canonical_mesh(const BodyTemplate& tmpl, const VecX& shape, const VecX& expression) {
  if (shape.size() > tmpl.num_shape) throw std::invalid_argument("shape vector longer than shape basis");
  if (expression.size() > tmpl.num_expression) {
    throw std::invalid_argument("expression vector longer than expression basis");
  }
  Points out = tmpl.vertices_rest;
  const int nv = tmpl.num_vertices();
  auto accumulate = [&](int column, double coeff) {
    if (coeff == 0.0) return;
    for (int v = 0; v < nv; ++v) {
      for (int c = 0; c < 3; ++c) out(v, c) += coeff * tmpl.shape_basis(3 * v + c, column);
    }
  };
  for (int k = 0; k < shape.size(); ++k) accumulate(k, shape[k]);
  for (int k = 0; k < expression.size(); ++k) accumulate(tmpl.num_shape + k, expression[k]);
  return out;
}

Points canonical_mesh(const BodyTemplate& tmpl, const Pose& pose) {
  return canonical_mesh(tmpl, pose.shape, pose.expression);
}

Points joint_positions(const BodyTemplate& tmpl, const Points& canonical_vertices) {
  if (canonical_vertices.rows() != tmpl.num_vertices()) {
    throw std::invalid_argument("canonical vertex count does not match template");
  }
  return tmpl.joint_regressor * canonical_vertices;
}

std::vector<Rigid> forward_kinematics(const BodyTemplate& tmpl, const Points& joints,
                                      const Pose& pose) {
  const int nj = tmpl.num_joints();
  std::vector<Rigid> local(nj);
  for (int j = 0; j < nj; ++j) {
    const Mat3 r = pose.joint_rotations[j].toRotationMatrix();
    const Vec3 c = joints.row(j).transpose();
    local[j].rotation = r;
    local[j].translation = c - r * c;
  }
  // Parents may appear after children in a loaded template; resolve recursively.
  std::vector<Rigid> world(nj);
  std::vector<char> done(nj, 0);
  auto resolve = [&](auto&& self, int j) -> const Rigid& {
    if (!done[j]) {
      const int p = tmpl.parents[j];
      world[j] = p < 0 ? local[j] : self(self, p).compose(local[j]);
      done[j] = 1;
    }
    return world[j];
  };
  for (int j = 0; j < nj; ++j) resolve(resolve, j);

  const Rigid global{pose.global_rotation.toRotationMatrix(), pose.global_translation};
  for (auto& w : world) w = global.compose(w);
  return world;
}

Points skin_points(const MatX& weights, const Points& canonical,
                   const std::vector<Rigid>& transforms) {
  const int n = static_cast<int>(canonical.rows());
  const int nj = static_cast<int>(transforms.size());
  Points out(n, 3);
  for (int v = 0; v < n; ++v) {
    const Vec3 x = canonical.row(v).transpose();
    // displacement form keeps identity transforms exact
    Vec3 y = x;
    for (int j = 0; j < nj; ++j) {
      const double w = weights(v, j);
      if (w == 0.0) continue;
      y += w * (transforms[j].apply(x) - x);
    }
    out.row(v) = y.transpose();
  }
  return out;
}

LbsResult lbs_from_canonical(const BodyTemplate& tmpl, const Points& canonical_vertices,
                             const Pose& pose) {
  pose.validate(tmpl);
  const Points joints = joint_positions(tmpl, canonical_vertices);
  LbsResult result;
  result.joint_transforms = forward_kinematics(tmpl, joints, pose);
  result.vertices = skin_points(tmpl.skin_weights, canonical_vertices, result.joint_transforms);
  return result;
}

LbsResult lbs_transform(const BodyTemplate& tmpl, const Pose& pose) {
  pose.validate(tmpl);
  return lbs_from_canonical(tmpl, canonical_mesh(tmpl, pose), pose);
}

// ---- mannequin ------------------------------------------------------------------

namespace {

struct CapsuleSpec {
  std::string name;
  int owner;        // joint moving this segment
  int blend_with;   // joint blended near the segment start, -1 for none
  Vec3 start;
  Vec3 end;
  double radius;
  bool limb;        // receives the limb-thickness basis
};

struct CapsuleVertexInfo {
  double axial;     // projection parameter along the segment, clamped to [0, 1]
  Vec3 radial;      // offset from the axis
};

constexpr int kSegments = 16;
constexpr int kCapRings = 3;
constexpr int kCylinderRings = 6;

struct MeshBuilder {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;
  std::vector<int> vertex_capsule;
  std::vector<CapsuleVertexInfo> info;
  std::vector<int> face_capsule;
  std::vector<std::vector<int>> start_rings;  // per capsule: indices of the s=0 ring
  std::vector<int> end_poles;

  void add(const CapsuleSpec& spec, int capsule_id) {
    const Vec3 axis_vec = spec.end - spec.start;
    const double length = axis_vec.norm();
    const Vec3 d = axis_vec / length;
    const Vec3 helper = std::abs(d.z()) < 0.9 ? Vec3::UnitZ() : Vec3::UnitX();
    const Vec3 u = helper.cross(d).normalized();
    const Vec3 v = d.cross(u);
    const double r = spec.radius;

    auto push = [&](const Vec3& p) {
      const double s = std::clamp((p - spec.start).dot(d) / length, 0.0, 1.0);
      const Vec3 on_axis = spec.start + s * length * d;
      vertices.push_back(p);
      vertex_capsule.push_back(capsule_id);
      info.push_back({s, p - on_axis});
      return static_cast<int>(vertices.size()) - 1;
    };

    const int pole_a = push(spec.start - r * d);
    std::vector<std::vector<int>> rings;
    auto add_ring = [&](const Vec3& center, double ring_radius) {
      std::vector<int> ring;
      for (int k = 0; k < kSegments; ++k) {
        const double theta = 2.0 * kPi * k / kSegments;
        ring.push_back(push(center + ring_radius * (std::cos(theta) * u + std::sin(theta) * v)));
      }
      rings.push_back(std::move(ring));
    };
    for (int k = 1; k < kCapRings; ++k) {
      const double phi = 0.5 * kPi * k / kCapRings;
      add_ring(spec.start - r * std::cos(phi) * d, r * std::sin(phi));
    }
    const std::size_t first_cylinder = rings.size();
    for (int i = 0; i < kCylinderRings; ++i) {
      const double s = static_cast<double>(i) / (kCylinderRings - 1);
      add_ring(spec.start + s * length * d, r);
    }
    for (int k = kCapRings - 1; k >= 1; --k) {
      const double phi = 0.5 * kPi * k / kCapRings;
      add_ring(spec.end + r * std::cos(phi) * d, r * std::sin(phi));
    }
    const int pole_b = push(spec.end + r * d);
    start_rings.push_back(rings[first_cylinder]);
    end_poles.push_back(pole_b);

    auto face = [&](int a, int b, int c) {
      faces.push_back({a, b, c});
      face_capsule.push_back(capsule_id);
    };
    for (int k = 0; k < kSegments; ++k) {
      const int k1 = (k + 1) % kSegments;
      face(pole_a, rings.front()[k1], rings.front()[k]);
    }
    for (std::size_t i = 0; i + 1 < rings.size(); ++i) {
      for (int k = 0; k < kSegments; ++k) {
        const int k1 = (k + 1) % kSegments;
        face(rings[i][k], rings[i][k1], rings[i + 1][k1]);
        face(rings[i][k], rings[i + 1][k1], rings[i + 1][k]);
      }
    }
    for (int k = 0; k < kSegments; ++k) {
      const int k1 = (k + 1) % kSegments;
      face(pole_b, rings.back()[k], rings.back()[k1]);
    }
  }
};

int nearest_in_direction(const MeshBuilder& mb, int capsule, const Vec3& center, const Vec3& dir) {
  const Vec3 n = dir.normalized();
  int best = -1;
  double best_score = -2.0;
  for (std::size_t i = 0; i < mb.vertices.size(); ++i) {
    if (mb.vertex_capsule[i] != capsule) continue;
    const double score = (mb.vertices[i] - center).normalized().dot(n);
    if (score > best_score) {
      best_score = score;
      best = static_cast<int>(i);
    }
  }
  return best;
}

}  // namespace

BodyTemplate make_mannequin(std::uint64_t seed) {
  // Per-group length factors; seed 0 keeps the reference proportions.
  double torso_f = 1.0, arm_f = 1.0, leg_f = 1.0, width_f = 1.0;
  if (seed != 0) {
    Rng rng(seed);
    torso_f = rng.uniform(0.95, 1.05);
    arm_f = rng.uniform(0.95, 1.05);
    leg_f = rng.uniform(0.95, 1.05);
    width_f = rng.uniform(0.95, 1.05);
  }

  enum Joint { pelvis, neck, l_shoulder, l_elbow, l_wrist, r_shoulder, r_elbow, r_wrist,
               l_hip, l_knee, r_hip, r_knee, joint_count };
  BodyTemplate t;
  t.joint_names = {"pelvis", "neck", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder",
                   "r_elbow", "r_wrist", "l_hip", "l_knee", "r_hip", "r_knee"};
  t.parents = {-1, pelvis, pelvis, l_shoulder, l_elbow, pelvis, r_shoulder, r_elbow,
               pelvis, l_hip, pelvis, r_hip};

  std::vector<Vec3> joints(joint_count);
  joints[pelvis] = Vec3(0.0, 0.0, 0.0);
  joints[neck] = Vec3(0.0, 0.30 * torso_f, 0.0);
  const Vec3 arm_dir_l = Vec3(1.0, -1.0, 0.0).normalized();  // A-pose
  const Vec3 arm_dir_r = Vec3(-1.0, -1.0, 0.0).normalized();
  joints[l_shoulder] = Vec3(0.13 * width_f, 0.26 * torso_f, 0.0);
  joints[r_shoulder] = Vec3(-0.13 * width_f, 0.26 * torso_f, 0.0);
  joints[l_elbow] = joints[l_shoulder] + 0.15 * arm_f * arm_dir_l;
  joints[r_elbow] = joints[r_shoulder] + 0.15 * arm_f * arm_dir_r;
  joints[l_wrist] = joints[l_elbow] + 0.14 * arm_f * arm_dir_l;
  joints[r_wrist] = joints[r_elbow] + 0.14 * arm_f * arm_dir_r;
  joints[l_hip] = Vec3(0.06 * width_f, -0.03, 0.0);
  joints[r_hip] = Vec3(-0.06 * width_f, -0.03, 0.0);
  joints[l_knee] = joints[l_hip] + Vec3(0.01, -0.23 * leg_f, 0.0);
  joints[r_knee] = joints[r_hip] + Vec3(-0.01, -0.23 * leg_f, 0.0);
  const Vec3 l_ankle = joints[l_knee] + Vec3(0.005, -0.22 * leg_f, 0.0);
  const Vec3 r_ankle = joints[r_knee] + Vec3(-0.005, -0.22 * leg_f, 0.0);
  const Vec3 head_top = joints[neck] + Vec3(0.0, 0.11 * torso_f, 0.0);

  const std::vector<CapsuleSpec> capsules = {
      {"torso", pelvis, -1, joints[pelvis], joints[neck] - Vec3(0, 0.03, 0), 0.085 * width_f, false},
      {"head", neck, -1, joints[neck], head_top, 0.07, false},
      {"upper_arm_l", l_shoulder, pelvis, joints[l_shoulder], joints[l_elbow], 0.035, true},
      {"forearm_l", l_elbow, l_shoulder, joints[l_elbow], joints[l_wrist], 0.03, true},
      {"hand_l", l_wrist, l_elbow, joints[l_wrist], joints[l_wrist] + 0.07 * arm_f * arm_dir_l, 0.025, false},
      {"upper_arm_r", r_shoulder, pelvis, joints[r_shoulder], joints[r_elbow], 0.035, true},
      {"forearm_r", r_elbow, r_shoulder, joints[r_elbow], joints[r_wrist], 0.03, true},
      {"hand_r", r_wrist, r_elbow, joints[r_wrist], joints[r_wrist] + 0.07 * arm_f * arm_dir_r, 0.025, false},
      {"thigh_l", l_hip, pelvis, joints[l_hip], joints[l_knee], 0.05, true},
      {"shin_l", l_knee, l_hip, joints[l_knee], l_ankle, 0.04, true},
      {"thigh_r", r_hip, pelvis, joints[r_hip], joints[r_knee], 0.05, true},
      {"shin_r", r_knee, r_hip, joints[r_knee], r_ankle, 0.04, true},
  };
  constexpr int kHead = 1, kHandL = 4, kHandR = 7;

  MeshBuilder mb;
  for (std::size_t c = 0; c < capsules.size(); ++c) mb.add(capsules[c], static_cast<int>(c));

  const int nv = static_cast<int>(mb.vertices.size());
  const int nf = static_cast<int>(mb.faces.size());
  t.vertices_rest.resize(nv, 3);
  for (int v = 0; v < nv; ++v) t.vertices_rest.row(v) = mb.vertices[v].transpose();
  t.faces.resize(nf, 3);
  for (int f = 0; f < nf; ++f) {
    for (int k = 0; k < 3; ++k) t.faces(f, k) = mb.faces[f][k];
  }

  // skinning: owner joint, blended with the previous joint over the first quarter
  t.skin_weights = MatX::Zero(nv, joint_count);
  for (int v = 0; v < nv; ++v) {
    const auto& spec = capsules[mb.vertex_capsule[v]];
    const double s = mb.info[v].axial;
    if (spec.blend_with >= 0 && s < 0.25) {
      const double wp = 0.5 * (1.0 - s / 0.25);
      t.skin_weights(v, spec.blend_with) = wp;
      t.skin_weights(v, spec.owner) = 1.0 - wp;
    } else {
      t.skin_weights(v, spec.owner) = 1.0;
    }
  }

  // each joint is the centroid of the start ring of the capsule it owns
  t.joint_regressor = MatX::Zero(joint_count, nv);
  for (std::size_t c = 0; c < capsules.size(); ++c) {
    const auto& ring = mb.start_rings[c];
    for (int v : ring) t.joint_regressor(capsules[c].owner, v) = 1.0 / ring.size();
  }

  // parts
  const Vec3 head_center = 0.5 * (capsules[kHead].start + capsules[kHead].end);
  for (int f = 0; f < nf; ++f) {
    const int c = mb.face_capsule[f];
    if (c == kHandL) t.part_labels["hand_l"].push_back(f);
    if (c == kHandR) t.part_labels["hand_r"].push_back(f);
    if (c == kHead) {
      const Vec3 centroid = (mb.vertices[mb.faces[f][0]] + mb.vertices[mb.faces[f][1]] +
                             mb.vertices[mb.faces[f][2]]) / 3.0;
      if (centroid.z() > 0.3 * capsules[kHead].radius && centroid.y() > joints[neck].y() + 0.01) {
        t.part_labels["face"].push_back(f);
      }
    }
  }

  // shape basis: global scale, limb thickness; expression: jaw, smile
  t.num_shape = 2;
  t.num_expression = 2;
  t.shape_basis = MatX::Zero(3 * nv, 4);
  for (int v = 0; v < nv; ++v) {
    for (int c = 0; c < 3; ++c) t.shape_basis(3 * v + c, 0) = mb.vertices[v][c];
    if (capsules[mb.vertex_capsule[v]].limb) {
      for (int c = 0; c < 3; ++c) t.shape_basis(3 * v + c, 1) = 0.5 * mb.info[v].radial[c];
    }
  }
  const double head_r = capsules[kHead].radius;
  for (int v : t.part_vertices("face")) {
    const Vec3 p = mb.vertices[v] - head_center;
    const double lower = std::max(0.0, -p.y() / head_r);
    t.shape_basis(3 * v + 1, 2) = -0.010 * lower;
    t.shape_basis(3 * v + 2, 2) = 0.005 * lower;
    const double mouth = std::max(0.0, 1.0 - std::abs(p.y() + 0.4 * head_r) / head_r);
    const double side = p.x() >= 0.0 ? 1.0 : -1.0;
    t.shape_basis(3 * v + 0, 3) = 0.008 * side * mouth;
    t.shape_basis(3 * v + 1, 3) = 0.004 * mouth;
  }

  // keypoints: every joint, then vertex landmarks
  for (int j = 0; j < joint_count; ++j) {
    t.keypoints.push_back({Keypoint::Source::joint, j, t.joint_names[j], false});
  }
  auto add_vertex_kp = [&](int vertex, const std::string& name, bool facial) {
    t.keypoints.push_back({Keypoint::Source::vertex, vertex, name, facial});
    return static_cast<int>(t.keypoints.size()) - 1;
  };
  const int kp_nose = add_vertex_kp(nearest_in_direction(mb, kHead, head_center, Vec3(0, 0, 1)), "nose", true);
  const int kp_leye = add_vertex_kp(nearest_in_direction(mb, kHead, head_center, Vec3(0.4, 0.35, 0.85)), "l_eye", true);
  const int kp_reye = add_vertex_kp(nearest_in_direction(mb, kHead, head_center, Vec3(-0.4, 0.35, 0.85)), "r_eye", true);
  const int kp_lear = add_vertex_kp(nearest_in_direction(mb, kHead, head_center, Vec3(1, 0.05, 0)), "l_ear", true);
  const int kp_rear = add_vertex_kp(nearest_in_direction(mb, kHead, head_center, Vec3(-1, 0.05, 0)), "r_ear", true);
  const int kp_lhand = add_vertex_kp(mb.end_poles[kHandL], "l_hand_tip", false);
  const int kp_rhand = add_vertex_kp(mb.end_poles[kHandR], "r_hand_tip", false);
  const int kp_lankle = add_vertex_kp(mb.end_poles[9], "l_ankle", false);
  const int kp_rankle = add_vertex_kp(mb.end_poles[11], "r_ankle", false);

  t.bones = {{pelvis, neck}, {neck, l_shoulder}, {l_shoulder, l_elbow}, {l_elbow, l_wrist},
             {l_wrist, kp_lhand}, {neck, r_shoulder}, {r_shoulder, r_elbow}, {r_elbow, r_wrist},
             {r_wrist, kp_rhand}, {pelvis, l_hip}, {l_hip, l_knee}, {l_knee, kp_lankle},
             {pelvis, r_hip}, {r_hip, r_knee}, {r_knee, kp_rankle}, {neck, kp_nose},
             {kp_nose, kp_leye}, {kp_leye, kp_lear}, {kp_nose, kp_reye}, {kp_reye, kp_rear}};

  t.validate();
  return t;
}

std::vector<std::string> named_pose_list() { return {"a_pose", "t_pose", "y_pose"}; }

Pose named_pose(const BodyTemplate& tmpl, const std::string& name) {
  Pose pose = Pose::identity(tmpl);
  double arm_angle;
  if (name == "a_pose") {
    return pose;
  } else if (name == "t_pose") {
    arm_angle = 0.25 * kPi;
  } else if (name == "y_pose") {
    arm_angle = 0.5 * kPi;
  } else {
    throw std::invalid_argument("unknown named pose '" + name + "'");
  }
  const int l = tmpl.joint_index("l_shoulder");
  const int r = tmpl.joint_index("r_shoulder");
  if (l < 0 || r < 0) throw std::invalid_argument("template lacks shoulder joints for named poses");
  pose.joint_rotations[l] = Quat(Eigen::AngleAxisd(arm_angle, Vec3::UnitZ()));
  pose.joint_rotations[r] = Quat(Eigen::AngleAxisd(-arm_angle, Vec3::UnitZ()));
  return pose;
}

}  // namespace skelsplat
