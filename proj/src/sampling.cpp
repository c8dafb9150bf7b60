#include "skelsplat/sampling.hpp"

#include <stdexcept>

namespace skelsplat {

namespace {

double deg(double d) { return d * kPi / 180.0; }

enum class JointGroup { spine, arm, leg };

JointGroup group_of(const std::string& name) {
  if (name.find("shoulder") != std::string::npos || name.find("elbow") != std::string::npos ||
      name.find("wrist") != std::string::npos) {
    return JointGroup::arm;
  }
  if (name.find("hip") != std::string::npos || name.find("knee") != std::string::npos) return JointGroup::leg;
  return JointGroup::spine;
}

}  // namespace

Camera spherical_camera(const Vec3& target, double radius, double azimuth, double polar, double fov_y,
                        int width, int height) {
  const Vec3 dir(std::sin(polar) * std::sin(azimuth), std::cos(polar), std::sin(polar) * std::cos(azimuth));
  return Camera::look_at(target + radius * dir, target, Vec3::UnitY(), fov_y, width, height);
}

CameraSample sample_camera(const CameraSamplerConfig& cfg, Rng& rng, const Vec3& body_center,
                           const Vec3& face_center, int width, int height) {
  CameraSample s;
  s.radius = rng.uniform(cfg.radius[0], cfg.radius[1]);
  s.azimuth = deg(rng.uniform(cfg.azimuth_deg[0], cfg.azimuth_deg[1]));
  s.polar = deg(rng.uniform(cfg.polar_deg[0], cfg.polar_deg[1]));
  s.fov = deg(rng.uniform(cfg.fov_deg[0], cfg.fov_deg[1]));
  const double focus_draw = rng.uniform();
  const double face_radius = rng.uniform(cfg.face_radius[0], cfg.face_radius[1]);
  const double jx = rng.uniform(-cfg.jitter, cfg.jitter);
  const double jz = rng.uniform(-cfg.jitter, cfg.jitter);
  s.face_focus = focus_draw < cfg.face_focus_prob;
  if (s.face_focus) {
    s.target = face_center;
    s.radius = face_radius;
  } else {
    s.target = body_center + Vec3(jx, 0.0, jz);
  }
  s.camera = spherical_camera(s.target, s.radius, s.azimuth, s.polar, s.fov, width, height);
  return s;
}

std::pair<Vec3, Vec3> body_and_face_centers(const BodyTemplate& tmpl, const Points& posed) {
  const Vec3 lo = posed.colwise().minCoeff().transpose();
  const Vec3 hi = posed.colwise().maxCoeff().transpose();
  Vec3 face = 0.5 * (lo + hi);
  const std::vector<int> verts = tmpl.part_vertices("face");
  if (!verts.empty()) {
    face.setZero();
    for (int v : verts) face += posed.row(v).transpose();
    face /= static_cast<double>(verts.size());
  }
  return {0.5 * (lo + hi), face};
}

CameraSample sample_camera(const CameraSamplerConfig& cfg, Rng& rng, const Pose& pose,
                           const BodyTemplate& tmpl, int width, int height) {
  const auto [body, face] = body_and_face_centers(tmpl, lbs_transform(tmpl, pose).vertices);
  return sample_camera(cfg, rng, body, face, width, height);
}

PosePhase PoseSampler::phase(int step, int total_steps) const {
  const double boundary = cfg_.canonical_fraction * total_steps;
  return step < boundary ? PosePhase::canonical : PosePhase::random;
}

Pose PoseSampler::sample(int step, int total_steps, Rng& rng, const BodyTemplate& tmpl) {
  if (phase(step, total_steps) == PosePhase::canonical) {
    if (cfg_.canonical_poses.empty()) return Pose::identity(tmpl);
    const auto k = rng.below(cfg_.canonical_poses.size());
    return named_pose(tmpl, cfg_.canonical_poses[k]);
  }
  return random_pose(rng, tmpl);
}

Pose PoseSampler::random_pose(Rng& rng, const BodyTemplate& tmpl) {
  ++random_draws_;
  Pose pose = Pose::identity(tmpl);
  for (int j = 0; j < tmpl.num_joints(); ++j) {
    double sigma = cfg_.spine_sigma, limit = cfg_.spine_limit;
    switch (group_of(tmpl.joint_names[j])) {
      case JointGroup::arm: sigma = cfg_.arm_sigma; limit = cfg_.arm_limit; break;
      case JointGroup::leg: sigma = cfg_.leg_sigma; limit = cfg_.leg_limit; break;
      case JointGroup::spine: break;
    }
    Vec3 v(rng.normal(), rng.normal(), rng.normal());
    v *= sigma;
    // the root only orients the body; cameras already cover global rotation
    if (tmpl.parents[j] < 0) v.setZero();
    const double angle = v.norm();
    if (angle > limit) v *= limit / angle;
    pose.joint_rotations[j] = to_quat(quat_exp(v));
  }
  for (int k = 0; k < tmpl.num_expression; ++k) pose.expression[k] = cfg_.expression_sigma * rng.normal();
  return pose;
}

}  // namespace skelsplat
