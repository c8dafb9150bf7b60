#pragma once

#include "skelsplat/body_model.hpp"
#include "skelsplat/camera.hpp"
#include "skelsplat/rng.hpp"

#include <array>
#include <string>
#include <vector>

namespace skelsplat {

using Range = std::array<double, 2>;

struct CameraSamplerConfig {
  Range radius{1.0, 2.0};
  Range azimuth_deg{0.0, 360.0};
  Range polar_deg{60.0, 120.0};  // from the +y (up) axis
  Range fov_deg{40.0, 70.0};
  double face_focus_prob = 0.2;
  Range face_radius{0.35, 0.6};  // replaces `radius` under face focus
  double jitter = 0.05;          // look-at offset amplitude on x and z
};

struct CameraSample {
  Camera camera;
  double radius = 0.0, azimuth = 0.0, polar = 0.0, fov = 0.0;  // radians for angles
  bool face_focus = false;
  Vec3 target = Vec3::Zero();
};

/// Camera on a sphere around target; azimuth 0 looks from +z, polar 90° is level.
Camera spherical_camera(const Vec3& target, double radius, double azimuth, double polar, double fov_y,
                        int width, int height);

/// Draws a camera. Always consumes the same number of random draws.
CameraSample sample_camera(const CameraSamplerConfig& cfg, Rng& rng, const Vec3& body_center,
                           const Vec3& face_center, int width, int height);

/// Body center (bounds midpoint) and face-part centroid of a posed template.
std::pair<Vec3, Vec3> body_and_face_centers(const BodyTemplate& tmpl, const Points& posed_vertices);

CameraSample sample_camera(const CameraSamplerConfig& cfg, Rng& rng, const Pose& pose,
                           const BodyTemplate& tmpl, int width, int height);

struct PoseSamplerConfig {
  double canonical_fraction = 0.3;
  std::vector<std::string> canonical_poses{"a_pose", "t_pose", "y_pose"};
  double spine_sigma = 0.15, arm_sigma = 0.5, leg_sigma = 0.3;  // radians
  double spine_limit = 0.4, arm_limit = 1.5, leg_limit = 1.0;
  double expression_sigma = 1.0;
};

enum class PosePhase { canonical, random };

/// Curriculum pose sampler: named canonical poses first, random poses after.
class PoseSampler {
 public:
  explicit PoseSampler(PoseSamplerConfig cfg = {}) : cfg_(std::move(cfg)) {}

  PosePhase phase(int step, int total_steps) const;
  Pose sample(int step, int total_steps, Rng& rng, const BodyTemplate& tmpl);
  /// Random-phase generator on its own.
  Pose random_pose(Rng& rng, const BodyTemplate& tmpl);

  /// Number of random_pose() calls so far.
  int random_draws() const { return random_draws_; }
  const PoseSamplerConfig& config() const { return cfg_; }

 private:
  PoseSamplerConfig cfg_;
  int random_draws_ = 0;
};

}  // namespace skelsplat
