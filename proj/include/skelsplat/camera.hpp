#pragma once

#include "skelsplat/math.hpp"

namespace skelsplat {

/// Pinhole camera. Camera space is x right, y down, z forward; pixel centers
/// sit at half-integer image coordinates.
struct Camera {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  int width = 0, height = 0;
  Rigid world_to_camera;
  double near = 0.01;
  double far = 100.0;

  /// Throws std::invalid_argument on non-positive focal lengths or bad clip planes.
  void validate() const;

  Vec3 to_camera(const Vec3& world) const { return world_to_camera.apply(world); }
  Vec3 center() const { return world_to_camera.inverse().translation; }
  /// Projects a camera-space point to image coordinates.
  Vec2 project_camera_point(const Vec3& c) const {
    return Vec2(fx * c.x() / c.z() + cx, fy * c.y() / c.z() + cy);
  }
  /// World-space unit direction of the ray through continuous image point (u, v).
  Vec3 ray_direction(double u, double v) const;

  /// Camera looking from eye toward target with vertical field of view fov_y (radians).
  static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double fov_y,
                        int width, int height, double near = 0.01, double far = 100.0);

  /// Same extrinsics and field of view at another resolution.
  Camera resized(int new_width, int new_height) const;

  bool operator==(const Camera& o) const;
};

}  // namespace skelsplat
