#include "skelsplat/camera.hpp"

#include <stdexcept>

namespace skelsplat {

void Camera::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw std::invalid_argument("camera focal lengths must be positive");
  if (!(near > 0.0) || !(near < far)) throw std::invalid_argument("camera requires 0 < near < far");
  if (width <= 0 || height <= 0) throw std::invalid_argument("camera image size must be positive");
}

Vec3 Camera::ray_direction(double u, double v) const {
  const Vec3 dir_cam((u - cx) / fx, (v - cy) / fy, 1.0);
  return (world_to_camera.rotation.transpose() * dir_cam).normalized();
}

Camera Camera::look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double fov_y,
                       int width, int height, double near, double far) {
  const Vec3 forward = (target - eye).normalized();
  Vec3 right = forward.cross(up);
  if (right.norm() < 1e-12) right = forward.cross(Vec3::UnitZ());
  right.normalize();
  const Vec3 down = forward.cross(right);
  Camera cam;
  cam.world_to_camera.rotation.row(0) = right.transpose();
  cam.world_to_camera.rotation.row(1) = down.transpose();
  cam.world_to_camera.rotation.row(2) = forward.transpose();
  cam.world_to_camera.translation = -(cam.world_to_camera.rotation * eye);
  cam.width = width;
  cam.height = height;
  cam.fy = 0.5 * height / std::tan(0.5 * fov_y);
  cam.fx = cam.fy;
  cam.cx = 0.5 * width;
  cam.cy = 0.5 * height;
  cam.near = near;
  cam.far = far;
  cam.validate();
  return cam;
}

Camera Camera::resized(int new_width, int new_height) const {
  Camera c = *this;
  const double sx = static_cast<double>(new_width) / width;
  const double sy = static_cast<double>(new_height) / height;
  c.fx *= sx;
  c.cx *= sx;
  c.fy *= sy;
  c.cy *= sy;
  c.width = new_width;
  c.height = new_height;
  return c;
}

bool Camera::operator==(const Camera& o) const {
  return fx == o.fx && fy == o.fy && cx == o.cx && cy == o.cy && width == o.width &&
         height == o.height && world_to_camera.rotation == o.world_to_camera.rotation &&
         world_to_camera.translation == o.world_to_camera.translation && near == o.near &&
         far == o.far;
}

}  // namespace skelsplat
