#include "skelsplat/skeleton_render.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace skelsplat {

std::vector<Vec3> keypoint_positions(const BodyTemplate& tmpl, const Points& posed_vertices,
                                     const std::vector<Rigid>& joint_transforms, const Points& canonical_joints) {
  std::vector<Vec3> out;
  out.reserve(tmpl.keypoints.size());
  for (const Keypoint& kp : tmpl.keypoints) {
    if (kp.source == Keypoint::Source::joint) {
      out.push_back(joint_transforms.at(kp.index).apply(canonical_joints.row(kp.index).transpose()));
    } else {
      out.push_back(posed_vertices.row(kp.index).transpose());
    }
  }
  return out;
}

std::vector<ProjectedKeypoint> project_keypoints(const BodyTemplate& tmpl, const Points& posed_vertices,
                                                 const std::vector<Rigid>& joint_transforms,
                                                 const Points& canonical_joints, const Camera& cam) {
  const std::vector<Vec3> world = keypoint_positions(tmpl, posed_vertices, joint_transforms, canonical_joints);
  std::vector<ProjectedKeypoint> out(world.size());
  for (std::size_t k = 0; k < world.size(); ++k) {
    ProjectedKeypoint& p = out[k];
    p.world = world[k];
    const Vec3 c = cam.to_camera(world[k]);
    p.depth = c.z();
    if (c.z() < cam.near || c.z() > cam.far) continue;
    p.pixel = cam.project_camera_point(c);
    p.visible = p.pixel.x() >= 0.0 && p.pixel.x() < cam.width && p.pixel.y() >= 0.0 && p.pixel.y() < cam.height;
  }
  return out;
}

bool segment_hits_triangle(const Vec3& a, const Vec3& b, const Vec3& v0, const Vec3& v1, const Vec3& v2,
                           double eps) {
  const Vec3 d = b - a;
  const Vec3 e1 = v1 - v0, e2 = v2 - v0;
  const Vec3 p = d.cross(e2);
  const double det = e1.dot(p);
  if (det == 0.0) return false;  // segment parallel to the plane
  const double inv = 1.0 / det;
  const Vec3 s = a - v0;
  const double u = s.dot(p) * inv;
  if (u < 0.0 || u > 1.0) return false;
  const Vec3 q = s.cross(e1);
  const double v = d.dot(q) * inv;
  if (v < 0.0 || u + v > 1.0) return false;
  const double t = e2.dot(q) * inv;
  return t > eps && t < 1.0 - eps;
}

std::vector<bool> default_cull_mask(const BodyTemplate& tmpl, bool cull_hands) {
  std::vector<bool> mask(tmpl.keypoints.size());
  for (std::size_t k = 0; k < mask.size(); ++k) {
    const std::string& name = tmpl.keypoints[k].name;
    mask[k] = tmpl.keypoints[k].facial || (cull_hands && name.find("hand") != std::string::npos);
  }
  return mask;
}

void occlusion_cull(const BodyTemplate& tmpl, const Points& posed_vertices, std::vector<ProjectedKeypoint>& kps,
                    const Camera& cam, const std::vector<bool>& cull_mask, int threads) {
  if (cull_mask.size() != kps.size()) throw std::invalid_argument("cull mask length differs from keypoint count");
  const Vec3 eye = cam.center();
  const int nf = tmpl.num_faces();
  const int nk = static_cast<int>(kps.size());
  if (threads <= 0) threads = omp_get_max_threads();
#pragma omp parallel for num_threads(threads) schedule(dynamic)
  for (int k = 0; k < nk; ++k) {
    if (!cull_mask[k] || !kps[k].visible) continue;
    const Vec3 target = kps[k].world;
    const Vec3 lo = eye.cwiseMin(target), hi = eye.cwiseMax(target);
    for (int f = 0; f < nf; ++f) {
      const Vec3 v0 = posed_vertices.row(tmpl.faces(f, 0)).transpose();
      const Vec3 v1 = posed_vertices.row(tmpl.faces(f, 1)).transpose();
      const Vec3 v2 = posed_vertices.row(tmpl.faces(f, 2)).transpose();
      // cheap reject: the segment's box misses the triangle's box
      if ((v0.cwiseMax(v1).cwiseMax(v2).array() < lo.array()).any()) continue;
      if ((v0.cwiseMin(v1).cwiseMin(v2).array() > hi.array()).any()) continue;
      if (segment_hits_triangle(eye, target, v0, v1, v2)) {
        kps[k].visible = false;
        break;
      }
    }
  }
}

std::vector<Rgb8> hue_palette(int count) {
  std::vector<Rgb8> out;
  out.reserve(std::max(count, 0));
  for (int k = 0; k < count; ++k) {
    // integer HSV with S = V = 1: six 256-step ramps
    const int h = (k * 1536) / count;
    const int sector = h / 256, f = h % 256;
    const auto up = static_cast<std::uint8_t>(f), down = static_cast<std::uint8_t>(255 - f);
    switch (sector) {
      case 0: out.push_back({255, up, 0}); break;
      case 1: out.push_back({down, 255, 0}); break;
      case 2: out.push_back({0, 255, up}); break;
      case 3: out.push_back({0, down, 255}); break;
      case 4: out.push_back({up, 0, 255}); break;
      default: out.push_back({255, 0, down}); break;
    }
  }
  return out;
}

namespace {

int scale_stroke(int value, int reference, int width, int height) {
  const int side = std::min(width, height);
  return std::max(1, (value * side + reference / 2) / reference);
}

struct Canvas {
  Image& img;
  void put(int x, int y, const Rgb8& c) {
    if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
    for (int ch = 0; ch < 3; ++ch) img.at(x, y, ch) = c[ch] / 255.0;
  }
};

void draw_line(Canvas& canvas, int x0, int y0, int x1, int y1, int width, const Rgb8& c) {
  const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  const bool x_major = dx >= -dy;
  const int lo = -(width - 1) / 2, hi = width / 2;
  int err = dx + dy;
  for (;;) {
    for (int o = lo; o <= hi; ++o) {
      if (x_major) canvas.put(x0, y0 + o, c);
      else canvas.put(x0 + o, y0, c);
    }
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

void draw_disc(Canvas& canvas, int cx, int cy, int r, const Rgb8& c) {
  for (int y = -r; y <= r; ++y) {
    for (int x = -r; x <= r; ++x) {
      if (x * x + y * y <= r * r) canvas.put(cx + x, cy + y, c);
    }
  }
}

}  // namespace

int SkeletonStyle::scaled_width(int width, int height) const {
  return scale_stroke(line_width, reference_size, width, height);
}
int SkeletonStyle::scaled_radius(int width, int height) const {
  return scale_stroke(radius, reference_size, width, height);
}

SkeletonImage rasterize_skeleton(const std::vector<ProjectedKeypoint>& kps,
                                 const std::vector<std::pair<int, int>>& bones, const std::vector<Rgb8>& keypoint_colors,
                                 const std::vector<Rgb8>& bone_colors, int width, int height, int line_width,
                                 int radius) {
  if (keypoint_colors.size() < kps.size() || bone_colors.size() < bones.size()) {
    throw std::invalid_argument("palette shorter than keypoint or bone list");
  }
  SkeletonImage out;
  out.pixels = Image(width, height, 3, 0.0);
  out.visible.resize(kps.size());
  for (std::size_t k = 0; k < kps.size(); ++k) out.visible[k] = kps[k].visible;
  Canvas canvas{out.pixels};
  for (std::size_t b = 0; b < bones.size(); ++b) {
    const ProjectedKeypoint& p = kps.at(bones[b].first);
    const ProjectedKeypoint& q = kps.at(bones[b].second);
    if (!p.visible || !q.visible) continue;
    draw_line(canvas, pixel_index(p.pixel.x()), pixel_index(p.pixel.y()), pixel_index(q.pixel.x()),
              pixel_index(q.pixel.y()), line_width, bone_colors[b]);
  }
  for (std::size_t k = 0; k < kps.size(); ++k) {
    if (!kps[k].visible) continue;
    draw_disc(canvas, pixel_index(kps[k].pixel.x()), pixel_index(kps[k].pixel.y()), radius, keypoint_colors[k]);
  }
  return out;
}

SkeletonImage render_skeleton(const BodyTemplate& tmpl, const Points& canonical_vertices, const Pose& pose,
                              const Camera& cam, const SkeletonStyle& style, bool cull, bool cull_hands) {
  const LbsResult posed = lbs_from_canonical(tmpl, canonical_vertices, pose);
  const Points joints = joint_positions(tmpl, canonical_vertices);
  std::vector<ProjectedKeypoint> kps = project_keypoints(tmpl, posed.vertices, posed.joint_transforms, joints, cam);
  if (cull) occlusion_cull(tmpl, posed.vertices, kps, cam, default_cull_mask(tmpl, cull_hands));
  const int nk = static_cast<int>(tmpl.keypoints.size());
  return rasterize_skeleton(kps, tmpl.bones, hue_palette(nk), hue_palette(static_cast<int>(tmpl.bones.size())),
                            cam.width, cam.height, style.scaled_width(cam.width, cam.height),
                            style.scaled_radius(cam.width, cam.height));
}

}  // namespace skelsplat
