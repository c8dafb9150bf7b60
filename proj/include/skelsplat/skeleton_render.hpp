#pragma once

#include "skelsplat/body_model.hpp"
#include "skelsplat/camera.hpp"
#include "skelsplat/image.hpp"

#include <array>
#include <cstdint>
#include <vector>

namespace skelsplat {

struct ProjectedKeypoint {
  Vec3 world = Vec3::Zero();
  Vec2 pixel = Vec2::Zero();  // continuous image coordinates
  double depth = 0.0;         // camera-space z
  bool visible = false;
};

/// Keypoint world positions: posed joint centers (joint transform applied to the
/// canonical joint) or posed vertices.
std::vector<Vec3> keypoint_positions(const BodyTemplate& tmpl, const Points& posed_vertices,
                                     const std::vector<Rigid>& joint_transforms, const Points& canonical_joints);

/// Projects every keypoint; a keypoint is visible when near <= z <= far and its pixel
/// lies inside the image.
std::vector<ProjectedKeypoint> project_keypoints(const BodyTemplate& tmpl, const Points& posed_vertices,
                                                 const std::vector<Rigid>& joint_transforms,
                                                 const Points& canonical_joints, const Camera& cam);

/// Segment/triangle test on the segment a + t (b - a); true when the hit parameter lies
/// strictly inside (eps, 1 - eps).
bool segment_hits_triangle(const Vec3& a, const Vec3& b, const Vec3& v0, const Vec3& v1, const Vec3& v2,
                           double eps = 1e-4);

/// Keypoints subject to occlusion culling: the facial ones, plus hand tips when requested.
std::vector<bool> default_cull_mask(const BodyTemplate& tmpl, bool cull_hands = false);

/// Marks each culled keypoint invisible when any template triangle crosses the segment
/// from the camera center to it. Other keypoints are left untouched.
void occlusion_cull(const BodyTemplate& tmpl, const Points& posed_vertices, std::vector<ProjectedKeypoint>& kps,
                    const Camera& cam, const std::vector<bool>& cull_mask, int threads = 0);

using Rgb8 = std::array<std::uint8_t, 3>;

/// Fully saturated hue sweep, one color per index.
std::vector<Rgb8> hue_palette(int count);

struct SkeletonStyle {
  int line_width = 4;  // at the reference size
  int radius = 4;
  int reference_size = 512;

  /// Stroke width and disc radius for an image of the given size (min side), at least 1.
  int scaled_width(int width, int height) const;
  int scaled_radius(int width, int height) const;
};

struct SkeletonImage {
  Image pixels;  // H x W x 3, values k/255
  std::vector<bool> visible;
};

/// Integer pixel of a continuous image coordinate.
inline int pixel_index(double u) { return static_cast<int>(std::floor(u)); }

/// Black image; bones (list order) where both ends are visible, then keypoint discs.
SkeletonImage rasterize_skeleton(const std::vector<ProjectedKeypoint>& kps,
                                 const std::vector<std::pair<int, int>>& bones, const std::vector<Rgb8>& keypoint_colors,
                                 const std::vector<Rgb8>& bone_colors, int width, int height, int line_width,
                                 int radius);

/// Full conditioning pipeline for a pose: LBS of the given canonical mesh, projection,
/// occlusion culling, rasterization with hue palettes.
SkeletonImage render_skeleton(const BodyTemplate& tmpl, const Points& canonical_vertices, const Pose& pose,
                              const Camera& cam, const SkeletonStyle& style = {}, bool cull = true,
                              bool cull_hands = false);

}  // namespace skelsplat
