#pragma once

#include "skelsplat/body_model.hpp"
#include "skelsplat/camera.hpp"
#include "skelsplat/image.hpp"

#include <vector>

namespace skelsplat {

struct MeshRender {
  Image color;       // H x W x 3 (background where uncovered); empty without vertex colors
  Image silhouette;  // H x W, 1 where covered
  Image depth;       // H x W, camera-space z where covered, 0 elsewhere
  std::vector<int> face_id;  // per pixel, -1 where uncovered
};

/// Z-buffer rasterization with a top-left fill rule and perspective-correct
/// interpolation. Triangles with a vertex at or in front of the near plane are
/// skipped. Ties in depth keep the lower face index.
MeshRender rasterize_mesh(const Points& vertices, const Faces& faces, const Camera& cam,
                          const Points* vertex_colors = nullptr,
                          const Vec3& background = Vec3::Zero());

}  // namespace skelsplat
