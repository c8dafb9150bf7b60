#include "skelsplat/mesh_raster.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace skelsplat {

namespace {

inline double edge(const Vec2& a, const Vec2& b, const Vec2& p) {
  return (b.x() - a.x()) * (p.y() - a.y()) - (b.y() - a.y()) * (p.x() - a.x());
}

// An edge owns the pixels lying exactly on it when it points down, or left along
// a horizontal; the shared edge of two consistently oriented triangles is owned once.
inline bool owns_boundary(const Vec2& a, const Vec2& b) {
  const double dy = b.y() - a.y();
  return dy > 0.0 || (dy == 0.0 && b.x() < a.x());
}

inline bool inside(double w, bool owner) { return w > 0.0 || (w == 0.0 && owner); }

}  // namespace

MeshRender rasterize_mesh(const Points& vertices, const Faces& faces, const Camera& cam,
                          const Points* vertex_colors, const Vec3& background) {
  cam.validate();
  const int w = cam.width, h = cam.height;
  MeshRender out;
  out.silhouette = Image(w, h, 1);
  out.depth = Image(w, h, 1);
  out.face_id.assign(static_cast<std::size_t>(w) * h, -1);
  std::vector<double> zbuf(static_cast<std::size_t>(w) * h, std::numeric_limits<double>::infinity());
  if (vertex_colors) {
    out.color = Image(w, h, 3);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int c = 0; c < 3; ++c) out.color.at(x, y, c) = background[c];
      }
    }
  }

  const int nv = static_cast<int>(vertices.rows());
  std::vector<Vec3> cam_pts(nv);
  std::vector<Vec2> screen(nv);
  for (int v = 0; v < nv; ++v) {
    cam_pts[v] = cam.to_camera(vertices.row(v).transpose());
    if (cam_pts[v].z() > cam.near) screen[v] = cam.project_camera_point(cam_pts[v]);
  }

  for (int f = 0; f < faces.rows(); ++f) {
    int idx[3] = {faces(f, 0), faces(f, 1), faces(f, 2)};
    if (cam_pts[idx[0]].z() <= cam.near || cam_pts[idx[1]].z() <= cam.near ||
        cam_pts[idx[2]].z() <= cam.near) {
      continue;
    }
    double area = edge(screen[idx[0]], screen[idx[1]], screen[idx[2]]);
    if (area == 0.0) continue;
    if (area < 0.0) {
      std::swap(idx[1], idx[2]);
      area = -area;
    }
    const Vec2 &p0 = screen[idx[0]], &p1 = screen[idx[1]], &p2 = screen[idx[2]];
    const bool own0 = owns_boundary(p1, p2), own1 = owns_boundary(p2, p0), own2 = owns_boundary(p0, p1);
    const double inv_z0 = 1.0 / cam_pts[idx[0]].z();
    const double inv_z1 = 1.0 / cam_pts[idx[1]].z();
    const double inv_z2 = 1.0 / cam_pts[idx[2]].z();

    const double min_x = std::min({p0.x(), p1.x(), p2.x()});
    const double max_x = std::max({p0.x(), p1.x(), p2.x()});
    const double min_y = std::min({p0.y(), p1.y(), p2.y()});
    const double max_y = std::max({p0.y(), p1.y(), p2.y()});
    const int x0 = std::max(0, static_cast<int>(std::floor(min_x - 0.5)));
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(max_x - 0.5)));
    const int y0 = std::max(0, static_cast<int>(std::floor(min_y - 0.5)));
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(max_y - 0.5)));
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const Vec2 p(x + 0.5, y + 0.5);
        const double w0 = edge(p1, p2, p), w1 = edge(p2, p0, p), w2 = edge(p0, p1, p);
        if (!inside(w0, own0) || !inside(w1, own1) || !inside(w2, own2)) continue;
        const double b0 = w0 / area, b1 = w1 / area, b2 = w2 / area;
        const double inv_z = b0 * inv_z0 + b1 * inv_z1 + b2 * inv_z2;
        const double z = 1.0 / inv_z;
        const std::size_t pix = static_cast<std::size_t>(y) * w + x;
        if (!(z < zbuf[pix])) continue;
        zbuf[pix] = z;
        out.face_id[pix] = f;
        out.silhouette.at(x, y) = 1.0;
        out.depth.at(x, y) = z;
        if (vertex_colors) {
          const double c0 = b0 * inv_z0 * z, c1 = b1 * inv_z1 * z, c2 = b2 * inv_z2 * z;
          for (int c = 0; c < 3; ++c) {
            out.color.at(x, y, c) = c0 * (*vertex_colors)(idx[0], c) + c1 * (*vertex_colors)(idx[1], c) +
                                    c2 * (*vertex_colors)(idx[2], c);
          }
        }
      }
    }
  }
  return out;
}

}  // namespace skelsplat
