#include "skelsplat/splat_renderer.hpp"

#include <omp.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace skelsplat {

namespace {

struct Splat {
  int index;
  Vec2 mean;
  double conic_a, conic_b, conic_c;  // inverse covariance [[a, b], [b, c]]
  double opacity;
  Vec3 color;
  double depth;
  int x0, x1, y0, y1;  // inclusive pixel range that can pass the alpha threshold
};

int thread_count(const RenderConfig& cfg) { return cfg.threads > 0 ? cfg.threads : omp_get_max_threads(); }

Mat3 projection_jacobian_rows(const Camera& cam, const Vec3& c, Eigen::Matrix<double, 2, 3>& j) {
  const double z = c.z();
  j << cam.fx / z, 0.0, -cam.fx * c.x() / (z * z),
       0.0, cam.fy / z, -cam.fy * c.y() / (z * z);
  return cam.world_to_camera.rotation;
}

/// Projects, culls and bins every Gaussian; returns splats sorted by (depth, index).
std::vector<Splat> prepare_splats(const GaussianSet& gs, const Camera& cam, const RenderConfig& cfg) {
  const int n = gs.size();
  std::vector<Splat> splats(n);
  std::vector<char> keep(n, 0);
#pragma omp parallel for schedule(static) num_threads(thread_count(cfg))
  for (int i = 0; i < n; ++i) {
    const Gaussian3D g = gs.get(i);
    const auto proj = project(g, cam, cfg.dilation);
    if (!proj) continue;
    const double opacity = g.opacity();
    if (!(opacity >= cfg.min_alpha)) continue;
    const double det = proj->cov.determinant();
    if (!(det > 0.0)) continue;
    Splat s;
    s.index = i;
    s.mean = proj->mean;
    s.conic_a = proj->cov(1, 1) / det;
    s.conic_b = -proj->cov(0, 1) / det;
    s.conic_c = proj->cov(0, 0) / det;
    s.opacity = opacity;
    s.color = g.color;
    s.depth = proj->depth;
    // α·G >= min_alpha  <=>  dᵀ Σ'⁻¹ d <= 2 ln(α / min_alpha); bound the ellipse by its box
    const double q_max = 2.0 * std::log(opacity / cfg.min_alpha);
    const double rx = std::sqrt(q_max * proj->cov(0, 0));
    const double ry = std::sqrt(q_max * proj->cov(1, 1));
    const double mx = 1e-6 * (1.0 + rx), my = 1e-6 * (1.0 + ry);
    const double fx0 = std::ceil(s.mean.x() - rx - 0.5 - mx);
    const double fx1 = std::floor(s.mean.x() + rx - 0.5 + mx);
    const double fy0 = std::ceil(s.mean.y() - ry - 0.5 - my);
    const double fy1 = std::floor(s.mean.y() + ry - 0.5 + my);
    if (fx1 < 0.0 || fy1 < 0.0 || fx0 > cam.width - 1 || fy0 > cam.height - 1) continue;
    s.x0 = static_cast<int>(std::max(fx0, 0.0));
    s.x1 = static_cast<int>(std::min(fx1, cam.width - 1.0));
    s.y0 = static_cast<int>(std::max(fy0, 0.0));
    s.y1 = static_cast<int>(std::min(fy1, cam.height - 1.0));
    splats[i] = s;
    keep[i] = 1;
  }
  std::vector<Splat> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    if (keep[i]) out.push_back(splats[i]);
  }
  std::stable_sort(out.begin(), out.end(), [](const Splat& a, const Splat& b) {
    if (a.depth != b.depth) return a.depth < b.depth;
    return a.index < b.index;
  });
  return out;
}

struct TileGrid {
  int tiles_x = 0, tiles_y = 0, tile = 16;
  std::vector<std::vector<int>> lists;  // per tile: positions into the sorted splat array
};

TileGrid bin_splats(const std::vector<Splat>& splats, const Camera& cam, int tile) {
  TileGrid grid;
  grid.tile = tile;
  grid.tiles_x = (cam.width + tile - 1) / tile;
  grid.tiles_y = (cam.height + tile - 1) / tile;
  grid.lists.resize(static_cast<std::size_t>(grid.tiles_x) * grid.tiles_y);
  for (int k = 0; k < static_cast<int>(splats.size()); ++k) {
    const Splat& s = splats[k];
    for (int ty = s.y0 / tile; ty <= s.y1 / tile; ++ty) {
      for (int tx = s.x0 / tile; tx <= s.x1 / tile; ++tx) {
        grid.lists[static_cast<std::size_t>(ty) * grid.tiles_x + tx].push_back(k);
      }
    }
  }
  return grid;
}

inline double splat_alpha(const Splat& s, double px, double py, double& gauss) {
  const double dx = px - s.mean.x();
  const double dy = py - s.mean.y();
  const double power = -0.5 * (s.conic_a * dx * dx + s.conic_c * dy * dy) - s.conic_b * dx * dy;
  if (power > 0.0) {
    gauss = 0.0;
    return 0.0;
  }
  gauss = std::exp(power);
  return s.opacity * gauss;
}

void check_camera(const Camera& cam, const RenderConfig& cfg) {
  cam.validate();
  if (cfg.tile_size <= 0) throw std::invalid_argument("tile size must be positive");
}

}  // namespace

std::optional<Projection> project(const Gaussian3D& g, const Camera& cam, double dilation) {
  const Vec3 c = cam.to_camera(g.position);
  if (!(c.z() > cam.near && c.z() < cam.far)) return std::nullopt;
  Eigen::Matrix<double, 2, 3> j;
  const Mat3 w = projection_jacobian_rows(cam, c, j);
  const Eigen::Matrix<double, 2, 3> t = j * w;
  Projection p;
  p.cov = t * covariance(g) * t.transpose();
  p.cov(0, 1) = p.cov(1, 0) = 0.5 * (p.cov(0, 1) + p.cov(1, 0));
  p.cov(0, 0) += dilation;
  p.cov(1, 1) += dilation;
  p.mean = cam.project_camera_point(c);
  p.depth = c.z();
  p.camera_point = c;
  return p;
}

RenderOutput render(const GaussianSet& gaussians, const Camera& cam, const RenderConfig& cfg) {
  check_camera(cam, cfg);
  const std::vector<Splat> splats = prepare_splats(gaussians, cam, cfg);
  const TileGrid grid = bin_splats(splats, cam, cfg.tile_size);
  RenderOutput out{Image(cam.width, cam.height, 3), Image(cam.width, cam.height, 1),
                   Image(cam.width, cam.height, 1)};
  const int num_tiles = static_cast<int>(grid.lists.size());
#pragma omp parallel for schedule(dynamic, 1) num_threads(thread_count(cfg))
  for (int t = 0; t < num_tiles; ++t) {
    const int tx = t % grid.tiles_x, ty = t / grid.tiles_x;
    const auto& list = grid.lists[t];
    const int x_end = std::min(cam.width, (tx + 1) * grid.tile);
    const int y_end = std::min(cam.height, (ty + 1) * grid.tile);
    for (int y = ty * grid.tile; y < y_end; ++y) {
      for (int x = tx * grid.tile; x < x_end; ++x) {
        const double px = x + 0.5, py = y + 0.5;
        double transmittance = 1.0;
        Vec3 color = Vec3::Zero();
        double depth_sum = 0.0, weight_sum = 0.0;
        for (int k : list) {
          const Splat& s = splats[k];
          double gauss;
          const double a = splat_alpha(s, px, py, gauss);
          if (a < cfg.min_alpha) continue;
          const double w = a * transmittance;
          color += w * s.color;
          depth_sum += w * s.depth;
          weight_sum += w;
          transmittance *= (1.0 - a);
          if (transmittance < cfg.min_transmittance) break;
        }
        color += transmittance * cfg.background;
        for (int c = 0; c < 3; ++c) out.color.at(x, y, c) = color[c];
        out.alpha.at(x, y) = 1.0 - transmittance;
        out.depth.at(x, y) = weight_sum > 0.0 ? depth_sum / weight_sum : 0.0;
      }
    }
  }
  return out;
}

RenderOutput render_naive(const GaussianSet& gaussians, const Camera& cam, const RenderConfig& cfg) {
  check_camera(cam, cfg);
  struct Entry {
    int index;
    double depth;
    Vec2 mean;
    Mat2 inv_cov;
    double opacity;
    Vec3 color;
  };
  std::vector<Entry> entries;
  const Mat3& rw = cam.world_to_camera.rotation;
  for (int i = 0; i < gaussians.size(); ++i) {
    const Gaussian3D g = gaussians.get(i);
    const Vec3 c = rw * g.position + cam.world_to_camera.translation;
    if (c.z() <= cam.near || c.z() >= cam.far) continue;
    const Mat3 sigma_cam = rw * covariance(g) * rw.transpose();
    Eigen::Matrix<double, 2, 3> jac;
    jac << cam.fx / c.z(), 0.0, -cam.fx * c.x() / (c.z() * c.z()),
           0.0, cam.fy / c.z(), -cam.fy * c.y() / (c.z() * c.z());
    Mat2 cov = jac * sigma_cam * jac.transpose();
    cov += cfg.dilation * Mat2::Identity();
    Entry e{i, c.z(), Vec2(cam.fx * c.x() / c.z() + cam.cx, cam.fy * c.y() / c.z() + cam.cy),
            cov.inverse(), sigmoid(g.opacity_logit), g.color};
    entries.push_back(e);
  }
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    return a.depth < b.depth || (a.depth == b.depth && a.index < b.index);
  });
  RenderOutput out{Image(cam.width, cam.height, 3), Image(cam.width, cam.height, 1),
                   Image(cam.width, cam.height, 1)};
  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) {
      const Vec2 pix(x + 0.5, y + 0.5);
      double transmittance = 1.0;
      Vec3 color = Vec3::Zero();
      double depth_sum = 0.0, weight_sum = 0.0;
      for (const Entry& e : entries) {
        const Vec2 d = pix - e.mean;
        const double a = e.opacity * std::exp(-0.5 * d.dot(e.inv_cov * d));
        if (a < cfg.min_alpha) continue;
        color += a * transmittance * e.color;
        depth_sum += a * transmittance * e.depth;
        weight_sum += a * transmittance;
        transmittance *= 1.0 - a;
        if (transmittance < cfg.min_transmittance) break;
      }
      color += transmittance * cfg.background;
      for (int c = 0; c < 3; ++c) out.color.at(x, y, c) = color[c];
      out.alpha.at(x, y) = 1.0 - transmittance;
      out.depth.at(x, y) = weight_sum > 0.0 ? depth_sum / weight_sum : 0.0;
    }
  }
  return out;
}

void GaussianGrads::zero(int n) {
  position = Points::Zero(n, 3);
  rotation = Quats::Zero(n, 4);
  log_scale = Points::Zero(n, 3);
  opacity_logit = VecX::Zero(n);
  color = Points::Zero(n, 3);
}

namespace {

// 2D-level gradient of one splat: mean (2), conic a/b/c (3), opacity (1), color (3)
using SplatGrad = std::array<double, 9>;

}  // namespace

GaussianGrads render_backward(const GaussianSet& gaussians, const Camera& cam,
                              const Image& grad_color, const RenderConfig& cfg) {
  check_camera(cam, cfg);
  if (grad_color.width != cam.width || grad_color.height != cam.height || grad_color.channels != 3) {
    throw std::invalid_argument("grad_color must be H x W x 3 matching the camera");
  }
  const int n = gaussians.size();
  GaussianGrads grads(n);
  const std::vector<Splat> splats = prepare_splats(gaussians, cam, cfg);
  const TileGrid grid = bin_splats(splats, cam, cfg.tile_size);
  const int num_tiles = static_cast<int>(grid.lists.size());

  std::vector<std::vector<SplatGrad>> tile_grads(num_tiles);
#pragma omp parallel for schedule(dynamic, 1) num_threads(thread_count(cfg))
  for (int t = 0; t < num_tiles; ++t) {
    const int tx = t % grid.tiles_x, ty = t / grid.tiles_x;
    const auto& list = grid.lists[t];
    auto& acc = tile_grads[t];
    acc.assign(list.size(), SplatGrad{});
    struct Contribution {
      int local;
      double alpha, gauss, transmittance;
    };
    std::vector<Contribution> contribs;
    const int x_end = std::min(cam.width, (tx + 1) * grid.tile);
    const int y_end = std::min(cam.height, (ty + 1) * grid.tile);
    for (int y = ty * grid.tile; y < y_end; ++y) {
      for (int x = tx * grid.tile; x < x_end; ++x) {
        const Vec3 g(grad_color.at(x, y, 0), grad_color.at(x, y, 1), grad_color.at(x, y, 2));
        if (g.isZero(0.0)) continue;
        const double px = x + 0.5, py = y + 0.5;
        contribs.clear();
        double transmittance = 1.0;
        for (int local = 0; local < static_cast<int>(list.size()); ++local) {
          const Splat& s = splats[list[local]];
          double gauss;
          const double a = splat_alpha(s, px, py, gauss);
          if (a < cfg.min_alpha) continue;
          contribs.push_back({local, a, gauss, transmittance});
          transmittance *= (1.0 - a);
          if (transmittance < cfg.min_transmittance) break;
        }
        // walk back to front; `rest` is the color seen behind the current splat
        Vec3 rest = cfg.background;
        for (auto it = contribs.rbegin(); it != contribs.rend(); ++it) {
          const Splat& s = splats[list[it->local]];
          SplatGrad& sg = acc[it->local];
          const double w = it->alpha * it->transmittance;
          for (int c = 0; c < 3; ++c) sg[6 + c] += w * g[c];
          const double d_alpha = it->transmittance * g.dot(s.color - rest);
          rest = it->alpha * s.color + (1.0 - it->alpha) * rest;
          sg[5] += d_alpha * it->gauss;
          const double d_power = d_alpha * s.opacity * it->gauss;
          const double dx = px - s.mean.x(), dy = py - s.mean.y();
          sg[0] += (s.conic_a * dx + s.conic_b * dy) * d_power;
          sg[1] += (s.conic_b * dx + s.conic_c * dy) * d_power;
          sg[2] += -0.5 * dx * dx * d_power;
          sg[3] += -dx * dy * d_power;
          sg[4] += -0.5 * dy * dy * d_power;
        }
      }
    }
  }

  // deterministic reduction in tile order
  std::vector<SplatGrad> splat_grads(splats.size(), SplatGrad{});
  for (int t = 0; t < num_tiles; ++t) {
    const auto& list = grid.lists[t];
    for (std::size_t k = 0; k < list.size(); ++k) {
      for (int c = 0; c < 9; ++c) splat_grads[list[k]][c] += tile_grads[t][k][c];
    }
  }

  const Mat3& rw = cam.world_to_camera.rotation;
  const int num_splats = static_cast<int>(splats.size());
#pragma omp parallel for schedule(static) num_threads(thread_count(cfg))
  for (int k = 0; k < num_splats; ++k) {
    const Splat& s = splats[k];
    const SplatGrad& sg = splat_grads[k];
    const int i = s.index;
    const Gaussian3D g = gaussians.get(i);
    for (int c = 0; c < 3; ++c) grads.color(i, c) = sg[6 + c];
    grads.opacity_logit[i] = sg[5] * s.opacity * (1.0 - s.opacity);

    // conic -> covariance: dL/dΣ' = -Σ'⁻¹ G Σ'⁻¹ with G the full-matrix conic gradient
    Mat2 conic;
    conic << s.conic_a, s.conic_b, s.conic_b, s.conic_c;
    Mat2 g_conic;
    g_conic << sg[2], 0.5 * sg[3], 0.5 * sg[3], sg[4];
    const Mat2 g_cov = -conic * g_conic * conic;

    const Vec3 c = cam.to_camera(g.position);
    Eigen::Matrix<double, 2, 3> j;
    projection_jacobian_rows(cam, c, j);
    const Eigen::Matrix<double, 2, 3> t = j * rw;
    const Mat3 sigma = covariance(g);
    const Mat3 g_sigma = t.transpose() * g_cov * t;
    const Eigen::Matrix<double, 2, 3> g_t = 2.0 * g_cov * t * sigma;
    const Eigen::Matrix<double, 2, 3> g_j = g_t * rw.transpose();

    const double z = c.z(), z2 = z * z, z3 = z2 * z;
    Vec3 g_cam = Vec3::Zero();
    // J entries: (0,0)=fx/z (0,2)=-fx x/z² (1,1)=fy/z (1,2)=-fy y/z²
    g_cam.z() += g_j(0, 0) * (-cam.fx / z2) + g_j(1, 1) * (-cam.fy / z2);
    g_cam.x() += g_j(0, 2) * (-cam.fx / z2);
    g_cam.z() += g_j(0, 2) * (2.0 * cam.fx * c.x() / z3);
    g_cam.y() += g_j(1, 2) * (-cam.fy / z2);
    g_cam.z() += g_j(1, 2) * (2.0 * cam.fy * c.y() / z3);
    // mean2d
    g_cam.x() += sg[0] * cam.fx / z;
    g_cam.z() += sg[0] * (-cam.fx * c.x() / z2);
    g_cam.y() += sg[1] * cam.fy / z;
    g_cam.z() += sg[1] * (-cam.fy * c.y() / z2);
    grads.position.row(i) = (rw.transpose() * g_cam).transpose();

    const CovarianceGrad cg = covariance_backward(g, g_sigma);
    grads.rotation.row(i) = cg.rotation.transpose();
    grads.log_scale.row(i) = cg.log_scale.transpose();
  }
  return grads;
}

}  // namespace skelsplat
