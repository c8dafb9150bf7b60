#pragma once

#include "skelsplat/camera.hpp"
#include "skelsplat/gaussian.hpp"
#include "skelsplat/image.hpp"

#include <optional>

namespace skelsplat {

struct RenderConfig {
  int tile_size = 16;
  double min_alpha = 1.0 / 255.0;      // per-splat contributions below this are skipped
  double min_transmittance = 1e-4;     // compositing stops once transmittance drops below
  double dilation = 0.3;               // px² added to the projected covariance diagonal
  Vec3 background = Vec3::Zero();
  int threads = 0;                     // 0: OpenMP default
};

struct RenderOutput {
  Image color;  // H x W x 3
  Image alpha;  // H x W
  Image depth;  // H x W, alpha-weighted mean splat depth (0 where empty)
};

struct Projection {
  Vec2 mean;      // pixels
  Mat2 cov;       // px², dilation included
  double depth;   // camera-space z
  Vec3 camera_point;
};

/// Projects a Gaussian with Σ' = J W Σ Wᵀ Jᵀ + dilation·I. Empty when the mean's
/// depth lies outside (near, far).
std::optional<Projection> project(const Gaussian3D& g, const Camera& cam, double dilation = 0.3);

/// Tile-based front-to-back compositing, sorted by depth with index tie-break.
RenderOutput render(const GaussianSet& gaussians, const Camera& cam, const RenderConfig& cfg = {});

/// Per-pixel loop over every Gaussian; a slow, independent oracle for render().
RenderOutput render_naive(const GaussianSet& gaussians, const Camera& cam,
                          const RenderConfig& cfg = {});

struct GaussianGrads {
  Points position;
  Quats rotation;
  Points log_scale;
  VecX opacity_logit;
  Points color;

  GaussianGrads() = default;
  explicit GaussianGrads(int n) { zero(n); }
  void zero(int n);
  int size() const { return static_cast<int>(position.rows()); }
};

/// Gradients of L = Σ grad_color · color(render) with respect to every attribute.
GaussianGrads render_backward(const GaussianSet& gaussians, const Camera& cam,
                              const Image& grad_color, const RenderConfig& cfg = {});

}  // namespace skelsplat
