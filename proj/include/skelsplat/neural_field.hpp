#pragma once

#include "skelsplat/body_model.hpp"
#include "skelsplat/camera.hpp"
#include "skelsplat/mlp.hpp"
#include "skelsplat/optim.hpp"
#include "skelsplat/sampling.hpp"
#include "skelsplat/splat_renderer.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace skelsplat {

/// Anything that can report density and color at a batch of points.
class FieldQuery {
 public:
  virtual ~FieldQuery() = default;
  /// density: M, color: M x 3.
  virtual void query(const Points& points, VecX& density, Points& color) const = 0;
};

struct FieldConfig {
  int bands = 8;
  std::vector<int> hidden{128, 128, 128, 128};
  double density_bias = -1.0;  // initial pre-softplus density
  Vec3 center = Vec3::Zero();  // encoding normalization
  double radius = 1.0;
};

/// Frequency-encoded MLP with a softplus density head and sigmoid color head.
class RadianceField : public FieldQuery {
 public:
  RadianceField() = default;
  RadianceField(const FieldConfig& cfg, std::uint64_t seed);

  void query(const Points& points, VecX& density, Points& color) const override;

  /// d_params += ∂/∂θ of Σ d_density·τ + Σ d_color·c over the batch.
  void backward(const Points& points, const VecX& d_density, const Points& d_color, VecX& d_params,
                int threads = 0) const;

  const FieldConfig& config() const { return cfg_; }
  const FrequencyEncoding& encoding() const { return enc_; }
  int num_params() const { return mlp_.num_params(); }
  VecX& params() { return mlp_.params; }
  const VecX& params() const { return mlp_.params; }
  const Mlp& mlp() const { return mlp_; }

  /// Zeroes the output layer weights (biases keep their values).
  void zero_output_weights();

 private:
  FieldConfig cfg_;
  FrequencyEncoding enc_;
  Mlp mlp_;
};

struct VolumeRenderConfig {
  int num_samples = 64;
  bool jitter = false;  // stratified offsets; midpoints when false
  std::uint64_t seed = 0;
  Vec3 background = Vec3::Zero();
  /// When set, rays are clipped to this box and density outside it is taken as zero.
  std::optional<std::pair<Vec3, Vec3>> clip_box;
  /// Rays stop compositing once transmittance falls below this (0 keeps every sample).
  double min_transmittance = 0.0;
  int threads = 0;
};

/// Quadrature render. depth is the expected termination depth Σ w_i z_i (camera z),
/// which is zero for empty rays.
RenderOutput volume_render(const FieldQuery& field, const Camera& cam, const VolumeRenderConfig& cfg = {});

/// Upstream image gradients for volume_render_backward; empty images count as zero.
struct VolumeGrads {
  Image color;  // H x W x 3
  Image alpha;  // H x W
  Image depth;  // H x W
};

/// Returns dL/dθ for a loss with the given image gradients.
VecX volume_render_backward(const RadianceField& field, const Camera& cam, const VolumeGrads& grads,
                            const VolumeRenderConfig& cfg = {});

struct VolumeStep {
  RenderOutput image;
  VecX grad;
};

/// Renders once, asks loss_grad for the image gradients of that render, and
/// back-propagates them; cheaper than volume_render followed by volume_render_backward.
VolumeStep volume_render_step(const RadianceField& field, const Camera& cam,
                              const std::function<VolumeGrads(const RenderOutput&)>& loss_grad,
                              const VolumeRenderConfig& cfg = {});

struct GeometryLossConfig {
  double tau_max = 20.0;
  double tau_min = 2.0;
  double band_fraction = 0.02;  // off-mesh offset as a fraction of the bounds diagonal
  std::vector<std::string> parts{"hand_l", "hand_r", "face"};
};

struct GeometrySamples {
  Points on_mesh;
  Points off_mesh;
};

/// Area-weighted surface samples on the constrained parts and their outward offsets.
GeometrySamples sample_geometry(const BodyTemplate& tmpl, const Points& vertices, int n_samples,
                                std::uint64_t seed, const GeometryLossConfig& cfg = {});

struct LossAndGrad {
  double loss = 0.0;
  VecX grad;
};

/// Margin loss over 2n samples: mean of max(0, τ_max - τ)² on-mesh and
/// max(0, τ - τ_min)² off-mesh.
LossAndGrad geometry_loss(const RadianceField& field, const BodyTemplate& tmpl, const Pose& pose,
                          int n_samples, std::uint64_t seed, const GeometryLossConfig& cfg = {});

/// Same loss for an arbitrary density; no gradient.
double geometry_loss_value(const std::function<VecX(const Points&)>& density, const GeometrySamples& s,
                           const GeometryLossConfig& cfg = {});

/// Centers of grid cells (raster order x fastest, then y, then z) whose density exceeds
/// the threshold.
Points extract_points(const std::function<VecX(const Points&)>& density, int grid_resolution,
                      double threshold, const Vec3& lo, const Vec3& hi);
Points extract_points(const FieldQuery& field, int grid_resolution, double threshold, const Vec3& lo,
                      const Vec3& hi);

struct PretrainConfig {
  int steps = 1000;
  int resolution = 128;
  int coarse_resolution = 64;   // used for the first coarse_fraction of the steps
  double coarse_fraction = 0.0;
  double lr = 5e-3;
  double lr_final = 5e-4;       // exponential decay target
  double depth_weight = 1.0;
  VolumeRenderConfig render;
  CameraSamplerConfig cameras;
};

struct PretrainLog {
  std::vector<double> losses;
};

/// Fits field alpha and depth to the rasterized template silhouette and depth.
PretrainLog pretrain(RadianceField& field, const BodyTemplate& tmpl, const Pose& pose,
                     const PretrainConfig& cfg, std::uint64_t seed);

/// Intersection-over-union of two binary masks (values ≥ 0.5 count as set).
double silhouette_iou(const Image& a, const Image& b);

/// Field normalization that covers the template with margin.
FieldConfig field_config_for(const BodyTemplate& tmpl, FieldConfig base = {});

/// Bounds of a point set grown by pad_fraction of the extent on every side.
std::pair<Vec3, Vec3> padded_bounds(const Points& vertices, double pad_fraction = 0.1);

}  // namespace skelsplat
