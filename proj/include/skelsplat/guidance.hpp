#pragma once

#include "skelsplat/body_model.hpp"
#include "skelsplat/camera.hpp"
#include "skelsplat/image.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace skelsplat {

// ---- noise schedule -------------------------------------------------------------------

struct DiffusionSchedule {
  int T = 0;
  VecX alphas;     // 1 - beta_t
  VecX alpha_bar;  // cumulative products

  /// Linear betas from beta_start to beta_end over T steps.
  static DiffusionSchedule linear(double beta_start = 1e-4, double beta_end = 2e-2, int T = 1000);

  /// Throws std::invalid_argument unless 0 <= t < T.
  void check(int t) const;
};

/// x_t = sqrt(abar_t) x + sqrt(1 - abar_t) eps.
Image add_noise(const Image& x, int t, const Image& eps, const DiffusionSchedule& schedule);

/// Noise prediction that would be exact if the clean image were `target`.
Image oracle_denoise(const Image& x_t, int t, const Image& target, const DiffusionSchedule& schedule);

/// Classifier-free combination eps_u + scale (eps_c - eps_u).
Image cfg_combine(const Image& eps_uncond, const Image& eps_cond, double scale);

// ---- guidance models -------------------------------------------------------------------

/// What a denoiser may look at besides x_t and t. The oracle reads camera and pose;
/// an external model gets the condition image and token.
struct DenoiseContext {
  const Image* condition = nullptr;  // skeleton image, same view as x_t
  std::string token;                 // opaque prompt bytes
  const Camera* camera = nullptr;
  const Pose* pose = nullptr;
};

class GuidanceModel {
 public:
  virtual ~GuidanceModel() = default;
  /// Predicted noise, same shape as x_t. Must be safe to call concurrently.
  virtual Image denoise(const Image& x_t, int t, const DenoiseContext& ctx) const = 0;
  virtual const DiffusionSchedule& schedule() const = 0;
};

/// Procedurally textured reference mannequin rendered with the mesh rasterizer.
class ReferenceMannequin {
 public:
  /// supersample s renders at s x resolution and box-filters down.
  explicit ReferenceMannequin(std::uint64_t texture_seed = 7, int supersample = 2,
                              const Vec3& background = Vec3::Zero());

  Image render(const Camera& cam, const Pose& pose) const;
  /// Coverage (0..1) at the same resolution, for silhouette checks.
  Image silhouette(const Camera& cam, const Pose& pose) const;

  const BodyTemplate& body() const { return tmpl_; }
  const Points& vertex_colors() const { return colors_; }
  const Vec3& background() const { return background_; }

 private:
  BodyTemplate tmpl_;
  Points colors_;
  int supersample_;
  Vec3 background_;
};

/// Seeded tri-color vertex texture: each joint's region takes one of three seeded colors,
/// modulated by a low-frequency band pattern over the rest pose.
Points procedural_vertex_colors(const BodyTemplate& tmpl, std::uint64_t seed);

class OracleGuidance : public GuidanceModel {
 public:
  using TargetFn = std::function<Image(const Camera&, const Pose&)>;

  OracleGuidance(DiffusionSchedule schedule, TargetFn target, double cfg_scale, double uncond_gray = 0.5);

  Image denoise(const Image& x_t, int t, const DenoiseContext& ctx) const override;
  const DiffusionSchedule& schedule() const override { return schedule_; }
  double cfg_scale() const { return cfg_scale_; }
  Image target(const Camera& cam, const Pose& pose) const { return target_(cam, pose); }

 private:
  DiffusionSchedule schedule_;
  TargetFn target_;
  double cfg_scale_;
  double uncond_gray_;
};

/// Client for an out-of-process denoiser on a Unix-domain socket. One request per call:
///
///   request:  "SKGD" | u32 t | tensor x_t | tensor condition | u32 n | n token bytes
///   response: tensor eps
///   tensor:   u32 height | u32 width | u32 channels | height*width*channels float32
///
/// All integers and floats little-endian; an absent condition is a 0x0x0 tensor.
class ExternalGuidance : public GuidanceModel {
 public:
  ExternalGuidance(DiffusionSchedule schedule, std::string socket_path);

  Image denoise(const Image& x_t, int t, const DenoiseContext& ctx) const override;
  const DiffusionSchedule& schedule() const override { return schedule_; }

 private:
  DiffusionSchedule schedule_;
  std::string socket_path_;
};

namespace wire {
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_tensor(std::vector<std::uint8_t>& out, const Image* img);
std::vector<std::uint8_t> encode_request(const Image& x_t, int t, const Image* condition, const std::string& token);

/// Cursor over a received byte buffer; throws std::runtime_error on truncation.
struct Reader {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;
  std::uint32_t u32();
  Image tensor();
  std::string text(std::size_t n);
};

struct Request {
  int t = 0;
  Image x_t, condition;
  std::string token;
};
Request decode_request(const std::vector<std::uint8_t>& bytes);
}  // namespace wire

// ---- score distillation ------------------------------------------------------------------

struct SdsConfig {
  double t_min_fraction = 0.02;
  double t_max_fraction = 0.98;
  double weight = 1.0;     // w(t), constant
  bool chain_xt = false;   // multiply by sqrt(abar_t), the forward-process Jacobian
};

/// Inclusive integer timestep bounds for a schedule.
std::pair<int, int> timestep_range(const SdsConfig& cfg, int T);

struct SdsSample {
  int t = 0;
  Image residual;  // the image-space gradient handed to the backward hook
  double residual_norm2 = 0.0;
};

/// One SDS estimate: draws t and eps from `seed`, forms x_t from the render, and passes
/// w(t) (eps_hat - eps) (times sqrt(abar_t) with chain_xt) to `backward`, which maps an
/// image gradient into parameter gradients.
SdsSample sds_gradient(const Image& render, const std::function<void(const Image&)>& backward,
                       const GuidanceModel& guidance, const DenoiseContext& ctx, const SdsConfig& cfg,
                       std::uint64_t seed);

}  // namespace skelsplat
