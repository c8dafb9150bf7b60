#pragma once

#include "skelsplat/guidance.hpp"
#include "skelsplat/neural_field.hpp"
#include "skelsplat/rigging.hpp"
#include "skelsplat/sampling.hpp"
#include "skelsplat/skeleton_render.hpp"
#include "skelsplat/splat_renderer.hpp"

#include <json.hpp>

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace skelsplat {

struct GuidanceSettings {
  std::string kind = "oracle";  // "oracle" or "external"
  double cfg_scale = 50.0;
  std::string socket;           // external only
  std::uint64_t texture_seed = 7;
  int supersample = 2;
};

struct Stage1Config {
  int steps = 15000;
  int res_start = 64;
  int res_end = 512;
  double lambda_geo = 1.0;
  int geo_samples = 512;
  double lr = 1e-3;
  double lr_final = 1e-4;
  int num_samples = 64;
  bool jitter = true;
  double min_transmittance = 1e-4;
  FieldConfig field;
  PretrainConfig pretrain;
  GeometryLossConfig geometry;
};

struct InitConfig {
  int grid = 128;
  double pad = 0.1;
  double threshold = 2.5;
  int per_triangle = 3;
  std::vector<std::string> bound_parts{"hand_l", "hand_r", "face"};
  KnnSmoothingConfig smoothing;
};

struct Stage2Config {
  int steps = 15000;
  int resolution = 512;
  double lr_position = 1.6e-4;
  double lr_rotation = 1e-3;
  double lr_scale = 5e-3;
  double lr_opacity = 5e-2;
  double lr_color = 2.5e-3;
  double lr_deform = 1e-4;
  double lr_shape = 1e-3;
  bool use_deform = true;
  DeformNetConfig deform;
  PoseSamplerConfig poses;
};

struct TrainConfig {
  std::uint64_t seed = 0;
  GuidanceSettings guidance;
  SdsConfig sds;
  CameraSamplerConfig camera;
  Stage1Config stage1;
  InitConfig init;
  Stage2Config stage2;
  SkeletonStyle skeleton;
  bool cull_hands = false;
  RenderConfig render;
  int log_every = 1;
  int checkpoint_every = 0;  // 0: only final checkpoints

  /// Throws std::invalid_argument naming the first bad value.
  void validate() const;
};

/// Resolution for a step: doubling levels from start to end, each held for an equal
/// share of the steps.
int progressive_resolution(int step, int total_steps, int res_start, int res_end);

/// Guidance model described by the settings (the oracle renders ReferenceMannequin targets).
std::unique_ptr<GuidanceModel> make_guidance(const GuidanceSettings& g);

/// Receives one JSON record per logged step.
using LogSink = std::function<void(const nlohmann::json&)>;

struct Stage1Result {
  RadianceField field;
  PretrainLog pretrain;
  std::vector<double> geometry_losses;
};

/// Field initialization and pretraining exactly as train_stage1 performs them.
RadianceField pretrained_field(const TrainConfig& cfg, const BodyTemplate& tmpl, PretrainLog* log = nullptr);

/// Pretrains the field on the canonical template, then runs SDS + λ_geo geometry steps.
Stage1Result train_stage1(const TrainConfig& cfg, const BodyTemplate& tmpl, const GuidanceModel& guidance,
                          const LogSink& log = nullptr,
                          const std::function<void(int, const RadianceField&)>& checkpoint = nullptr);

/// Stage I steps only, on an already pretrained field.
std::vector<double> train_stage1_sds(const TrainConfig& cfg, const BodyTemplate& tmpl, const GuidanceModel& guidance,
                                     RadianceField& field, const LogSink& log = nullptr,
                                     const std::function<void(int, const RadianceField&)>& checkpoint = nullptr);

/// Clip box used for every field render of the template.
std::pair<Vec3, Vec3> field_clip_box(const BodyTemplate& tmpl);

/// Canonical hybrid avatar from a trained field. Throws std::runtime_error when the
/// density threshold keeps no grid cell.
HybridAvatar init_stage2(const FieldQuery& field, const BodyTemplate& tmpl, const InitConfig& cfg);

/// Opacity a Gaussian inherits from density over a cell of the given size.
double opacity_from_density(double sigma, double cell);

struct Stage2Result {
  HybridAvatar avatar;
  std::optional<DeformNet> deform;
  int random_pose_draws = 0;
};

/// Animatable stage: curriculum poses, SDS through articulate + splatting.
Stage2Result train_stage2(const TrainConfig& cfg, HybridAvatar avatar, const BodyTemplate& tmpl,
                          const GuidanceModel& guidance, std::optional<DeformNet> deform = std::nullopt,
                          const LogSink& log = nullptr,
                          const std::function<void(int, const HybridAvatar&, const DeformNet*)>& checkpoint = nullptr);

/// Fresh pose-corrective network sized for the template.
DeformNet make_deform_net(const Stage2Config& cfg, const BodyTemplate& tmpl, std::uint64_t seed);

// ---- evaluation -------------------------------------------------------------------------------

/// Held-out cameras: the training ranges without face focus or jitter, from their own seed.
std::vector<Camera> heldout_cameras(const CameraSamplerConfig& base, const BodyTemplate& tmpl, int count, int resolution,
                                    std::uint64_t seed);

/// Held-out random poses, drawn from the random-phase generator with their own seed.
std::vector<Pose> heldout_poses(const PoseSamplerConfig& cfg, const BodyTemplate& tmpl, int count, std::uint64_t seed);

struct FieldRenderSettings {
  int num_samples = 64;
  double min_transmittance = 1e-4;
};

Image render_field(const RadianceField& field, const BodyTemplate& tmpl, const Camera& cam,
                   const FieldRenderSettings& s = {});

/// Posed avatar render; the CLI and service go through this too.
RenderOutput render_avatar(const HybridAvatar& avatar, const BodyTemplate& tmpl, const DeformNet* deform,
                           const Pose& pose, const Camera& cam, const RenderConfig& rcfg = {});

}  // namespace skelsplat
