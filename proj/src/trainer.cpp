#include "skelsplat/trainer.hpp"

#include "skelsplat/optim.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>

namespace skelsplat {

using nlohmann::json;

namespace {

bool power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

void check_range(const Range& r, double lo, double hi, const std::string& key) {
  require(r[0] <= r[1] && r[0] >= lo && r[1] <= hi, key + " must be an ordered range within [" + std::to_string(lo) +
                                                         ", " + std::to_string(hi) + "]");
}

// stream ids for derive_seed so stages never share random draws
constexpr std::uint64_t kStage1Stream = 1, kStage1Sds = 2, kStage1Geo = 3, kPretrainStream = 4;
constexpr std::uint64_t kStage2Stream = 5, kStage2Sds = 6, kDeformInit = 7, kFieldInit = 8;

double elapsed_ms(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

void TrainConfig::validate() const {
  require(guidance.kind == "oracle" || guidance.kind == "external", "guidance.kind must be \"oracle\" or \"external\"");
  require(guidance.kind != "external" || !guidance.socket.empty(), "guidance.socket is required for external guidance");
  require(guidance.cfg_scale >= 0.0, "guidance.cfg_scale must be non-negative");
  require(guidance.supersample >= 1 && guidance.supersample <= 8, "guidance.supersample must be in [1, 8]");
  require(sds.t_min_fraction >= 0.0 && sds.t_min_fraction <= sds.t_max_fraction && sds.t_max_fraction <= 1.0,
          "sds.t_range must satisfy 0 <= lo <= hi <= 1");
  require(sds.weight >= 0.0, "sds.weight must be non-negative");
  require(camera.radius[0] > 0.0 && camera.radius[0] <= camera.radius[1], "camera.radius must be a positive range");
  check_range(camera.azimuth_deg, 0.0, 360.0, "camera.azimuth");
  check_range(camera.polar_deg, 0.0, 180.0, "camera.elevation");
  check_range(camera.fov_deg, 1.0, 179.0, "camera.fov");
  require(camera.face_focus_prob >= 0.0 && camera.face_focus_prob <= 1.0, "camera.face_focus_prob must be in [0, 1]");
  require(camera.jitter >= 0.0, "camera.jitter must be non-negative");
  require(stage1.steps >= 0 && stage2.steps >= 0, "stage lengths must be non-negative");
  require(power_of_two(stage1.res_start) && power_of_two(stage1.res_end) && stage1.res_start <= stage1.res_end,
          "stage1 resolutions must be powers of two with start <= end");
  require(stage1.res_start >= 64 && stage1.res_end <= 512, "stage1 resolutions must lie in [64, 512]");
  require(power_of_two(stage2.resolution) && stage2.resolution >= 64 && stage2.resolution <= 512,
          "stage2.resolution must be a power of two in [64, 512]");
  require(stage1.lambda_geo >= 0.0, "stage1.lambda_geo must be non-negative");
  require(stage1.geo_samples >= 1 && stage1.num_samples >= 2, "stage1 sample counts too small");
  require(stage1.lr > 0.0 && stage1.lr_final > 0.0, "stage1 learning rates must be positive");
  require(stage1.pretrain.steps >= 0 && stage1.pretrain.lr > 0.0, "pretrain settings invalid");
  require(init.grid >= 8 && init.grid <= 512, "init.grid must be in [8, 512]");
  require(init.pad >= 0.0 && init.threshold > 0.0, "init.pad and init.threshold invalid");
  require(init.per_triangle == 1 || init.per_triangle == 3, "init.per_triangle must be 1 or 3");
  require(init.smoothing.k_neighbors >= 1 && init.smoothing.iterations >= 0 && init.smoothing.distance_epsilon > 0.0,
          "init.knn settings invalid");
  for (double lr : {stage2.lr_position, stage2.lr_rotation, stage2.lr_scale, stage2.lr_opacity, stage2.lr_color,
                    stage2.lr_deform, stage2.lr_shape}) {
    require(lr >= 0.0, "stage2 learning rates must be non-negative");
  }
  require(stage2.poses.canonical_fraction >= 0.0 && stage2.poses.canonical_fraction <= 1.0,
          "pose.canonical_fraction must be in [0, 1]");
  require(stage2.deform.output_scale > 0.0 && !stage2.deform.hidden.empty(), "deform network settings invalid");
  require(skeleton.line_width >= 1 && skeleton.radius >= 1 && skeleton.reference_size >= 1, "skeleton stroke invalid");
  require(log_every >= 1 && checkpoint_every >= 0, "log_every must be >= 1 and checkpoint_every >= 0");
}

int progressive_resolution(int step, int total_steps, int res_start, int res_end) {
  int levels = 1;
  for (int r = res_start; r < res_end; r *= 2) ++levels;
  if (total_steps <= 0) return res_start;
  const int level = std::min(levels - 1, static_cast<int>(static_cast<long long>(step) * levels / total_steps));
  return res_start << level;
}

std::unique_ptr<GuidanceModel> make_guidance(const GuidanceSettings& g) {
  const DiffusionSchedule schedule = DiffusionSchedule::linear();
  if (g.kind == "external") return std::make_unique<ExternalGuidance>(schedule, g.socket);
  if (g.kind != "oracle") throw std::invalid_argument("unknown guidance kind '" + g.kind + "'");
  auto ref = std::make_shared<ReferenceMannequin>(g.texture_seed, g.supersample);
  return std::make_unique<OracleGuidance>(
      schedule, [ref](const Camera& cam, const Pose& pose) { return ref->render(cam, pose); }, g.cfg_scale);
}

std::pair<Vec3, Vec3> field_clip_box(const BodyTemplate& tmpl) { return padded_bounds(tmpl.vertices_rest); }

// ---- stage I --------------------------------------------------------------------------------------

std::vector<double> train_stage1_sds(const TrainConfig& cfg, const BodyTemplate& tmpl, const GuidanceModel& guidance,
                                     RadianceField& field, const LogSink& log,
                                     const std::function<void(int, const RadianceField&)>& checkpoint) {
  cfg.validate();
  const Stage1Config& s1 = cfg.stage1;
  const Pose canonical = Pose::identity(tmpl);
  const Points& verts = tmpl.vertices_rest;
  const auto [body, face] = body_and_face_centers(tmpl, verts);
  VolumeRenderConfig rcfg;
  rcfg.num_samples = s1.num_samples;
  rcfg.jitter = s1.jitter;
  rcfg.min_transmittance = s1.min_transmittance;
  rcfg.clip_box = field_clip_box(tmpl);
  rcfg.threads = cfg.render.threads;
  Adam adam(field.num_params(), AdamConfig{s1.lr});
  std::vector<double> geo_losses;
  const auto start = std::chrono::steady_clock::now();
  for (int step = 0; step < s1.steps; ++step) {
    adam.set_lr(s1.lr * std::pow(s1.lr_final / s1.lr, static_cast<double>(step) / s1.steps));
    const int res = progressive_resolution(step, s1.steps, s1.res_start, s1.res_end);
    Rng rng(derive_seed(derive_seed(cfg.seed, kStage1Stream), static_cast<std::uint64_t>(step)));
    const CameraSample cs = sample_camera(cfg.camera, rng, body, face, res, res);
    const Camera& cam = cs.camera;  // shared by render, skeleton and guidance
    const SkeletonImage skel = render_skeleton(tmpl, verts, canonical, cam, cfg.skeleton, true, cfg.cull_hands);
    rcfg.seed = derive_seed(derive_seed(cfg.seed, kStage1Stream + 100), static_cast<std::uint64_t>(step));
    SdsSample sample;
    const VolumeStep vs = volume_render_step(field, cam, [&](const RenderOutput& out) {
      VolumeGrads grads;
      const DenoiseContext ctx{&skel.pixels, "", &cam, &canonical};
      sample = sds_gradient(out.color, nullptr, guidance, ctx, cfg.sds,
                            derive_seed(derive_seed(cfg.seed, kStage1Sds), static_cast<std::uint64_t>(step)));
      grads.color = sample.residual;
      const double inv = 1.0 / static_cast<double>(grads.color.data.size());
      for (double& v : grads.color.data) v *= inv;
      return grads;
    }, rcfg);
    VecX grad = vs.grad;
    double geo = 0.0;
    if (s1.lambda_geo > 0.0) {
      const LossAndGrad g = geometry_loss(field, tmpl, canonical, s1.geo_samples,
                                          derive_seed(derive_seed(cfg.seed, kStage1Geo), static_cast<std::uint64_t>(step)),
                                          s1.geometry);
      geo = g.loss;
      grad += s1.lambda_geo * g.grad;
    }
    geo_losses.push_back(geo);
    adam.step(field.params().data(), grad.data());
    if (log && (step % cfg.log_every == 0 || step + 1 == s1.steps)) {
      log({{"stage", 1},
           {"step", step},
           {"t", sample.t},
           {"resolution", res},
           {"phase", "canonical"},
           {"sds", sample.residual_norm2 / static_cast<double>(sample.residual.data.size())},
           {"geo", geo},
           {"face_focus", cs.face_focus},
           {"elapsed_ms", elapsed_ms(start)}});
    }
    if (checkpoint && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) checkpoint(step + 1, field);
  }
  return geo_losses;
}

RadianceField pretrained_field(const TrainConfig& cfg, const BodyTemplate& tmpl, PretrainLog* log) {
  cfg.validate();
  RadianceField field(field_config_for(tmpl, cfg.stage1.field), derive_seed(cfg.seed, kFieldInit));
  PretrainConfig pc = cfg.stage1.pretrain;
  pc.render.clip_box = field_clip_box(tmpl);
  pc.render.threads = cfg.render.threads;
  PretrainLog l = pretrain(field, tmpl, Pose::identity(tmpl), pc, derive_seed(cfg.seed, kPretrainStream));
  if (log) *log = std::move(l);
  return field;
}

Stage1Result train_stage1(const TrainConfig& cfg, const BodyTemplate& tmpl, const GuidanceModel& guidance,
                          const LogSink& log, const std::function<void(int, const RadianceField&)>& checkpoint) {
  cfg.validate();
  Stage1Result out;
  out.field = pretrained_field(cfg, tmpl, &out.pretrain);
  if (log) {
    for (std::size_t k = 0; k < out.pretrain.losses.size(); k += static_cast<std::size_t>(cfg.log_every)) {
      log({{"stage", 0}, {"step", k}, {"phase", "pretrain"}, {"loss", out.pretrain.losses[k]}});
    }
  }
  out.geometry_losses = train_stage1_sds(cfg, tmpl, guidance, out.field, log, checkpoint);
  return out;
}

// ---- stage II initialization -----------------------------------------------------------------------

double opacity_from_density(double sigma, double cell) {
  return std::clamp(1.0 - std::exp(-std::max(sigma, 0.0) * cell), 0.02, 0.98);
}

HybridAvatar init_stage2(const FieldQuery& field, const BodyTemplate& tmpl, const InitConfig& cfg) {
  const Points& canon = tmpl.vertices_rest;
  const auto [lo, hi] = padded_bounds(canon, cfg.pad);
  const Points pts = extract_points(field, cfg.grid, cfg.threshold, lo, hi);
  if (pts.rows() == 0) {
    throw std::runtime_error("no grid cell exceeds density threshold " + std::to_string(cfg.threshold) +
                             "; lower init.threshold or retrain the field");
  }
  const Vec3 cells = (hi - lo) / cfg.grid;
  const double cell = std::cbrt(cells.prod());
  const int nu = static_cast<int>(pts.rows());

  HybridAvatar a;
  a.part_shape = VecX::Zero(tmpl.num_coefficients());
  VecX density;
  Points colors;
  field.query(pts, density, colors);
  const KnnResult nn = knn(pts, pts, 4);
  a.gaussians.resize(nu);
  a.gaussians.positions = pts;
  for (int i = 0; i < nu; ++i) {
    double mean = 0.0;
    int count = 0;
    for (int j = 0; j < nn.k; ++j) {
      if (nn.at(i, j) == i) continue;
      if (count == 3) break;
      mean += std::sqrt(nn.dist2(i, j));
      ++count;
    }
    mean = count > 0 ? mean / count : cell;
    a.gaussians.rotations.row(i) = Vec4(1, 0, 0, 0).transpose();
    a.gaussians.log_scales.row(i).setConstant(std::log(std::max(mean, 1e-6)));
    a.gaussians.opacity_logits[i] = logit(opacity_from_density(density[i], cell));
    a.gaussians.colors.row(i) = colors.row(i);
  }
  a.kind.assign(nu, GaussianKind::unconstrained);
  a.bindings.assign(nu, MeshBinding{});
  a.lbs_weights = init_lbs_weights(pts, tmpl, canon, &a.anchor_vertices);
  a.lbs_weights = knn_smooth_lbs(a.lbs_weights, pts, tmpl, canon, cfg.smoothing);

  for (const std::string& part : cfg.bound_parts) {
    BoundGaussians b = bind_to_mesh(tmpl, part, cfg.per_triangle, canon);
    const int nb = b.gaussians.size();
    if (nb == 0) continue;
    field.query(b.gaussians.positions, density, colors);
    for (int i = 0; i < nb; ++i) {
      b.gaussians.opacity_logits[i] = logit(opacity_from_density(density[i], cell));
      b.gaussians.colors.row(i) = colors.row(i);
    }
    a.gaussians.append(b.gaussians);
    for (const MeshBinding& mb : b.bindings) {
      a.kind.push_back(GaussianKind::mesh_binding);
      a.bindings.push_back(mb);
      a.anchor_vertices.push_back(-1);
    }
  }
  const int n = a.size();
  a.lbs_weights.conservativeResize(n, tmpl.num_joints());
  a.lbs_weights.bottomRows(n - nu).setZero();
  a.validate(tmpl.num_joints());
  return a;
}

DeformNet make_deform_net(const Stage2Config& cfg, const BodyTemplate& tmpl, std::uint64_t seed) {
  DeformNetConfig dc = cfg.deform;
  const auto [lo, hi] = tmpl.bounds();
  dc.center = 0.5 * (lo + hi);
  dc.radius = 0.6 * (hi - lo).maxCoeff();
  return DeformNet(dc, 3 * tmpl.num_joints(), seed);
}

// ---- stage II ----------------------------------------------------------------------------------------

RenderOutput render_avatar(const HybridAvatar& avatar, const BodyTemplate& tmpl, const DeformNet* deform,
                           const Pose& pose, const Camera& cam, const RenderConfig& rcfg) {
  return render(articulate(avatar, tmpl, pose, deform), cam, rcfg);
}

namespace {

/// Adam over each attribute block of the avatar, with its own learning rate.
struct AvatarOptimizer {
  Adam position, rotation, scale, opacity, color, deform, shape;

  AvatarOptimizer(const HybridAvatar& a, const DeformNet* net, const Stage2Config& c)
      : position(3 * a.size(), {c.lr_position}),
        rotation(4 * a.size(), {c.lr_rotation}),
        scale(3 * a.size(), {c.lr_scale}),
        opacity(a.size(), {c.lr_opacity}),
        color(3 * a.size(), {c.lr_color}),
        deform(net ? net->num_params() : 0, {c.lr_deform}),
        shape(static_cast<int>(a.part_shape.size()), {c.lr_shape}) {}

  void step(HybridAvatar& a, DeformNet* net, const AvatarGrads& g) {
    position.step(a.gaussians.positions.data(), g.gaussians.position.data());
    rotation.step(a.gaussians.rotations.data(), g.gaussians.rotation.data());
    scale.step(a.gaussians.log_scales.data(), g.gaussians.log_scale.data());
    opacity.step(a.gaussians.opacity_logits.data(), g.gaussians.opacity_logit.data());
    color.step(a.gaussians.colors.data(), g.gaussians.color.data());
    if (net != nullptr) deform.step(net->params().data(), g.deform.data());
    if (a.part_shape.size() > 0) shape.step(a.part_shape.data(), g.part_shape.data());
  }
};

}  // namespace

Stage2Result train_stage2(const TrainConfig& cfg, HybridAvatar avatar, const BodyTemplate& tmpl,
                          const GuidanceModel& guidance, std::optional<DeformNet> deform, const LogSink& log,
                          const std::function<void(int, const HybridAvatar&, const DeformNet*)>& checkpoint) {
  cfg.validate();
  const Stage2Config& s2 = cfg.stage2;
  avatar.validate(tmpl.num_joints());
  if (avatar.part_shape.size() != tmpl.num_coefficients()) avatar.part_shape = VecX::Zero(tmpl.num_coefficients());
  if (s2.use_deform && !deform) deform = make_deform_net(s2, tmpl, derive_seed(cfg.seed, kDeformInit));
  if (!s2.use_deform) deform.reset();
  DeformNet* net = deform ? &*deform : nullptr;
  AvatarOptimizer opt(avatar, net, s2);
  PoseSampler poses(s2.poses);
  RenderConfig rcfg = cfg.render;
  const int res = s2.resolution;
  const auto start = std::chrono::steady_clock::now();
  for (int step = 0; step < s2.steps; ++step) {
    Rng rng(derive_seed(derive_seed(cfg.seed, kStage2Stream), static_cast<std::uint64_t>(step)));
    const PosePhase phase = poses.phase(step, s2.steps);
    const Pose pose = poses.sample(step, s2.steps, rng, tmpl);
    const CameraSample cs = sample_camera(cfg.camera, rng, pose, tmpl, res, res);
    const Camera& cam = cs.camera;
    ArticulationCache cache;
    const GaussianSet posed = articulate(avatar, tmpl, pose, net, &cache);
    const RenderOutput img = render(posed, cam, rcfg);
    const SkeletonImage skel =
        render_skeleton(tmpl, avatar_canonical_mesh(tmpl, avatar, pose), pose, cam, cfg.skeleton, true, cfg.cull_hands);
    const DenoiseContext ctx{&skel.pixels, "", &cam, &pose};
    AvatarGrads grads;
    const SdsSample sample = sds_gradient(
        img.color,
        [&](const Image& residual) {
          Image g = residual;
          const double inv = 1.0 / static_cast<double>(g.data.size());
          for (double& v : g.data) v *= inv;
          grads = articulate_backward(avatar, tmpl, net, cache, render_backward(posed, cam, g, rcfg));
        },
        guidance, ctx, cfg.sds, derive_seed(derive_seed(cfg.seed, kStage2Sds), static_cast<std::uint64_t>(step)));
    const VecX shape_before = avatar.part_shape;
    opt.step(avatar, net, grads);
    if (avatar.part_shape != shape_before) refresh_bound(avatar, tmpl);
    if (log && (step % cfg.log_every == 0 || step + 1 == s2.steps)) {
      log({{"stage", 2},
           {"step", step},
           {"t", sample.t},
           {"resolution", res},
           {"phase", phase == PosePhase::canonical ? "canonical" : "random"},
           {"sds", sample.residual_norm2 / static_cast<double>(sample.residual.data.size())},
           {"face_focus", cs.face_focus},
           {"elapsed_ms", elapsed_ms(start)}});
    }
    if (checkpoint && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
      checkpoint(step + 1, avatar, net);
    }
  }
  Stage2Result out;
  out.avatar = std::move(avatar);
  out.deform = std::move(deform);
  out.random_pose_draws = poses.random_draws();
  return out;
}

// ---- evaluation ---------------------------------------------------------------------------------------

std::vector<Camera> heldout_cameras(const CameraSamplerConfig& base, const BodyTemplate& tmpl, int count, int resolution,
                                    std::uint64_t seed) {
  CameraSamplerConfig c = base;
  c.face_focus_prob = 0.0;
  c.jitter = 0.0;
  Rng rng(seed);
  const Pose pose = Pose::identity(tmpl);
  std::vector<Camera> out;
  for (int k = 0; k < count; ++k) out.push_back(sample_camera(c, rng, pose, tmpl, resolution, resolution).camera);
  return out;
}

std::vector<Pose> heldout_poses(const PoseSamplerConfig& cfg, const BodyTemplate& tmpl, int count, std::uint64_t seed) {
  PoseSampler sampler(cfg);
  Rng rng(seed);
  std::vector<Pose> out;
  for (int k = 0; k < count; ++k) out.push_back(sampler.random_pose(rng, tmpl));
  return out;
}

Image render_field(const RadianceField& field, const BodyTemplate& tmpl, const Camera& cam, const FieldRenderSettings& s) {
  VolumeRenderConfig rcfg;
  rcfg.num_samples = s.num_samples;
  rcfg.min_transmittance = s.min_transmittance;
  rcfg.clip_box = field_clip_box(tmpl);
  return volume_render(field, cam, rcfg).color;
}

}  // namespace skelsplat
