// Command-line entry points for every pipeline stage plus the live-avatar service.

#include "skelsplat/config.hpp"
#include "skelsplat/image.hpp"
#include "skelsplat/io.hpp"
#include "skelsplat/service.hpp"
#include "skelsplat/trainer.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace skelsplat;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kUsage = 2, kDataFormat = 3, kRuntime = 4 };

/// Thrown for argument combinations CLI11 cannot express.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

TrainConfig config_or_defaults(const std::string& path) { return path.empty() ? TrainConfig{} : load_config(path); }

class JsonLog {
 public:
  explicit JsonLog(const std::string& path) {
    if (path.empty()) return;
    out_.open(path, std::ios::trunc);
    if (!out_) throw std::runtime_error("cannot open log " + path);
  }
  LogSink sink() {
    if (!out_.is_open()) return nullptr;
    return [this](const json& j) { out_ << j.dump() << '\n' << std::flush; };
  }

 private:
  std::ofstream out_;
};

fs::path checkpoint_path(const fs::path& out, int step) {
  fs::path p = out;
  p.replace_extension(".step" + std::to_string(step) + out.extension().string());
  return p;
}

Pose load_pose(const BodyTemplate& tmpl, const std::string& path) {
  if (path.empty()) return Pose::identity(tmpl);
  const auto bytes = read_file(path);
  json j;
  try {
    j = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  return pose_from_json(tmpl, j, Pose::identity(tmpl));
}

VecX parse_delta(const std::string& text, int expected) {
  std::vector<double> vals;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    while (used < item.size() && std::isspace(static_cast<unsigned char>(item[used]))) ++used;
    if (used == 0 || used != item.size()) throw UsageError("--delta entry '" + item + "' is not a number");
    vals.push_back(v);
  }
  if (static_cast<int>(vals.size()) > expected) {
    throw UsageError("--delta has " + std::to_string(vals.size()) + " entries; the template has " +
                     std::to_string(expected) + " coefficients");
  }
  VecX out = VecX::Zero(expected);
  for (std::size_t k = 0; k < vals.size(); ++k) out[static_cast<Eigen::Index>(k)] = vals[k];
  return out;
}

void add_view_options(CLI::App* cmd, ViewParams& view) {
  cmd->add_option("--az", view.azimuth, "azimuth, degrees")->capture_default_str();
  cmd->add_option("--el", view.elevation, "elevation above the horizontal, degrees")->capture_default_str();
  cmd->add_option("--r", view.radius, "camera distance")->capture_default_str();
  cmd->add_option("--fov", view.fov, "vertical field of view, degrees")->capture_default_str();
  cmd->add_option("--width", view.width, "image width")->capture_default_str();
  cmd->add_option("--height", view.height, "image height")->capture_default_str();
}

std::atomic<Service*> g_service{nullptr};

void on_signal(int) {
  if (Service* s = g_service.load()) s->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Skeleton-conditioned Gaussian avatar engine"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "skelsplat 1.0");

  std::string template_path, config_path, out_path, log_path, field_path, avatar_path, pose_path, motion;
  std::string delta_text, bind_host = "127.0.0.1", static_dir, out_dir;
  std::uint64_t mannequin_seed = 0;
  int port = 8080, frames = 24;
  double fps = 12.0;
  bool cull_hands = false, no_cull = false;
  ViewParams view;

  auto* gen = app.add_subcommand("gen-template", "write the procedural mannequin template (.abt)");
  gen->add_option("--out", out_path, "output .abt")->required();
  gen->add_option("--seed", mannequin_seed, "mannequin basis seed")->capture_default_str();

  auto* pre = app.add_subcommand("pretrain", "fit a radiance field to the template silhouette (.nfck)");
  pre->add_option("--template", template_path)->required()->check(CLI::ExistingFile);
  pre->add_option("--config", config_path)->check(CLI::ExistingFile);
  pre->add_option("--out", out_path, "output .nfck")->required();
  pre->add_option("--log", log_path, "JSON-lines training log");

  auto* s1 = app.add_subcommand("train-canonical", "Stage I: SDS on the canonical field (.nfck)");
  s1->add_option("--template", template_path)->required()->check(CLI::ExistingFile);
  s1->add_option("--config", config_path)->check(CLI::ExistingFile);
  s1->add_option("--field", field_path, "start from this pretrained field instead of pretraining")
      ->check(CLI::ExistingFile);
  s1->add_option("--out", out_path, "output .nfck")->required();
  s1->add_option("--log", log_path, "JSON-lines training log");

  auto* init = app.add_subcommand("init-avatar", "extract a hybrid Gaussian avatar from a field (.hga)");
  init->add_option("--template", template_path)->required()->check(CLI::ExistingFile);
  init->add_option("--field", field_path)->required()->check(CLI::ExistingFile);
  init->add_option("--config", config_path)->check(CLI::ExistingFile);
  init->add_option("--out", out_path, "output .hga")->required();

  auto* s2 = app.add_subcommand("train-animatable", "Stage II: SDS over sampled poses (.hga)");
  s2->add_option("--template", template_path)->required()->check(CLI::ExistingFile);
  s2->add_option("--avatar", avatar_path)->required()->check(CLI::ExistingFile);
  s2->add_option("--config", config_path)->check(CLI::ExistingFile);
  s2->add_option("--out", out_path, "output .hga")->required();
  s2->add_option("--log", log_path, "JSON-lines training log");

  auto* rend = app.add_subcommand("render", "render a posed avatar to PNG");
  rend->add_option("--template", template_path)->required()->check(CLI::ExistingFile);
  rend->add_option("--avatar", avatar_path)->required()->check(CLI::ExistingFile);
  rend->add_option("--pose-file", pose_path, "pose JSON (default: rest pose)")->check(CLI::ExistingFile);
  rend->add_option("--config", config_path, "renderer settings")->check(CLI::ExistingFile);
  rend->add_option("--out", out_path, "output PNG")->required();
  add_view_options(rend, view);

  auto* anim = app.add_subcommand("animate", "render every frame of a motion to PNGs");
  anim->add_option("--template", template_path)->required()->check(CLI::ExistingFile);
  anim->add_option("--avatar", avatar_path)->required()->check(CLI::ExistingFile);
  anim->add_option("--motion", motion, "motion JSON file, or a built-in name (wave, walk)")->required();
  anim->add_option("--frames", frames, "frame count for built-in motions")->capture_default_str();
  anim->add_option("--fps", fps, "frame rate for built-in motions")->capture_default_str();
  anim->add_option("--config", config_path, "renderer settings")->check(CLI::ExistingFile);
  anim->add_option("--out-dir", out_dir, "directory for frame_NNNN.png")->required();
  add_view_options(anim, view);

  auto* edit = app.add_subcommand("edit-shape", "apply a shape/expression coefficient delta (.hga)");
  edit->add_option("--template", template_path)->required()->check(CLI::ExistingFile);
  edit->add_option("--avatar", avatar_path)->required()->check(CLI::ExistingFile);
  edit->add_option("--delta", delta_text, "comma-separated coefficients, shape then expression")->required();
  edit->add_option("--out", out_path, "output .hga")->required();

  auto* skel = app.add_subcommand("skeleton", "render the skeleton conditioning image to PNG");
  skel->add_option("--template", template_path)->required()->check(CLI::ExistingFile);
  skel->add_option("--pose-file", pose_path, "pose JSON (default: rest pose)")->check(CLI::ExistingFile);
  skel->add_option("--config", config_path, "stroke settings")->check(CLI::ExistingFile);
  skel->add_flag("--cull-hands", cull_hands, "also occlusion-cull hand keypoints");
  skel->add_flag("--no-cull", no_cull, "draw every keypoint");
  skel->add_option("--out", out_path, "output PNG")->required();
  add_view_options(skel, view);

  auto* serve = app.add_subcommand("serve", "serve a live avatar session over HTTP");
  serve->add_option("--template", template_path)->required()->check(CLI::ExistingFile);
  serve->add_option("--avatar", avatar_path)->required()->check(CLI::ExistingFile);
  serve->add_option("--config", config_path, "renderer and stroke settings")->check(CLI::ExistingFile);
  serve->add_option("--port", port, "TCP port (0 picks a free one)")->capture_default_str()->check(CLI::Range(0, 65535));
  serve->add_option("--bind", bind_host, "listen address")->capture_default_str();
  serve->add_option("--static", static_dir, "directory served under /")->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (gen->parsed()) {
      save_template(out_path, make_mannequin(mannequin_seed));
      return kOk;
    }
    const TrainConfig cfg = config_or_defaults(config_path);
    const BodyTemplate tmpl = load_template(template_path);
    JsonLog log(log_path);

    if (pre->parsed()) {
      PretrainLog plog;
      const RadianceField field = pretrained_field(cfg, tmpl, &plog);
      if (auto sink = log.sink()) {
        for (std::size_t k = 0; k < plog.losses.size(); k += static_cast<std::size_t>(cfg.log_every)) {
          sink({{"stage", 0}, {"step", k}, {"phase", "pretrain"}, {"loss", plog.losses[k]}});
        }
      }
      save_field(out_path, field);
    } else if (s1->parsed()) {
      const auto guidance = make_guidance(cfg.guidance);
      auto checkpoint = [&](int step, const RadianceField& f) { save_field(checkpoint_path(out_path, step), f); };
      RadianceField field;
      if (!field_path.empty()) {
        field = load_field(field_path);
        train_stage1_sds(cfg, tmpl, *guidance, field, log.sink(), checkpoint);
      } else {
        field = train_stage1(cfg, tmpl, *guidance, log.sink(), checkpoint).field;
      }
      save_field(out_path, field);
    } else if (init->parsed()) {
      const RadianceField field = load_field(field_path);
      HybridAvatar avatar = init_stage2(field, tmpl, cfg.init);
      avatar.template_path = fs::path(template_path).filename().string();
      avatar.field_path = fs::path(field_path).filename().string();
      save_avatar(out_path, avatar, nullptr);
      std::cout << json{{"gaussians", avatar.size()},
                        {"unconstrained", avatar.count(GaussianKind::unconstrained)},
                        {"bound", avatar.count(GaussianKind::mesh_binding)}}
                       .dump()
                << '\n';
    } else if (s2->parsed()) {
      AvatarFile in = load_avatar(avatar_path);
      const auto guidance = make_guidance(cfg.guidance);
      const Stage2Result r = train_stage2(
          cfg, in.avatar, tmpl, *guidance, in.deform, log.sink(),
          [&](int step, const HybridAvatar& a, const DeformNet* net) { save_avatar(checkpoint_path(out_path, step), a, net); });
      save_avatar(out_path, r.avatar, r.deform ? &*r.deform : nullptr);
    } else if (rend->parsed()) {
      const AvatarFile a = load_avatar(avatar_path);
      const Pose pose = load_pose(tmpl, pose_path);
      view.validate();
      write_file(out_path, render_avatar_png(a.avatar, tmpl, a.deform ? &*a.deform : nullptr, pose, view, cfg.render));
    } else if (anim->parsed()) {
      const AvatarFile a = load_avatar(avatar_path);
      const std::vector<MotionFrame> m =
          fs::exists(motion) ? load_motion(tmpl, motion) : builtin_motion(tmpl, motion, frames, fps);
      view.validate();
      fs::create_directories(out_dir);
      std::vector<double> ms;
      for (std::size_t k = 0; k < m.size(); ++k) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto png = render_avatar_png(a.avatar, tmpl, a.deform ? &*a.deform : nullptr, m[k].pose, view, cfg.render);
        ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
        char name[32];
        std::snprintf(name, sizeof(name), "frame_%04zu.png", k);
        write_file(fs::path(out_dir) / name, png);
      }
      double total = 0.0;
      for (double v : ms) total += v;
      std::cout << json{{"frames", m.size()},
                        {"total_ms", total},
                        {"mean_ms", total / static_cast<double>(ms.size())},
                        {"max_ms", *std::max_element(ms.begin(), ms.end())},
                        {"motion_seconds", m.back().time - m.front().time}}
                       .dump()
                << '\n';
    } else if (edit->parsed()) {
      const AvatarFile a = load_avatar(avatar_path);
      const VecX delta = parse_delta(delta_text, tmpl.num_coefficients());
      const HybridAvatar edited = apply_shape_edit(a.avatar, tmpl, delta);
      save_avatar(out_path, edited, a.deform ? &*a.deform : nullptr);
    } else if (skel->parsed()) {
      const Pose pose = load_pose(tmpl, pose_path);
      view.validate();
      const Camera cam = view_camera(tmpl, view);
      const Points canon = canonical_mesh(tmpl, pose);
      write_file(out_path, encode_png(render_skeleton(tmpl, canon, pose, cam, cfg.skeleton, !no_cull,
                                                      cull_hands || cfg.cull_hands)
                                          .pixels));
    } else if (serve->parsed()) {
      AvatarFile a = load_avatar(avatar_path);
      Session session(tmpl, std::move(a.avatar), std::move(a.deform), {cfg.render, cfg.skeleton, cfg.cull_hands});
      Service service(session, static_dir);
      const int bound = service.bind(bind_host, port);
      g_service = &service;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cout << json{{"listening", bind_host + ":" + std::to_string(bound)}}.dump() << std::endl;
      service.listen();
      g_service = nullptr;
    }
    return kOk;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kDataFormat;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kDataFormat;
  } catch (const json::exception& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kDataFormat;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
}
