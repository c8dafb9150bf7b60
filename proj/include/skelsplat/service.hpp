#pragma once

#include "skelsplat/body_model.hpp"
#include "skelsplat/rigging.hpp"
#include "skelsplat/skeleton_render.hpp"
#include "skelsplat/splat_renderer.hpp"

#include <json.hpp>

#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace skelsplat {

/// Orbit camera around the template's rest-pose center. Angles in degrees; elevation is
/// measured up from the horizontal plane.
struct ViewParams {
  double azimuth = 0.0;
  double elevation = 0.0;
  double radius = 2.5;
  double fov = 45.0;
  int width = 512;
  int height = 512;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

Camera view_camera(const BodyTemplate& tmpl, const ViewParams& view);

/// 8-bit RGB PNG of the posed avatar. The CLI and the service both render through this.
std::vector<std::uint8_t> render_avatar_png(const HybridAvatar& avatar, const BodyTemplate& tmpl,
                                            const DeformNet* deform, const Pose& pose, const ViewParams& view,
                                            const RenderConfig& rcfg);

/// Conditioning image of the posed template as PNG.
std::vector<std::uint8_t> render_skeleton_png(const BodyTemplate& tmpl, const Points& canonical_vertices,
                                              const Pose& pose, const ViewParams& view, const SkeletonStyle& style,
                                              bool cull_hands);

/// Immutable state a frame is rendered from.
struct SessionState {
  std::uint64_t version = 0;
  Pose pose;
  VecX shape_delta;
  HybridAvatar avatar;  // canonical avatar with shape_delta applied
};

struct SessionOptions {
  RenderConfig render;
  SkeletonStyle skeleton;
  bool cull_hands = false;
};

/// One live avatar. Mutations are serialized and each publishes a new immutable
/// snapshot with a higher version; readers render whichever snapshot they grabbed.
class Session {
 public:
  Session(BodyTemplate tmpl, HybridAvatar canonical, std::optional<DeformNet> deform, SessionOptions options = {});

  std::shared_ptr<const SessionState> snapshot() const;

  /// Partial pose update merged over the current pose. Throws FormatError.
  std::uint64_t apply_pose(const nlohmann::json& body);
  /// {"delta": [...]} relative to the loaded avatar; missing trailing entries are zero.
  std::uint64_t apply_shape(const nlohmann::json& body);
  /// Back to the loaded avatar and its rest pose.
  std::uint64_t reset();

  nlohmann::json meta() const;

  struct Frame {
    std::vector<std::uint8_t> png;
    std::uint64_t version = 0;
  };
  Frame frame(const ViewParams& view) const;
  Frame skeleton(const ViewParams& view) const;

  const BodyTemplate& body_template() const { return tmpl_; }

 private:
  void publish(std::shared_ptr<SessionState> next);

  BodyTemplate tmpl_;
  HybridAvatar canonical_;
  std::optional<DeformNet> deform_;
  SessionOptions options_;
  std::mutex write_mu_;             // single writer
  mutable std::mutex snapshot_mu_;  // guards the pointer swap only
  std::shared_ptr<const SessionState> state_;
};

/// HTTP front end for a Session; routes are documented in docs/api.md.
class Service {
 public:
  explicit Service(Session& session, std::string static_dir = {});
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds and returns the port (an ephemeral one when port is 0). Throws on failure.
  int bind(const std::string& host, int port);
  /// Serves until stop() is called.
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace skelsplat
