#include "skelsplat/service.hpp"

#include "skelsplat/image.hpp"
#include "skelsplat/io.hpp"
#include "skelsplat/sampling.hpp"

#include <httplib.h>

#include <cmath>
#include <stdexcept>

namespace skelsplat {

using nlohmann::json;

void ViewParams::validate() const {
  auto bad = [](const std::string& what) { throw std::invalid_argument(what); };
  if (!std::isfinite(azimuth)) bad("az must be finite");
  if (!(elevation >= -89.0 && elevation <= 89.0)) bad("el must lie in [-89, 89]");
  if (!(radius > 0.0 && radius <= 100.0)) bad("r must lie in (0, 100]");
  if (!(fov >= 5.0 && fov <= 150.0)) bad("fov must lie in [5, 150]");
  if (width < 16 || width > 2048 || height < 16 || height > 2048) bad("w and h must lie in [16, 2048]");
}

Camera view_camera(const BodyTemplate& tmpl, const ViewParams& view) {
  view.validate();
  const auto [lo, hi] = tmpl.bounds();
  const double deg = kPi / 180.0;
  return spherical_camera(0.5 * (lo + hi), view.radius, view.azimuth * deg, (90.0 - view.elevation) * deg,
                          view.fov * deg, view.width, view.height);
}

std::vector<std::uint8_t> render_avatar_png(const HybridAvatar& avatar, const BodyTemplate& tmpl,
                                            const DeformNet* deform, const Pose& pose, const ViewParams& view,
                                            const RenderConfig& rcfg) {
  const Camera cam = view_camera(tmpl, view);
  return encode_png(render(articulate(avatar, tmpl, pose, deform), cam, rcfg).color);
}

std::vector<std::uint8_t> render_skeleton_png(const BodyTemplate& tmpl, const Points& canonical_vertices,
                                              const Pose& pose, const ViewParams& view, const SkeletonStyle& style,
                                              bool cull_hands) {
  const Camera cam = view_camera(tmpl, view);
  return encode_png(render_skeleton(tmpl, canonical_vertices, pose, cam, style, true, cull_hands).pixels);
}

// ---- session ---------------------------------------------------------------------------------------

Session::Session(BodyTemplate tmpl, HybridAvatar canonical, std::optional<DeformNet> deform, SessionOptions options)
    : tmpl_(std::move(tmpl)), canonical_(std::move(canonical)), deform_(std::move(deform)), options_(options) {
  canonical_.validate(tmpl_.num_joints());
  if (canonical_.part_shape.size() == 0) canonical_.part_shape = VecX::Zero(tmpl_.num_coefficients());
  if (canonical_.part_shape.size() != tmpl_.num_coefficients()) {
    throw std::invalid_argument("avatar coefficient count does not match the template");
  }
  if (deform_ && deform_->pose_dim() != 3 * tmpl_.num_joints()) {
    throw std::invalid_argument("deform network pose size does not match the template");
  }
  auto s = std::make_shared<SessionState>();
  s->pose = Pose::identity(tmpl_);
  s->shape_delta = VecX::Zero(tmpl_.num_coefficients());
  s->avatar = canonical_;
  state_ = std::move(s);
}

std::shared_ptr<const SessionState> Session::snapshot() const {
  std::lock_guard<std::mutex> lock(snapshot_mu_);
  return state_;
}

void Session::publish(std::shared_ptr<SessionState> next) {
  std::lock_guard<std::mutex> lock(snapshot_mu_);
  next->version = state_->version + 1;
  state_ = std::move(next);
}

std::uint64_t Session::apply_pose(const json& body) {
  std::lock_guard<std::mutex> writer(write_mu_);
  const auto cur = snapshot();
  auto next = std::make_shared<SessionState>(*cur);
  next->pose = pose_from_json(tmpl_, body, cur->pose);
  try {
    next->pose.validate(tmpl_);
  } catch (const std::invalid_argument& e) {
    throw FormatError(e.what());
  }
  publish(next);
  return next->version;
}

std::uint64_t Session::apply_shape(const json& body) {
  std::lock_guard<std::mutex> writer(write_mu_);
  if (!body.is_object() || !body.contains("delta") || body.size() != 1) {
    throw FormatError("shape body must be {\"delta\": [numbers]}");
  }
  const json& d = body.at("delta");
  const int nc = tmpl_.num_coefficients();
  if (!d.is_array() || static_cast<int>(d.size()) > nc) {
    throw FormatError("delta must be an array of at most " + std::to_string(nc) + " numbers");
  }
  VecX delta = VecX::Zero(nc);
  for (std::size_t k = 0; k < d.size(); ++k) {
    if (!d[k].is_number() || !std::isfinite(d[k].get<double>())) throw FormatError("delta entries must be finite numbers");
    delta[static_cast<Eigen::Index>(k)] = d[k].get<double>();
  }
  auto next = std::make_shared<SessionState>(*snapshot());
  next->shape_delta = delta;
  next->avatar = apply_shape_edit(canonical_, tmpl_, delta);
  publish(next);
  return next->version;
}

std::uint64_t Session::reset() {
  std::lock_guard<std::mutex> writer(write_mu_);
  auto next = std::make_shared<SessionState>();
  next->pose = Pose::identity(tmpl_);
  next->shape_delta = VecX::Zero(tmpl_.num_coefficients());
  next->avatar = canonical_;
  publish(next);
  return next->version;
}

json Session::meta() const {
  const auto s = snapshot();
  return {{"num_gaussians", canonical_.size()},
          {"num_unconstrained", canonical_.count(GaussianKind::unconstrained)},
          {"num_bound", canonical_.count(GaussianKind::mesh_binding)},
          {"num_shape", tmpl_.num_shape},
          {"num_expression", tmpl_.num_expression},
          {"joint_names", tmpl_.joint_names},
          {"motions", {"wave", "walk"}},
          {"has_deform", deform_.has_value()},
          {"version", s->version}};
}

Session::Frame Session::frame(const ViewParams& view) const {
  const auto s = snapshot();
  return {render_avatar_png(s->avatar, tmpl_, deform_ ? &*deform_ : nullptr, s->pose, view, options_.render),
          s->version};
}

Session::Frame Session::skeleton(const ViewParams& view) const {
  const auto s = snapshot();
  return {render_skeleton_png(tmpl_, avatar_canonical_mesh(tmpl_, s->avatar, s->pose), s->pose, view,
                              options_.skeleton, options_.cull_hands),
          s->version};
}

// ---- HTTP ----------------------------------------------------------------------------------------------

namespace {

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
  res.status = status;
  res.set_content(json{{"error", {{"code", code}, {"message", message}}}}.dump(), "application/json");
}

double query_number(const httplib::Request& req, const char* key, double fallback) {
  if (!req.has_param(key)) return fallback;
  const std::string v = req.get_param_value(key);
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw std::invalid_argument(std::string(key) + " is not a number");
  return out;
}

ViewParams parse_view(const httplib::Request& req) {
  static const std::vector<std::string> known{"az", "el", "r", "fov", "w", "h"};
  for (const auto& [key, value] : req.params) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw std::invalid_argument("unknown query parameter '" + key + "'");
    }
  }
  ViewParams v;
  v.azimuth = query_number(req, "az", v.azimuth);
  v.elevation = query_number(req, "el", v.elevation);
  v.radius = query_number(req, "r", v.radius);
  v.fov = query_number(req, "fov", v.fov);
  const double w = query_number(req, "w", v.width), h = query_number(req, "h", v.height);
  if (w != std::floor(w) || h != std::floor(h)) throw std::invalid_argument("w and h must be integers");
  if (std::abs(w) > 1e6 || std::abs(h) > 1e6) throw std::invalid_argument("w and h must lie in [16, 2048]");
  v.width = static_cast<int>(w);
  v.height = static_cast<int>(h);
  v.validate();
  return v;
}

json parse_body(const httplib::Request& req) {
  try {
    return json::parse(req.body);
  } catch (const json::exception& e) {
    throw FormatError(std::string("body is not valid JSON: ") + e.what());
  }
}

}  // namespace

struct Service::Impl {
  Session& session;
  httplib::Server server;
  explicit Impl(Session& s) : session(s) {}
};

Service::Service(Session& session, std::string static_dir) : impl_(std::make_unique<Impl>(session)) {
  auto& srv = impl_->server;
  Session& s = impl_->session;

  auto image_route = [&srv, &s](const std::string& path, bool skeleton) {
    srv.Get(path, [&s, skeleton](const httplib::Request& req, httplib::Response& res) {
      ViewParams view;
      try {
        view = parse_view(req);
      } catch (const std::invalid_argument& e) {
        return send_error(res, 400, "bad_query", e.what());
      }
      const Session::Frame f = skeleton ? s.skeleton(view) : s.frame(view);
      res.set_header("X-Frame-Version", std::to_string(f.version));
      res.set_header("Cache-Control", "no-store");
      res.set_content(std::string(f.png.begin(), f.png.end()), "image/png");
    });
  };
  image_route("/api/frame", false);
  image_route("/api/skeleton", true);

  srv.Get("/api/meta", [&s](const httplib::Request&, httplib::Response& res) {
    res.set_content(s.meta().dump(), "application/json");
  });

  auto mutation = [&srv, &s](const std::string& path, const std::string& code,
                             std::uint64_t (Session::*apply)(const json&)) {
    srv.Post(path, [&s, code, apply](const httplib::Request& req, httplib::Response& res) {
      try {
        const std::uint64_t v = (s.*apply)(parse_body(req));
        res.status = 204;
        res.set_header("X-State-Version", std::to_string(v));
      } catch (const FormatError& e) {
        send_error(res, 400, code, e.what());
      }
    });
  };
  mutation("/api/pose", "bad_pose", &Session::apply_pose);
  mutation("/api/shape", "bad_shape", &Session::apply_shape);

  srv.Post("/api/reset", [&s](const httplib::Request&, httplib::Response& res) {
    res.status = 204;
    res.set_header("X-State-Version", std::to_string(s.reset()));
  });

  if (!static_dir.empty() && !srv.set_mount_point("/", static_dir)) {
    throw std::runtime_error("static directory " + static_dir + " does not exist");
  }

  srv.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
    if (res.status == 404 && res.body.empty()) send_error(res, 404, "not_found", "no route for " + req.path);
    if (res.status == 405) send_error(res, 405, "method_not_allowed", req.method + " " + req.path);
  });
  srv.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string what = "unknown error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    send_error(res, 500, "internal", what);
  });
}

Service::~Service() { stop(); }

int Service::bind(const std::string& host, int port) {
  int bound = -1;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (impl_->server.bind_to_port(host, port)) {
    bound = port;
  }
  if (bound <= 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  return bound;
}

void Service::listen() { impl_->server.listen_after_bind(); }

void Service::stop() {
  if (impl_) impl_->server.stop();
}

}  // namespace skelsplat
