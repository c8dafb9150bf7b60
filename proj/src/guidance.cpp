#include "skelsplat/guidance.hpp"

#include "skelsplat/mesh_raster.hpp"
#include "skelsplat/rng.hpp"

#include <sys/socket.h>
#include <sys/un.h>
#include <unistd.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace skelsplat {

DiffusionSchedule DiffusionSchedule::linear(double beta_start, double beta_end, int T) {
  if (T < 2) throw std::invalid_argument("schedule needs at least two steps");
  if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end)) {
    throw std::invalid_argument("betas must satisfy 0 < start <= end < 1");
  }
  DiffusionSchedule s;
  s.T = T;
  s.alphas.resize(T);
  s.alpha_bar.resize(T);
  double prod = 1.0;
  for (int t = 0; t < T; ++t) {
    const double beta = beta_start + (beta_end - beta_start) * t / (T - 1);
    s.alphas[t] = 1.0 - beta;
    prod *= s.alphas[t];
    s.alpha_bar[t] = prod;
  }
  return s;
}

void DiffusionSchedule::check(int t) const {
  if (t < 0 || t >= T) throw std::invalid_argument("timestep " + std::to_string(t) + " outside [0, T)");
}

Image add_noise(const Image& x, int t, const Image& eps, const DiffusionSchedule& schedule) {
  schedule.check(t);
  if (!x.same_shape(eps)) throw std::invalid_argument("noise shape differs from image");
  const double a = std::sqrt(schedule.alpha_bar[t]), b = std::sqrt(1.0 - schedule.alpha_bar[t]);
  Image out = x;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = a * x.data[i] + b * eps.data[i];
  return out;
}

Image oracle_denoise(const Image& x_t, int t, const Image& target, const DiffusionSchedule& schedule) {
  schedule.check(t);
  if (!x_t.same_shape(target)) throw std::invalid_argument("target shape differs from x_t");
  const double a = std::sqrt(schedule.alpha_bar[t]), b = std::sqrt(1.0 - schedule.alpha_bar[t]);
  Image out = x_t;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = (x_t.data[i] - a * target.data[i]) / b;
  return out;
}

Image cfg_combine(const Image& eps_uncond, const Image& eps_cond, double scale) {
  Image out = eps_cond;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = eps_uncond.data[i] + scale * (eps_cond.data[i] - eps_uncond.data[i]);
  }
  return out;
}

// ---- reference mannequin ----------------------------------------------------------------

Points procedural_vertex_colors(const BodyTemplate& tmpl, std::uint64_t seed) {
  Rng rng(seed);
  const Vec3 palette[3] = {Vec3(rng.uniform(0.6, 0.95), rng.uniform(0.15, 0.35), rng.uniform(0.1, 0.3)),
                           Vec3(rng.uniform(0.1, 0.3), rng.uniform(0.45, 0.75), rng.uniform(0.2, 0.4)),
                           Vec3(rng.uniform(0.15, 0.35), rng.uniform(0.25, 0.45), rng.uniform(0.6, 0.9))};
  const int nj = tmpl.num_joints();
  std::vector<int> joint_color(nj);
  std::vector<double> phase(nj);
  for (int j = 0; j < nj; ++j) {
    joint_color[j] = static_cast<int>(rng.below(3));
    phase[j] = rng.uniform(0.0, 2.0 * kPi);
  }
  Points colors(tmpl.num_vertices(), 3);
  for (int v = 0; v < tmpl.num_vertices(); ++v) {
    Eigen::Index j = 0;
    tmpl.skin_weights.row(v).maxCoeff(&j);
    const double y = tmpl.vertices_rest(v, 1);
    const double band = 0.8 + 0.2 * std::sin(2.0 * kPi * 3.0 * y + phase[j]);
    colors.row(v) = (band * palette[joint_color[j]]).transpose();
  }
  return colors;
}

ReferenceMannequin::ReferenceMannequin(std::uint64_t texture_seed, int supersample, const Vec3& background)
    : tmpl_(make_mannequin()),
      colors_(procedural_vertex_colors(tmpl_, texture_seed)),
      supersample_(std::max(1, supersample)),
      background_(background) {}

namespace {

Image box_downsample(const Image& img, int s) {
  if (s == 1) return img;
  Image out(img.width / s, img.height / s, img.channels);
  const double inv = 1.0 / (s * s);
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      for (int c = 0; c < img.channels; ++c) {
        double acc = 0.0;
        for (int dy = 0; dy < s; ++dy) {
          for (int dx = 0; dx < s; ++dx) acc += img.at(s * x + dx, s * y + dy, c);
        }
        out.at(x, y, c) = acc * inv;
      }
    }
  }
  return out;
}

}  // namespace

Image ReferenceMannequin::render(const Camera& cam, const Pose& pose) const {
  const Points posed = lbs_transform(tmpl_, pose).vertices;
  const Camera big = cam.resized(cam.width * supersample_, cam.height * supersample_);
  return box_downsample(rasterize_mesh(posed, tmpl_.faces, big, &colors_, background_).color, supersample_);
}

Image ReferenceMannequin::silhouette(const Camera& cam, const Pose& pose) const {
  const Points posed = lbs_transform(tmpl_, pose).vertices;
  const Camera big = cam.resized(cam.width * supersample_, cam.height * supersample_);
  return box_downsample(rasterize_mesh(posed, tmpl_.faces, big).silhouette, supersample_);
}

// ---- oracle ------------------------------------------------------------------------------

OracleGuidance::OracleGuidance(DiffusionSchedule schedule, TargetFn target, double cfg_scale, double uncond_gray)
    : schedule_(std::move(schedule)), target_(std::move(target)), cfg_scale_(cfg_scale), uncond_gray_(uncond_gray) {}

Image OracleGuidance::denoise(const Image& x_t, int t, const DenoiseContext& ctx) const {
  if (ctx.camera == nullptr || ctx.pose == nullptr) throw std::invalid_argument("oracle guidance needs camera and pose");
  Camera cam = *ctx.camera;
  if (cam.width != x_t.width || cam.height != x_t.height) cam = cam.resized(x_t.width, x_t.height);
  const Image cond = oracle_denoise(x_t, t, target_(cam, *ctx.pose), schedule_);
  if (cfg_scale_ == 1.0) return cond;
  const Image gray(x_t.width, x_t.height, x_t.channels, uncond_gray_);
  return cfg_combine(oracle_denoise(x_t, t, gray, schedule_), cond, cfg_scale_);
}

// ---- external protocol --------------------------------------------------------------------

namespace wire {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}

void put_tensor(std::vector<std::uint8_t>& out, const Image* img) {
  if (img == nullptr) {
    for (int k = 0; k < 3; ++k) put_u32(out, 0);
    return;
  }
  put_u32(out, static_cast<std::uint32_t>(img->height));
  put_u32(out, static_cast<std::uint32_t>(img->width));
  put_u32(out, static_cast<std::uint32_t>(img->channels));
  for (double v : img->data) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

std::vector<std::uint8_t> encode_request(const Image& x_t, int t, const Image* condition, const std::string& token) {
  std::vector<std::uint8_t> out = {'S', 'K', 'G', 'D'};
  put_u32(out, static_cast<std::uint32_t>(t));
  put_tensor(out, &x_t);
  put_tensor(out, condition);
  put_u32(out, static_cast<std::uint32_t>(token.size()));
  out.insert(out.end(), token.begin(), token.end());
  return out;
}

std::uint32_t Reader::u32() {
  if (pos + 4 > bytes.size()) throw std::runtime_error("truncated guidance message");
  std::uint32_t v = 0;
  for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(bytes[pos + b]) << (8 * b);
  pos += 4;
  return v;
}

Image Reader::tensor() {
  const std::uint32_t h = u32(), w = u32(), c = u32();
  const std::uint64_t n = static_cast<std::uint64_t>(h) * w * c;
  if (n * 4 > bytes.size() - pos) throw std::runtime_error("truncated guidance tensor");
  Image img(static_cast<int>(w), static_cast<int>(h), static_cast<int>(c));
  for (std::uint64_t i = 0; i < n; ++i) img.data[i] = std::bit_cast<float>(u32());
  return img;
}

std::string Reader::text(std::size_t n) {
  if (n > bytes.size() - pos) throw std::runtime_error("truncated guidance token");
  std::string s(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  pos += n;
  return s;
}

Request decode_request(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "SKGD", 4) != 0) throw std::runtime_error("bad guidance magic");
  Reader r{bytes, 4};
  Request req;
  req.t = static_cast<int>(r.u32());
  req.x_t = r.tensor();
  req.condition = r.tensor();
  req.token = r.text(r.u32());
  return req;
}

}  // namespace wire

ExternalGuidance::ExternalGuidance(DiffusionSchedule schedule, std::string socket_path)
    : schedule_(std::move(schedule)), socket_path_(std::move(socket_path)) {}

namespace {

class Socket {
 public:
  explicit Socket(const std::string& path) {
    sockaddr_un addr{};
    if (path.size() >= sizeof(addr.sun_path)) throw std::runtime_error("socket path too long: " + path);
    fd_ = ::socket(AF_UNIX, SOCK_STREAM, 0);
    if (fd_ < 0) throw std::runtime_error("cannot create socket");
    addr.sun_family = AF_UNIX;
    std::memcpy(addr.sun_path, path.c_str(), path.size() + 1);
    if (::connect(fd_, reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) != 0) {
      ::close(fd_);
      throw std::runtime_error("cannot connect to guidance socket " + path);
    }
  }
  ~Socket() { ::close(fd_); }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;

  void send_all(const std::vector<std::uint8_t>& bytes) {
    std::size_t sent = 0;
    while (sent < bytes.size()) {
      const ssize_t n = ::send(fd_, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
      if (n <= 0) throw std::runtime_error("guidance socket write failed");
      sent += static_cast<std::size_t>(n);
    }
  }

  void recv_exact(std::uint8_t* dst, std::size_t len) {
    std::size_t got = 0;
    while (got < len) {
      const ssize_t n = ::recv(fd_, dst + got, len - got, 0);
      if (n <= 0) throw std::runtime_error("guidance socket closed mid-message");
      got += static_cast<std::size_t>(n);
    }
  }

 private:
  int fd_ = -1;
};

}  // namespace

Image ExternalGuidance::denoise(const Image& x_t, int t, const DenoiseContext& ctx) const {
  schedule_.check(t);
  Socket sock(socket_path_);
  sock.send_all(wire::encode_request(x_t, t, ctx.condition, ctx.token));
  std::vector<std::uint8_t> header(12);
  sock.recv_exact(header.data(), header.size());
  wire::Reader hr{header};
  const std::uint32_t h = hr.u32(), w = hr.u32(), c = hr.u32();
  if (static_cast<int>(h) != x_t.height || static_cast<int>(w) != x_t.width || static_cast<int>(c) != x_t.channels) {
    throw std::runtime_error("guidance response shape differs from request");
  }
  std::vector<std::uint8_t> payload = header;
  payload.resize(12 + static_cast<std::size_t>(h) * w * c * 4);
  sock.recv_exact(payload.data() + 12, payload.size() - 12);
  wire::Reader r{payload};
  return r.tensor();
}

// ---- SDS -----------------------------------------------------------------------------------

std::pair<int, int> timestep_range(const SdsConfig& cfg, int T) {
  if (!(cfg.t_min_fraction >= 0.0 && cfg.t_min_fraction <= cfg.t_max_fraction && cfg.t_max_fraction <= 1.0)) {
    throw std::invalid_argument("sds.t_range must satisfy 0 <= lo <= hi <= 1");
  }
  const int lo = static_cast<int>(std::lround(cfg.t_min_fraction * T));
  const int hi = std::min(T - 1, static_cast<int>(std::lround(cfg.t_max_fraction * T)));
  return {std::min(lo, hi), hi};
}

SdsSample sds_gradient(const Image& render, const std::function<void(const Image&)>& backward,
                       const GuidanceModel& guidance, const DenoiseContext& ctx, const SdsConfig& cfg,
                       std::uint64_t seed) {
  const DiffusionSchedule& schedule = guidance.schedule();
  const auto [lo, hi] = timestep_range(cfg, schedule.T);
  Rng rng(seed);
  SdsSample out;
  out.t = lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
  Image eps(render.width, render.height, render.channels);
  for (double& e : eps.data) e = rng.normal();
  const Image x_t = add_noise(render, out.t, eps, schedule);
  const Image eps_hat = guidance.denoise(x_t, out.t, ctx);
  if (!eps_hat.same_shape(render)) throw std::runtime_error("guidance output shape differs from render");
  const double scale = cfg.weight * (cfg.chain_xt ? std::sqrt(schedule.alpha_bar[out.t]) : 1.0);
  out.residual = eps_hat;
  for (std::size_t i = 0; i < eps.data.size(); ++i) {
    const double r = scale * (eps_hat.data[i] - eps.data[i]);
    out.residual.data[i] = r;
    out.residual_norm2 += r * r;
  }
  if (backward) backward(out.residual);
  return out;
}

}  // namespace skelsplat
