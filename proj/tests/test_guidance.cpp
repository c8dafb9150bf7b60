#include "skelsplat/guidance.hpp"
#include "skelsplat/splat_renderer.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <sys/socket.h>
#include <sys/un.h>
#include <unistd.h>

#include <cstring>
#include <filesystem>
#include <thread>

namespace skelsplat {
namespace {

Image random_image(Rng& rng, int w, int h, double lo, double hi) {
  Image img(w, h, 3);
  for (double& v : img.data) v = rng.uniform(lo, hi);
  return img;
}

Image normal_image(Rng& rng, int w, int h) {
  Image img(w, h, 3);
  for (double& v : img.data) v = rng.normal();
  return img;
}

// ---- schedule ----------------------------------------------------------------------------

TEST(DiffusionSchedule, AlphaBarIsCumulativeProduct) {
  const DiffusionSchedule s = DiffusionSchedule::linear();
  ASSERT_EQ(s.T, 1000);
  EXPECT_NEAR(1.0 - s.alphas[0], 1e-4, 1e-15);
  EXPECT_NEAR(1.0 - s.alphas[999], 2e-2, 1e-15);
  // independent route: sum of logs
  double log_sum = 0.0;
  for (int t = 0; t < s.T; ++t) {
    const double beta = 1e-4 + (2e-2 - 1e-4) * t / 999.0;
    log_sum += std::log1p(-beta);
    ASSERT_NEAR(s.alpha_bar[t], std::exp(log_sum), 1e-9);
    if (t > 0) ASSERT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
    ASSERT_GT(s.alpha_bar[t], 0.0);
    ASSERT_LT(s.alpha_bar[t], 1.0);
  }
}

TEST(DiffusionSchedule, RejectsBadArguments) {
  EXPECT_THROW(DiffusionSchedule::linear(0.0, 0.02, 1000), std::invalid_argument);
  EXPECT_THROW(DiffusionSchedule::linear(0.03, 0.02, 1000), std::invalid_argument);
  EXPECT_THROW(DiffusionSchedule::linear(1e-4, 0.02, 1), std::invalid_argument);
}

// ---- forward process -----------------------------------------------------------------------

TEST(AddNoise, ZeroNoiseScalesTheImage) {
  const DiffusionSchedule s = DiffusionSchedule::linear();
  Rng rng(1);
  const Image x = random_image(rng, 8, 6, -1, 1);
  const Image zero(8, 6, 3, 0.0);
  for (int t : {0, 17, 500, 999}) {
    const Image xt = add_noise(x, t, zero, s);
    for (std::size_t i = 0; i < x.data.size(); ++i) ASSERT_EQ(xt.data[i], std::sqrt(s.alpha_bar[t]) * x.data[i]);
  }
}

TEST(AddNoise, FirstStepBarelyPerturbs) {
  const DiffusionSchedule s = DiffusionSchedule::linear();
  Rng rng(2);
  const Image x = random_image(rng, 8, 8, 0, 1);
  const Image eps = normal_image(rng, 8, 8);
  const Image xt = add_noise(x, 0, eps, s);
  for (std::size_t i = 0; i < x.data.size(); ++i) ASSERT_NEAR(xt.data[i], x.data[i], 0.01 * std::abs(eps.data[i]) + 1e-4);
}

TEST(AddNoise, MatchesFormulaAndRejectsBadTimesteps) {
  const DiffusionSchedule s = DiffusionSchedule::linear();
  Rng rng(3);
  const Image x = random_image(rng, 5, 7, -1, 1);
  const Image eps = normal_image(rng, 5, 7);
  for (int trial = 0; trial < 20; ++trial) {
    const int t = static_cast<int>(rng.below(1000));
    const Image xt = add_noise(x, t, eps, s);
    double prod = 1.0;
    for (int k = 0; k <= t; ++k) prod *= 1.0 - (1e-4 + (2e-2 - 1e-4) * k / 999.0);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
      ASSERT_NEAR(xt.data[i], std::sqrt(prod) * x.data[i] + std::sqrt(1.0 - prod) * eps.data[i], 1e-12);
    }
  }
  EXPECT_THROW(add_noise(x, -1, eps, s), std::invalid_argument);
  EXPECT_THROW(add_noise(x, 1000, eps, s), std::invalid_argument);
  EXPECT_THROW(add_noise(x, 3, Image(2, 2, 3), s), std::invalid_argument);
}

// ---- oracle -------------------------------------------------------------------------------

TEST(OracleDenoise, RecoversTheNoiseWhenTheImageIsTheTarget) {
  const DiffusionSchedule s = DiffusionSchedule::linear();
  Rng rng(4);
  const Image target = random_image(rng, 6, 6, 0, 1);
  for (int t : {20, 300, 980}) {
    const Image eps = normal_image(rng, 6, 6);
    const Image eps_hat = oracle_denoise(add_noise(target, t, eps, s), t, target, s);
    for (std::size_t i = 0; i < eps.data.size(); ++i) ASSERT_NEAR(eps_hat.data[i], eps.data[i], 1e-12);
  }
}

TEST(OracleDenoise, ResidualIdentity) {
  const DiffusionSchedule s = DiffusionSchedule::linear();
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const int t = static_cast<int>(rng.below(1000));
    const Image x = random_image(rng, 4, 5, 0, 1), target = random_image(rng, 4, 5, 0, 1);
    const Image eps = normal_image(rng, 4, 5);
    const Image eps_hat = oracle_denoise(add_noise(x, t, eps, s), t, target, s);
    const double k = std::sqrt(s.alpha_bar[t]) / std::sqrt(1.0 - s.alpha_bar[t]);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
      ASSERT_NEAR(eps_hat.data[i] - eps.data[i], k * (x.data[i] - target.data[i]), 1e-6);
    }
  }
}

TEST(OracleGuidance, UnitScaleEqualsConditional) {
  const DiffusionSchedule s = DiffusionSchedule::linear();
  Rng rng(6);
  const Image target = random_image(rng, 8, 8, 0, 1);
  const Image xt = normal_image(rng, 8, 8);
  const OracleGuidance g(s, [&](const Camera&, const Pose&) { return target; }, 1.0);
  Camera cam = testing::test_camera(8, 8);
  const Pose pose;
  const DenoiseContext ctx{nullptr, "", &cam, &pose};
  EXPECT_EQ(g.denoise(xt, 400, ctx).data, oracle_denoise(xt, 400, target, s).data);
}

TEST(OracleGuidance, GuidanceScaleExtrapolatesFromGray) {
  const DiffusionSchedule s = DiffusionSchedule::linear();
  Rng rng(7);
  const Image target = random_image(rng, 8, 8, 0, 1);
  const Image xt = normal_image(rng, 8, 8);
  const double scale = 7.5;
  const OracleGuidance g(s, [&](const Camera&, const Pose&) { return target; }, scale);
  Camera cam = testing::test_camera(8, 8);
  const Pose pose;
  const Image out = g.denoise(xt, 250, {nullptr, "", &cam, &pose});
  // CFG with a gray unconditional target is the oracle for target' = gray + s (target - gray)
  Image effective = target;
  for (double& v : effective.data) v = 0.5 + scale * (v - 0.5);
  const Image expected = oracle_denoise(xt, 250, effective, s);
  for (std::size_t i = 0; i < out.data.size(); ++i) ASSERT_NEAR(out.data[i], expected.data[i], 1e-9);
  EXPECT_THROW(g.denoise(xt, 250, {}), std::invalid_argument);
}

TEST(ReferenceMannequin, DeterministicTexturedTargets) {
  const ReferenceMannequin ref;
  const Camera cam = Camera::look_at(Vec3(0, 0, 2.2), Vec3(0, 0, 0), Vec3(0, 1, 0), 0.7, 48, 48);
  const Pose pose = Pose::identity(ref.body());
  const Image a = ref.render(cam, pose), b = ref.render(cam, pose);
  EXPECT_EQ(a.data, b.data);
  const Image sil = ref.silhouette(cam, pose);
  int covered = 0;
  for (int y = 0; y < 48; ++y) {
    for (int x = 0; x < 48; ++x) {
      const double lum = a.at(x, y, 0) + a.at(x, y, 1) + a.at(x, y, 2);
      if (sil.at(x, y) == 0.0) EXPECT_EQ(lum, 0.0);
      if (sil.at(x, y) == 1.0) {
        EXPECT_GT(lum, 0.2);
        ++covered;
      }
    }
  }
  EXPECT_GT(covered, 100);
  const Points c = ref.vertex_colors();
  EXPECT_GE(c.minCoeff(), 0.0);
  EXPECT_LE(c.maxCoeff(), 1.0);
  EXPECT_NE(procedural_vertex_colors(ref.body(), 8), c);
}

// ---- SDS ----------------------------------------------------------------------------------

struct SplatScene {
  GaussianSet g;
  Camera cam = testing::test_camera(16, 16);

  SplatScene() {
    Gaussian3D s;
    s.position = Vec3::Zero();
    s.log_scale = Vec3::Constant(std::log(0.3));
    s.opacity_logit = 2.0;
    s.color = Vec3(0.6, 0.4, 0.2);
    g.push_back(s);
  }
};

TEST(SdsGradient, TimestepsCoverTheConfiguredRange) {
  const SdsConfig cfg;
  EXPECT_EQ(timestep_range(cfg, 1000), (std::pair<int, int>(20, 980)));
  const DiffusionSchedule s = DiffusionSchedule::linear();
  const Image target(4, 4, 3, 0.5);
  const OracleGuidance g(s, [&](const Camera&, const Pose&) { return target; }, 1.0);
  Camera cam = testing::test_camera(4, 4);
  const Pose pose;
  int lo = 1000, hi = -1;
  for (std::uint64_t seed = 0; seed < 20000; ++seed) {
    const int t = sds_gradient(target, nullptr, g, {nullptr, "", &cam, &pose}, cfg, seed).t;
    lo = std::min(lo, t);
    hi = std::max(hi, t);
  }
  EXPECT_EQ(lo, 20);
  EXPECT_EQ(hi, 980);
  SdsConfig bad;
  bad.t_min_fraction = 0.9;
  bad.t_max_fraction = 0.1;
  EXPECT_THROW(timestep_range(bad, 1000), std::invalid_argument);
}

TEST(SdsGradient, RenderEqualToTargetGivesZeroResidual) {
  const DiffusionSchedule s = DiffusionSchedule::linear();
  const SplatScene scene;
  const Image x = render(scene.g, scene.cam).color;
  const OracleGuidance g(s, [&](const Camera&, const Pose&) { return x; }, 1.0);
  const Pose pose;
  for (bool chain : {false, true}) {
    SdsConfig cfg;
    cfg.chain_xt = chain;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      GaussianGrads grads;
      const SdsSample out = sds_gradient(
          x, [&](const Image& r) { grads = render_backward(scene.g, scene.cam, r); }, g,
          {nullptr, "", &scene.cam, &pose}, cfg, seed);
      // x_t is formed in floating point, so eps_hat - eps is zero up to rounding
      ASSERT_LT(std::sqrt(out.residual_norm2), 1e-11);
      ASSERT_LT(grads.color.cwiseAbs().maxCoeff(), 1e-11);
    }
  }
}

TEST(SdsGradient, ColorGradientPushesTowardTarget) {
  const DiffusionSchedule s = DiffusionSchedule::linear();
  const SplatScene scene;
  const Image x = render(scene.g, scene.cam).color;
  Image target = x;
  const int px = 8, py = 8;
  const double d = 0.2;
  target.at(px, py, 0) -= d;  // render exceeds target by +d in red at one pixel
  const OracleGuidance g(s, [&](const Camera&, const Pose&) { return target; }, 1.0);
  const Pose pose;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    GaussianGrads grads;
    sds_gradient(
        x, [&](const Image& r) { grads = render_backward(scene.g, scene.cam, r); }, g,
        {nullptr, "", &scene.cam, &pose}, SdsConfig{}, seed);
    // descent lowers red; green and blue see no residual beyond rounding
    ASSERT_GT(grads.color(0, 0), 0.0);
    ASSERT_LT(std::abs(grads.color(0, 1)), 1e-9);
  }
}

TEST(SdsGradient, SeededEstimatesAreBitIdentical) {
  const DiffusionSchedule s = DiffusionSchedule::linear();
  Rng rng(8);
  const Image x = random_image(rng, 6, 6, 0, 1), target = random_image(rng, 6, 6, 0, 1);
  const OracleGuidance g(s, [&](const Camera&, const Pose&) { return target; }, 1.0);
  Camera cam = testing::test_camera(6, 6);
  const Pose pose;
  const DenoiseContext ctx{nullptr, "", &cam, &pose};
  const SdsSample a = sds_gradient(x, nullptr, g, ctx, SdsConfig{}, 42);
  const SdsSample b = sds_gradient(x, nullptr, g, ctx, SdsConfig{}, 42);
  const SdsSample c = sds_gradient(x, nullptr, g, ctx, SdsConfig{}, 43);
  EXPECT_EQ(a.t, b.t);
  EXPECT_EQ(a.residual.data, b.residual.data);
  EXPECT_NE(a.residual.data, c.residual.data);
}

TEST(SdsGradient, MonteCarloMeanMatchesClosedForm) {
  const DiffusionSchedule s = DiffusionSchedule::linear();
  const SplatScene scene;
  const Image x = render(scene.g, scene.cam).color;
  Rng rng(9);
  Image target = x;
  for (double& v : target.data) v = std::clamp(v + rng.uniform(-0.1, 0.1), 0.0, 1.0);
  const OracleGuidance g(s, [&](const Camera&, const Pose&) { return target; }, 1.0);
  const Pose pose;
  Image diff = x;
  for (std::size_t i = 0; i < diff.data.size(); ++i) diff.data[i] = x.data[i] - target.data[i];
  const GaussianGrads unit = render_backward(scene.g, scene.cam, diff);
  for (bool chain : {false, true}) {
    SdsConfig cfg;
    cfg.chain_xt = chain;
    // E_t[w s(t) sqrt(abar)/sqrt(1 - abar)] over the integer range
    const auto [lo, hi] = timestep_range(cfg, s.T);
    double factor = 0.0;
    for (int t = lo; t <= hi; ++t) {
      const double ab = s.alpha_bar[t];
      factor += (chain ? std::sqrt(ab) : 1.0) * std::sqrt(ab) / std::sqrt(1.0 - ab);
    }
    factor /= hi - lo + 1;
    const int n = 10000;
    Eigen::Matrix<double, 1, 3> sum = Eigen::Matrix<double, 1, 3>::Zero(), sum2 = sum;
    for (int i = 0; i < n; ++i) {
      GaussianGrads grads;
      sds_gradient(
          x, [&](const Image& r) { grads = render_backward(scene.g, scene.cam, r); }, g,
          {nullptr, "", &scene.cam, &pose}, cfg, derive_seed(11, i));
      sum += grads.color.row(0);
      sum2 += grads.color.row(0).cwiseProduct(grads.color.row(0));
    }
    for (int c = 0; c < 3; ++c) {
      const double mean = sum[c] / n;
      const double var = sum2[c] / n - mean * mean;
      const double se = std::sqrt(var / n);
      const double expected = factor * unit.color(0, c);
      EXPECT_LE(std::abs(mean - expected), 3.0 * se + 1e-12) << "chain " << chain << " channel " << c;
    }
  }
}

// ---- external protocol ------------------------------------------------------------------------

TEST(GuidanceWire, RequestRoundTrip) {
  Rng rng(10);
  const Image xt = random_image(rng, 5, 3, -2, 2), cond = random_image(rng, 5, 3, 0, 1);
  const auto bytes = wire::encode_request(xt, 123, &cond, "a person waving");
  EXPECT_EQ(bytes.size(), 4 + 4 + 12 + 45 * 4 + 12 + 45 * 4 + 4 + 15u);
  EXPECT_EQ(bytes[4], 123);  // little-endian
  const wire::Request r = wire::decode_request(bytes);
  EXPECT_EQ(r.t, 123);
  EXPECT_EQ(r.token, "a person waving");
  ASSERT_TRUE(r.x_t.same_shape(xt));
  for (std::size_t i = 0; i < xt.data.size(); ++i) {
    EXPECT_EQ(r.x_t.data[i], static_cast<double>(static_cast<float>(xt.data[i])));
  }
  const auto none = wire::decode_request(wire::encode_request(xt, 0, nullptr, ""));
  EXPECT_EQ(none.condition.data.size(), 0u);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  EXPECT_THROW(wire::decode_request(truncated), std::runtime_error);
}

/// Serves one oracle request on a Unix socket, the way an out-of-tree backend would.
void serve_once(int listener, const Image& target, const DiffusionSchedule& s) {
  const int fd = ::accept(listener, nullptr, nullptr);
  ASSERT_GE(fd, 0);
  std::vector<std::uint8_t> buf;
  std::uint8_t chunk[4096];
  for (;;) {
    // the request is complete once it decodes
    const ssize_t n = ::recv(fd, chunk, sizeof(chunk), 0);
    if (n <= 0) break;
    buf.insert(buf.end(), chunk, chunk + n);
    try {
      const wire::Request req = wire::decode_request(buf);
      const Image eps = oracle_denoise(req.x_t, req.t, target, s);
      std::vector<std::uint8_t> out;
      wire::put_tensor(out, &eps);
      ::send(fd, out.data(), out.size(), MSG_NOSIGNAL);
      break;
    } catch (const std::runtime_error&) {
    }
  }
  ::close(fd);
}

TEST(ExternalGuidance, LoopbackMatchesOracleAtFloatPrecision) {
  const DiffusionSchedule s = DiffusionSchedule::linear();
  Rng rng(11);
  const Image target = random_image(rng, 12, 10, 0, 1), xt = random_image(rng, 12, 10, -1, 1);
  const std::string path = (std::filesystem::temp_directory_path() / ("skelsplat_guidance_" + std::to_string(::getpid()))).string();
  ::unlink(path.c_str());
  const int listener = ::socket(AF_UNIX, SOCK_STREAM, 0);
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  std::memcpy(addr.sun_path, path.c_str(), path.size() + 1);
  ASSERT_EQ(::bind(listener, reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)), 0);
  ASSERT_EQ(::listen(listener, 1), 0);
  std::thread server([&] { serve_once(listener, target, s); });
  const ExternalGuidance ext(s, path);
  const Image cond(12, 10, 3, 0.0);
  const Image out = ext.denoise(xt, 300, {&cond, "token", nullptr, nullptr});
  server.join();
  ::close(listener);
  ::unlink(path.c_str());
  // the server sees float32 inputs; compare against the oracle on the rounded image
  Image xt32 = xt;
  for (double& v : xt32.data) v = static_cast<float>(v);
  const Image expected = oracle_denoise(xt32, 300, target, s);
  ASSERT_TRUE(out.same_shape(expected));
  for (std::size_t i = 0; i < out.data.size(); ++i) EXPECT_NEAR(out.data[i], expected.data[i], 1e-5 * (1 + std::abs(expected.data[i])));
  EXPECT_THROW(ExternalGuidance(s, path + ".missing").denoise(xt, 300, {}), std::runtime_error);
}

}  // namespace
}  // namespace skelsplat
