#include "skelsplat/config.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

namespace skelsplat {
namespace {

using nlohmann::json;

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Published training constants; pinned independently of the config code.
TEST(ConfigSnapshot, DefaultsMatchPublishedConstants) {
  const TrainConfig c;
  EXPECT_EQ(c.sds.t_min_fraction, 0.02);
  EXPECT_EQ(c.sds.t_max_fraction, 0.98);
  EXPECT_EQ(c.sds.weight, 1.0);
  EXPECT_EQ(c.guidance.cfg_scale, 50.0);
  EXPECT_EQ(c.camera.radius, (Range{1.0, 2.0}));
  EXPECT_EQ(c.camera.azimuth_deg, (Range{0.0, 360.0}));
  EXPECT_EQ(c.camera.polar_deg, (Range{60.0, 120.0}));
  EXPECT_EQ(c.camera.fov_deg, (Range{40.0, 70.0}));
  EXPECT_EQ(c.camera.face_focus_prob, 0.2);
  EXPECT_EQ(c.stage1.lambda_geo, 1.0);
  EXPECT_EQ(c.stage1.steps, 15000);
  EXPECT_EQ(c.stage2.steps, 15000);
  EXPECT_EQ(c.stage1.res_start, 64);
  EXPECT_EQ(c.stage1.res_end, 512);
  EXPECT_EQ(c.stage2.resolution, 512);
  EXPECT_NO_THROW(c.validate());
}

TEST(ConfigSnapshot, EngineChosenDefaults) {
  const TrainConfig c;
  EXPECT_EQ(c.camera.jitter, 0.05);
  EXPECT_FALSE(c.sds.chain_xt);
  EXPECT_EQ(c.stage2.poses.canonical_fraction, 0.3);
  EXPECT_EQ(c.stage2.poses.expression_sigma, 1.0);
  EXPECT_FALSE(c.cull_hands);
  EXPECT_EQ(c.init.grid, 128);
  EXPECT_EQ(c.init.threshold, 2.5);
  EXPECT_LT(c.stage2.lr_position, c.stage2.lr_color);
}

TEST(ConfigFiles, PaperConfigEqualsDefaults) {
  const TrainConfig paper = load_config(SKELSPLAT_SOURCE_DIR "/configs/paper.toml");
  EXPECT_EQ(config_to_json(paper), config_to_json(TrainConfig{}));
}

TEST(ConfigFiles, DeskConfigIsValidAndSmall) {
  const TrainConfig desk = load_config(SKELSPLAT_SOURCE_DIR "/configs/desk.toml");
  EXPECT_EQ(desk.stage2.resolution, 128);
  EXPECT_EQ(desk.stage1.res_end, 128);
  EXPECT_LT(desk.stage1.steps, 15000);
  EXPECT_LT(desk.stage2.steps, 15000);
  // desk keeps the published sampling ranges
  EXPECT_EQ(desk.camera.radius, TrainConfig{}.camera.radius);
  EXPECT_EQ(desk.sds.t_min_fraction, 0.02);
  EXPECT_EQ(desk.stage1.lambda_geo, 1.0);
}

TEST(ConfigFiles, EveryKeyIsDocumented) {
  const std::string doc = slurp(SKELSPLAT_SOURCE_DIR "/docs/config.md");
  const std::string paper = slurp(SKELSPLAT_SOURCE_DIR "/configs/paper.toml");
  for (const ConfigKey& k : config_keys()) {
    EXPECT_FALSE(k.doc.empty()) << k.key;
    EXPECT_NE(doc.find("`" + k.key + "`"), std::string::npos) << k.key;
    const std::string leaf = k.key.substr(k.key.rfind('.') + 1);
    EXPECT_NE(paper.find("\n" + leaf + " = "), std::string::npos) << k.key;
  }
}

TEST(Config, TomlRoundTrip) {
  TrainConfig c;
  c.seed = 42;
  c.guidance.kind = "external";
  c.guidance.socket = "/tmp/\"quoted\".sock";
  c.sds.t_min_fraction = 0.1;
  c.camera.fov_deg = {30.0, 35.5};
  c.stage1.field.hidden = {32, 16, 8};
  c.init.bound_parts = {"face"};
  c.render.background = Vec3(0.25, 0.5, 1.0);
  const TrainConfig back = config_from_toml(config_to_toml(c));
  EXPECT_EQ(config_to_json(back), config_to_json(c));
}

TEST(Config, PartialFileOverridesOnlyItsKeys) {
  const TrainConfig c = config_from_toml("[stage1]\nlambda_geo = 2\nsteps = 10\n");
  EXPECT_EQ(c.stage1.lambda_geo, 2.0);
  EXPECT_EQ(c.stage1.steps, 10);
  EXPECT_EQ(c.stage2.steps, 15000);
}

TEST(Config, RejectsUnknownKeysAndWrongTypes) {
  EXPECT_THROW(config_from_toml("[stage1]\nlamda_geo = 1.0\n"), ConfigError);
  EXPECT_THROW(config_from_toml("[stage3]\nsteps = 1\n"), ConfigError);
  EXPECT_THROW(config_from_toml("seeds = 1\n"), ConfigError);
  EXPECT_THROW(config_from_toml("[stage1]\nsteps = 1.5\n"), ConfigError);
  EXPECT_THROW(config_from_toml("[stage1]\nsteps = \"many\"\n"), ConfigError);
  EXPECT_THROW(config_from_toml("[camera]\nradius = [1.0]\n"), ConfigError);
  EXPECT_THROW(config_from_toml("[sds]\nchain_xt = 1\n"), ConfigError);
}

TEST(Config, RejectsInvalidValuesBeforeAnyWork) {
  EXPECT_THROW(config_from_toml("[stage1]\nres_end = 100\n"), ConfigError);
  EXPECT_THROW(config_from_toml("[stage2]\nresolution = 1024\n"), ConfigError);
  EXPECT_THROW(config_from_toml("[stage1]\nres_start = 32\n"), ConfigError);
  EXPECT_THROW(config_from_toml("[stage1]\nsteps = -1\n"), ConfigError);
  EXPECT_THROW(config_from_toml("[sds]\nt_range = [0.9, 0.1]\n"), ConfigError);
  EXPECT_THROW(config_from_toml("[camera]\nface_focus_prob = 1.5\n"), ConfigError);
  EXPECT_THROW(config_from_toml("[guidance]\nkind = \"external\"\n"), ConfigError);
  EXPECT_THROW(config_from_toml("[init]\nper_triangle = 2\n"), ConfigError);
}

TEST(Toml, ParsesTheSupportedSubset) {
  const json j = parse_toml(R"(# leading comment
top = 1
[a]
s = "x # not a comment \"q\""   # trailing comment
f = 1.5e-3
neg = -2
b = true
arr = [
  1, 2,  # inside
  3,
]
[a.sub]
big = 1_000
c.d = "dotted"
)");
  EXPECT_EQ(j.at("top"), 1);
  EXPECT_EQ(j.at("a").at("s"), "x # not a comment \"q\"");
  EXPECT_DOUBLE_EQ(j.at("a").at("f").get<double>(), 1.5e-3);
  EXPECT_EQ(j.at("a").at("neg"), -2);
  EXPECT_EQ(j.at("a").at("b"), true);
  EXPECT_EQ(j.at("a").at("arr"), json::array({1, 2, 3}));
  EXPECT_EQ(j.at("a").at("sub").at("big"), 1000);
  EXPECT_EQ(j.at("a").at("sub").at("c").at("d"), "dotted");
  EXPECT_THROW(parse_toml("b = 1\n[b]\nx = 2\n"), ConfigError);
}

TEST(Toml, ReportsErrorsWithLineNumbers) {
  try {
    parse_toml("a = 1\nb = \n");
    FAIL() << "expected an error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_toml("a = 1\na = 2\n"), ConfigError);
  EXPECT_THROW(parse_toml("a = [1, [2]]\n"), ConfigError);
  EXPECT_THROW(parse_toml("a = \"open\n"), ConfigError);
  EXPECT_THROW(parse_toml("[a\n"), ConfigError);
  EXPECT_THROW(parse_toml("a = 1 2\n"), ConfigError);
  EXPECT_THROW(parse_toml("a = 0x10\n"), ConfigError);
}

}  // namespace
}  // namespace skelsplat
