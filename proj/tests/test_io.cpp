#include "skelsplat/io.hpp"

#include "avatar_util.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

namespace skelsplat {
namespace {

using nlohmann::json;

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("skelsplat_io_" + std::to_string(::getpid()) + "_" + name);
}

const char kStamp[] = "2024-01-02T03:04:05Z";

TEST(Blob, RoundTripsArraysOfEveryType) {
  BlobWriter w;
  const std::vector<double> f{1.5, -2.25, 3.0};
  const std::vector<std::uint32_t> u{7, 0xffffffffu};
  const std::vector<std::int32_t> s{-1, 5};
  w.add_f32("f", {3}, f.data());
  w.add_u32("u", {2}, u.data());
  w.add_i32("s", {1, 2}, s.data());
  const auto bytes = w.finish("TESTBLOB", {{"x", 1}});
  ASSERT_EQ(std::memcmp(bytes.data(), "TESTBLOB", 8), 0);
  const BlobReader r(bytes, "TESTBLOB", "blob");
  EXPECT_EQ(r.header().at("x"), 1);
  EXPECT_EQ(r.f32("f", {3}), f);
  EXPECT_EQ(r.u32("u", {2}), u);
  EXPECT_EQ(r.i32("s", {1, 2}), s);
  EXPECT_THROW(r.f32("f", {4}), FormatError);
  EXPECT_THROW(r.u32("f", {3}), FormatError);
  EXPECT_THROW(r.f32("missing", {1}), FormatError);
}

TEST(Blob, PayloadIsLittleEndianFloat32) {
  BlobWriter w;
  const double v = 1.0;
  w.add_f32("v", {1}, &v);
  const auto bytes = w.finish("TESTBLOB", json::object());
  // 1.0f = 0x3f800000
  const std::uint8_t tail[4] = {0x00, 0x00, 0x80, 0x3f};
  ASSERT_GE(bytes.size(), 4u);
  EXPECT_EQ(std::memcmp(bytes.data() + bytes.size() - 4, tail, 4), 0);
}

TEST(Blob, RejectsBadMagicAndTruncation) {
  BlobWriter w;
  const double v[2] = {1.0, 2.0};
  w.add_f32("v", {2}, v);
  auto bytes = w.finish("TESTBLOB", json::object());
  EXPECT_THROW(BlobReader(bytes, "OTHERMAG", "blob"), FormatError);
  for (std::size_t cut : {std::size_t{0}, std::size_t{7}, std::size_t{12}, bytes.size() - 1}) {
    std::vector<std::uint8_t> shorter(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    EXPECT_THROW(BlobReader(shorter, "TESTBLOB", "blob"), FormatError) << "cut at " << cut;
  }
  bytes[20] = '{';  // corrupt the header
  bytes[21] = '{';
  EXPECT_THROW(BlobReader(bytes, "TESTBLOB", "blob"), FormatError);
}

TEST(TemplateFile, ReencodingIsBitExact) {
  const BodyTemplate t = make_mannequin();
  const auto first = encode_template(t);
  const BodyTemplate loaded = decode_template(first);
  EXPECT_EQ(encode_template(loaded), first);
  EXPECT_EQ(loaded.joint_names, t.joint_names);
  EXPECT_EQ(loaded.parents, t.parents);
  EXPECT_EQ(loaded.faces, t.faces);
  EXPECT_EQ(loaded.num_shape, t.num_shape);
  EXPECT_EQ(loaded.num_expression, t.num_expression);
  EXPECT_LT((loaded.vertices_rest - t.vertices_rest).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_NO_THROW(loaded.validate());
}

TEST(TemplateFile, SaveLoadThroughDisk) {
  const BodyTemplate t = make_mannequin();
  const auto path = temp_path("t.abt");
  save_template(path, t);
  EXPECT_EQ(encode_template(load_template(path)), encode_template(t));
  EXPECT_FALSE(std::filesystem::exists(path.string() + ".partial"));
  std::filesystem::remove(path);
  EXPECT_THROW(load_template(path), std::runtime_error);
}

TEST(FieldFile, ReencodingIsBitExactAndQueriesAgree) {
  FieldConfig c;
  c.bands = 3;
  c.hidden = {16, 16};
  c.center = Vec3(0.1, 0.2, -0.3);
  c.radius = 0.7;
  const RadianceField f(c, 4);
  const auto first = encode_field(f);
  const RadianceField g = decode_field(first);
  EXPECT_EQ(encode_field(g), first);
  EXPECT_EQ(g.config().hidden, c.hidden);
  EXPECT_EQ(g.config().bands, c.bands);
  Rng rng(1);
  Points pts(20, 3);
  for (int i = 0; i < 20; ++i) pts.row(i) = testing::random_vec(rng, -1, 1).transpose();
  VecX d0, d1;
  Points c0, c1;
  f.query(pts, d0, c0);
  g.query(pts, d1, c1);
  EXPECT_LT((d0 - d1).cwiseAbs().maxCoeff(), 1e-4);
  EXPECT_LT((c0 - c1).cwiseAbs().maxCoeff(), 1e-5);
  EXPECT_THROW(decode_field(encode_template(make_mannequin())), FormatError);
}

TEST(AvatarFile, ReencodingIsBitExactWithDeformNet) {
  const BodyTemplate t = make_mannequin();
  HybridAvatar a = testing::test_avatar(t, 150, 3);
  a.part_shape.setConstant(0.25);
  a.template_path = "t.abt";
  DeformNetConfig dc;
  dc.hidden = {8, 8};
  dc.bands = 2;
  DeformNet net(dc, 3 * t.num_joints(), 5);
  Rng rng(2);
  for (Eigen::Index k = 0; k < net.params().size(); ++k) net.params()[k] = rng.normal() * 0.1;

  const auto first = encode_avatar(a, &net, kStamp);
  const AvatarFile f = decode_avatar(first);
  ASSERT_TRUE(f.deform.has_value());
  EXPECT_EQ(f.created, kStamp);
  EXPECT_EQ(encode_avatar(f.avatar, &*f.deform, f.created), first);
  EXPECT_EQ(f.avatar.kind, a.kind);
  EXPECT_EQ(f.avatar.anchor_vertices, a.anchor_vertices);
  EXPECT_EQ(f.avatar.template_path, "t.abt");
  for (int i = 0; i < a.size(); ++i) {
    if (a.kind[i] != GaussianKind::mesh_binding) continue;
    EXPECT_EQ(f.avatar.bindings[i].part, a.bindings[i].part);
    EXPECT_EQ(f.avatar.bindings[i].triangle, a.bindings[i].triangle);
  }
  EXPECT_NO_THROW(f.avatar.validate(t.num_joints()));
}

TEST(AvatarFile, WithoutDeformNet) {
  const BodyTemplate t = make_mannequin();
  const HybridAvatar a = testing::test_avatar(t, 40, 4);
  const auto bytes = encode_avatar(a, nullptr, kStamp);
  const AvatarFile f = decode_avatar(bytes);
  EXPECT_FALSE(f.deform.has_value());
  EXPECT_EQ(encode_avatar(f.avatar, nullptr, kStamp), bytes);
}

TEST(AvatarFile, ContentBytesIgnoreOnlyTheTimestamp) {
  const BodyTemplate t = make_mannequin();
  HybridAvatar a = testing::test_avatar(t, 40, 4);
  const auto x = encode_avatar(a, nullptr, "2024-01-02T03:04:05Z");
  const auto y = encode_avatar(a, nullptr, "2031-12-31T23:59:59Z");
  EXPECT_NE(x, y);
  EXPECT_EQ(avatar_content_bytes(x), avatar_content_bytes(y));
  a.gaussians.colors(0, 0) += 0.25;
  EXPECT_NE(avatar_content_bytes(encode_avatar(a, nullptr, "2024-01-02T03:04:05Z")), avatar_content_bytes(x));
}

TEST(AvatarFile, RejectsInconsistentContents) {
  const BodyTemplate t = make_mannequin();
  const HybridAvatar a = testing::test_avatar(t, 40, 4);
  EXPECT_THROW(encode_avatar(a, nullptr, "yesterday"), std::invalid_argument);
  auto bytes = encode_avatar(a, nullptr, kStamp);
  EXPECT_THROW(decode_avatar(std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 3)), FormatError);
  bytes[0] = 'X';
  EXPECT_THROW(decode_avatar(bytes), FormatError);
}

TEST(PoseJson, RoundTrip) {
  const BodyTemplate t = make_mannequin();
  Rng rng(9);
  Pose p = Pose::identity(t);
  for (auto& q : p.joint_rotations) q = to_quat(quat_exp(testing::random_vec(rng, -1, 1)));
  p.global_rotation = to_quat(quat_exp(Vec3(0.1, -0.4, 0.3)));
  p.global_translation = Vec3(0.5, -0.25, 1.0);
  p.shape = VecX::Constant(t.num_shape, 0.3);
  p.expression = VecX::Constant(t.num_expression, -0.2);
  const Pose q = pose_from_json(t, pose_to_json(t, p), Pose::identity(t));
  for (std::size_t j = 0; j < p.joint_rotations.size(); ++j) {
    EXPECT_NEAR(std::abs(p.joint_rotations[j].dot(q.joint_rotations[j])), 1.0, 1e-12);
  }
  EXPECT_NEAR(std::abs(p.global_rotation.dot(q.global_rotation)), 1.0, 1e-12);
  EXPECT_LT((p.global_translation - q.global_translation).norm(), 1e-15);
  EXPECT_EQ(q.shape, p.shape);
  EXPECT_EQ(q.expression, p.expression);
}

TEST(PoseJson, PartialUpdateKeepsOtherValues) {
  const BodyTemplate t = make_mannequin();
  Pose base = Pose::identity(t);
  base.global_translation = Vec3(1, 2, 3);
  const int elbow = t.joint_index("r_elbow");
  const Pose q = pose_from_json(t, json::parse(R"({"joints": {"r_elbow": [0, 0, 0.5]}})"), base);
  EXPECT_EQ(q.global_translation, base.global_translation);
  const Vec3 aa(0, 0, 0.5);
  EXPECT_NEAR(std::abs(q.joint_rotations[elbow].dot(to_quat(quat_exp(aa)))), 1.0, 1e-14);
  for (int j = 0; j < t.num_joints(); ++j) {
    if (j != elbow) EXPECT_EQ(q.joint_rotations[j].coeffs(), base.joint_rotations[j].coeffs());
  }
}

TEST(PoseJson, RejectsUnknownKeysAndBadShapes) {
  const BodyTemplate t = make_mannequin();
  const Pose base = Pose::identity(t);
  for (const char* bad : {R"({"jionts": {}})", R"({"joints": {"tail": [0,0,0]}})", R"({"global_translation": [1, 2]})",
                          R"({"global_rotation": "up"})", R"([1, 2, 3])", R"({"shape": [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11]})"}) {
    EXPECT_THROW(pose_from_json(t, json::parse(bad), base), FormatError) << bad;
  }
}

TEST(Motion, BuiltinMotionsAreValidAndRoundTrip) {
  const BodyTemplate t = make_mannequin();
  for (const char* name : {"wave", "walk"}) {
    const auto m = builtin_motion(t, name, 16, 8.0);
    ASSERT_EQ(m.size(), 16u);
    EXPECT_DOUBLE_EQ(m[1].time, 0.125);
    for (const auto& f : m) EXPECT_NO_THROW(f.pose.validate(t));
    const auto back = motion_from_json(t, motion_to_json(t, m));
    ASSERT_EQ(back.size(), m.size());
    for (std::size_t k = 0; k < m.size(); ++k) EXPECT_EQ(back[k].time, m[k].time);
  }
  EXPECT_THROW(builtin_motion(t, "dance"), std::invalid_argument);
}

TEST(Motion, RejectsNonIncreasingTimes) {
  const BodyTemplate t = make_mannequin();
  EXPECT_THROW(motion_from_json(t, json::parse(R"([{"time": 0, "pose": {}}, {"time": 0, "pose": {}}])")), FormatError);
  EXPECT_THROW(motion_from_json(t, json::parse("[]")), FormatError);
  EXPECT_NO_THROW(motion_from_json(t, json::parse(R"([{"time": 0, "pose": {}}, {"time": 0.5, "pose": {}}])")));
}

}  // namespace
}  // namespace skelsplat
