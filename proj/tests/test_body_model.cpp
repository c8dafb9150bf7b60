#include "skelsplat/body_model.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <stdexcept>

namespace skelsplat {
namespace {

using testing::chain_template;
using testing::random_rotation;
using testing::random_vec;

TEST(CanonicalMesh, ZeroShapeLeavesRestVertices) {
  const BodyTemplate t = make_mannequin();
  const Points v = canonical_mesh(t, VecX::Zero(2), VecX::Zero(2));
  EXPECT_EQ(v, t.vertices_rest);
}

TEST(CanonicalMesh, UnitCoefficientAddsOneColumn) {
  const BodyTemplate t = chain_template(3, 4);
  VecX beta = VecX::Zero(2);
  beta[0] = 1.0;
  const Points v = canonical_mesh(t, beta, VecX());
  for (int i = 0; i < t.num_vertices(); ++i) {
    for (int c = 0; c < 3; ++c) {
      EXPECT_DOUBLE_EQ(v(i, c), t.vertices_rest(i, c) + t.shape_basis(3 * i + c, 0));
    }
  }
}

TEST(CanonicalMesh, MatchesElementwiseSum) {
  const BodyTemplate t = chain_template(3, 5);
  VecX beta(2);
  beta << 0.5, -0.5;
  const Points v = canonical_mesh(t, beta, VecX());
  // oracle: plain per-element accumulation
  for (int i = 0; i < t.num_vertices(); ++i) {
    for (int c = 0; c < 3; ++c) {
      double expected = t.vertices_rest(i, c);
      expected += 0.5 * t.shape_basis(3 * i + c, 0);
      expected += -0.5 * t.shape_basis(3 * i + c, 1);
      EXPECT_NEAR(v(i, c), expected, 1e-15);
    }
  }
}

TEST(CanonicalMesh, RejectsOversizedShape) {
  const BodyTemplate t = chain_template(2, 3);
  EXPECT_THROW(canonical_mesh(t, VecX::Zero(3), VecX()), std::invalid_argument);
  EXPECT_THROW(canonical_mesh(t, VecX(), VecX::Zero(1)), std::invalid_argument);
}

TEST(JointPositions, OneHotRowPicksVertex) {
  BodyTemplate t = chain_template(2, 3);
  t.joint_regressor.row(1).setZero();
  t.joint_regressor(1, 4) = 1.0;
  const Points j = joint_positions(t, t.vertices_rest);
  EXPECT_EQ(Vec3(j.row(1).transpose()), Vec3(t.vertices_rest.row(4).transpose()));
}

TEST(JointPositions, TranslationEquivariant) {
  const BodyTemplate t = make_mannequin();
  const Vec3 d(0.3, -1.2, 2.0);
  Points moved = t.vertices_rest;
  moved.rowwise() += d.transpose();
  const Points j0 = joint_positions(t, t.vertices_rest);
  const Points j1 = joint_positions(t, moved);
  for (int j = 0; j < t.num_joints(); ++j) {
    EXPECT_LT((Vec3(j1.row(j).transpose()) - Vec3(j0.row(j).transpose()) - d).norm(), 1e-12);
  }
}

TEST(JointPositions, UniformRowGivesCentroid) {
  Rng rng(7);
  BodyTemplate t;
  t.vertices_rest.resize(4, 3);
  for (int v = 0; v < 4; ++v) t.vertices_rest.row(v) = random_vec(rng, -1, 1).transpose();
  t.joint_regressor = MatX::Constant(1, 4, 0.25);
  const Points j = joint_positions(t, t.vertices_rest);
  Vec3 mean = Vec3::Zero();
  for (int v = 0; v < 4; ++v) mean += t.vertices_rest.row(v).transpose();
  mean /= 4.0;
  EXPECT_LT((Vec3(j.row(0).transpose()) - mean).norm(), 1e-15);
}

TEST(Lbs, IdentityPoseReproducesCanonicalExactly) {
  const BodyTemplate t = make_mannequin();
  Pose pose = Pose::identity(t);
  pose.shape << 0.2, -0.4;
  pose.expression << 0.5, 0.1;
  const LbsResult r = lbs_transform(t, pose);
  EXPECT_EQ(r.vertices, canonical_mesh(t, pose));
}

TEST(Lbs, RootRotationSingleJoint) {
  const BodyTemplate t = chain_template(1, 10);
  Rng rng(3);
  Pose pose = Pose::identity(t);
  const Quat q = random_rotation(rng);
  pose.joint_rotations[0] = q;
  pose.global_translation = Vec3(0.5, -0.25, 1.0);
  const LbsResult r = lbs_transform(t, pose);
  const Vec3 root = joint_positions(t, t.vertices_rest).row(0).transpose();
  const Mat3 rot = q.toRotationMatrix();
  for (int v = 0; v < t.num_vertices(); ++v) {
    const Vec3 x = t.vertices_rest.row(v).transpose();
    const Vec3 expected = root + rot * (x - root) + pose.global_translation;
    EXPECT_LT((Vec3(r.vertices.row(v).transpose()) - expected).norm(), 1e-12);
  }
}

TEST(Lbs, ChainForwardKinematicsAndRadius) {
  const BodyTemplate t = chain_template(3, 4);
  Pose pose = Pose::identity(t);
  Rng rng(11);
  const Quat q0 = random_rotation(rng);
  const Quat q1 = random_rotation(rng);
  const Quat q2(Eigen::AngleAxisd(0.5 * kPi, Vec3::UnitX()));  // 90° about the bone axis
  pose.joint_rotations = {q0, q1, q2};
  const LbsResult r = lbs_transform(t, pose);
  const Points joints = joint_positions(t, t.vertices_rest);
  // hand-built forward kinematics oracle
  auto rot_about = [](const Quat& q, const Vec3& c) {
    Rigid local;
    local.rotation = q.toRotationMatrix();
    local.translation = c - local.rotation * c;
    return local;
  };
  const Rigid a0 = rot_about(q0, joints.row(0).transpose());
  const Rigid a1 = a0.compose(rot_about(q1, joints.row(1).transpose()));
  const Rigid a2 = a1.compose(rot_about(q2, joints.row(2).transpose()));
  const Vec3 posed_joint2 = a2.apply(joints.row(2).transpose());
  for (int k = 0; k < 4; ++k) {
    const int v = 2 * 4 + k;  // vertices of joint 2
    const Vec3 x = t.vertices_rest.row(v).transpose();
    const Vec3 y = r.vertices.row(v).transpose();
    EXPECT_LT((y - a2.apply(x)).norm(), 1e-12);
    const double before = (x - Vec3(joints.row(2).transpose())).norm();
    const double after = (y - posed_joint2).norm();
    EXPECT_NEAR(before, after, 1e-6);
  }
}

TEST(Lbs, RejectsNonUnitQuaternion) {
  const BodyTemplate t = chain_template(2, 2);
  Pose pose = Pose::identity(t);
  pose.joint_rotations[1] = Quat(1.1, 0, 0, 0);
  EXPECT_THROW(lbs_transform(t, pose), std::invalid_argument);
  Pose global = Pose::identity(t);
  global.global_rotation = Quat(0.5, 0.5, 0, 0);
  EXPECT_THROW(lbs_transform(t, global), std::invalid_argument);
}

class LbsProperty : public ::testing::TestWithParam<int> {};

TEST_P(LbsProperty, RigidEquivarianceLengthPreservationConvexity) {
  const BodyTemplate t = make_mannequin();
  Rng rng(1000 + GetParam());
  Pose pose = Pose::identity(t);
  for (auto& q : pose.joint_rotations) {
    q = Quat(Eigen::AngleAxisd(rng.uniform(-1.0, 1.0), random_vec(rng, -1, 1).normalized()));
  }
  pose.shape << rng.uniform(-0.3, 0.3), rng.uniform(-1, 1);
  const LbsResult local = lbs_transform(t, pose);

  Pose moved = pose;
  moved.global_rotation = random_rotation(rng);
  moved.global_translation = random_vec(rng, -2, 2);
  const LbsResult global = lbs_transform(t, moved);
  const Mat3 rg = moved.global_rotation.toRotationMatrix();
  for (int v = 0; v < t.num_vertices(); ++v) {
    const Vec3 expected = rg * local.vertices.row(v).transpose() + moved.global_translation;
    ASSERT_LT((Vec3(global.vertices.row(v).transpose()) - expected).norm(), 1e-6);
  }

  const Points canonical = canonical_mesh(t, pose);
  const Points joints = joint_positions(t, canonical);
  for (int v = 0; v < t.num_vertices(); ++v) {
    const Vec3 x = canonical.row(v).transpose();
    const Vec3 y = local.vertices.row(v).transpose();
    // convex combination of per-joint rigid images
    Vec3 blend = Vec3::Zero();
    int owner = -1;
    for (int j = 0; j < t.num_joints(); ++j) {
      const double w = t.skin_weights(v, j);
      blend += w * local.joint_transforms[j].apply(x);
      if (w == 1.0) owner = j;
    }
    ASSERT_LT((blend - y).norm(), 1e-9);
    if (owner >= 0) {
      const Vec3 j_rest = joints.row(owner).transpose();
      const Vec3 j_posed = local.joint_transforms[owner].apply(j_rest);
      ASSERT_NEAR((x - j_rest).norm(), (y - j_posed).norm(), 1e-6);
    }
  }
}

INSTANTIATE_TEST_SUITE_P(RandomPoses, LbsProperty, ::testing::Range(0, 10));

TEST(Mannequin, StructureAndDeterminism) {
  const BodyTemplate t = make_mannequin();
  EXPECT_EQ(t.num_joints(), 12);
  EXPECT_GT(t.num_vertices(), 1500);
  EXPECT_LT(t.num_vertices(), 2500);
  EXPECT_EQ(t.num_shape, 2);
  for (const char* part : {"hand_l", "hand_r", "face"}) {
    EXPECT_FALSE(t.part_labels.at(part).empty()) << part;
  }
  int facial = 0;
  for (const auto& kp : t.keypoints) facial += kp.facial;
  EXPECT_EQ(facial, 5);
  EXPECT_NO_THROW(t.validate());
  const BodyTemplate again = make_mannequin();
  EXPECT_EQ(again.vertices_rest, t.vertices_rest);
  const BodyTemplate other = make_mannequin(42);
  EXPECT_NE(other.vertices_rest, t.vertices_rest);
}

TEST(Mannequin, ValidateCatchesBrokenInvariants) {
  BodyTemplate t = make_mannequin();
  BodyTemplate bad_weights = t;
  bad_weights.skin_weights(0, 0) += 0.1;
  EXPECT_THROW(bad_weights.validate(), std::invalid_argument);
  BodyTemplate two_roots = t;
  two_roots.parents[3] = -1;
  EXPECT_THROW(two_roots.validate(), std::invalid_argument);
  BodyTemplate cycle = t;
  cycle.parents[2] = 3;
  EXPECT_THROW(cycle.validate(), std::invalid_argument);
  BodyTemplate overlap = t;
  overlap.part_labels["extra"] = {t.part_labels.at("face").front()};
  EXPECT_THROW(overlap.validate(), std::invalid_argument);
}

TEST(NamedPoses, TPoseRaisesArmsHorizontal) {
  const BodyTemplate t = make_mannequin();
  const LbsResult r = lbs_transform(t, named_pose(t, "t_pose"));
  const int shoulder = t.joint_index("l_shoulder");
  const int wrist = t.joint_index("l_wrist");
  const Vec3 s = r.joint_transforms[shoulder].apply(joint_positions(t, t.vertices_rest).row(shoulder).transpose());
  const Vec3 w = r.joint_transforms[wrist].apply(joint_positions(t, t.vertices_rest).row(wrist).transpose());
  EXPECT_NEAR(s.y(), w.y(), 1e-9);
  EXPECT_GT(w.x(), s.x());
  EXPECT_THROW(named_pose(t, "bogus"), std::invalid_argument);
}

}  // namespace
}  // namespace skelsplat
