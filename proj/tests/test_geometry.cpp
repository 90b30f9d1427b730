#include <gtest/gtest.h>

#include <random>

#include "sononav/geometry.hpp"

using namespace sononav;

namespace {

Pose random_pose(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0, 1);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  return Pose(Eigen::Vector3d(10 * n(rng), 10 * n(rng), 10 * n(rng)), q.normalized());
}

}  // namespace

TEST(ActionPrimitive, IndexTableIsFixed) {
  const int expect[10][3] = {{0, 0, 1}, {0, 0, -1}, {0, 1, 1}, {0, 1, -1}, {1, 0, 1},
                             {1, 0, -1}, {1, 1, 1}, {1, 1, -1}, {1, 2, 1}, {1, 2, -1}};
  for (int i = 0; i < 10; ++i) {
    auto a = ActionPrimitive::from_index(i);
    EXPECT_EQ(a.index, i);
    EXPECT_EQ(static_cast<int>(a.kind), expect[i][0]);
    EXPECT_EQ(a.axis, expect[i][1]);
    EXPECT_EQ(a.sign, expect[i][2]);
  }
  EXPECT_THROW(ActionPrimitive::from_index(10), InvalidArgument);
  EXPECT_THROW(ActionPrimitive::from_index(-1), InvalidArgument);
}

TEST(ComposePose, IdentityTranslation) {
  StepSchedule s;
  Pose p = compose_pose(Pose{}, ActionPrimitive::from_index(0), s);
  EXPECT_NEAR((p.position - Eigen::Vector3d(5, 0, 0)).norm(), 0, 1e-12);
  EXPECT_NEAR(p.orientation.angularDistance(Eigen::Quaterniond::Identity()), 0, 1e-12);
}

TEST(ComposePose, RotationFixesOrigin) {
  std::mt19937_64 rng(3);
  StepSchedule s;
  for (int i = 0; i < 20; ++i) {
    Pose p = random_pose(rng);
    Pose q = compose_pose(p, ActionPrimitive::from_index(8), s);
    EXPECT_NEAR((q.position - p.position).norm(), 0, 1e-12);
    EXPECT_NEAR(pose_distance(p, q).theta_deg, 5.0, 1e-6);
  }
}

TEST(ComposePose, TranslationFollowsProbeAxis) {
  StepSchedule s;
  Pose p(Eigen::Vector3d::Zero(), Eigen::Quaterniond(Eigen::AngleAxisd(std::numbers::pi / 2, Eigen::Vector3d::UnitZ())));
  Pose q = compose_pose(p, ActionPrimitive::from_index(0), s);
  Eigen::Vector3d expected = p.rotation() * Eigen::Vector3d(5, 0, 0);
  EXPECT_NEAR((q.position - expected).norm(), 0, 1e-12);
  EXPECT_NEAR((q.position - Eigen::Vector3d(0, 5, 0)).norm(), 0, 1e-12);
}

TEST(ComposePose, RejectsExhaustedSchedule) {
  StepSchedule s;
  Pose p;
  for (int k = 0; k < 5; ++k)
    for (int i = 0; i < 3; ++i) s.update(p);
  ASSERT_TRUE(s.exhausted());
  EXPECT_THROW(compose_pose(p, ActionPrimitive::from_index(0), s), InvalidArgument);
  EXPECT_THROW(compose_pose(p, ActionPrimitive::from_index(4), s), InvalidArgument);
}

TEST(ComposePose, NormPreservedOverManyCompositions) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> act(0, 9);
  StepSchedule s;
  Pose p = random_pose(rng);
  for (int i = 0; i < 10000; ++i) {
    p = compose_pose(p, ActionPrimitive::from_index(act(rng)), s);
    ASSERT_NEAR(p.orientation.norm(), 1.0, 1e-9);
  }
}

TEST(Pose, MatrixRoundTrip) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 50; ++i) {
    Pose p = random_pose(rng);
    Eigen::Matrix4d m = p.matrix();
    Eigen::Matrix3d r = m.topLeftCorner<3, 3>();
    EXPECT_LE((r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff(), 1e-9);
    Pose back = Pose::from_matrix(m);
    EXPECT_NEAR((back.position - p.position).norm(), 0, 1e-12);
    EXPECT_NEAR(pose_distance(back, p).theta_deg, 0, 1e-5);
  }
}

TEST(Pose, JsonRoundTripAndValidation) {
  std::mt19937_64 rng(8);
  Pose p = random_pose(rng);
  nlohmann::json j = p;
  Pose q = j.get<Pose>();
  EXPECT_EQ(q.position, p.position);
  EXPECT_NEAR(std::abs(q.orientation.dot(p.orientation)), 1.0, 1e-15);
  EXPECT_THROW((nlohmann::json{{"p", {1, 2}}, {"q", {1, 0, 0, 0}}}.get<Pose>()), InvalidArgument);
  EXPECT_THROW((nlohmann::json{{"p", {1, 2, 3}}, {"q", {0, 0, 0, 0}}}.get<Pose>()), InvalidArgument);
}

TEST(TiltAngle, Examples) {
  EXPECT_NEAR(tilt_angle(Pose(Eigen::Vector3d::Zero(), downward_orientation(0))), 0.0, 1e-9);
  EXPECT_NEAR(tilt_angle(Pose{}), 180.0, 1e-9);
  Eigen::Quaterniond q = downward_orientation(0) * Eigen::Quaterniond(Eigen::AngleAxisd(deg2rad(30), Eigen::Vector3d::UnitX()));
  Pose p(Eigen::Vector3d::Zero(), q);
  EXPECT_NEAR(p.rotation()(2, 2), -std::cos(deg2rad(30)), 1e-12);
  EXPECT_NEAR(tilt_angle(p), 30.0, 1e-9);
}

TEST(TiltAngle, InvariantUnderYaw) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> yaw(0, 360);
  for (int i = 0; i < 100; ++i) {
    Pose p = random_pose(rng);
    Pose q = p;
    q.orientation = Eigen::Quaterniond(Eigen::AngleAxisd(deg2rad(yaw(rng)), Eigen::Vector3d::UnitZ())) * p.orientation;
    EXPECT_NEAR(tilt_angle(p), tilt_angle(q), 1e-7);
  }
}

TEST(PoseDistance, Examples) {
  Pose a, b;
  EXPECT_EQ(pose_distance(a, a).d_mm, 0);
  EXPECT_EQ(pose_distance(a, a).theta_deg, 0);
  b.position = Eigen::Vector3d(3, 4, 0);
  EXPECT_DOUBLE_EQ(pose_distance(a, b).d_mm, 5.0);
  EXPECT_DOUBLE_EQ(pose_distance(a, b).theta_deg, 0.0);
  Pose c(Eigen::Vector3d::Zero(), Eigen::Quaterniond(Eigen::AngleAxisd(std::numbers::pi / 2, Eigen::Vector3d::UnitZ())));
  // Inner product with identity is cos(45 deg).
  EXPECT_NEAR(c.orientation.w(), std::cos(std::numbers::pi / 4), 1e-15);
  EXPECT_NEAR(pose_distance(a, c).theta_deg, 90.0, 1e-9);
}

TEST(PoseDistance, SymmetryTriangleAndSignInvariance) {
  std::mt19937_64 rng(17);
  for (int i = 0; i < 200; ++i) {
    Pose a = random_pose(rng), b = random_pose(rng), c = random_pose(rng);
    auto ab = pose_distance(a, b), ba = pose_distance(b, a);
    EXPECT_DOUBLE_EQ(ab.d_mm, ba.d_mm);
    EXPECT_NEAR(ab.theta_deg, ba.theta_deg, 1e-9);
    EXPECT_LE(ab.d_mm, pose_distance(a, c).d_mm + pose_distance(c, b).d_mm + 1e-9);
    Pose neg = a;
    neg.orientation.coeffs() = -a.orientation.coeffs();
    EXPECT_NEAR(pose_distance(neg, b).theta_deg, ab.theta_deg, 1e-9);
    EXPECT_NEAR(pose_distance(b, neg).theta_deg, ab.theta_deg, 1e-9);
  }
}

TEST(StepSchedule, IdenticalPosesDecrement) {
  StepSchedule s;
  Pose p;
  int reductions = 0;
  for (int i = 0; i < 30; ++i) reductions += s.update(p);
  // Three identical poses already form three close pairs, so every third update
  // decrements; the buffer then restarts. Updates keep reporting once exhausted.
  EXPECT_EQ(reductions, 10);
  EXPECT_EQ(s.d_step_mm(), s.theta_step_deg());
  EXPECT_EQ(s.d_step_mm(), 0);
  StepSchedule t;
  t.update(p);
  t.update(p);
  EXPECT_EQ(t.d_step_mm(), 5);
  t.update(p);
  EXPECT_EQ(t.d_step_mm(), 4);
  EXPECT_EQ(t.buffered(), 0u);
}

TEST(StepSchedule, LineOfPosesUnchanged) {
  // Brute-force pair scan over the 7-vectors (positions in mm).
  std::vector<Pose> poses;
  for (int i = 0; i < 30; ++i) poses.emplace_back(Eigen::Vector3d(5.0 * i, 0, 0), Eigen::Quaterniond::Identity());
  int close = 0;
  for (std::size_t i = 0; i < poses.size(); ++i)
    for (std::size_t j = i + 1; j < poses.size(); ++j)
      if ((poses[i].position - poses[j].position).norm() < 0.01) ++close;
  StepSchedule s;
  bool reduced = false;
  for (const auto& p : poses) reduced |= s.update(p);
  EXPECT_EQ(close, 0);
  EXPECT_FALSE(reduced);
  EXPECT_EQ(s.d_step_mm(), 5);
  EXPECT_EQ(s.buffered(), 30u);
}

TEST(StepSchedule, KeyUsesMillimetres) {
  // Only near-exact revisits count as close.
  Pose a, b, c;
  b.position.x() = 0.009;
  c.position.x() = 0.011;
  EXPECT_LT(StepSchedule::distance(StepSchedule::key(a), StepSchedule::key(b)), 0.01);
  EXPECT_GT(StepSchedule::distance(StepSchedule::key(a), StepSchedule::key(c)), 0.01);
}

TEST(StepSchedule, BufferCapacityAndMonotone) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-20, 20);
  StepSchedule s;
  int prev = s.d_step_mm();
  for (int i = 0; i < 2000; ++i) {
    Pose p(Eigen::Vector3d(std::round(u(rng)), 0, 0), Eigen::Quaterniond::Identity());
    s.update(p);
    ASSERT_LE(s.buffered(), StepSchedule::kBufferCapacity);
    ASSERT_LE(s.d_step_mm(), prev);
    ASSERT_GE(s.d_step_mm(), 0);
    ASSERT_EQ(s.d_step_mm(), s.theta_step_deg());
    prev = s.d_step_mm();
  }
}

TEST(StepSchedule, TwoEntriesNeverReduce) {
  StepSchedule s;
  Pose p;
  EXPECT_FALSE(s.update(p));
  EXPECT_FALSE(s.update(p));
  EXPECT_EQ(s.d_step_mm(), 5);
}
