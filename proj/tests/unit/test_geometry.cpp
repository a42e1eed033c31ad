#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gazeneck/errors.hpp"
#include "gazeneck/geometry.hpp"

using namespace gazeneck;
using namespace gazeneck::geometry;

namespace {

RotationMatrix random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  return q.toRotationMatrix();
}

double max_abs_diff(const Mat3& a, const Mat3& b) { return (a - b).cwiseAbs().maxCoeff(); }

CameraIntrinsics paper_k() { return make_intrinsics(1280, 720, deg2rad(108), deg2rad(57)); }

}  // namespace

TEST(Rot6, OrthonormalInputIsFixedPoint) {
  EXPECT_LT(max_abs_diff(rot6_decode(Rot6{Vec3(1, 0, 0), Vec3(0, 1, 0)}), Mat3::Identity()), 1e-15);
}

TEST(Rot6, ScaleIsRemoved) {
  EXPECT_LT(max_abs_diff(rot6_decode(Rot6{Vec3(2, 0, 0), Vec3(0, 3, 0)}), Mat3::Identity()), 1e-15);
}

TEST(Rot6, EncodeReadsFirstTwoColumns) {
  const Rot6 id = rot6_encode(Mat3::Identity());
  EXPECT_EQ(id.a1, Vec3(1, 0, 0));
  EXPECT_EQ(id.a2, Vec3(0, 1, 0));
  Mat3 yaw90;
  yaw90 << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  const Rot6 e = rot6_encode(yaw90);
  EXPECT_EQ(e.a1, Vec3(0, 1, 0));
  EXPECT_EQ(e.a2, Vec3(-1, 0, 0));
}

TEST(Rot6, RoundTripThousandRandomRotations) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 1000; ++i) {
    const RotationMatrix r = random_rotation(rng);
    EXPECT_LT(max_abs_diff(rot6_decode(rot6_encode(r)), r), 1e-9);
  }
}

TEST(Rot6, DecodeAlwaysOrthonormalAndScaleInvariant) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> s(0.01, 100.0);
  for (int i = 0; i < 1000; ++i) {
    const Vec3 a1(n(rng), n(rng), n(rng)), a2(n(rng), n(rng), n(rng));
    const RotationMatrix r = rot6_decode(Rot6{a1, a2});
    EXPECT_TRUE(is_rotation(r));
    const RotationMatrix rs = rot6_decode(Rot6{a1 * s(rng), a2 * s(rng)});
    EXPECT_LT(max_abs_diff(r, rs), 1e-9);
  }
}

TEST(Rot6, DegenerateInputsThrow) {
  EXPECT_THROW(rot6_decode(Rot6{Vec3::Zero(), Vec3(0, 1, 0)}), DegenerateInput);
  EXPECT_THROW(rot6_decode(Rot6{Vec3(1, 0, 0), Vec3(3, 0, 0)}), DegenerateInput);
  EXPECT_THROW(rot6_decode(Rot6{Vec3(1, 0, 0), Vec3(1e-13, 0, 0)}), DegenerateInput);
}

TEST(Intrinsics, PaperScale) {
  const auto k = paper_k();
  EXPECT_NEAR(k.fx, 1280.0 / (2.0 * std::tan(deg2rad(54))), 1e-9);
  EXPECT_NEAR(k.fy, 720.0 / (2.0 * std::tan(deg2rad(28.5))), 1e-9);
  // Quoted reference values are hand-rounded; they agree to a fraction of a pixel.
  EXPECT_NEAR(k.fx, 465.03, 0.2);
  EXPECT_NEAR(k.fy, 662.93, 0.2);
  EXPECT_DOUBLE_EQ(k.cx, 640.0);
  EXPECT_DOUBLE_EQ(k.cy, 360.0);
}

TEST(Intrinsics, UnitAndDeskScale) {
  const auto k = make_intrinsics(2, 2, deg2rad(90), deg2rad(90));
  EXPECT_NEAR(k.fx, 1.0, 1e-12);
  EXPECT_NEAR(k.fy, 1.0, 1e-12);
  const auto desk = make_intrinsics(256, 144, deg2rad(108), deg2rad(57));
  EXPECT_NEAR(desk.fx, 256.0 / (2.0 * std::tan(deg2rad(54))), 1e-9);
  EXPECT_NEAR(desk.fx, 93.01, 0.05);
}

TEST(Intrinsics, InvalidFov) {
  EXPECT_THROW(make_intrinsics(256, 144, 0.0, 1.0), InvalidFov);
  EXPECT_THROW(make_intrinsics(256, 144, kPi, 1.0), InvalidFov);
  EXPECT_THROW(make_intrinsics(0, 144, 1.0, 1.0), InvalidFov);
}

TEST(Projection, AxisBorderAndBehind) {
  const auto k = paper_k();
  const CameraPose id{};
  auto c = project_point(k, id, Vec3(0, 0, 1));
  ASSERT_TRUE(c);
  EXPECT_DOUBLE_EQ(c->x, k.cx);
  EXPECT_DOUBLE_EQ(c->y, k.cy);
  const double d = 2.5;
  auto r = project_point(k, id, Vec3(std::tan(k.hfov / 2) * d, 0, d));
  ASSERT_TRUE(r);
  EXPECT_NEAR(r->x, 1280.0, 1e-6);
  EXPECT_FALSE(project_point(k, id, Vec3(0, 0, -1)));
  EXPECT_FALSE(project_point(k, id, Vec3(0, 0, 0)));
}

TEST(Projection, FrustumBoundaryDirectionsLandOnBorders) {
  const auto k = make_intrinsics(256, 144, deg2rad(108), deg2rad(57));
  const double tx = std::tan(k.hfov / 2), ty = std::tan(k.vfov / 2);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0), dist(0.1, 10.0);
  for (int i = 0; i < 200; ++i) {
    const double d = dist(rng), v = u(rng);
    const CameraPose id{};
    const auto right = project_point(k, id, Vec3(tx * d, v * ty * d, d));
    const auto left = project_point(k, id, Vec3(-tx * d, v * ty * d, d));
    const auto bottom = project_point(k, id, Vec3(v * tx * d, ty * d, d));
    const auto top = project_point(k, id, Vec3(v * tx * d, -ty * d, d));
    EXPECT_NEAR(right->x, 256.0, 1e-6);
    EXPECT_NEAR(left->x, 0.0, 1e-6);
    EXPECT_NEAR(bottom->y, 144.0, 1e-6);
    EXPECT_NEAR(top->y, 0.0, 1e-6);
  }
}

TEST(ViewStatus, AxisOutsideAndStraddling) {
  const auto k = make_intrinsics(256, 144, deg2rad(108), deg2rad(57));
  const CameraPose id{};
  EXPECT_EQ(sphere_view_status(k, id, Vec3(0, 0, 1), 0.01), ViewStatus::InView);

  // Center at angle hfov/2 + angular radius + margin off the axis, in the horizontal plane.
  const double dist = 1.0, r = 0.05;
  const double ang = k.hfov / 2 + std::asin(r / dist) + 1e-3;
  EXPECT_EQ(sphere_view_status(k, id, Vec3(std::sin(ang), 0, std::cos(ang)) * dist, r), ViewStatus::Outside);
  const double ang_in = k.hfov / 2 + std::asin(r / dist) - 1e-3;
  EXPECT_EQ(sphere_view_status(k, id, Vec3(std::sin(ang_in), 0, std::cos(ang_in)) * dist, r), ViewStatus::Partial);

  // Center exactly on the right frustum plane.
  const double tx = std::tan(k.hfov / 2);
  EXPECT_EQ(sphere_view_status(k, id, Vec3(tx * 0.8, 0.0, 0.8), 0.02), ViewStatus::Partial);
  EXPECT_EQ(sphere_view_status(k, id, Vec3(0, 0, -1), 0.1), ViewStatus::Outside);
}

TEST(ViewStatus, DistanceMatchesBruteForceSampling) {
  // Oracle: nearest point among a dense sampling of the frustum surface.
  const auto k = make_intrinsics(256, 144, deg2rad(108), deg2rad(57));
  const double tx = std::tan(k.hfov / 2), ty = std::tan(k.vfov / 2);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int trial = 0; trial < 40; ++trial) {
    const Vec3 p(u(rng), u(rng), u(rng));
    double best = p.norm();
    const int n = 300;
    for (int a = 0; a <= n; ++a) {
      const double z = 4.0 * a / n;
      for (int b = 0; b <= n; ++b) {
        const double s = -1.0 + 2.0 * b / n;
        const Vec3 pts[4] = {Vec3(tx * z, s * ty * z, z), Vec3(-tx * z, s * ty * z, z), Vec3(s * tx * z, ty * z, z),
                             Vec3(s * tx * z, -ty * z, z)};
        for (const auto& q : pts) best = std::min(best, (p - q).norm());
      }
    }
    const bool inside = std::abs(p.x()) <= tx * p.z() && std::abs(p.y()) <= ty * p.z();
    const double d = distance_to_frustum(k, p);
    if (inside) {
      EXPECT_EQ(d, 0.0);
    } else {
      EXPECT_LE(d, best + 1e-9);
      EXPECT_NEAR(d, best, 0.03);
    }
  }
}

TEST(Neck, ZeroIsForward) {
  const auto pose = neck_to_camera_pose(NeckPose{0, 0}, Vec3(0, 0, 0.3));
  EXPECT_LT(max_abs_diff(pose.orientation, forward_base_orientation()), 1e-15);
  EXPECT_EQ(pose.position, Vec3(0, 0, 0.3));
  EXPECT_EQ(pose.orientation.col(2), Vec3(0, 1, 0));
}

TEST(Neck, YawLimitsAreMirrorImages) {
  const auto r = neck_to_camera_pose(NeckPose{1.2, 0}, Vec3::Zero()).orientation;
  const auto l = neck_to_camera_pose(NeckPose{-1.2, 0}, Vec3::Zero()).orientation;
  Mat3 mirror = Mat3::Identity();
  mirror(0, 0) = -1;  // reflect world x
  // Optical axes mirror about the forward (y) axis.
  EXPECT_LT((mirror * r.col(2) - l.col(2)).norm(), 1e-12);
  EXPECT_GT(r.col(2).x(), 0.0);  // positive yaw turns right
}

TEST(Neck, HandMultipliedElementaryRotations) {
  const double yaw = 0.3, pitch = -0.2;
  const double cy = std::cos(-yaw), sy = std::sin(-yaw), cp = std::cos(pitch), sp = std::sin(pitch);
  Mat3 rz, rx, b;
  rz << cy, -sy, 0, sy, cy, 0, 0, 0, 1;
  rx << 1, 0, 0, 0, cp, -sp, 0, sp, cp;
  b << 1, 0, 0, 0, 0, 1, 0, -1, 0;
  const auto pose = neck_to_camera_pose(NeckPose{yaw, pitch}, Vec3::Zero());
  EXPECT_LT(max_abs_diff(pose.orientation, rz * rx * b), 1e-15);
  EXPECT_TRUE(is_rotation(pose.orientation));
  EXPECT_LT(pose.orientation.col(2).z(), 0.0);  // negative pitch looks down
}

TEST(Neck, LimitsAndClamp) {
  EXPECT_THROW(neck_to_camera_pose(NeckPose{1.3, 0}, Vec3::Zero()), LimitExceeded);
  EXPECT_THROW(neck_to_camera_pose(NeckPose{0, 0.1}, Vec3::Zero()), LimitExceeded);
  EXPECT_THROW(neck_to_camera_pose(NeckPose{0, -1.21}, Vec3::Zero()), LimitExceeded);
  const auto c = clamp_to_limits(NeckPose{-5, 3});
  EXPECT_EQ(c, (NeckPose{-1.2, 0.0}));
  EXPECT_TRUE(within_limits(c));
}

TEST(EyePose, OffsetAlongCameraX) {
  const auto rig = neck_to_camera_pose(NeckPose{0.5, -0.3}, Vec3(0, 0, 0.3));
  const auto l = eye_pose(rig, -0.0315), r = eye_pose(rig, 0.0315);
  EXPECT_NEAR((r.position - l.position).norm(), 0.063, 1e-12);
  EXPECT_LT(((r.position - l.position).normalized() - rig.orientation.col(0)).norm(), 1e-12);
}

TEST(VirtualPlaneTest, PaperSizing) {
  const auto k = paper_k();
  const auto p = decoupled_plane(Mat3::Identity(), Vec3::Zero(), 1.0, k);
  EXPECT_NEAR(p.half_width, 1.3764, 1e-4);
  EXPECT_NEAR(p.half_height, 0.5430, 1e-4);
}

TEST(VirtualPlaneTest, LinearInDistance) {
  const auto k = paper_k();
  const auto p1 = decoupled_plane(Mat3::Identity(), Vec3::Zero(), 1.0, k);
  const auto p2 = decoupled_plane(Mat3::Identity(), Vec3::Zero(), 2.0, k);
  EXPECT_EQ(p2.center, Vec3(0, 0, 2));
  EXPECT_NEAR(p2.half_width, 2 * p1.half_width, 1e-12);
  EXPECT_NEAR(p2.half_height, 2 * p1.half_height, 1e-12);
  EXPECT_LT((p2.eye() - Vec3::Zero()).norm(), 1e-12);
  EXPECT_THROW(decoupled_plane(Mat3::Identity(), Vec3::Zero(), 0.0, k), ConfigError);
}

TEST(VirtualPlaneTest, CoupledCaseFillsDisplay) {
  const auto k = paper_k();
  const auto cam = neck_to_camera_pose(NeckPose{0.4, -0.5}, Vec3(0, 0, 0.3));
  const auto plane = decoupled_plane(cam.orientation, cam.position, 1.0, k);
  const auto corners = plane_corners_in_head_view(plane, cam.orientation, k);
  ASSERT_TRUE(corners);
  const double ex[4][2] = {{0, 0}, {1280, 0}, {1280, 720}, {0, 720}};
  for (int i = 0; i < 4; ++i) {
    EXPECT_NEAR((*corners)[i].x, ex[i][0], 1e-9);
    EXPECT_NEAR((*corners)[i].y, ex[i][1], 1e-9);
  }
}

TEST(VirtualPlaneTest, HeadYawRightShiftsCornersLeft) {
  const auto k = paper_k();
  const auto cam = neck_to_camera_pose(NeckPose{0, 0}, Vec3::Zero());
  const auto plane = decoupled_plane(cam.orientation, cam.position, 1.0, k);
  const auto head = head_orientation(0.2, 0.0);
  const auto corners = plane_corners_in_head_view(plane, head, k);
  ASSERT_TRUE(corners);
  // Hand projection: yawing the view by +a rotates points by -a about the up axis.
  const double a = 0.2;
  const std::array<Vec3, 4> cam_pts = {Vec3(-plane.half_width, -plane.half_height, 1),
                                       Vec3(plane.half_width, -plane.half_height, 1),
                                       Vec3(plane.half_width, plane.half_height, 1),
                                       Vec3(-plane.half_width, plane.half_height, 1)};
  const double base_x[4] = {0, 1280, 1280, 0};
  for (int i = 0; i < 4; ++i) {
    const Vec3& p = cam_pts[i];
    const double x = std::cos(a) * p.x() - std::sin(a) * p.z();
    const double z = std::sin(a) * p.x() + std::cos(a) * p.z();
    EXPECT_NEAR((*corners)[i].x, k.cx + k.fx * x / z, 1e-9);
    EXPECT_NEAR((*corners)[i].y, k.cy + k.fy * p.y() / z, 1e-9);
    EXPECT_LT((*corners)[i].x, base_x[i]);
  }
}

TEST(VirtualPlaneTest, HeadTurnedAroundIsPartiallyBehind) {
  const auto k = paper_k();
  const auto cam = neck_to_camera_pose(NeckPose{0, 0}, Vec3::Zero());
  const auto plane = decoupled_plane(cam.orientation, cam.position, 1.0, k);
  EXPECT_FALSE(plane_corners_in_head_view(plane, head_orientation(kPi, 0.0), k));
}
