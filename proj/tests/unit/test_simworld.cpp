#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gazeneck/errors.hpp"
#include "gazeneck/simworld.hpp"

using namespace gazeneck;
using namespace gazeneck::sim;
using geometry::ViewStatus;

namespace {

std::size_t clutter_pixels(const SceneState& s, const Image& im) {
  std::size_t n = 0;
  std::vector<Color> seen;
  for (const auto& b : *s.clutter) {
    if (std::find(seen.begin(), seen.end(), b.color) != seen.end()) continue;
    seen.push_back(b.color);
    n += im.count(b.color);
  }
  return n;
}

SceneState center_scene() {
  WorldConfig cfg;
  return new_scene(cfg, Vec3(0.2, 0.4, 0.0), 1);
}

}  // namespace

TEST(Config, RoundTripAndHash) {
  WorldConfig cfg;
  cfg.width = 320;
  cfg.height = 180;
  cfg.plate_center = Vec3(-0.1, 0.3, 0.0);
  cfg.carry_gaze = "object";
  const WorldConfig back = WorldConfig::parse(cfg.serialize());
  EXPECT_EQ(back.serialize(), cfg.serialize());
  EXPECT_EQ(back.hash(), cfg.hash());
  EXPECT_NE(WorldConfig{}.hash(), cfg.hash());
}

TEST(Config, CommentsAndErrors) {
  const auto c = WorldConfig::parse("# comment\n width = 128 # trailing\n\nheight=72\n");
  EXPECT_EQ(c.width, 128);
  EXPECT_EQ(c.height, 72);
  EXPECT_THROW(WorldConfig::parse("nonsense = 1\n"), ConfigError);
  EXPECT_THROW(WorldConfig::parse("width = abc\n"), ConfigError);
  EXPECT_THROW(WorldConfig::parse("width = 255\n"), ConfigError);  // odd
  EXPECT_THROW(WorldConfig::parse("object_radius = -1\n"), ConfigError);
  EXPECT_THROW(WorldConfig::parse("area_width = 0.6\n"), ConfigError);
  EXPECT_THROW(WorldConfig::parse("just a line\n"), ConfigError);
  EXPECT_THROW(WorldConfig::load("/nonexistent/world.cfg"), IoError);
}

TEST(Grid, FortyFourCellsSixOutOfView) {
  WorldConfig cfg;
  const auto cells = grid_positions(cfg);
  ASSERT_EQ(cells.size(), 44u);
  int oov = 0, outside = 0;
  for (const auto& c : cells) {
    oov += out_of_view(c.label);
    outside += c.label == ViewStatus::Outside;
    EXPECT_GE(c.position.x(), 0.0);
    EXPECT_LE(c.position.x(), cfg.area_width);
    EXPECT_GE(c.position.y(), cfg.desk_near_y);
    EXPECT_LE(c.position.y(), cfg.desk_near_y + cfg.area_depth);
  }
  EXPECT_EQ(oov, 6);
  EXPECT_EQ(oov * 4, 24);
  EXPECT_EQ(static_cast<int>(cells.size()) * 4 - oov * 4, 152);
  EXPECT_GT(outside, 0);
}

TEST(Grid, CenterIsInViewAndLabelsMatchFrustum) {
  WorldConfig cfg;
  for (const auto& c : grid_lattice(cfg)) {
    EXPECT_EQ(c.label, stereo_view_status(cfg, NeckPose{0, cfg.initial_pitch}, c.position, cfg.object_radius));
  }
  EXPECT_EQ(stereo_view_status(cfg, NeckPose{0, cfg.initial_pitch}, Vec3(0.225, 0.4, cfg.object_radius),
                               cfg.object_radius),
            ViewStatus::InView);
}

TEST(Grid, InfeasibleLattice) {
  WorldConfig cfg;
  cfg.grid_cols = 5;
  EXPECT_THROW(grid_positions(cfg), ConfigInfeasible);
}

TEST(Scene, DeterministicAndOutOfArea) {
  WorldConfig cfg;
  const auto a = new_scene(cfg, grid_positions(cfg)[10], 4);
  const auto b = new_scene(cfg, grid_positions(cfg)[10], 4);
  EXPECT_EQ(a.object, b.object);
  EXPECT_EQ(a.arm, b.arm);
  EXPECT_EQ(render(a).left, render(b).left);
  EXPECT_EQ(a.neck, (NeckPose{0.0, cfg.initial_pitch}));
  EXPECT_EQ(a.arm.gripper, 1.0);
  EXPECT_THROW(new_scene(cfg, Vec3(-0.1, 0.4, 0), 1), OutOfArea);
  EXPECT_THROW(new_scene(cfg, Vec3(0.2, 0.05, 0), 1), OutOfArea);
}

TEST(Step, ZeroCommandOnlyAdvancesClock) {
  const auto s = center_scene();
  const auto n = step(s, hold_command(s));
  EXPECT_EQ(n.step, s.step + 1);
  EXPECT_EQ(n.arm, s.arm);
  EXPECT_EQ(n.neck, s.neck);
  EXPECT_EQ(n.object, s.object);
  EXPECT_EQ(n.attached, s.attached);
}

TEST(Step, ArmSpeedClamp) {
  const auto s = center_scene();
  Command c = hold_command(s);
  const Vec3 dir = Vec3(1, 2, 2).normalized();
  c.arm_target.position = s.arm.position + dir * 1.0;
  const auto n = step(s, c);
  EXPECT_NEAR((n.arm.position - s.arm.position).norm(), 0.04, 1e-12);
  EXPECT_LT(((n.arm.position - s.arm.position).normalized() - dir).norm(), 1e-12);
}

TEST(Step, OrientationAndGripperClamps) {
  const auto s = center_scene();
  Command c = hold_command(s);
  const Eigen::Matrix3d turn = Eigen::AngleAxisd(1.0, Eigen::Vector3d::UnitZ()).toRotationMatrix();
  c.arm_target.orientation = geometry::rot6_encode(turn * geometry::rot6_decode(s.arm.orientation));
  c.arm_target.gripper = 0.0;
  const auto n = step(s, c);
  const Eigen::Quaterniond q0(geometry::rot6_decode(s.arm.orientation)), q1(geometry::rot6_decode(n.arm.orientation));
  EXPECT_NEAR(q0.angularDistance(q1), 0.1, 1e-9);
  EXPECT_NEAR(n.arm.gripper, 0.8, 1e-12);
}

TEST(Step, NeckDeltaClampedAndLimitsHold) {
  auto s = center_scene();
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 500; ++i) {
    Command c = hold_command(s);
    c.neck_delta = NeckPose{u(rng), u(rng)};
    const auto n = step(s, c);
    EXPECT_LE(std::abs(n.neck.yaw - s.neck.yaw), 0.05 + 1e-12);
    EXPECT_LE(std::abs(n.neck.pitch - s.neck.pitch), 0.05 + 1e-12);
    EXPECT_TRUE(geometry::within_limits(n.neck));
    s = n;
  }
}

TEST(Step, GraspCarryAndConservation) {
  WorldConfig cfg;
  auto s = new_scene(cfg, Vec3(0.3, 0.4, 0), 2);
  s.arm.position = s.object + Vec3(0.0, 0.0, 0.04);  // 4 cm above the object center
  Command c = hold_command(s);
  c.arm_target.gripper = 0.0;
  for (int i = 0; i < 4; ++i) s = step(s, c);
  ASSERT_TRUE(s.attached);
  const Vec3 offset = s.object - s.arm.position;
  c.arm_target.position = s.arm.position + Vec3(-0.3, 0.1, 0.2);
  for (int i = 0; i < 12; ++i) {
    s = step(s, c);
    EXPECT_LT(((s.object - s.arm.position) - offset).norm(), 1e-12);
  }
  EXPECT_TRUE(s.ever_lifted);
}

TEST(Step, NoGraspWhenFar) {
  WorldConfig cfg;
  auto s = new_scene(cfg, Vec3(0.3, 0.4, 0), 2);
  s.arm.position = s.object + Vec3(0.0, 0.0, 0.06);
  Command c = hold_command(s);
  c.arm_target.gripper = 0.0;
  for (int i = 0; i < 5; ++i) s = step(s, c);
  EXPECT_FALSE(s.attached);
}

TEST(Step, ObjectNeverBelowSurface) {
  WorldConfig cfg;
  auto s = new_scene(cfg, Vec3(0.3, 0.4, 0), 2);
  s.arm.position = s.object;
  Command c = hold_command(s);
  c.arm_target.gripper = 0.0;
  for (int i = 0; i < 4; ++i) s = step(s, c);
  ASSERT_TRUE(s.attached);
  c.arm_target.position = Vec3(0.3, 0.4, -0.5);
  for (int i = 0; i < 10; ++i) {
    s = step(s, c);
    EXPECT_GE(s.object.z(), cfg.object_radius - 1e-12);
  }
  // Carry over the plate and push down: the object rests on the plate top.
  c.arm_target.position = Vec3(s.plate.x(), s.plate.y(), -0.5);
  for (int i = 0; i < 40; ++i) {
    s = step(s, c);
    EXPECT_GE(s.object.z(), rest_height(cfg, s.plate, s.object.x(), s.object.y()) - 1e-12);
  }
}

namespace {

SceneState lift_and_drop(const WorldConfig& cfg, const Vec3& drop_xy) {
  auto s = new_scene(cfg, Vec3(0.3, 0.4, 0), 2);
  s.arm.position = s.object;
  Command c = hold_command(s);
  c.arm_target.gripper = 0.0;
  for (int i = 0; i < 4; ++i) s = step(s, c);
  c.arm_target.position = Vec3(s.arm.position.x(), s.arm.position.y(), 0.25);
  for (int i = 0; i < 10; ++i) s = step(s, c);
  c.arm_target.position = Vec3(drop_xy.x(), drop_xy.y(), 0.25);
  for (int i = 0; i < 30; ++i) s = step(s, c);
  c.arm_target.gripper = 1.0;
  for (int i = 0; i < 5; ++i) s = step(s, c);
  return s;
}

}  // namespace

TEST(Success, NeverAttachedIsFailure) {
  auto s = center_scene();
  for (int i = 0; i < 20; ++i) s = step(s, hold_command(s));
  EXPECT_FALSE(task_success(s));
}

TEST(Success, DropOnPlateSucceedsOffPlateFails) {
  WorldConfig cfg;
  const auto on = lift_and_drop(cfg, cfg.plate_center);
  EXPECT_FALSE(on.attached);
  EXPECT_TRUE(on.ever_lifted);
  EXPECT_NEAR(on.object.z(), cfg.plate_height + cfg.object_radius, 1e-12);
  EXPECT_TRUE(task_success(on));
  const auto off = lift_and_drop(cfg, Vec3(0.0, 0.5, 0));
  EXPECT_TRUE(off.ever_lifted);
  EXPECT_NEAR(off.object.z(), cfg.object_radius, 1e-12);
  EXPECT_FALSE(task_success(off));
}

TEST(Render, OutsideObjectHasNoRedPixels) {
  WorldConfig cfg;
  int checked = 0;
  for (const auto& c : grid_positions(cfg)) {
    const auto f = render(new_scene(cfg, c, 1));
    const std::size_t red = f.left.count(palette::kObject) + f.right.count(palette::kObject);
    if (c.label == ViewStatus::Outside) {
      EXPECT_EQ(red, 0u) << "cell " << c.id;
      ++checked;
    } else {
      EXPECT_GT(red, 0u) << "cell " << c.id;
    }
  }
  EXPECT_GT(checked, 0);
}

TEST(Render, OutsideSpheresRenderNothingAnywhere) {
  // Property: random spheres and neck poses; whenever a sphere is labelled
  // Outside for an eye, that eye's image contains none of its pixels.
  WorldConfig cfg;
  cfg.clutter_count = 0;
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> ux(0.0, cfg.area_width), uy(cfg.desk_near_y, cfg.desk_near_y + 0.6);
  std::uniform_real_distribution<double> yaw(-1.2, 1.2), pitch(-1.2, 0.0);
  const auto k = intrinsics(cfg);
  int outside = 0;
  for (int i = 0; i < 150; ++i) {
    auto s = new_scene(cfg, Vec3(ux(rng), uy(rng), 0), 1);
    s.neck = NeckPose{yaw(rng), pitch(rng)};
    s.arm.position = Vec3(0, 0, 5);  // out of the way
    const auto eyes = eye_poses(cfg, s.neck);
    for (int e = 0; e < 2; ++e) {
      const auto status = geometry::sphere_view_status(k, eyes[e], s.object, cfg.object_radius);
      const auto im = render_eye(s, eyes[e]);
      if (status == ViewStatus::Outside) {
        ++outside;
        EXPECT_EQ(im.count(palette::kObject), 0u);
      }
    }
  }
  EXPECT_GT(outside, 10);
}

TEST(Render, ClutterOnlyAtLargeYaw) {
  auto s = center_scene();
  const auto f0 = render(s);
  EXPECT_EQ(clutter_pixels(s, f0.left) + clutter_pixels(s, f0.right), 0u);
  s.neck = NeckPose{1.2, s.neck.pitch};
  const auto f1 = render(s);
  EXPECT_GT(clutter_pixels(s, f1.left), 100u);
  s.neck = NeckPose{-1.2, s.neck.pitch};
  EXPECT_GT(clutter_pixels(s, render(s).right), 100u);
}

TEST(Render, StereoDisparityForNearObject) {
  const auto s = center_scene();
  const auto f = render(s);
  auto mean_x = [](const Image& im) {
    double sum = 0;
    int n = 0;
    for (int y = 0; y < im.height; ++y)
      for (int x = 0; x < im.width; ++x)
        if (im.at(x, y) == palette::kObject) {
          sum += x;
          ++n;
        }
    return sum / n;
  };
  EXPECT_NE(f.left, f.right);
  EXPECT_GT(mean_x(f.left) - mean_x(f.right), 2.0);
  EXPECT_EQ(f.left.rgb.size(), static_cast<std::size_t>(256 * 144 * 3));
}

TEST(Gaze, SigmaHinge) {
  WorldConfig cfg;
  const double center = cfg.gaze_sigma0 * cfg.width;
  EXPECT_DOUBLE_EQ(gaze_sigma(cfg, 0.0), center);
  EXPECT_DOUBLE_EQ(gaze_sigma(cfg, cfg.gaze_e0), center);
  EXPECT_NEAR(gaze_sigma(cfg, 1.0), 10.0 * center, 1e-12);
  double prev = 0;
  for (int i = 0; i <= 100; ++i) {
    const double s = gaze_sigma(cfg, i / 100.0);
    EXPECT_GE(s, prev);
    prev = s;
  }
  EXPECT_DOUBLE_EQ(eccentricity(cfg, 128, 72), 0.0);
  EXPECT_DOUBLE_EQ(eccentricity(cfg, 0, 0), 1.0);
}

TEST(Gaze, NoiseMatchesSigmaAtCenter) {
  auto s = center_scene();
  const auto k = intrinsics(s.cfg());
  // Target on the left-eye optical axis, far away so both eyes see it near the center.
  const auto eyes = eye_poses(s.cfg(), s.neck);
  const Vec3 target = eyes[0].position + eyes[0].orientation.col(2) * 50.0;
  std::mt19937_64 rng(4);
  double sum = 0, sq = 0;
  const int n = 4000;
  for (int i = 0; i < n; ++i) {
    const auto g = sample_gaze(s, target, rng);
    ASSERT_TRUE(g.valid);
    const double d = g.lx - k.cx;
    sum += d;
    sq += d * d;
  }
  const double sd = std::sqrt(sq / n - (sum / n) * (sum / n));
  EXPECT_NEAR(sd, gaze_sigma(s.cfg(), 0.0), 0.08);
}

TEST(Gaze, InvalidBehindOrOutsideAndClamped) {
  auto s = center_scene();
  std::mt19937_64 rng(5);
  const auto behind = sample_gaze(s, s.cfg().rig - Vec3(0, 1, 0), rng);
  EXPECT_FALSE(behind.valid);
  EXPECT_DOUBLE_EQ(behind.lx, 128.0);
  EXPECT_DOUBLE_EQ(behind.ly, 72.0);
  for (int i = 0; i < 500; ++i) {
    const auto g = sample_gaze(s, s.object, rng);
    ASSERT_TRUE(g.valid);
    for (double v : {g.lx, g.rx}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 255.0);
    }
    for (double v : {g.ly, g.ry}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 143.0);
    }
  }
}
