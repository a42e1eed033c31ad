#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "gazeneck/dataset.hpp"
#include "gazeneck/errors.hpp"
#include "gazeneck/oracle.hpp"

using namespace gazeneck;
using namespace gazeneck::oracle;
using namespace gazeneck::sim;
namespace fs = std::filesystem;

namespace {

WorldConfig small_config() {
  WorldConfig cfg;
  cfg.width = 64;
  cfg.height = 36;
  cfg.episode_steps = 80;
  return cfg;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("gazeneck_oracle_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST(OracleCommand, CenteredObjectNeedsNoNeckMotion) {
  WorldConfig cfg;
  auto s = new_scene(cfg, Vec3(0.2, 0.5, 0), 1);
  s.neck = look_at(cfg, s.object);
  const auto c = oracle_command(s, Mode::WithNeck);
  EXPECT_NEAR(c.neck_delta.yaw, 0.0, 1e-12);
  EXPECT_NEAR(c.neck_delta.pitch, 0.0, 1e-12);
}

TEST(OracleCommand, ObjectThirtyDegreesRightSaturates) {
  WorldConfig cfg;
  // Place the object 30 degrees right of the forward axis, at the current pitch.
  const double az = geometry::deg2rad(30.0);
  const double d = 0.45;
  const Vec3 obj(cfg.rig.x() + d * std::sin(az), cfg.rig.y() + d * std::cos(az), cfg.object_radius);
  auto s = new_scene(cfg, obj, 1);
  s.neck = NeckPose{0.0, look_at(cfg, s.object).pitch};
  const auto c = oracle_command(s, Mode::WithNeck);
  const double expected = std::clamp(0.5 * az, -0.05, 0.05);
  EXPECT_DOUBLE_EQ(c.neck_delta.yaw, expected);
  EXPECT_DOUBLE_EQ(c.neck_delta.yaw, 0.05);
  EXPECT_NEAR(c.neck_delta.pitch, 0.0, 1e-12);
}

TEST(OracleCommand, SmallErrorIsProportional) {
  WorldConfig cfg;
  auto s = new_scene(cfg, Vec3(0.2, 0.5, 0), 1);
  const auto want = look_at(cfg, s.object);
  s.neck = NeckPose{want.yaw - 0.04, want.pitch + 0.02};
  const auto c = oracle_command(s, Mode::WithNeck);
  EXPECT_NEAR(c.neck_delta.yaw, 0.02, 1e-12);
  EXPECT_NEAR(c.neck_delta.pitch, -0.01, 1e-12);
}

TEST(OracleCommand, NoNeckNeverMovesNeck) {
  WorldConfig cfg;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> ux(0.0, 0.45), uy(0.1, 0.7), yaw(-1.2, 1.2), pitch(-1.2, 0.0);
  for (int i = 0; i < 200; ++i) {
    auto s = new_scene(cfg, Vec3(ux(rng), uy(rng), 0), 1);
    s.neck = NeckPose{yaw(rng), pitch(rng)};
    for (int t = 0; t < 30; ++t) {
      const auto c = oracle_command(s, Mode::NoNeck);
      EXPECT_EQ(c.neck_delta.yaw, 0.0);
      EXPECT_EQ(c.neck_delta.pitch, 0.0);
      s = step(s, c);
    }
  }
}

TEST(OracleEpisode, SolvesWholeGridBothModes) {
  WorldConfig cfg;
  for (Mode m : {Mode::WithNeck, Mode::NoNeck}) {
    int ok = 0;
    for (const auto& c : grid_positions(cfg)) ok += run_oracle_episode(new_scene(cfg, c, 1), m, 1, nullptr).success;
    EXPECT_GE(ok, 42) << to_string(m);  // >= 95% of 44
  }
}

TEST(OracleEpisode, EccentricityShrinksWhileSteering) {
  WorldConfig cfg;
  const auto k = intrinsics(cfg);
  for (const auto& cell : grid_positions(cfg)) {
    auto s = new_scene(cfg, cell, 1);
    double prev = std::numeric_limits<double>::infinity();
    for (int t = 0; t < cfg.episode_steps; ++t) {
      const Phase ph = phase_of(s);
      if (ph != Phase::Approach && ph != Phase::Descend && ph != Phase::Close) break;
      const auto pix = geometry::project_point(k, rig_pose(s), s.object);
      ASSERT_TRUE(pix) << "cell " << cell.id;
      const double e = eccentricity(cfg, pix->x, pix->y);
      if (e < 0.15) break;
      EXPECT_LE(e, prev + 1e-9) << "cell " << cell.id << " step " << t;
      prev = e;
      s = step(s, oracle_command(s, Mode::WithNeck));
    }
  }
}

TEST(OracleEpisode, PhasesProgressInOrder) {
  WorldConfig cfg;
  auto s = new_scene(cfg, grid_positions(cfg)[20], 1);
  std::vector<Phase> seen;
  for (int t = 0; t < cfg.episode_steps; ++t) {
    const Phase p = phase_of(s);
    if (seen.empty() || seen.back() != p) seen.push_back(p);
    s = step(s, oracle_command(s, Mode::WithNeck));
  }
  const std::vector<Phase> expected = {Phase::Approach, Phase::Descend, Phase::Close, Phase::Lift,
                                       Phase::Carry,    Phase::Release, Phase::Return};
  EXPECT_EQ(seen, expected);
  EXPECT_TRUE(task_success(s));
}

TEST(GenerateDemos, NoNeckExcludesOutsidePlacements) {
  const WorldConfig cfg = small_config();
  const auto dir = temp_dir("noneck");
  const auto summary = generate_demos(cfg, 30, Mode::NoNeck, 5, dir.string());
  EXPECT_EQ(summary.episodes, 30);
  EXPECT_EQ(summary.outside_placements, 0);
  const auto dirs = dataset::list_episodes(dir.string());
  ASSERT_EQ(dirs.size(), 30u);
  for (const auto& d : dirs) {
    const auto meta = dataset::read_meta(d);
    EXPECT_TRUE(meta.success);
    EXPECT_FALSE(meta.with_neck);
    const Vec3 p(meta.object_position[0], meta.object_position[1], meta.object_position[2]);
    EXPECT_NE(stereo_view_status(cfg, NeckPose{0, cfg.initial_pitch}, p, cfg.object_radius),
              geometry::ViewStatus::Outside);
  }
  fs::remove_all(dir);
}

TEST(GenerateDemos, WithNeckIncludesOutsidePlacements) {
  const WorldConfig cfg = small_config();
  const auto dir = temp_dir("withneck");
  const auto summary = generate_demos(cfg, 60, Mode::WithNeck, 5, dir.string());
  EXPECT_GT(summary.outside_placements, 0);
  int outside = 0;
  for (const auto& d : dataset::list_episodes(dir.string())) {
    const auto meta = dataset::read_meta(d);
    EXPECT_TRUE(meta.success);
    const Vec3 p(meta.object_position[0], meta.object_position[1], meta.object_position[2]);
    outside += stereo_view_status(cfg, NeckPose{0, cfg.initial_pitch}, p, cfg.object_radius) ==
               geometry::ViewStatus::Outside;
  }
  EXPECT_EQ(outside, summary.outside_placements);
  fs::remove_all(dir);
}

TEST(GenerateDemos, RecordedGazeIsConsistentWithPhaseTargets) {
  const WorldConfig cfg = small_config();
  const auto dir = temp_dir("gaze");
  generate_demos(cfg, 3, Mode::WithNeck, 8, dir.string());
  const auto k = intrinsics(cfg);
  for (const auto& d : dataset::list_episodes(dir.string())) {
    const auto ep = dataset::read_episode(d);
    // Replay the recorded commands to recover each step's true state.
    auto s = new_scene(cfg, Vec3(ep.meta.object_position[0], ep.meta.object_position[1], 0), ep.meta.seed);
    for (const auto& r : ep.records) {
      ASSERT_EQ(s.arm.flat(), r.arm);
      const Vec3 target = gaze_target(s, phase_of(s));
      const auto eyes = eye_poses(cfg, s.neck);
      bool inside = true;
      for (const auto& e : eyes) {
        const auto px = geometry::project_point(k, e, target);
        inside = inside && px && px->x >= 0 && px->x <= cfg.width && px->y >= 0 && px->y <= cfg.height;
      }
      EXPECT_EQ(r.gaze_valid, inside);
      if (r.gaze_valid) {
        const auto px = geometry::project_point(k, eyes[0], target);
        const double e = eccentricity(cfg, px->x, px->y);
        EXPECT_LT(std::abs(r.gaze[0] - px->x), 6 * gaze_sigma(cfg, e) + 1.0);
      }
      Command c;
      c.neck_delta = NeckPose{r.cmd_neck[0], r.cmd_neck[1]};
      c.arm_target = ArmState::from_flat(r.cmd_arm.data());
      s = step(s, c);
    }
    EXPECT_TRUE(task_success(s));
  }
  fs::remove_all(dir);
}

TEST(GenerateDemos, ByteIdenticalAcrossRuns) {
  const WorldConfig cfg = small_config();
  const auto a = temp_dir("det_a"), b = temp_dir("det_b");
  generate_demos(cfg, 3, Mode::WithNeck, 42, a.string());
  generate_demos(cfg, 3, Mode::WithNeck, 42, b.string());
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), a);
    EXPECT_EQ(slurp(entry.path()), slurp(b / rel)) << rel;
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(GenerateDemos, RejectsZeroEpisodesAndParsesModes) {
  EXPECT_THROW(generate_demos(small_config(), 0, Mode::WithNeck, 1, "/tmp/unused"), ConfigError);
  EXPECT_EQ(parse_mode("with-neck"), Mode::WithNeck);
  EXPECT_EQ(parse_mode("no-neck"), Mode::NoNeck);
  EXPECT_THROW(parse_mode("sideways"), ConfigError);
}

TEST(GenerateDemos, UnsolvableWorldRaisesOracleFailure) {
  WorldConfig cfg = small_config();
  cfg.episode_steps = 5;  // far too short to finish
  const auto dir = temp_dir("fail");
  EXPECT_THROW(generate_demos(cfg, 1, Mode::WithNeck, 1, dir.string()), OracleFailure);
  fs::remove_all(dir);
}
