#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gazeneck/geometry.hpp"

// Kinematic tabletop world: scene state, stepping, grasp logic, stereo
// rendering and the simulated eye tracker.
namespace gazeneck::sim {

using geometry::NeckPose;
using geometry::Rot6;
using geometry::Vec3;

struct WorldConfig {
  // Desk spans x in [-desk_width/2, desk_width/2], y in [desk_near_y, desk_near_y + desk_depth].
  double desk_width = 0.90;
  double desk_depth = 0.60;
  double desk_near_y = 0.10;
  // Placement area: x in [0, area_width], y in [desk_near_y, desk_near_y + area_depth].
  double area_width = 0.45;
  double area_depth = 0.60;
  double object_radius = 0.035;
  Vec3 plate_center = Vec3(-0.20, 0.35, 0.0);
  double plate_radius = 0.075;
  double plate_height = 0.01;
  double floor_z = -0.72;

  int width = 256;
  int height = 144;
  double hfov = 1.884955592153876;   // 108 deg
  double vfov = 0.9948376736367679;  // 57 deg
  double baseline = 0.063;
  Vec3 rig = Vec3(0.0, 0.0, 0.27);
  double initial_pitch = -0.39;

  int episode_steps = 200;
  double control_rate = 10.0;
  double grasp_radius = 0.05;
  double lift_threshold = 0.10;
  double neck_speed = 0.05;  // rad per step
  double arm_speed = 0.04;   // m per step
  double rot_speed = 0.1;    // rad per step
  double grip_speed = 0.2;   // per step
  Vec3 arm_home = Vec3(0.12, 0.14, 0.15);
  double gripper_marker_radius = 0.018;
  double gripper_marker_height = 0.06;

  int grid_cols = 8;
  int grid_rows = 6;
  double home_exclusion_x = 0.10;
  double home_exclusion_y = 0.06;

  std::uint64_t clutter_seed = 7;
  int clutter_count = 12;

  double gaze_sigma0 = 0.004;
  double gaze_kappa = 9.0;
  double gaze_e0 = 0.7;
  std::string carry_gaze = "plate";  // "plate" or "object"
  // Demonstration placements: "grid" picks a usable grid cell and jitters it,
  // "uniform" samples the placement area directly.
  std::string demo_placement = "grid";
  double placement_jitter = 0.01;  // m, per axis, for demos and evaluation trials

  // Throws ConfigError.
  void validate() const;
  // key = value lines, '#' comments. Unknown keys throw ConfigError.
  static WorldConfig parse(const std::string& text);
  static WorldConfig load(const std::string& path);
  std::string serialize() const;
  std::uint64_t hash() const;  // FNV-1a over serialize()
};

struct ArmState {
  Vec3 position = Vec3::Zero();
  Rot6 orientation;
  double gripper = 1.0;  // 1 = open

  std::array<double, 10> flat() const;
  static ArmState from_flat(const double* v);
  bool operator==(const ArmState&) const = default;
};

// Tool frame pointing straight down.
Rot6 home_orientation();

struct Color {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Color&) const = default;
};

namespace palette {
inline constexpr Color kDesk{46, 139, 70};
inline constexpr Color kObject{220, 30, 30};
inline constexpr Color kPlate{175, 175, 182};
inline constexpr Color kGripper{40, 70, 220};
inline constexpr Color kFloor{96, 86, 74};
inline constexpr Color kBackground{205, 210, 220};
}  // namespace palette

struct ClutterBox {
  Vec3 center;
  Vec3 half;
  Color color;
};

std::vector<ClutterBox> make_clutter(const WorldConfig& cfg);

struct SceneState {
  std::shared_ptr<const WorldConfig> config;
  std::shared_ptr<const std::vector<ClutterBox>> clutter;
  Vec3 object = Vec3::Zero();
  bool attached = false;
  Vec3 grasp_offset = Vec3::Zero();
  bool ever_lifted = false;
  NeckPose neck;
  ArmState arm;
  Vec3 plate = Vec3::Zero();
  int step = 0;
  std::uint64_t seed = 0;

  const WorldConfig& cfg() const { return *config; }
};

struct Command {
  NeckPose neck_delta;
  ArmState arm_target;
};

// A command that leaves the state unchanged.
Command hold_command(const SceneState& s);

struct GridCell {
  int id = 0;  // row * cols + col
  int col = 0;
  int row = 0;  // row 0 is nearest the robot
  Vec3 position = Vec3::Zero();
  geometry::ViewStatus label = geometry::ViewStatus::InView;
  bool excluded = false;
};

// Whole lattice including cells excluded under the arm home pose.
std::vector<GridCell> grid_lattice(const WorldConfig& cfg);
// The usable cells. Throws ConfigInfeasible unless exactly 44.
std::vector<GridCell> grid_positions(const WorldConfig& cfg);
inline bool out_of_view(geometry::ViewStatus s) { return s != geometry::ViewStatus::InView; }

// Throws OutOfArea when the position is outside the placement area.
SceneState new_scene(const WorldConfig& cfg, const Vec3& object_xy, std::uint64_t seed);
SceneState new_scene(const WorldConfig& cfg, const GridCell& cell, std::uint64_t seed);

SceneState step(const SceneState& s, const Command& cmd);

// Rest height of an object center dropped at (x, y).
double rest_height(const WorldConfig& cfg, const Vec3& plate, double x, double y);
bool task_success(const SceneState& s);

geometry::CameraIntrinsics intrinsics(const WorldConfig& cfg);
geometry::CameraPose rig_pose(const SceneState& s);
std::array<geometry::CameraPose, 2> eye_poses(const WorldConfig& cfg, const NeckPose& neck);

// Combined stereo label: InView only if both eyes see the whole sphere,
// Outside only if neither eye sees any of it.
geometry::ViewStatus stereo_view_status(const WorldConfig& cfg, const NeckPose& neck, const Vec3& center,
                                        double radius);

struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major RGB8

  Image() = default;
  Image(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0) {}
  Color at(int x, int y) const {
    const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 3;
    return Color{rgb[i], rgb[i + 1], rgb[i + 2]};
  }
  std::size_t count(Color c) const;
  bool operator==(const Image&) const = default;
};

struct StereoFrame {
  Image left;
  Image right;
  geometry::CameraPose left_pose;
  geometry::CameraPose right_pose;
};

StereoFrame render(const SceneState& s);
Image render_eye(const SceneState& s, const geometry::CameraPose& eye);

struct GazeSample {
  double lx = 0, ly = 0, rx = 0, ry = 0;
  bool valid = false;
  std::array<double, 4> flat() const { return {lx, ly, rx, ry}; }
};

// Pixel noise scale for a gaze point at eccentricity e.
double gaze_sigma(const WorldConfig& cfg, double e);
// Radial distance from the image center divided by the half-diagonal.
double eccentricity(const WorldConfig& cfg, double x, double y);
GazeSample sample_gaze(const SceneState& s, const Vec3& target, std::mt19937_64& rng);

}  // namespace gazeneck::sim
