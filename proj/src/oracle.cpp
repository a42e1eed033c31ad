#include "gazeneck/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include <spdlog/spdlog.h>

#include "gazeneck/errors.hpp"
#include "gazeneck/util.hpp"

namespace gazeneck::oracle {

using sim::Command;
using sim::SceneState;
using sim::Vec3;

const char* to_string(Mode m) { return m == Mode::WithNeck ? "with-neck" : "no-neck"; }

Mode parse_mode(const std::string& s) {
  if (s == "with-neck") return Mode::WithNeck;
  if (s == "no-neck") return Mode::NoNeck;
  throw ConfigError("unknown mode '" + s + "' (expected with-neck or no-neck)");
}

const char* to_string(Phase p) {
  switch (p) {
    case Phase::Approach: return "approach";
    case Phase::Descend: return "descend";
    case Phase::Close: return "close";
    case Phase::Lift: return "lift";
    case Phase::Carry: return "carry";
    case Phase::Release: return "release";
    case Phase::Return: return "return";
  }
  return "?";
}

namespace {

double horizontal(const Vec3& a, const Vec3& b) { return std::hypot(a.x() - b.x(), a.y() - b.y()); }

}  // namespace

Phase phase_of(const SceneState& s, const OracleParams& p) {
  if (s.attached) {
    if (s.arm.position.z() < p.carry_z - p.tol && horizontal(s.object, s.plate) > p.tol) return Phase::Lift;
    if (horizontal(s.object, s.plate) > p.tol) return Phase::Carry;
    return Phase::Release;
  }
  if (s.ever_lifted) return Phase::Return;
  if (horizontal(s.arm.position, s.object) > p.tol) return Phase::Approach;
  if (s.arm.position.z() - s.object.z() > p.tol) return Phase::Descend;
  return Phase::Close;
}

Vec3 gaze_target(const SceneState& s, Phase phase) {
  const bool reaching = phase == Phase::Approach || phase == Phase::Descend || phase == Phase::Close;
  if (reaching || s.cfg().carry_gaze == "object") return s.object;
  return s.plate;
}

sim::NeckPose look_at(const sim::WorldConfig& cfg, const Vec3& target) {
  const Vec3 d = target - cfg.rig;
  return geometry::clamp_to_limits(
      sim::NeckPose{std::atan2(d.x(), d.y()), std::atan2(d.z(), std::hypot(d.x(), d.y()))});
}

Command oracle_command(const SceneState& s, Mode mode, const OracleParams& p) {
  const auto& cfg = s.cfg();
  const Phase phase = phase_of(s, p);
  Command c;
  c.arm_target = s.arm;
  c.arm_target.orientation = sim::home_orientation();

  const sim::NeckPose want = look_at(cfg, gaze_target(s, phase));
  const double eyaw = want.yaw - s.neck.yaw, epitch = want.pitch - s.neck.pitch;
  if (mode == Mode::WithNeck) {
    c.neck_delta.yaw = std::clamp(p.neck_gain * eyaw, -cfg.neck_speed, cfg.neck_speed);
    c.neck_delta.pitch = std::clamp(p.neck_gain * epitch, -cfg.neck_speed, cfg.neck_speed);
  }

  switch (phase) {
    case Phase::Approach:
      c.arm_target.position = s.object + Vec3(0, 0, p.hover_height);
      c.arm_target.gripper = 1.0;
      break;
    case Phase::Descend:
      c.arm_target.position = s.object;
      c.arm_target.gripper = 1.0;
      break;
    case Phase::Close:
      c.arm_target.position = s.object;
      c.arm_target.gripper = 0.0;
      break;
    case Phase::Lift:
      c.arm_target.position = Vec3(s.arm.position.x(), s.arm.position.y(), p.carry_z);
      c.arm_target.gripper = 0.0;
      break;
    case Phase::Carry: {
      const Vec3 offset = s.object - s.arm.position;
      c.arm_target.position = Vec3(s.plate.x() - offset.x(), s.plate.y() - offset.y(), p.carry_z);
      c.arm_target.gripper = 0.0;
      break;
    }
    case Phase::Release:
      c.arm_target.position = s.arm.position;
      c.arm_target.gripper = 1.0;
      break;
    case Phase::Return:
      c.arm_target.position = cfg.arm_home;
      c.arm_target.gripper = 1.0;
      break;
  }

  // Look before reaching: hold the arm while the neck is still far off target.
  const bool reaching = phase == Phase::Approach || phase == Phase::Descend;
  if (mode == Mode::WithNeck && reaching && std::max(std::abs(eyaw), std::abs(epitch)) > p.reach_gate)
    c.arm_target.position = s.arm.position;
  return c;
}

EpisodeOutcome run_oracle_episode(const SceneState& start, Mode mode, std::uint64_t gaze_seed,
                                  dataset::EpisodeWriter* writer, const OracleParams& p) {
  SceneState s = start;
  std::mt19937_64 rng(gaze_seed);
  const int steps = s.cfg().episode_steps;
  for (int t = 0; t < steps; ++t) {
    const Command cmd = oracle_command(s, mode, p);
    if (writer) {
      const auto gaze = sim::sample_gaze(s, gaze_target(s, phase_of(s, p)), rng);
      const auto frame = sim::render(s);
      dataset::StepRecord r;
      r.step = t;
      r.neck = {s.neck.yaw, s.neck.pitch};
      r.arm = s.arm.flat();
      r.gaze = gaze.flat();
      r.gaze_valid = gaze.valid;
      r.cmd_neck = {cmd.neck_delta.yaw, cmd.neck_delta.pitch};
      r.cmd_arm = cmd.arm_target.flat();
      writer->append(r, frame.left.rgb.data(), frame.right.rgb.data());
    }
    s = sim::step(s, cmd);
  }
  return EpisodeOutcome{s, sim::task_success(s)};
}

DemoSummary generate_demos(const sim::WorldConfig& cfg, int n, Mode mode, std::uint64_t seed,
                           const std::string& out_dir, const OracleParams& p) {
  if (n < 1) throw ConfigError("generate_demos: need at least one episode");
  cfg.validate();
  namespace fs = std::filesystem;
  const double r = cfg.object_radius;
  std::uniform_real_distribution<double> ux(r, cfg.area_width - r);
  std::uniform_real_distribution<double> uy(cfg.desk_near_y + r, cfg.desk_near_y + cfg.area_depth - r);
  const sim::NeckPose start_neck{0.0, cfg.initial_pitch};
  std::vector<sim::GridCell> cells;
  for (const auto& c : sim::grid_lattice(cfg))
    if (!c.excluded) cells.push_back(c);

  DemoSummary summary;
  dataset::Manifest manifest;
  manifest.with_neck = mode == Mode::WithNeck;
  manifest.config_hash = cfg.hash();

  for (int i = 0; i < n; ++i) {
    bool stored = false;
    for (int attempt = 0; attempt <= 3 && !stored; ++attempt) {
      const std::uint64_t ep_seed = mix_seed(seed, static_cast<std::uint64_t>(i) * 16 + attempt);
      std::mt19937_64 rng(ep_seed);
      Vec3 pos;
      int cell_id = -1;
      for (;;) {
        if (cfg.demo_placement == "grid") {
          std::uniform_int_distribution<std::size_t> pick(0, cells.size() - 1);
          std::uniform_real_distribution<double> jit(-cfg.placement_jitter, cfg.placement_jitter);
          const auto& cell = cells[pick(rng)];
          cell_id = cell.id;
          pos = cell.position;
          pos += Vec3(jit(rng), jit(rng), 0.0);
        } else {
          pos = Vec3(ux(rng), uy(rng), r);
          if (std::abs(pos.x() - cfg.arm_home.x()) <= cfg.home_exclusion_x &&
              std::abs(pos.y() - cfg.arm_home.y()) <= cfg.home_exclusion_y)
            continue;
        }
        const auto label = sim::stereo_view_status(cfg, start_neck, pos, r);
        if (mode == Mode::NoNeck && label == geometry::ViewStatus::Outside) {
          ++summary.rejected_outside;
          continue;
        }
        break;
      }
      const SceneState scene = sim::new_scene(cfg, pos, ep_seed);
      // Dry run first so failed attempts never touch the disk.
      if (!run_oracle_episode(scene, mode, ep_seed, nullptr, p).success) {
        ++summary.retries;
        spdlog::warn("episode {} attempt {} failed; retrying", i, attempt);
        continue;
      }
      const std::string name = dataset::episode_dir_name(i);
      dataset::EpisodeWriter writer((fs::path(out_dir) / name).string(), cfg.width, cfg.height);
      const auto outcome = run_oracle_episode(scene, mode, ep_seed, &writer, p);
      dataset::EpisodeMeta meta;
      meta.episode_id = i;
      meta.with_neck = mode == Mode::WithNeck;
      meta.seed = ep_seed;
      meta.config = cfg.serialize();
      meta.width = cfg.width;
      meta.height = cfg.height;
      meta.object_cell = cell_id;
      meta.object_position = {pos.x(), pos.y(), pos.z()};
      meta.success = outcome.success;
      writer.finish(meta);
      manifest.episode_dirs.push_back(name);
      if (sim::stereo_view_status(cfg, start_neck, pos, r) == geometry::ViewStatus::Outside)
        ++summary.outside_placements;
      stored = true;
    }
    if (!stored) throw OracleFailure("oracle failed 4 times in a row at episode " + std::to_string(i));
    ++summary.episodes;
  }
  manifest.episodes = static_cast<int>(manifest.episode_dirs.size());
  dataset::write_manifest(out_dir, manifest);
  return summary;
}

}  // namespace gazeneck::oracle
