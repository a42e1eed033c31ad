#pragma once

#include <cstdint>
#include <string>

#include "gazeneck/dataset.hpp"
#include "gazeneck/simworld.hpp"

// Scripted demonstrator standing in for the human teleoperator.
namespace gazeneck::oracle {

enum class Mode { WithNeck, NoNeck };
const char* to_string(Mode m);  // "with-neck" / "no-neck"
Mode parse_mode(const std::string& s);  // throws ConfigError

struct OracleParams {
  double neck_gain = 0.5;
  double hover_height = 0.12;  // above the object center
  double carry_z = 0.22;       // arm height while carrying
  double reach_gate = 0.25;    // rad; the arm waits while the neck is this far off target
  double tol = 0.005;          // m, waypoint tolerance
};

enum class Phase { Approach, Descend, Close, Lift, Carry, Release, Return };
const char* to_string(Phase p);

// Phases are read off the state, so the oracle is stateless.
Phase phase_of(const sim::SceneState& s, const OracleParams& p = {});
// Where the demonstrator looks: the object while reaching, the plate from the
// lift onward (or the object throughout when carry_gaze = object).
sim::Vec3 gaze_target(const sim::SceneState& s, Phase phase);

// Neck angles that put a world point on the optical axis, clamped to limits.
sim::NeckPose look_at(const sim::WorldConfig& cfg, const sim::Vec3& target);

sim::Command oracle_command(const sim::SceneState& s, Mode mode, const OracleParams& p = {});

struct EpisodeOutcome {
  sim::SceneState final_state;
  bool success = false;
};

// Runs the oracle for the configured episode length. When writer is given,
// every step is recorded (frame, state, gaze, command) before stepping.
EpisodeOutcome run_oracle_episode(const sim::SceneState& start, Mode mode, std::uint64_t gaze_seed,
                                  dataset::EpisodeWriter* writer, const OracleParams& p = {});

struct DemoSummary {
  int episodes = 0;
  int retries = 0;
  int rejected_outside = 0;
  int outside_placements = 0;
};

// Samples placements per cfg.demo_placement (a jittered usable grid cell, or
// uniformly over the placement area minus the arm home footprint). NoNeck
// rejects fully out-of-view placements. Only successful episodes are stored. Throws OracleFailure after 3 failed retries.
DemoSummary generate_demos(const sim::WorldConfig& cfg, int n, Mode mode, std::uint64_t seed,
                           const std::string& out_dir, const OracleParams& p = {});

}  // namespace gazeneck::oracle
