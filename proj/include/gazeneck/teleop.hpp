#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gazeneck/dataset.hpp"
#include "gazeneck/simworld.hpp"

// Teleoperation session: newline-delimited JSON over one socket (raw TCP or
// a WebSocket text stream). Client messages carry a "t" tag:
//   head {yaw, pitch}, arm {target[10]}, grip {v}, gaze {lx, ly, rx, ry},
//   rec {on}, mode {decoupled}
// and the server answers with frame, state and err messages.
namespace gazeneck::teleop {

struct TeleopOptions {
  int lag_steps = 3;            // camera follows the head command this many steps late
  double tick_seconds = 0.1;    // 10 Hz
  double plane_distance = 1.0;  // m, virtual plane in front of the eye
  std::uint64_t seed = 1;       // scene placements for recordings
  bool send_frames = true;
};

// The session state machine, without any networking. handle() may be called
// from the I/O side while tick() runs on the sim side.
class TeleopSession {
 public:
  TeleopSession(const sim::WorldConfig& cfg, std::string out_dir, TeleopOptions opt = {});

  // Applies one client message. Returns an err message for malformed input.
  std::optional<std::string> handle(const std::string& line);
  // One sim step; returns the outgoing frame and state messages.
  std::vector<std::string> tick();

  sim::SceneState state() const;
  geometry::NeckPose head() const;
  bool recording() const { return recording_; }
  bool decoupled() const;
  int episodes_written() const { return episodes_written_; }
  std::int64_t steps() const { return tick_count_; }

 private:
  struct Inputs {
    geometry::NeckPose head;
    std::array<double, 10> arm{};
    std::array<double, 4> gaze{};
    bool gaze_valid = false;
    bool decoupled = true;
    std::optional<bool> rec;
  };

  void start_recording();
  void stop_recording();

  sim::WorldConfig cfg_;
  std::string out_dir_;
  TeleopOptions opt_;
  mutable std::mutex mu_;  // guards in_ and the published state copy
  Inputs in_;
  sim::SceneState published_;

  sim::SceneState s_;
  std::deque<geometry::NeckPose> head_history_;
  std::int64_t tick_count_ = 0;
  std::uint64_t placements_ = 0;
  bool recording_ = false;
  int rec_steps_ = 0;
  int episodes_written_ = 0;
  int next_episode_id_ = 0;
  int rec_cell_ = -1;
  sim::Vec3 rec_position_ = sim::Vec3::Zero();
  std::unique_ptr<dataset::EpisodeWriter> writer_;
};

// JSON for a virtual plane: center, orientation (row-major 3x3), half sizes, distance.
nlohmann::ordered_json plane_json(const geometry::VirtualPlane& p);

// Single-client server. The sim loop runs on its own thread and hands
// finished messages to the I/O thread; client input goes the other way
// through the session's mailbox.
class TeleopServer {
 public:
  TeleopServer(const sim::WorldConfig& cfg, std::string out_dir, TeleopOptions opt = {});
  ~TeleopServer();
  // Binds 127.0.0.1:port (0 picks a free port) and returns the bound port.
  // Throws PortInUse.
  int bind(int port, const std::string& address = "127.0.0.1");
  // Blocks until stop().
  void run();
  void stop();
  TeleopSession& session();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace gazeneck::teleop
