#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

// Episode recording format.
//
//   <root>/manifest.json
//   <root>/episode_00000/meta.json     episode metadata (see EpisodeMeta)
//   <root>/episode_00000/steps.jsonl   one object per step with keys
//        step, neck[2], arm[10], gaze[4], gaze_valid, cmd_neck[2], cmd_arm[10]
//   <root>/episode_00000/frames.bin    per step: left then right raster,
//        row-major RGB8, no padding
namespace gazeneck::dataset {

inline constexpr int kFormatVersion = 1;

struct StepRecord {
  int step = 0;
  std::array<double, 2> neck{};  // yaw, pitch
  std::array<double, 10> arm{};  // position 3, rot6 6, gripper 1
  std::array<double, 4> gaze{};  // lx, ly, rx, ry
  bool gaze_valid = false;
  std::array<double, 2> cmd_neck{};
  std::array<double, 10> cmd_arm{};
  bool operator==(const StepRecord&) const = default;
};

struct EpisodeMeta {
  int episode_id = 0;
  bool with_neck = true;
  std::uint64_t seed = 0;
  std::string config;  // serialized WorldConfig
  int width = 0;
  int height = 0;
  int steps = 0;
  int object_cell = -1;  // -1 when sampled freely
  std::array<double, 3> object_position{};
  bool success = false;
  bool operator==(const EpisodeMeta&) const = default;

  std::size_t frame_bytes() const { return static_cast<std::size_t>(width) * height * 3; }
};

struct Episode {
  EpisodeMeta meta;
  std::vector<StepRecord> records;
  std::vector<std::uint8_t> frames;

  // eye 0 = left, 1 = right
  const std::uint8_t* frame(int step, int eye) const {
    return frames.data() + (static_cast<std::size_t>(step) * 2 + eye) * meta.frame_bytes();
  }
};

std::string episode_dir_name(int episode_id);

// Streams an episode to disk. finish() writes meta.json last, after checking
// that the counts agree. Throws IoError.
class EpisodeWriter {
 public:
  EpisodeWriter(const std::string& dir, int width, int height);
  void append(const StepRecord& rec, const std::uint8_t* left, const std::uint8_t* right);
  void finish(EpisodeMeta meta);
  int steps() const { return steps_; }

 private:
  std::string dir_;
  int width_;
  int height_;
  int steps_ = 0;
  std::ofstream steps_out_;
  std::ofstream frames_out_;
};

void write_episode(const std::string& dir, const EpisodeMeta& meta, const std::vector<StepRecord>& records,
                   const std::vector<std::uint8_t>& frames);
// Throws FormatError (with byte offset) on malformed or inconsistent files,
// IoError when a file is missing.
Episode read_episode(const std::string& dir);
EpisodeMeta read_meta(const std::string& dir);

struct Manifest {
  int episodes = 0;
  bool with_neck = true;
  std::uint64_t config_hash = 0;
  std::vector<std::string> episode_dirs;
};

void write_manifest(const std::string& root, const Manifest& m);
Manifest read_manifest(const std::string& root);
// Episode directories from the manifest, or by scanning when there is none.
std::vector<std::string> list_episodes(const std::string& root);

// Deterministic shuffled split with round(fraction * n) training items (at
// least one on each side).
// Throws TooFewEpisodes below two.
std::pair<std::vector<int>, std::vector<int>> split_ids(int n, double train_fraction, std::uint64_t seed);
std::pair<std::vector<std::string>, std::vector<std::string>> split(const std::string& root, double train_fraction,
                                                                     std::uint64_t seed);

}  // namespace gazeneck::dataset
