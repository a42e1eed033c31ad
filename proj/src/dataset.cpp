#include "gazeneck/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "gazeneck/errors.hpp"

namespace gazeneck::dataset {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot open " + p.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + p.string());
  f << text;
  if (!f) throw IoError("write failed for " + p.string());
}

template <std::size_t N>
std::array<double, N> get_array(const json& j, const char* key, std::size_t offset) {
  if (!j.contains(key) || !j[key].is_array() || j[key].size() != N)
    throw FormatError(std::string("field '") + key + "' must be an array of " + std::to_string(N) + " numbers", offset);
  std::array<double, N> out{};
  for (std::size_t i = 0; i < N; ++i) {
    if (!j[key][i].is_number())
      throw FormatError(std::string("field '") + key + "' must contain numbers", offset);
    out[i] = j[key][i].get<double>();
  }
  return out;
}

json record_to_json(const StepRecord& r) {
  return json{{"step", r.step},         {"neck", r.neck},         {"arm", r.arm},
              {"gaze", r.gaze},         {"gaze_valid", r.gaze_valid}, {"cmd_neck", r.cmd_neck},
              {"cmd_arm", r.cmd_arm}};
}

StepRecord record_from_json(const json& j, std::size_t offset) {
  StepRecord r;
  if (!j.is_object()) throw FormatError("step record must be an object", offset);
  if (!j.contains("step") || !j["step"].is_number_integer()) throw FormatError("field 'step' missing", offset);
  if (!j.contains("gaze_valid") || !j["gaze_valid"].is_boolean())
    throw FormatError("field 'gaze_valid' missing", offset);
  r.step = j["step"].get<int>();
  r.neck = get_array<2>(j, "neck", offset);
  r.arm = get_array<10>(j, "arm", offset);
  r.gaze = get_array<4>(j, "gaze", offset);
  r.gaze_valid = j["gaze_valid"].get<bool>();
  r.cmd_neck = get_array<2>(j, "cmd_neck", offset);
  r.cmd_arm = get_array<10>(j, "cmd_arm", offset);
  return r;
}

json meta_to_json(const EpisodeMeta& m) {
  return json{{"format_version", kFormatVersion},
              {"episode_id", m.episode_id},
              {"with_neck", m.with_neck},
              {"seed", m.seed},
              {"config", m.config},
              {"width", m.width},
              {"height", m.height},
              {"steps", m.steps},
              {"object_cell", m.object_cell},
              {"object_position", m.object_position},
              {"success", m.success}};
}

EpisodeMeta meta_from_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("meta.json: ") + e.what(), e.byte);
  }
  try {
    if (j.at("format_version").get<int>() != kFormatVersion)
      throw FormatError("meta.json: unsupported format_version", 0);
    EpisodeMeta m;
    m.episode_id = j.at("episode_id").get<int>();
    m.with_neck = j.at("with_neck").get<bool>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config = j.at("config").get<std::string>();
    m.width = j.at("width").get<int>();
    m.height = j.at("height").get<int>();
    m.steps = j.at("steps").get<int>();
    m.object_cell = j.at("object_cell").get<int>();
    m.object_position = get_array<3>(j, "object_position", 0);
    m.success = j.at("success").get<bool>();
    if (m.width <= 0 || m.height <= 0 || m.steps < 0) throw FormatError("meta.json: bad dimensions", 0);
    return m;
  } catch (const json::exception& e) {
    throw FormatError(std::string("meta.json: ") + e.what(), 0);
  }
}

}  // namespace

std::string episode_dir_name(int episode_id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "episode_%05d", episode_id);
  return buf;
}

EpisodeWriter::EpisodeWriter(const std::string& dir, int width, int height)
    : dir_(dir), width_(width), height_(height) {
  std::error_code ec;
  fs::create_directories(dir_, ec);
  if (ec) throw IoError("cannot create " + dir_ + ": " + ec.message());
  steps_out_.open(fs::path(dir_) / "steps.jsonl", std::ios::binary | std::ios::trunc);
  frames_out_.open(fs::path(dir_) / "frames.bin", std::ios::binary | std::ios::trunc);
  if (!steps_out_ || !frames_out_) throw IoError("cannot open episode files in " + dir_);
}

void EpisodeWriter::append(const StepRecord& rec, const std::uint8_t* left, const std::uint8_t* right) {
  steps_out_ << record_to_json(rec).dump() << '\n';
  const auto n = static_cast<std::streamsize>(static_cast<std::size_t>(width_) * height_ * 3);
  frames_out_.write(reinterpret_cast<const char*>(left), n);
  frames_out_.write(reinterpret_cast<const char*>(right), n);
  if (!steps_out_ || !frames_out_) throw IoError("write failed in " + dir_);
  ++steps_;
}

void EpisodeWriter::finish(EpisodeMeta meta) {
  if (meta.width != width_ || meta.height != height_) throw IoError("episode meta resolution mismatch");
  meta.steps = steps_;
  steps_out_.close();
  frames_out_.close();
  if (!steps_out_ || !frames_out_) throw IoError("close failed in " + dir_);
  write_file(fs::path(dir_) / "meta.json", meta_to_json(meta).dump(2) + "\n");
}

void write_episode(const std::string& dir, const EpisodeMeta& meta, const std::vector<StepRecord>& records,
                   const std::vector<std::uint8_t>& frames) {
  if (meta.steps != static_cast<int>(records.size()) || frames.size() != records.size() * 2 * meta.frame_bytes())
    throw IoError("write_episode: inconsistent lengths");
  EpisodeWriter w(dir, meta.width, meta.height);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const std::uint8_t* base = frames.data() + i * 2 * meta.frame_bytes();
    w.append(records[i], base, base + meta.frame_bytes());
  }
  w.finish(meta);
}

EpisodeMeta read_meta(const std::string& dir) { return meta_from_text(read_file(fs::path(dir) / "meta.json")); }

Episode read_episode(const std::string& dir) {
  Episode ep;
  ep.meta = read_meta(dir);

  const std::string steps_text = read_file(fs::path(dir) / "steps.jsonl");
  std::size_t pos = 0;
  while (pos < steps_text.size()) {
    std::size_t end = steps_text.find('\n', pos);
    if (end == std::string::npos) end = steps_text.size();
    const std::string line = steps_text.substr(pos, end - pos);
    if (!line.empty()) {
      json j;
      try {
        j = json::parse(line);
      } catch (const json::parse_error& e) {
        throw FormatError(std::string("steps.jsonl: ") + e.what(), pos + (e.byte > 0 ? e.byte - 1 : 0));
      }
      StepRecord r = record_from_json(j, pos);
      if (r.step != static_cast<int>(ep.records.size()))
        throw FormatError("steps.jsonl: step index out of sequence", pos);
      ep.records.push_back(r);
    }
    pos = end + 1;
  }
  if (static_cast<int>(ep.records.size()) != ep.meta.steps)
    throw FormatError("steps.jsonl: " + std::to_string(ep.records.size()) + " records, meta says " +
                          std::to_string(ep.meta.steps),
                      steps_text.size());

  const fs::path frames_path = fs::path(dir) / "frames.bin";
  std::ifstream f(frames_path, std::ios::binary);
  if (!f) throw IoError("cannot open " + frames_path.string());
  const std::size_t expected = static_cast<std::size_t>(ep.meta.steps) * 2 * ep.meta.frame_bytes();
  const std::size_t actual = fs::file_size(frames_path);
  if (actual != expected)
    throw FormatError("frames.bin: " + std::to_string(actual) + " bytes, expected " + std::to_string(expected),
                      std::min(actual, expected));
  ep.frames.resize(expected);
  f.read(reinterpret_cast<char*>(ep.frames.data()), static_cast<std::streamsize>(expected));
  if (!f) throw IoError("read failed for " + frames_path.string());
  return ep;
}

void write_manifest(const std::string& root, const Manifest& m) {
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw IoError("cannot create " + root + ": " + ec.message());
  const json j{{"format_version", kFormatVersion},
               {"episodes", m.episodes},
               {"with_neck", m.with_neck},
               {"config_hash", m.config_hash},
               {"episode_dirs", m.episode_dirs}};
  write_file(fs::path(root) / "manifest.json", j.dump(2) + "\n");
}

Manifest read_manifest(const std::string& root) {
  const std::string text = read_file(fs::path(root) / "manifest.json");
  try {
    const json j = json::parse(text);
    Manifest m;
    m.episodes = j.at("episodes").get<int>();
    m.with_neck = j.at("with_neck").get<bool>();
    m.config_hash = j.at("config_hash").get<std::uint64_t>();
    m.episode_dirs = j.at("episode_dirs").get<std::vector<std::string>>();
    if (static_cast<int>(m.episode_dirs.size()) != m.episodes)
      throw FormatError("manifest.json: episode count mismatch", 0);
    return m;
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("manifest.json: ") + e.what(), e.byte);
  } catch (const json::exception& e) {
    throw FormatError(std::string("manifest.json: ") + e.what(), 0);
  }
}

std::vector<std::string> list_episodes(const std::string& root) {
  std::vector<std::string> out;
  if (fs::exists(fs::path(root) / "manifest.json")) {
    for (const auto& d : read_manifest(root).episode_dirs) out.push_back((fs::path(root) / d).string());
    return out;
  }
  if (!fs::is_directory(root)) throw IoError("not a dataset directory: " + root);
  for (const auto& entry : fs::directory_iterator(root)) {
    const std::string name = entry.path().filename().string();
    if (entry.is_directory() && name.rfind("episode_", 0) == 0) out.push_back(entry.path().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::pair<std::vector<int>, std::vector<int>> split_ids(int n, double train_fraction, std::uint64_t seed) {
  if (n < 2) throw TooFewEpisodes("split needs at least 2 episodes, got " + std::to_string(n));
  std::vector<int> ids(n);
  for (int i = 0; i < n; ++i) ids[i] = i;
  // Fisher-Yates with a plain modulo draw so the order does not depend on the
  // standard library's distribution implementation.
  std::mt19937_64 rng(seed);
  for (int i = n - 1; i > 0; --i) std::swap(ids[i], ids[rng() % static_cast<std::uint64_t>(i + 1)]);
  const int n_train = std::clamp(static_cast<int>(std::floor(train_fraction * n + 0.5)), 1, n - 1);
  std::vector<int> train(ids.begin(), ids.begin() + n_train), test(ids.begin() + n_train, ids.end());
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {train, test};
}

std::pair<std::vector<std::string>, std::vector<std::string>> split(const std::string& root, double train_fraction,
                                                                     std::uint64_t seed) {
  const auto dirs = list_episodes(root);
  const auto [tr, te] = split_ids(static_cast<int>(dirs.size()), train_fraction, seed);
  std::pair<std::vector<std::string>, std::vector<std::string>> out;
  for (int i : tr) out.first.push_back(dirs[i]);
  for (int i : te) out.second.push_back(dirs[i]);
  return out;
}

}  // namespace gazeneck::dataset
