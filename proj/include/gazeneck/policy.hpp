#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gazeneck/dataset.hpp"
#include "gazeneck/learn.hpp"
#include "gazeneck/oracle.hpp"
#include "gazeneck/simworld.hpp"

// The three learned sub-models (neck chunks, coarse+fine gaze, CVAE action
// chunks), the gaze crop geometry, temporal ensembling and the closed loop.
namespace gazeneck::policy {

using oracle::Mode;

struct PolicyConfig {
  int gaze_grid = 16;          // G: coarse gaze patches per side
  int crop = 32;               // C: fine-gaze / foveated crop size, px
  int downsample = 4;          // full-image encoders see W/4 x H/4
  int neck_horizon = 10;
  int act_horizon = 50;
  int ensemble_window = 10;
  double ensemble_decay = 0.1; // m in exp(-m i)
  int latent = 32;
  int feature = 128;
  int hidden = 256;
  std::vector<int> conv_widths{16, 32, 64};
  std::string decoder = "mlp";  // neck/act chunk decoder: "mlp" or "attention"
  bool left_eye_only = false;   // gaze models see the left eye; its prediction is reused for the right

  nlohmann::json to_json() const;
  static PolicyConfig from_json(const nlohmann::json& j);
};

// ---------------------------------------------------------------- gaze geometry

// (i, j) = (column, row) of a G x G patch grid; linear index j * G + i.
struct PatchIndex {
  int i = 0;
  int j = 0;
  bool operator==(const PatchIndex&) const = default;
};

PatchIndex patch_of(double x, double y, int width, int height, int g);
double patch_center(int index, int extent, int g);  // extent * (index + 0.5) / g

// A c x c window. (ox, oy) is the exact origin used for composition; (px, py)
// is the rounded pixel origin actually cropped. shift_* is the inward shift
// applied when the centered window would cross the image border.
struct CropWindow {
  double ox = 0, oy = 0;
  double shift_x = 0, shift_y = 0;
  int px = 0, py = 0;
  int size = 0;
};

// Throws ConfigError when c exceeds the image.
CropWindow centered_window(double cx, double cy, int c, int width, int height);
CropWindow patch_window(PatchIndex p, int g, int c, int width, int height);
sim::Image crop_image(const sim::Image& img, const CropWindow& w);
sim::Image crop_patch_region(const sim::Image& img, PatchIndex p, int g, int c);

struct GazePoint {
  double x = 0, y = 0;
};

// x = W (i + 0.5) / G + (x_crop - C / 2) + shift_x, likewise for y. No clamping.
GazePoint compose_gaze_raw(PatchIndex p, double x_crop, double y_crop, int width, int height, int g, int c,
                           double shift_x = 0, double shift_y = 0);
// As above, clamped to [0, W-1] x [0, H-1].
GazePoint compose_gaze(PatchIndex p, double x_crop, double y_crop, int width, int height, int g, int c,
                       double shift_x = 0, double shift_y = 0);

struct GazeGridPrediction {
  std::vector<float> probs;  // G*G, sums to 1
  PatchIndex patch;
};
// Softmax and argmax; ties go to the smallest linear index.
GazeGridPrediction grid_prediction(const float* logits, int g);

struct Foveated {
  sim::Image left, right;
  CropWindow left_window, right_window;
};
Foveated foveate(const sim::StereoFrame& frame, GazePoint left, GazePoint right, int c);

// ---------------------------------------------------------------- ensembling

// Chunks issued at earlier steps; blend(t) averages every chunk that still
// covers t and was issued within the window, weighting the k-th oldest by
// exp(-m k).
class EnsembleBuffer {
 public:
  EnsembleBuffer(int dim, int window = 10, double decay = 0.1);
  // rows x dim, row r predicts step issue_step + r.
  void push(int issue_step, std::vector<float> chunk);
  // Throws EmptyBuffer when no chunk covers t.
  std::vector<double> blend(int t);
  std::size_t size() const { return chunks_.size(); }
  void clear() { chunks_.clear(); }

 private:
  struct Entry {
    int issued;
    std::vector<float> chunk;
  };
  void prune(int t);
  int dim_, window_;
  double decay_;
  std::deque<Entry> chunks_;
};

// ---------------------------------------------------------------- inputs

// arm (10) ++ gaze (lx, ly, rx, ry in pixels) ++ neck (yaw, pitch). NoNeck
// drops the neck, giving 14 values.
std::vector<float> robot_state(const sim::ArmState& arm, const std::array<double, 4>& gaze,
                               const sim::NeckPose& neck, bool with_neck);
int state_dim(Mode mode);

// Box-filter downsample of packed RGB8 by an integer factor (HWC out).
std::vector<std::uint8_t> downsample_rgb(const std::uint8_t* rgb, int width, int height, int factor);
// HWC uint8 -> CHW float in [-0.5, 0.5], written at out.
void to_chw(const std::uint8_t* rgb, int width, int height, float* out);

// Per-dimension affine normalisation with a floor on the scale.
struct Normalizer {
  std::vector<float> mean, scale;
  static Normalizer fit(const std::vector<float>& rows, int dim, float min_scale);
  void apply(float* v) const;
  void invert(float* v) const;
  nlohmann::json to_json() const;
  static Normalizer from_json(const nlohmann::json& j);
};

// ---------------------------------------------------------------- models

struct ImageDims {
  int width = 0, height = 0;
};

class NeckModel {
 public:
  NeckModel(const PolicyConfig& cfg, ImageDims dims, double neck_speed, std::uint64_t seed);
  // x: [N, 6, H/d, W/d] -> [N, horizon*2], in units of neck_speed.
  learn::Tensor forward(const learn::Tensor& x) const;
  // One stereo frame -> horizon x 2 radian deltas.
  std::vector<float> predict(const sim::StereoFrame& frame) const;
  std::vector<learn::Tensor> params() const;
  nlohmann::json header() const;
  void save(const std::string& path) const;
  static NeckModel load(const std::string& path);

  PolicyConfig cfg;
  ImageDims dims;
  double neck_speed;

 private:
  learn::ConvEncoder enc_;
  learn::ChunkDecoder head_;
};

class GazeCoarseModel {
 public:
  GazeCoarseModel(const PolicyConfig& cfg, ImageDims dims, std::uint64_t seed);
  learn::Tensor forward(const learn::Tensor& x) const;  // [N, 3, H/d, W/d] -> [N, G*G]
  std::array<GazeGridPrediction, 2> predict(const sim::StereoFrame& frame) const;
  std::vector<learn::Tensor> params() const;
  nlohmann::json header() const;
  void save(const std::string& path) const;
  static GazeCoarseModel load(const std::string& path);

  PolicyConfig cfg;
  ImageDims dims;

 private:
  learn::ConvEncoder enc_;
  learn::Linear head_;
};

class GazeFineModel {
 public:
  GazeFineModel(const PolicyConfig& cfg, ImageDims dims, std::uint64_t seed);
  learn::Tensor forward(const learn::Tensor& x) const;  // [N, 3, C, C] -> [N, 2] in crop units / C
  // (x_crop, y_crop) in [0, C] for each crop.
  std::vector<GazePoint> predict(const std::vector<const sim::Image*>& crops) const;
  std::vector<learn::Tensor> params() const;
  nlohmann::json header() const;
  void save(const std::string& path) const;
  static GazeFineModel load(const std::string& path);

  PolicyConfig cfg;
  ImageDims dims;

 private:
  learn::ConvEncoder enc_;
  learn::Mlp head_;
};

class ActModel {
 public:
  ActModel(const PolicyConfig& cfg, ImageDims dims, Mode mode, std::uint64_t seed);
  // crops [N, 6, C, C], state [N, S] (normalised), z [N, latent] -> [N, horizon*10] (normalised)
  learn::Tensor decode(const learn::Tensor& crops, const learn::Tensor& state, const learn::Tensor& z) const;
  // state [N, S] ++ actions [N, horizon*10], both normalised -> (mu, logvar)
  std::pair<learn::Tensor, learn::Tensor> encode(const learn::Tensor& state, const learn::Tensor& actions) const;
  // Inference with z = 0: horizon x 10 arm targets in world units.
  std::vector<float> predict(const Foveated& crops, const std::vector<float>& state) const;
  std::vector<learn::Tensor> params() const;
  nlohmann::json header() const;
  void save(const std::string& path) const;
  static ActModel load(const std::string& path);

  PolicyConfig cfg;
  ImageDims dims;
  Mode mode;
  Normalizer state_norm, action_norm;

 private:
  learn::ConvEncoder enc_;
  learn::CvaeHeads cvae_;
  learn::ChunkDecoder dec_;
};

// Fills a [6, C, C] slot from a foveated pair.
void pack_crops(const Foveated& f, float* out);

struct PolicyModels {
  Mode mode = Mode::WithNeck;
  std::optional<NeckModel> neck;
  std::optional<GazeCoarseModel> coarse;
  std::optional<GazeFineModel> fine;
  std::optional<ActModel> act;
};

// Checkpoint file names inside a model directory.
inline constexpr const char* kNeckFile = "neck.ckpt";
inline constexpr const char* kCoarseFile = "gaze-coarse.ckpt";
inline constexpr const char* kFineFile = "gaze-fine.ckpt";
inline constexpr const char* kActFile = "act.ckpt";
inline constexpr const char* kPolicyFile = "policy.toml";

// Writes policy.toml naming the checkpoints and mode.
void write_policy_file(const std::string& dir, Mode mode);
// Reads policy.toml (falls back to default names). Throws MissingCheckpoint,
// ModelMismatch when a checkpoint does not fit the mode or world.
PolicyModels load_policy(const std::string& dir, Mode mode, const sim::WorldConfig& world);

// ---------------------------------------------------------------- closed loop

struct Perception {
  std::array<double, 4> gaze{};  // predicted lx, ly, rx, ry
  std::vector<float> neck_chunk;
  std::vector<float> act_chunk;
};

// Anything that turns an observation into a command.
class Driver {
 public:
  virtual ~Driver() = default;
  virtual void reset() {}
  virtual sim::Command command(const sim::SceneState& s, const sim::StereoFrame& frame) = 0;
  virtual bool needs_frames() const { return true; }
};

class PolicyDriver : public Driver {
 public:
  explicit PolicyDriver(const PolicyModels& models);
  void reset() override;
  sim::Command command(const sim::SceneState& s, const sim::StereoFrame& frame) override;
  const Perception& last() const { return last_; }

 private:
  const PolicyModels& m_;
  EnsembleBuffer neck_buf_, arm_buf_;
  Perception last_;
};

class OracleDriver : public Driver {
 public:
  explicit OracleDriver(Mode mode) : mode_(mode) {}
  sim::Command command(const sim::SceneState& s, const sim::StereoFrame&) override;
  bool needs_frames() const override { return false; }

 private:
  Mode mode_;
};

// Feeds recorded commands back in order.
class ReplayDriver : public Driver {
 public:
  explicit ReplayDriver(std::vector<dataset::StepRecord> records) : records_(std::move(records)) {}
  void reset() override { next_ = 0; }
  sim::Command command(const sim::SceneState& s, const sim::StereoFrame&) override;
  bool needs_frames() const override { return false; }

 private:
  std::vector<dataset::StepRecord> records_;
  std::size_t next_ = 0;
};

struct PolicyEpisode {
  std::vector<sim::SceneState> trajectory;  // state before each step, then the final state
  std::vector<sim::Command> commands;
  bool success = false;
};

// Runs the configured episode length at the control rate.
PolicyEpisode run_episode(Driver& driver, const sim::SceneState& start);
PolicyEpisode run_policy_episode(const PolicyModels& models, const sim::SceneState& start, Mode mode);

// ---------------------------------------------------------------- training

enum class ModelKind { Neck, GazeCoarse, GazeFine, Act };
const char* to_string(ModelKind k);
ModelKind parse_model_kind(const std::string& s);  // neck | gaze-coarse | gaze-fine | act
const char* checkpoint_file(ModelKind k);

struct TrainOptions {
  int epochs = 50;
  int batch = 32;
  float lr = 1e-3f;
  float kl_weight = 10.0f;
  std::uint64_t seed = 1;
  double train_fraction = 0.9;
  std::uint64_t split_seed = 0;
  int stride = 1;     // keep every stride-th step
  int idle_tail = 5;  // steps kept after the last arm or neck motion
};

// Per-model sample caches built from one pass over the dataset.
struct SampleCache {
  int count = 0;
  std::vector<std::uint8_t> images;  // per-sample image block
  std::vector<float> inputs;         // per-sample float inputs (state)
  std::vector<float> targets;
  std::vector<int> labels;
  std::vector<double> aux;           // per-sample extras (eccentricity, ...)
  std::size_t image_block = 0, input_dim = 0, target_dim = 0;
};

struct TrainingSet {
  sim::WorldConfig world;
  ImageDims dims;
  Mode mode = Mode::WithNeck;
  std::vector<int> train_ids, test_ids;
  std::vector<std::string> episode_dirs;
  SampleCache neck, coarse, fine, act;
};

// Reads the dataset once and builds caches for the requested kinds from the
// training split. Throws TooFewEpisodes, FormatError, IoError.
TrainingSet build_training_set(const std::string& data_dir, const PolicyConfig& cfg, const TrainOptions& opt,
                               const std::vector<ModelKind>& kinds);

struct TrainReport {
  ModelKind kind = ModelKind::Neck;
  int samples = 0;
  int iterations = 0;
  double first_epoch_loss = 0;
  double final_epoch_loss = 0;
  double seconds = 0;
};

// Trains one sub-model and writes its checkpoint to out_path.
TrainReport train_model(const TrainingSet& set, ModelKind kind, const PolicyConfig& cfg, const TrainOptions& opt,
                        const std::string& out_path);

// Held-out gaze error of a coarse+fine pair on episodes, per valid reaching
// step and eye: distance between the predicted point and the recorded gaze
// label, with the eccentricity of the object's true projection.
struct GazeErrorSample {
  double error_px = 0;
  double eccentricity = 0;
  double error_true_px = 0;  // against the noiseless projection instead
};
std::vector<GazeErrorSample> gaze_errors(const GazeCoarseModel& coarse, const GazeFineModel& fine,
                                         const std::vector<std::string>& episode_dirs, int stride = 1);

// Distance between the act model's first predicted position and the recorded
// next arm position, per held-out step (foveated at the recorded gaze).
std::vector<double> act_step0_errors(const ActModel& act, const std::vector<std::string>& episode_dirs,
                                     int stride = 1);

// Replays an episode's recorded commands from its initial scene; returns the
// state before every step. Used for labels that need the true scene.
std::vector<sim::SceneState> replay_states(const dataset::Episode& ep);

}  // namespace gazeneck::policy
