#include "gazeneck/policy.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gazeneck/errors.hpp"

namespace gazeneck::policy {

using learn::Tensor;

nlohmann::json PolicyConfig::to_json() const {
  return {{"gaze_grid", gaze_grid},       {"crop", crop},
          {"downsample", downsample},     {"neck_horizon", neck_horizon},
          {"act_horizon", act_horizon},   {"ensemble_window", ensemble_window},
          {"ensemble_decay", ensemble_decay}, {"latent", latent},
          {"feature", feature},           {"hidden", hidden},
          {"conv_widths", conv_widths},   {"decoder", decoder},
          {"left_eye_only", left_eye_only}};
}

PolicyConfig PolicyConfig::from_json(const nlohmann::json& j) {
  PolicyConfig c;
  c.gaze_grid = j.at("gaze_grid");
  c.crop = j.at("crop");
  c.downsample = j.at("downsample");
  c.neck_horizon = j.at("neck_horizon");
  c.act_horizon = j.at("act_horizon");
  c.ensemble_window = j.at("ensemble_window");
  c.ensemble_decay = j.at("ensemble_decay");
  c.latent = j.at("latent");
  c.feature = j.at("feature");
  c.hidden = j.at("hidden");
  c.conv_widths = j.at("conv_widths").get<std::vector<int>>();
  c.decoder = j.value("decoder", std::string("mlp"));
  c.left_eye_only = j.value("left_eye_only", false);
  learn::parse_decoder_kind(c.decoder);
  return c;
}

// ---------------------------------------------------------------- gaze geometry

PatchIndex patch_of(double x, double y, int width, int height, int g) {
  const int i = std::clamp(static_cast<int>(std::floor(x * g / width)), 0, g - 1);
  const int j = std::clamp(static_cast<int>(std::floor(y * g / height)), 0, g - 1);
  return {i, j};
}

double patch_center(int index, int extent, int g) { return extent * (index + 0.5) / g; }

namespace {

void place_axis(double center, int c, int extent, double& origin, double& shift, int& pixel) {
  origin = center - c / 2.0;
  shift = 0.0;
  if (origin < 0.0) shift = -origin;
  else if (origin > extent - c) shift = (extent - c) - origin;
  origin += shift;
  pixel = std::clamp(static_cast<int>(std::floor(origin + 0.5)), 0, extent - c);
}

}  // namespace

CropWindow centered_window(double cx, double cy, int c, int width, int height) {
  if (c < 1 || c > width || c > height)
    throw ConfigError("crop size " + std::to_string(c) + " does not fit a " + std::to_string(width) + "x" +
                      std::to_string(height) + " image");
  CropWindow w;
  w.size = c;
  place_axis(cx, c, width, w.ox, w.shift_x, w.px);
  place_axis(cy, c, height, w.oy, w.shift_y, w.py);
  return w;
}

CropWindow patch_window(PatchIndex p, int g, int c, int width, int height) {
  return centered_window(patch_center(p.i, width, g), patch_center(p.j, height, g), c, width, height);
}

sim::Image crop_image(const sim::Image& img, const CropWindow& w) {
  sim::Image out(w.size, w.size);
  for (int y = 0; y < w.size; ++y)
    std::copy_n(img.rgb.data() + (static_cast<std::size_t>(w.py + y) * img.width + w.px) * 3,
                static_cast<std::size_t>(w.size) * 3, out.rgb.data() + static_cast<std::size_t>(y) * w.size * 3);
  return out;
}

sim::Image crop_patch_region(const sim::Image& img, PatchIndex p, int g, int c) {
  return crop_image(img, patch_window(p, g, c, img.width, img.height));
}

GazePoint compose_gaze_raw(PatchIndex p, double x_crop, double y_crop, int width, int height, int g, int c,
                           double shift_x, double shift_y) {
  return {patch_center(p.i, width, g) + (x_crop - c / 2.0) + shift_x,
          patch_center(p.j, height, g) + (y_crop - c / 2.0) + shift_y};
}

GazePoint compose_gaze(PatchIndex p, double x_crop, double y_crop, int width, int height, int g, int c,
                       double shift_x, double shift_y) {
  const GazePoint r = compose_gaze_raw(p, x_crop, y_crop, width, height, g, c, shift_x, shift_y);
  return {std::clamp(r.x, 0.0, width - 1.0), std::clamp(r.y, 0.0, height - 1.0)};
}

GazeGridPrediction grid_prediction(const float* logits, int g) {
  const int n = g * g;
  GazeGridPrediction p;
  p.probs.resize(n);
  int best = 0;
  for (int k = 1; k < n; ++k)
    if (logits[k] > logits[best]) best = k;
  double se = 0.0;
  for (int k = 0; k < n; ++k) se += std::exp(static_cast<double>(logits[k]) - logits[best]);
  for (int k = 0; k < n; ++k) p.probs[k] = static_cast<float>(std::exp(static_cast<double>(logits[k]) - logits[best]) / se);
  p.patch = {best % g, best / g};
  return p;
}

Foveated foveate(const sim::StereoFrame& frame, GazePoint left, GazePoint right, int c) {
  Foveated f;
  f.left_window = centered_window(left.x, left.y, c, frame.left.width, frame.left.height);
  f.right_window = centered_window(right.x, right.y, c, frame.right.width, frame.right.height);
  f.left = crop_image(frame.left, f.left_window);
  f.right = crop_image(frame.right, f.right_window);
  return f;
}

// ---------------------------------------------------------------- ensembling

EnsembleBuffer::EnsembleBuffer(int dim, int window, double decay) : dim_(dim), window_(window), decay_(decay) {
  if (dim < 1 || window < 1) throw ConfigError("ensemble buffer needs dim >= 1 and window >= 1");
}

void EnsembleBuffer::push(int issue_step, std::vector<float> chunk) {
  if (chunk.empty() || chunk.size() % static_cast<std::size_t>(dim_) != 0)
    throw ShapeMismatch("ensemble chunk of " + std::to_string(chunk.size()) + " values, dim " + std::to_string(dim_));
  chunks_.push_back({issue_step, std::move(chunk)});
  std::stable_sort(chunks_.begin(), chunks_.end(), [](const Entry& a, const Entry& b) { return a.issued < b.issued; });
}

void EnsembleBuffer::prune(int t) {
  std::erase_if(chunks_, [&](const Entry& e) {
    const int rows = static_cast<int>(e.chunk.size()) / dim_;
    return t - e.issued >= window_ || t - e.issued >= rows;
  });
}

std::vector<double> EnsembleBuffer::blend(int t) {
  prune(t);
  std::vector<double> acc(dim_, 0.0);
  double wsum = 0.0;
  int k = 0;
  for (const auto& e : chunks_) {
    if (e.issued > t) continue;
    const double w = std::exp(-decay_ * k++);
    const float* row = e.chunk.data() + static_cast<std::size_t>(t - e.issued) * dim_;
    for (int d = 0; d < dim_; ++d) acc[d] += w * row[d];
    wsum += w;
  }
  if (k == 0) throw EmptyBuffer("no chunk covers step " + std::to_string(t));
  for (auto& v : acc) v /= wsum;
  return acc;
}

// ---------------------------------------------------------------- inputs

std::vector<float> robot_state(const sim::ArmState& arm, const std::array<double, 4>& gaze,
                               const sim::NeckPose& neck, bool with_neck) {
  std::vector<float> s;
  s.reserve(16);
  for (double v : arm.flat()) s.push_back(static_cast<float>(v));
  for (double v : gaze) s.push_back(static_cast<float>(v));
  if (with_neck) {
    s.push_back(static_cast<float>(neck.yaw));
    s.push_back(static_cast<float>(neck.pitch));
  }
  return s;
}

int state_dim(Mode mode) { return mode == Mode::WithNeck ? 16 : 14; }

std::vector<std::uint8_t> downsample_rgb(const std::uint8_t* rgb, int width, int height, int factor) {
  const int w = width / factor, h = height / factor;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(w) * h * 3);
  const int area = factor * factor;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        int acc = 0;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx)
            acc += rgb[(static_cast<std::size_t>(y * factor + dy) * width + x * factor + dx) * 3 + c];
        out[(static_cast<std::size_t>(y) * w + x) * 3 + c] = static_cast<std::uint8_t>((acc + area / 2) / area);
      }
  return out;
}

void to_chw(const std::uint8_t* rgb, int width, int height, float* out) {
  const std::size_t plane = static_cast<std::size_t>(width) * height;
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 0; c < 3; ++c) out[c * plane + p] = rgb[p * 3 + c] / 255.0f - 0.5f;
}

Normalizer Normalizer::fit(const std::vector<float>& rows, int dim, float min_scale) {
  Normalizer n;
  n.mean.assign(dim, 0.0f);
  n.scale.assign(dim, min_scale);
  const std::size_t count = rows.size() / dim;
  if (count == 0) return n;
  for (int d = 0; d < dim; ++d) {
    double s = 0, s2 = 0;
    for (std::size_t r = 0; r < count; ++r) {
      const double v = rows[r * dim + d];
      s += v;
      s2 += v * v;
    }
    const double m = s / count;
    n.mean[d] = static_cast<float>(m);
    n.scale[d] = std::max(min_scale, static_cast<float>(std::sqrt(std::max(0.0, s2 / count - m * m))));
  }
  return n;
}

void Normalizer::apply(float* v) const {
  for (std::size_t d = 0; d < mean.size(); ++d) v[d] = (v[d] - mean[d]) / scale[d];
}

void Normalizer::invert(float* v) const {
  for (std::size_t d = 0; d < mean.size(); ++d) v[d] = v[d] * scale[d] + mean[d];
}

nlohmann::json Normalizer::to_json() const { return {{"mean", mean}, {"scale", scale}}; }

Normalizer Normalizer::from_json(const nlohmann::json& j) {
  Normalizer n;
  n.mean = j.at("mean").get<std::vector<float>>();
  n.scale = j.at("scale").get<std::vector<float>>();
  return n;
}

// ---------------------------------------------------------------- models

namespace {

nlohmann::json checked_header(const std::string& path, const char* kind) {
  auto h = learn::read_checkpoint_header(path);
  if (!h.contains("model") || h["model"] != kind)
    throw ModelMismatch(path + ": expected a " + kind + " checkpoint, found " +
                        (h.contains("model") ? h["model"].dump() : std::string("no model tag")));
  return h;
}

ImageDims dims_of(const nlohmann::json& h) { return {h.at("width").get<int>(), h.at("height").get<int>()}; }

// Both eyes downsampled into one [1, 6, h, w] tensor.
Tensor stereo_input(const sim::StereoFrame& f, int factor) {
  const int w = f.left.width / factor, h = f.left.height / factor;
  std::vector<float> v(static_cast<std::size_t>(6) * w * h);
  to_chw(downsample_rgb(f.left.rgb.data(), f.left.width, f.left.height, factor).data(), w, h, v.data());
  to_chw(downsample_rgb(f.right.rgb.data(), f.right.width, f.right.height, factor).data(), w, h,
         v.data() + static_cast<std::size_t>(3) * w * h);
  return Tensor::from({1, 6, h, w}, std::move(v));
}

}  // namespace

NeckModel::NeckModel(const PolicyConfig& c, ImageDims d, double speed, std::uint64_t seed)
    : cfg(c), dims(d), neck_speed(speed) {
  learn::Rng rng(seed);
  enc_ = learn::ConvEncoder(6, d.height / c.downsample, d.width / c.downsample, c.conv_widths, c.feature, rng);
  head_ = learn::ChunkDecoder(c.feature, c.hidden, 1, c.neck_horizon, 2, rng, learn::parse_decoder_kind(c.decoder));
}

Tensor NeckModel::forward(const Tensor& x) const { return head_(enc_(x)); }

std::vector<float> NeckModel::predict(const sim::StereoFrame& frame) const {
  learn::NoGrad ng;
  const Tensor y = forward(stereo_input(frame, cfg.downsample));
  std::vector<float> out(y.values().begin(), y.values().end());
  for (auto& v : out) v *= static_cast<float>(neck_speed);
  return out;
}

std::vector<Tensor> NeckModel::params() const {
  auto p = enc_.params();
  for (const auto& t : head_.params()) p.push_back(t);
  return p;
}

nlohmann::json NeckModel::header() const {
  return {{"model", "neck"}, {"policy", cfg.to_json()}, {"width", dims.width}, {"height", dims.height},
          {"neck_speed", neck_speed}, {"arch", {{"encoder", enc_.arch()}}}};
}

void NeckModel::save(const std::string& path) const { learn::save_checkpoint(path, header(), params()); }

NeckModel NeckModel::load(const std::string& path) {
  const auto h = checked_header(path, "neck");
  NeckModel m(PolicyConfig::from_json(h.at("policy")), dims_of(h), h.at("neck_speed").get<double>(), 0);
  learn::load_checkpoint(path, m.params());
  return m;
}

GazeCoarseModel::GazeCoarseModel(const PolicyConfig& c, ImageDims d, std::uint64_t seed) : cfg(c), dims(d) {
  learn::Rng rng(seed);
  enc_ = learn::ConvEncoder(3, d.height / c.downsample, d.width / c.downsample, c.conv_widths, c.feature, rng);
  head_ = learn::Linear(c.feature, c.gaze_grid * c.gaze_grid, rng);
}

Tensor GazeCoarseModel::forward(const Tensor& x) const { return head_(enc_(x)); }

std::array<GazeGridPrediction, 2> GazeCoarseModel::predict(const sim::StereoFrame& frame) const {
  learn::NoGrad ng;
  const Tensor x = stereo_input(frame, cfg.downsample);
  const int k = cfg.gaze_grid * cfg.gaze_grid;
  if (cfg.left_eye_only) {
    const std::size_t half = x.size() / 2;
    std::vector<float> left(x.data(), x.data() + half);
    const auto p = grid_prediction(forward(Tensor::from({1, 3, x.dim(2), x.dim(3)}, std::move(left))).data(), cfg.gaze_grid);
    return {p, p};
  }
  const Tensor logits = forward(reshape(x, {2, 3, x.dim(2), x.dim(3)}));
  return {grid_prediction(logits.data(), cfg.gaze_grid), grid_prediction(logits.data() + k, cfg.gaze_grid)};
}

std::vector<Tensor> GazeCoarseModel::params() const {
  auto p = enc_.params();
  for (const auto& t : head_.params()) p.push_back(t);
  return p;
}

nlohmann::json GazeCoarseModel::header() const {
  return {{"model", "gaze-coarse"}, {"policy", cfg.to_json()}, {"width", dims.width}, {"height", dims.height},
          {"arch", {{"encoder", enc_.arch()}}}};
}

void GazeCoarseModel::save(const std::string& path) const { learn::save_checkpoint(path, header(), params()); }

GazeCoarseModel GazeCoarseModel::load(const std::string& path) {
  const auto h = checked_header(path, "gaze-coarse");
  GazeCoarseModel m(PolicyConfig::from_json(h.at("policy")), dims_of(h), 0);
  learn::load_checkpoint(path, m.params());
  return m;
}

GazeFineModel::GazeFineModel(const PolicyConfig& c, ImageDims d, std::uint64_t seed) : cfg(c), dims(d) {
  learn::Rng rng(seed);
  enc_ = learn::ConvEncoder(3, c.crop, c.crop, c.conv_widths, c.feature, rng);
  head_ = learn::Mlp({c.feature, 64, 2}, rng);
}

Tensor GazeFineModel::forward(const Tensor& x) const { return head_(enc_(x)); }

std::vector<GazePoint> GazeFineModel::predict(const std::vector<const sim::Image*>& crops) const {
  learn::NoGrad ng;
  const int c = cfg.crop, n = static_cast<int>(crops.size());
  std::vector<float> v(static_cast<std::size_t>(n) * 3 * c * c);
  for (int i = 0; i < n; ++i) to_chw(crops[i]->rgb.data(), c, c, v.data() + static_cast<std::size_t>(i) * 3 * c * c);
  const Tensor out = forward(Tensor::from({n, 3, c, c}, std::move(v)));
  std::vector<GazePoint> r(n);
  for (int i = 0; i < n; ++i)
    r[i] = {std::clamp(out.data()[2 * i] * static_cast<double>(c), 0.0, static_cast<double>(c)),
            std::clamp(out.data()[2 * i + 1] * static_cast<double>(c), 0.0, static_cast<double>(c))};
  return r;
}

std::vector<Tensor> GazeFineModel::params() const {
  auto p = enc_.params();
  for (const auto& t : head_.params()) p.push_back(t);
  return p;
}

nlohmann::json GazeFineModel::header() const {
  return {{"model", "gaze-fine"}, {"policy", cfg.to_json()}, {"width", dims.width}, {"height", dims.height},
          {"arch", {{"encoder", enc_.arch()}}}};
}

void GazeFineModel::save(const std::string& path) const { learn::save_checkpoint(path, header(), params()); }

GazeFineModel GazeFineModel::load(const std::string& path) {
  const auto h = checked_header(path, "gaze-fine");
  GazeFineModel m(PolicyConfig::from_json(h.at("policy")), dims_of(h), 0);
  learn::load_checkpoint(path, m.params());
  return m;
}

ActModel::ActModel(const PolicyConfig& c, ImageDims d, Mode m, std::uint64_t seed) : cfg(c), dims(d), mode(m) {
  learn::Rng rng(seed);
  const int s = state_dim(m);
  enc_ = learn::ConvEncoder(6, c.crop, c.crop, c.conv_widths, c.feature, rng);
  cvae_ = learn::CvaeHeads(s + c.act_horizon * 10, c.hidden, c.latent, rng);
  dec_ = learn::ChunkDecoder(c.feature + s + c.latent, c.hidden, 2, c.act_horizon, 10, rng,
                             learn::parse_decoder_kind(c.decoder));
  state_norm = Normalizer{std::vector<float>(s, 0.0f), std::vector<float>(s, 1.0f)};
  action_norm = Normalizer{std::vector<float>(10, 0.0f), std::vector<float>(10, 1.0f)};
}

Tensor ActModel::decode(const Tensor& crops, const Tensor& state, const Tensor& z) const {
  return dec_(learn::concat_cols({enc_(crops), state, z}));
}

std::pair<Tensor, Tensor> ActModel::encode(const Tensor& state, const Tensor& actions) const {
  return cvae_.encode(learn::concat_cols({state, actions}));
}

void pack_crops(const Foveated& f, float* out) {
  const int c = f.left.width;
  to_chw(f.left.rgb.data(), c, c, out);
  to_chw(f.right.rgb.data(), c, c, out + static_cast<std::size_t>(3) * c * c);
}

std::vector<float> ActModel::predict(const Foveated& crops, const std::vector<float>& state) const {
  learn::NoGrad ng;
  const int c = cfg.crop, s = state_dim(mode);
  if (static_cast<int>(state.size()) != s)
    throw ShapeMismatch("act state has " + std::to_string(state.size()) + " values, model expects " + std::to_string(s));
  std::vector<float> img(static_cast<std::size_t>(6) * c * c);
  pack_crops(crops, img.data());
  std::vector<float> st = state;
  state_norm.apply(st.data());
  const Tensor out = decode(Tensor::from({1, 6, c, c}, std::move(img)), Tensor::from({1, s}, std::move(st)),
                            Tensor::zeros({1, cfg.latent}));
  std::vector<float> chunk(out.values().begin(), out.values().end());
  for (int r = 0; r < cfg.act_horizon; ++r) action_norm.invert(chunk.data() + static_cast<std::size_t>(r) * 10);
  return chunk;
}

std::vector<Tensor> ActModel::params() const {
  auto p = enc_.params();
  for (const auto& t : cvae_.params()) p.push_back(t);
  for (const auto& t : dec_.params()) p.push_back(t);
  return p;
}

nlohmann::json ActModel::header() const {
  return {{"model", "act"},
          {"mode", oracle::to_string(mode)},
          {"policy", cfg.to_json()},
          {"width", dims.width},
          {"height", dims.height},
          {"state_dim", state_dim(mode)},
          {"state_norm", state_norm.to_json()},
          {"action_norm", action_norm.to_json()},
          {"arch", {{"encoder", enc_.arch()}}}};
}

void ActModel::save(const std::string& path) const { learn::save_checkpoint(path, header(), params()); }

ActModel ActModel::load(const std::string& path) {
  const auto h = checked_header(path, "act");
  ActModel m(PolicyConfig::from_json(h.at("policy")), dims_of(h), oracle::parse_mode(h.at("mode")), 0);
  learn::load_checkpoint(path, m.params());
  m.state_norm = Normalizer::from_json(h.at("state_norm"));
  m.action_norm = Normalizer::from_json(h.at("action_norm"));
  return m;
}

// ---------------------------------------------------------------- bundle

void write_policy_file(const std::string& dir, Mode mode) {
  std::filesystem::create_directories(dir);
  std::ofstream f(std::filesystem::path(dir) / kPolicyFile);
  if (!f) throw IoError("cannot write " + (std::filesystem::path(dir) / kPolicyFile).string());
  f << "mode = \"" << oracle::to_string(mode) << "\"\n";
  if (mode == Mode::WithNeck) f << "neck = \"" << kNeckFile << "\"\n";
  f << "gaze_coarse = \"" << kCoarseFile << "\"\n";
  f << "gaze_fine = \"" << kFineFile << "\"\n";
  f << "act = \"" << kActFile << "\"\n";
}

namespace {

std::map<std::string, std::string> read_policy_file(const std::filesystem::path& p) {
  std::map<std::string, std::string> kv;
  std::ifstream f(p);
  std::string line;
  while (std::getline(f, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\"");
      const auto e = s.find_last_not_of(" \t\"\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

void check_dims(const ImageDims& d, const sim::WorldConfig& w, const std::string& what) {
  if (d.width != w.width || d.height != w.height)
    throw ModelMismatch(what + " was trained on " + std::to_string(d.width) + "x" + std::to_string(d.height) +
                        " images, world renders " + std::to_string(w.width) + "x" + std::to_string(w.height));
}

}  // namespace

PolicyModels load_policy(const std::string& dir, Mode mode, const sim::WorldConfig& world) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  if (!fs::is_directory(root)) throw MissingCheckpoint("model directory not found: " + dir);
  std::map<std::string, std::string> kv{{"neck", kNeckFile},
                                        {"gaze_coarse", kCoarseFile},
                                        {"gaze_fine", kFineFile},
                                        {"act", kActFile}};
  if (fs::exists(root / kPolicyFile))
    for (const auto& [k, v] : read_policy_file(root / kPolicyFile)) kv[k] = v;
  if (kv.count("mode") && kv["mode"] != oracle::to_string(mode))
    throw ModelMismatch(dir + " holds a " + kv["mode"] + " policy, asked for " + oracle::to_string(mode));

  PolicyModels m;
  m.mode = mode;
  if (mode == Mode::WithNeck) {
    m.neck = NeckModel::load((root / kv["neck"]).string());
    check_dims(m.neck->dims, world, "neck model");
  }
  m.coarse = GazeCoarseModel::load((root / kv["gaze_coarse"]).string());
  m.fine = GazeFineModel::load((root / kv["gaze_fine"]).string());
  m.act = ActModel::load((root / kv["act"]).string());
  check_dims(m.coarse->dims, world, "coarse gaze model");
  check_dims(m.fine->dims, world, "fine gaze model");
  check_dims(m.act->dims, world, "act model");
  if (m.act->mode != mode)
    throw ModelMismatch(std::string("act checkpoint is ") + oracle::to_string(m.act->mode) + ", asked for " +
                        oracle::to_string(mode));
  return m;
}

// ---------------------------------------------------------------- closed loop

PolicyDriver::PolicyDriver(const PolicyModels& models)
    : m_(models),
      neck_buf_(2, models.coarse->cfg.ensemble_window, models.coarse->cfg.ensemble_decay),
      arm_buf_(10, models.coarse->cfg.ensemble_window, models.coarse->cfg.ensemble_decay) {
  if (!m_.coarse || !m_.fine || !m_.act) throw MissingCheckpoint("policy is missing a sub-model");
  if (m_.mode == Mode::WithNeck && !m_.neck) throw MissingCheckpoint("with-neck policy needs a neck model");
}

void PolicyDriver::reset() {
  neck_buf_.clear();
  arm_buf_.clear();
  last_ = {};
}

sim::Command PolicyDriver::command(const sim::SceneState& s, const sim::StereoFrame& frame) {
  const PolicyConfig& cfg = m_.coarse->cfg;
  const int w = frame.left.width, h = frame.left.height, g = cfg.gaze_grid, c = cfg.crop;
  const bool with_neck = m_.mode == Mode::WithNeck;
  sim::Command cmd;
  cmd.neck_delta = {0.0, 0.0};

  if (with_neck) {
    last_.neck_chunk = m_.neck->predict(frame);
    neck_buf_.push(s.step, last_.neck_chunk);
    const auto d = neck_buf_.blend(s.step);
    cmd.neck_delta = {d[0], d[1]};
  }

  const auto grid = m_.coarse->predict(frame);
  const CropWindow wl = patch_window(grid[0].patch, g, c, w, h), wr = patch_window(grid[1].patch, g, c, w, h);
  const sim::Image cl = crop_image(frame.left, wl);
  GazePoint gl, gr;
  if (cfg.left_eye_only) {
    const auto fine = m_.fine->predict({&cl});
    gl = gr = compose_gaze(grid[0].patch, fine[0].x, fine[0].y, w, h, g, c, wl.shift_x, wl.shift_y);
  } else {
    const sim::Image cr = crop_image(frame.right, wr);
    const auto fine = m_.fine->predict({&cl, &cr});
    gl = compose_gaze(grid[0].patch, fine[0].x, fine[0].y, w, h, g, c, wl.shift_x, wl.shift_y);
    gr = compose_gaze(grid[1].patch, fine[1].x, fine[1].y, w, h, g, c, wr.shift_x, wr.shift_y);
  }
  last_.gaze = {gl.x, gl.y, gr.x, gr.y};

  const Foveated fov = foveate(frame, gl, gr, c);
  last_.act_chunk = m_.act->predict(fov, robot_state(s.arm, last_.gaze, s.neck, with_neck));
  arm_buf_.push(s.step, last_.act_chunk);
  const auto a = arm_buf_.blend(s.step);
  cmd.arm_target = sim::ArmState::from_flat(a.data());
  return cmd;
}

sim::Command OracleDriver::command(const sim::SceneState& s, const sim::StereoFrame&) {
  return oracle::oracle_command(s, mode_);
}

sim::Command ReplayDriver::command(const sim::SceneState& s, const sim::StereoFrame&) {
  if (next_ >= records_.size()) return sim::hold_command(s);
  const auto& r = records_[next_++];
  sim::Command c;
  c.neck_delta = {r.cmd_neck[0], r.cmd_neck[1]};
  c.arm_target = sim::ArmState::from_flat(r.cmd_arm.data());
  return c;
}

PolicyEpisode run_episode(Driver& driver, const sim::SceneState& start) {
  driver.reset();
  PolicyEpisode ep;
  sim::SceneState s = start;
  const int steps = s.cfg().episode_steps;
  ep.trajectory.reserve(static_cast<std::size_t>(steps) + 1);
  ep.commands.reserve(static_cast<std::size_t>(steps));
  for (int t = 0; t < steps; ++t) {
    ep.trajectory.push_back(s);
    const sim::StereoFrame frame = driver.needs_frames() ? sim::render(s) : sim::StereoFrame{};
    const sim::Command cmd = driver.command(s, frame);
    ep.commands.push_back(cmd);
    s = sim::step(s, cmd);
  }
  ep.trajectory.push_back(s);
  ep.success = sim::task_success(s);
  return ep;
}

PolicyEpisode run_policy_episode(const PolicyModels& models, const sim::SceneState& start, Mode mode) {
  if (models.mode != mode)
    throw ModelMismatch(std::string("models are ") + oracle::to_string(models.mode) + ", episode asks for " +
                        oracle::to_string(mode));
  PolicyDriver d(models);
  return run_episode(d, start);
}

}  // namespace gazeneck::policy
