#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include <spdlog/spdlog.h>

#include "gazeneck/errors.hpp"
#include "gazeneck/policy.hpp"
#include "gazeneck/util.hpp"

namespace gazeneck::policy {

using learn::Tensor;

const char* to_string(ModelKind k) {
  switch (k) {
    case ModelKind::Neck: return "neck";
    case ModelKind::GazeCoarse: return "gaze-coarse";
    case ModelKind::GazeFine: return "gaze-fine";
    case ModelKind::Act: return "act";
  }
  return "?";
}

ModelKind parse_model_kind(const std::string& s) {
  for (ModelKind k : {ModelKind::Neck, ModelKind::GazeCoarse, ModelKind::GazeFine, ModelKind::Act})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown model '" + s + "' (expected neck, gaze-coarse, gaze-fine or act)");
}

const char* checkpoint_file(ModelKind k) {
  switch (k) {
    case ModelKind::Neck: return kNeckFile;
    case ModelKind::GazeCoarse: return kCoarseFile;
    case ModelKind::GazeFine: return kFineFile;
    case ModelKind::Act: return kActFile;
  }
  return "";
}

std::vector<sim::SceneState> replay_states(const dataset::Episode& ep) {
  const auto cfg = sim::WorldConfig::parse(ep.meta.config);
  const auto& p = ep.meta.object_position;
  sim::SceneState s = sim::new_scene(cfg, sim::Vec3(p[0], p[1], 0.0), ep.meta.seed);
  std::vector<sim::SceneState> out;
  out.reserve(ep.records.size());
  for (const auto& r : ep.records) {
    out.push_back(s);
    sim::Command c;
    c.neck_delta = {r.cmd_neck[0], r.cmd_neck[1]};
    c.arm_target = sim::ArmState::from_flat(r.cmd_arm.data());
    s = sim::step(s, c);
  }
  return out;
}

namespace {

bool has(const std::vector<ModelKind>& kinds, ModelKind k) {
  return std::find(kinds.begin(), kinds.end(), k) != kinds.end();
}

// Last step at which the arm or the neck still moves; later steps are idle.
int last_active_step(const dataset::Episode& ep) {
  int last = 0;
  for (std::size_t t = 0; t < ep.records.size(); ++t) {
    const auto& r = ep.records[t];
    // Settled trackers leave residual commands around 1e-16.
    const bool neck_moves = std::abs(r.cmd_neck[0]) > 1e-9 || std::abs(r.cmd_neck[1]) > 1e-9;
    bool arm_moves = false;
    if (t + 1 < ep.records.size())
      for (std::size_t k = 0; k < 10; ++k) arm_moves |= std::abs(ep.records[t + 1].arm[k] - r.arm[k]) > 1e-9;
    if (neck_moves || arm_moves) last = static_cast<int>(t);
  }
  return last;
}

void append(std::vector<std::uint8_t>& dst, const std::vector<std::uint8_t>& src) {
  dst.insert(dst.end(), src.begin(), src.end());
}

sim::Image frame_image(const dataset::Episode& ep, int step, int eye) {
  sim::Image img(ep.meta.width, ep.meta.height);
  std::copy_n(ep.frame(step, eye), img.rgb.size(), img.rgb.begin());
  return img;
}

}  // namespace

TrainingSet build_training_set(const std::string& data_dir, const PolicyConfig& cfg, const TrainOptions& opt,
                               const std::vector<ModelKind>& kinds) {
  TrainingSet set;
  set.episode_dirs = dataset::list_episodes(data_dir);
  const int n = static_cast<int>(set.episode_dirs.size());
  auto [train, test] = dataset::split_ids(n, opt.train_fraction, opt.split_seed);
  set.train_ids = train;
  set.test_ids = test;
  const auto first = dataset::read_meta(set.episode_dirs.at(0));
  set.world = sim::WorldConfig::parse(first.config);
  set.dims = {first.width, first.height};
  set.mode = first.with_neck ? Mode::WithNeck : Mode::NoNeck;
  const int w = set.dims.width, h = set.dims.height, g = cfg.gaze_grid, c = cfg.crop, d = cfg.downsample;
  const bool with_neck = set.mode == Mode::WithNeck;
  const bool want_neck = has(kinds, ModelKind::Neck) && with_neck;

  set.neck.image_block = static_cast<std::size_t>(2) * (w / d) * (h / d) * 3;
  set.neck.target_dim = static_cast<std::size_t>(cfg.neck_horizon) * 2;
  set.coarse.image_block = static_cast<std::size_t>(w / d) * (h / d) * 3;
  set.fine.image_block = static_cast<std::size_t>(c) * c * 3;
  set.fine.target_dim = 2;
  set.act.image_block = static_cast<std::size_t>(2) * c * c * 3;
  set.act.input_dim = static_cast<std::size_t>(state_dim(set.mode));
  set.act.target_dim = static_cast<std::size_t>(cfg.act_horizon) * 10;

  std::vector<int> ids = set.train_ids;
  std::sort(ids.begin(), ids.end());
  for (int id : ids) {
    const auto ep = dataset::read_episode(set.episode_dirs[id]);
    if (ep.meta.width != w || ep.meta.height != h || ep.meta.with_neck != with_neck)
      throw FormatError(set.episode_dirs[id] + ": episode does not match the rest of the dataset", 0);
    const int steps = static_cast<int>(ep.records.size());
    const int last = std::min(steps - 1, last_active_step(ep) + opt.idle_tail);
    for (int t = 0; t <= last; t += std::max(1, opt.stride)) {
      const auto& r = ep.records[t];
      const std::uint8_t* left = ep.frame(t, 0);
      const std::uint8_t* right = ep.frame(t, 1);
      if (want_neck) {
        append(set.neck.images, downsample_rgb(left, w, h, d));
        append(set.neck.images, downsample_rgb(right, w, h, d));
        for (int k = 0; k < cfg.neck_horizon; ++k) {
          const int u = t + k;
          for (int a = 0; a < 2; ++a)
            set.neck.targets.push_back(
                u < steps ? static_cast<float>(ep.records[u].cmd_neck[a] / set.world.neck_speed) : 0.0f);
        }
        ++set.neck.count;
      }
      if (r.gaze_valid) {
        for (int eye = 0; eye < (cfg.left_eye_only ? 1 : 2); ++eye) {
          const double gx = r.gaze[2 * eye], gy = r.gaze[2 * eye + 1];
          const PatchIndex p = patch_of(gx, gy, w, h, g);
          if (has(kinds, ModelKind::GazeCoarse)) {
            append(set.coarse.images, downsample_rgb(eye ? right : left, w, h, d));
            set.coarse.labels.push_back(p.j * g + p.i);
            ++set.coarse.count;
          }
          if (has(kinds, ModelKind::GazeFine)) {
            const CropWindow win = patch_window(p, g, c, w, h);
            append(set.fine.images, crop_image(frame_image(ep, t, eye), win).rgb);
            set.fine.targets.push_back(static_cast<float>((gx - win.ox) / c));
            set.fine.targets.push_back(static_cast<float>((gy - win.oy) / c));
            ++set.fine.count;
          }
        }
      }
      if (has(kinds, ModelKind::Act)) {
        sim::StereoFrame f;
        f.left = frame_image(ep, t, 0);
        f.right = frame_image(ep, t, 1);
        const Foveated fov = foveate(f, {r.gaze[0], r.gaze[1]}, {r.gaze[2], r.gaze[3]}, c);
        append(set.act.images, fov.left.rgb);
        append(set.act.images, fov.right.rgb);
        const auto st = robot_state(sim::ArmState::from_flat(r.arm.data()), r.gaze,
                                    sim::NeckPose{r.neck[0], r.neck[1]}, with_neck);
        set.act.inputs.insert(set.act.inputs.end(), st.begin(), st.end());
        // Row k is the arm state reached after step t + k.
        for (int k = 0; k < cfg.act_horizon; ++k) {
          const int u = std::min(t + 1 + k, steps - 1);
          for (double v : ep.records[u].arm) set.act.targets.push_back(static_cast<float>(v));
        }
        ++set.act.count;
      }
    }
  }
  spdlog::info("training set: {} train / {} test episodes; samples neck {} coarse {} fine {} act {}",
               set.train_ids.size(), set.test_ids.size(), set.neck.count, set.coarse.count, set.fine.count,
               set.act.count);
  return set;
}

namespace {

template <class Step>
TrainReport run_epochs(ModelKind kind, int count, const TrainOptions& opt, learn::Adam& adam, learn::Rng& rng,
                       Step&& step) {
  if (count == 0) throw ConfigError(std::string("no training samples for ") + to_string(kind));
  TrainReport rep;
  rep.kind = kind;
  rep.samples = count;
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<int> order(count);
  std::iota(order.begin(), order.end(), 0);
  for (int e = 0; e < opt.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0;
    int batches = 0;
    for (int b = 0; b < count; b += opt.batch) {
      const std::vector<int> idx(order.begin() + b, order.begin() + std::min(count, b + opt.batch));
      adam.zero_grad();
      const Tensor loss = step(idx);
      learn::backward(loss);
      adam.step();
      total += loss.item();
      ++batches;
      ++rep.iterations;
    }
    const double mean = total / batches;
    if (e == 0) rep.first_epoch_loss = mean;
    rep.final_epoch_loss = mean;
    spdlog::debug("{} epoch {} loss {:.5f}", to_string(kind), e + 1, mean);
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  spdlog::info("{}: {} samples, {} epochs, loss {:.4f} -> {:.4f} ({:.1f} s)", to_string(kind), count, opt.epochs,
               rep.first_epoch_loss, rep.final_epoch_loss, rep.seconds);
  return rep;
}

// Gathers HWC uint8 image blocks (n_images each w x h) into [B, 3*n_images, h, w].
Tensor gather_images(const SampleCache& cache, const std::vector<int>& idx, int n_images, int w, int h) {
  const std::size_t plane = static_cast<std::size_t>(w) * h * 3;
  std::vector<float> v(idx.size() * n_images * plane);
  for (std::size_t b = 0; b < idx.size(); ++b)
    for (int k = 0; k < n_images; ++k)
      to_chw(cache.images.data() + idx[b] * cache.image_block + k * plane, w, h,
             v.data() + (b * n_images + k) * plane);
  return Tensor::from({static_cast<int>(idx.size()), 3 * n_images, h, w}, std::move(v));
}

Tensor gather_rows(const std::vector<float>& src, std::size_t dim, const std::vector<int>& idx) {
  std::vector<float> v(idx.size() * dim);
  for (std::size_t b = 0; b < idx.size(); ++b)
    std::copy_n(src.data() + idx[b] * dim, dim, v.data() + b * dim);
  return Tensor::from({static_cast<int>(idx.size()), static_cast<int>(dim)}, std::move(v));
}

}  // namespace

TrainReport train_model(const TrainingSet& set, ModelKind kind, const PolicyConfig& cfg, const TrainOptions& opt,
                        const std::string& out_path) {
  if (opt.epochs < 1 || opt.batch < 1) throw ConfigError("epochs and batch must be positive");
  learn::Rng rng(mix_seed(opt.seed, 0x7a11));
  const learn::AdamConfig ac{opt.lr};
  const int dw = set.dims.width / cfg.downsample, dh = set.dims.height / cfg.downsample, c = cfg.crop;
  TrainReport rep;

  switch (kind) {
    case ModelKind::Neck: {
      if (set.mode != Mode::WithNeck) throw ConfigError("a no-neck dataset has no neck motion to learn");
      NeckModel m(cfg, set.dims, set.world.neck_speed, opt.seed);
      learn::Adam adam(m.params(), ac);
      rep = run_epochs(kind, set.neck.count, opt, adam, rng, [&](const std::vector<int>& idx) {
        return learn::l1_loss(m.forward(gather_images(set.neck, idx, 2, dw, dh)),
                              gather_rows(set.neck.targets, set.neck.target_dim, idx));
      });
      m.save(out_path);
      break;
    }
    case ModelKind::GazeCoarse: {
      GazeCoarseModel m(cfg, set.dims, opt.seed);
      learn::Adam adam(m.params(), ac);
      rep = run_epochs(kind, set.coarse.count, opt, adam, rng, [&](const std::vector<int>& idx) {
        std::vector<int> labels;
        for (int i : idx) labels.push_back(set.coarse.labels[i]);
        return learn::cross_entropy(m.forward(gather_images(set.coarse, idx, 1, dw, dh)), labels);
      });
      m.save(out_path);
      break;
    }
    case ModelKind::GazeFine: {
      GazeFineModel m(cfg, set.dims, opt.seed);
      learn::Adam adam(m.params(), ac);
      rep = run_epochs(kind, set.fine.count, opt, adam, rng, [&](const std::vector<int>& idx) {
        return learn::mse_loss(m.forward(gather_images(set.fine, idx, 1, c, c)), gather_rows(set.fine.targets, 2, idx));
      });
      m.save(out_path);
      break;
    }
    case ModelKind::Act: {
      ActModel m(cfg, set.dims, set.mode, opt.seed);
      const int s = state_dim(set.mode), k = cfg.act_horizon;
      m.state_norm = Normalizer::fit(set.act.inputs, s, 1e-2f);
      m.action_norm = Normalizer::fit(set.act.targets, 10, 1e-2f);
      std::vector<float> states = set.act.inputs, actions = set.act.targets;
      for (int i = 0; i < set.act.count; ++i) {
        m.state_norm.apply(states.data() + static_cast<std::size_t>(i) * s);
        for (int r = 0; r < k; ++r) m.action_norm.apply(actions.data() + (static_cast<std::size_t>(i) * k + r) * 10);
      }
      learn::Adam adam(m.params(), ac);
      rep = run_epochs(kind, set.act.count, opt, adam, rng, [&](const std::vector<int>& idx) {
        const Tensor st = gather_rows(states, s, idx), act = gather_rows(actions, set.act.target_dim, idx);
        auto [mu, logvar] = m.encode(st, act);
        const Tensor z = learn::CvaeHeads::sample(mu, logvar, rng);
        const Tensor pred = m.decode(gather_images(set.act, idx, 2, c, c), st, z);
        return learn::add(learn::l1_loss(pred, act), learn::scale(learn::kl_loss(mu, logvar), opt.kl_weight));
      });
      m.save(out_path);
      break;
    }
  }
  return rep;
}

std::vector<GazeErrorSample> gaze_errors(const GazeCoarseModel& coarse, const GazeFineModel& fine,
                                         const std::vector<std::string>& episode_dirs, int stride) {
  std::vector<GazeErrorSample> out;
  const int g = coarse.cfg.gaze_grid, c = coarse.cfg.crop;
  for (const auto& dir : episode_dirs) {
    const auto ep = dataset::read_episode(dir);
    const auto states = replay_states(ep);
    const auto& cfg = states.front().cfg();
    const auto k = sim::intrinsics(cfg);
    for (std::size_t t = 0; t < states.size(); t += std::max(1, stride)) {
      const auto& s = states[t];
      if (!ep.records[t].gaze_valid) continue;
      const oracle::Phase ph = oracle::phase_of(s);
      if (ph != oracle::Phase::Approach && ph != oracle::Phase::Descend && ph != oracle::Phase::Close) continue;
      sim::StereoFrame f;
      f.left = frame_image(ep, static_cast<int>(t), 0);
      f.right = frame_image(ep, static_cast<int>(t), 1);
      const auto grid = coarse.predict(f);
      const auto eyes = sim::eye_poses(cfg, s.neck);
      for (int eye = 0; eye < (coarse.cfg.left_eye_only ? 1 : 2); ++eye) {
        const auto truth = geometry::project_point(k, eyes[eye], s.object);
        if (!truth) continue;
        const CropWindow win = patch_window(grid[eye].patch, g, c, cfg.width, cfg.height);
        const sim::Image crop = crop_image(eye ? f.right : f.left, win);
        const GazePoint fp = fine.predict({&crop})[0];
        const GazePoint p = compose_gaze(grid[eye].patch, fp.x, fp.y, cfg.width, cfg.height, g, c, win.shift_x,
                                         win.shift_y);
        const double lx = ep.records[t].gaze[2 * eye], ly = ep.records[t].gaze[2 * eye + 1];
        out.push_back({std::hypot(p.x - lx, p.y - ly), sim::eccentricity(cfg, truth->x, truth->y),
                       std::hypot(p.x - truth->x, p.y - truth->y)});
      }
    }
  }
  return out;
}

std::vector<double> act_step0_errors(const ActModel& act, const std::vector<std::string>& episode_dirs, int stride) {
  std::vector<double> out;
  const int c = act.cfg.crop;
  for (const auto& dir : episode_dirs) {
    const auto ep = dataset::read_episode(dir);
    const int steps = static_cast<int>(ep.records.size());
    const int last = std::min(steps - 2, last_active_step(ep));
    for (int t = 0; t <= last; t += std::max(1, stride)) {
      const auto& r = ep.records[t];
      sim::StereoFrame f;
      f.left = frame_image(ep, t, 0);
      f.right = frame_image(ep, t, 1);
      const Foveated fov = foveate(f, {r.gaze[0], r.gaze[1]}, {r.gaze[2], r.gaze[3]}, c);
      const auto chunk = act.predict(fov, robot_state(sim::ArmState::from_flat(r.arm.data()), r.gaze,
                                                      sim::NeckPose{r.neck[0], r.neck[1]}, act.mode == Mode::WithNeck));
      const auto& next = ep.records[t + 1].arm;
      out.push_back(std::sqrt((chunk[0] - next[0]) * (chunk[0] - next[0]) + (chunk[1] - next[1]) * (chunk[1] - next[1]) +
                              (chunk[2] - next[2]) * (chunk[2] - next[2])));
    }
  }
  return out;
}

}  // namespace gazeneck::policy
