// Command-line front end: demo generation, training, grid evaluation, replay
// and the teleoperation server.

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <boost/asio/io_context.hpp>
#include <boost/asio/signal_set.hpp>
#include <spdlog/spdlog.h>

#include "gazeneck/dataset.hpp"
#include "gazeneck/errors.hpp"
#include "gazeneck/evalcli.hpp"
#include "gazeneck/oracle.hpp"
#include "gazeneck/policy.hpp"
#include "gazeneck/teleop.hpp"

using namespace gazeneck;
namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kModes{"with-neck", "no-neck"};
const std::vector<std::string> kModels{"neck", "gaze-coarse", "gaze-fine", "act"};

sim::WorldConfig world_from(const std::string& path) {
  return path.empty() ? sim::WorldConfig{} : sim::WorldConfig::load(path);
}

policy::PolicyConfig policy_from(const std::string& path) {
  if (path.empty()) return {};
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path);
  return policy::PolicyConfig::from_json(nlohmann::json::parse(f));
}

void write_ppm(const fs::path& p, const sim::Image& img) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot write " + p.string());
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
}

struct GenDemos {
  int episodes = 0;
  std::string mode, out, config;
  std::uint64_t seed = 0;
  int run() const {
    const auto cfg = world_from(config);
    const auto s = oracle::generate_demos(cfg, episodes, oracle::parse_mode(mode), seed, out);
    std::cout << "episodes " << s.episodes << ", retries " << s.retries << ", out-of-view placements "
              << s.outside_placements << ", rejected out-of-view " << s.rejected_outside << "\n";
    return 0;
  }
};

struct Train {
  std::string data, model, out, policy_config;
  std::uint64_t seed = 1;
  policy::TrainOptions opt;
  int run() {
    opt.seed = seed;
    const auto kind = policy::parse_model_kind(model);
    const auto pcfg = policy_from(policy_config);
    const auto set = policy::build_training_set(data, pcfg, opt, {kind});
    const fs::path out_path(out);
    if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
    const auto rep = policy::train_model(set, kind, pcfg, opt, out);
    // Keep a policy file next to the checkpoints so the directory loads as a whole.
    const fs::path dir = out_path.has_parent_path() ? out_path.parent_path() : fs::path(".");
    if (!fs::exists(dir / policy::kPolicyFile)) policy::write_policy_file(dir.string(), set.mode);
    std::cout << policy::to_string(kind) << ": " << rep.samples << " samples, loss " << rep.first_epoch_loss
              << " -> " << rep.final_epoch_loss << " in " << rep.seconds << " s\n";
    return 0;
  }
};

struct Eval {
  std::string mode, ckpt_dir, report, heatmap, config;
  std::vector<std::uint64_t> seeds;
  bool oracle = false;
  evalcli::EvalOptions opt;
  int run() const {
    const auto cfg = world_from(config);
    const auto m = oracle::parse_mode(mode);
    const auto r = oracle ? evalcli::evaluate_oracle(cfg, m, seeds, opt)
                          : evalcli::evaluate_checkpoints(cfg, m, ckpt_dir, seeds, opt);
    if (!report.empty()) evalcli::report_csv(r, report);
    if (!heatmap.empty()) evalcli::heatmap_csv(r, heatmap);
    std::printf("%-10s %5s %6s %7s\n", "group", "ok", "trials", "rate");
    for (const auto& [name, g] : {std::pair{"InView", r.in_view}, std::pair{"OutOfView", r.out_of_view},
                                  std::pair{"Total", r.total}})
      std::printf("%-10s %5d %6d %6.1f%%\n", name, g.successes, g.trials, g.percent());
    return 0;
  }
};

struct Replay {
  std::string episode, render_dir;
  int run() const {
    const auto ep = dataset::read_episode(episode);
    const auto states = policy::replay_states(ep);
    std::size_t mismatches = 0;
    for (std::size_t t = 0; t < states.size(); ++t) {
      const auto& r = ep.records[t];
      if (states[t].arm.flat() != r.arm || states[t].neck.yaw != r.neck[0] || states[t].neck.pitch != r.neck[1]) {
        if (mismatches++ == 0) spdlog::error("replay diverges from the recording at step {}", t);
      }
    }
    sim::Command last;
    last.neck_delta = {ep.records.back().cmd_neck[0], ep.records.back().cmd_neck[1]};
    last.arm_target = sim::ArmState::from_flat(ep.records.back().cmd_arm.data());
    const bool replay_success = sim::task_success(sim::step(states.back(), last));
    if (!render_dir.empty()) {
      fs::create_directories(render_dir);
      for (std::size_t t = 0; t < states.size(); ++t) {
        const auto f = sim::render(states[t]);
        char name[64];
        std::snprintf(name, sizeof name, "step_%04zu_left.ppm", t);
        write_ppm(fs::path(render_dir) / name, f.left);
        std::snprintf(name, sizeof name, "step_%04zu_right.ppm", t);
        write_ppm(fs::path(render_dir) / name, f.right);
      }
    }
    std::cout << ep.records.size() << " steps, " << mismatches << " mismatched, recorded success "
              << (ep.meta.success ? "yes" : "no") << ", replayed success " << (replay_success ? "yes" : "no") << "\n";
    return mismatches == 0 ? 0 : 1;
  }
};

struct Serve {
  int port = 8765;
  std::string config, out, bind = "127.0.0.1";
  teleop::TeleopOptions opt;
  int run() {
    teleop::TeleopServer server(world_from(config), out, opt);
    const int p = server.bind(port, bind);
    std::cout << "teleop server on " << bind << ":" << p << " (NDJSON over TCP or WebSocket); Ctrl-C to stop\n"
              << std::flush;
    boost::asio::io_context sig_io;
    boost::asio::signal_set signals(sig_io, SIGINT, SIGTERM);
    signals.async_wait([&](const boost::system::error_code& ec, int) {
      if (!ec) server.stop();
    });
    std::thread sig_thread([&] { sig_io.run(); });
    server.run();
    sig_io.stop();
    sig_thread.join();
    std::cout << server.session().episodes_written() << " episodes recorded\n";
    return 0;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gaze and neck guided imitation learning in a simulated desk world"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace|debug|info|warn|error|off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

  GenDemos gen;
  auto* g = app.add_subcommand("gen-demos", "Record oracle demonstrations into a dataset directory");
  g->add_option("--episodes", gen.episodes, "Number of episodes")->required()->check(CLI::PositiveNumber);
  g->add_option("--mode", gen.mode, "with-neck or no-neck")->required()->check(CLI::IsMember(kModes));
  g->add_option("--seed", gen.seed, "Dataset seed")->required();
  g->add_option("--out", gen.out, "Output dataset directory")->required();
  g->add_option("--config", gen.config, "World config file (key = value)")->check(CLI::ExistingFile);

  Train tr;
  auto* t = app.add_subcommand("train", "Train one sub-model on a dataset");
  t->add_option("--data", tr.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  t->add_option("--model", tr.model, "neck, gaze-coarse, gaze-fine or act")->required()->check(CLI::IsMember(kModels));
  t->add_option("--seed", tr.seed, "Initialisation and shuffling seed")->required();
  t->add_option("--epochs", tr.opt.epochs, "Epochs (at most 50 in the reference runs)")
      ->required()
      ->check(CLI::PositiveNumber);
  t->add_option("--out", tr.out, "Checkpoint path")->required();
  t->add_option("--batch", tr.opt.batch, "Batch size")->check(CLI::PositiveNumber);
  t->add_option("--lr", tr.opt.lr, "Adam learning rate")->check(CLI::PositiveNumber);
  t->add_option("--kl-weight", tr.opt.kl_weight, "KL weight for the act model");
  t->add_option("--stride", tr.opt.stride, "Keep every n-th step")->check(CLI::PositiveNumber);
  t->add_option("--idle-tail", tr.opt.idle_tail, "Steps kept after the last motion")->check(CLI::NonNegativeNumber);
  t->add_option("--policy-config", tr.policy_config, "Model hyperparameters (JSON)")->check(CLI::ExistingFile);

  Eval ev;
  auto* e = app.add_subcommand("eval", "Run the 44-cell grid evaluation");
  e->add_option("--mode", ev.mode, "with-neck or no-neck")->required()->check(CLI::IsMember(kModes));
  e->add_option("--ckpt-dir", ev.ckpt_dir, "Directory holding seed-<S>/ model directories");
  e->add_option("--seeds", ev.seeds, "Training seeds, comma separated")->required()->delimiter(',');
  e->add_option("--report", ev.report, "Aggregate CSV output");
  e->add_option("--heatmap", ev.heatmap, "Per-cell CSV output");
  e->add_option("--config", ev.config, "World config file")->check(CLI::ExistingFile);
  e->add_option("--cells", ev.opt.cells, "Restrict to these cell ids, comma separated")->delimiter(',');
  e->add_option("--attempts", ev.opt.attempts, "Attempts per seed and cell")->check(CLI::PositiveNumber);
  e->add_option("--threads", ev.opt.threads, "Worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);
  e->add_flag("--oracle", ev.oracle, "Evaluate the scripted oracle instead of checkpoints");

  Replay rp;
  auto* r = app.add_subcommand("replay", "Re-simulate a recorded episode and check it step by step");
  r->add_option("--episode", rp.episode, "Episode directory")->required()->check(CLI::ExistingDirectory);
  r->add_option("--render-dir", rp.render_dir, "Write re-rendered frames as PPM files here");

  Serve sv;
  auto* s = app.add_subcommand("serve", "Serve an interactive teleoperation session");
  s->add_option("--port", sv.port, "TCP port (0 picks one)")->check(CLI::Range(0, 65535));
  s->add_option("--config", sv.config, "World config file")->check(CLI::ExistingFile);
  s->add_option("--out", sv.out, "Dataset directory for recordings")->required();
  s->add_option("--bind", sv.bind, "Listen address");
  s->add_option("--lag", sv.opt.lag_steps, "Camera lag behind the head, in sim steps")->check(CLI::NonNegativeNumber);
  s->add_option("--seed", sv.opt.seed, "Seed for recording placements");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? 0 : 2;
  }
  spdlog::set_level(spdlog::level::from_str(log_level));
  if (e->parsed() && !ev.oracle && ev.ckpt_dir.empty()) {
    std::cerr << "eval: --ckpt-dir is required unless --oracle is given\n";
    return 2;
  }

  try {
    if (g->parsed()) return gen.run();
    if (t->parsed()) return tr.run();
    if (e->parsed()) return ev.run();
    if (r->parsed()) return rp.run();
    if (s->parsed()) return sv.run();
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 2;
}
