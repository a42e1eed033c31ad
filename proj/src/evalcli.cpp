#include "gazeneck/evalcli.hpp"

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "gazeneck/errors.hpp"
#include "gazeneck/util.hpp"

namespace gazeneck::evalcli {

namespace fs = std::filesystem;

sim::SceneState trial_scene(const sim::WorldConfig& cfg, const sim::GridCell& cell, int attempt) {
  const std::uint64_t seed = mix_seed(0xE7A1ULL + static_cast<std::uint64_t>(attempt), static_cast<std::uint64_t>(cell.id));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-cfg.placement_jitter, cfg.placement_jitter);
  const double dx = u(rng), dy = u(rng);
  const double x = std::clamp(cell.position.x() + dx, 0.0, cfg.area_width);
  const double y = std::clamp(cell.position.y() + dy, cfg.desk_near_y, cfg.desk_near_y + cfg.area_depth);
  return sim::new_scene(cfg, sim::Vec3(x, y, 0.0), seed);
}

EvalReport evaluate_grid(const sim::WorldConfig& cfg, Mode mode, const std::vector<std::uint64_t>& seeds,
                         const DriverFactory& factory, const EvalOptions& opt) {
  if (seeds.empty()) throw ConfigError("evaluation needs at least one seed");
  if (opt.attempts < 1) throw ConfigError("evaluation needs at least one attempt per cell");
  EvalReport rep;
  rep.mode = mode;
  rep.seeds = seeds;
  rep.config_hash = cfg.hash();
  rep.grid_cols = cfg.grid_cols;
  rep.grid_rows = cfg.grid_rows;
  for (const auto& c : sim::grid_lattice(cfg))
    if (c.excluded) rep.excluded.push_back(c.id);
  for (const auto& c : sim::grid_positions(cfg))
    if (opt.cells.empty() || std::count(opt.cells.begin(), opt.cells.end(), c.id)) rep.cells.push_back({c, 0, 0});
  if (rep.cells.empty()) throw ConfigError("no usable cell matches the requested subset");

  struct Trial {
    std::size_t seed_index;
    int attempt;
    std::size_t cell;
  };
  std::vector<Trial> trials;
  for (std::size_t s = 0; s < seeds.size(); ++s)
    for (int a = 0; a < opt.attempts; ++a)
      for (std::size_t c = 0; c < rep.cells.size(); ++c) trials.push_back({s, a, c});
  std::vector<char> ok(trials.size(), 0);

  // Workers pull trials off a shared counter and build their own drivers, so
  // nothing mutable is shared and results do not depend on scheduling.
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const unsigned n_threads =
      std::min<unsigned>(opt.threads > 0 ? static_cast<unsigned>(opt.threads) : hw, static_cast<unsigned>(trials.size()));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    try {
      std::vector<std::unique_ptr<policy::Driver>> drivers(seeds.size());
      for (std::size_t i; (i = next.fetch_add(1)) < trials.size();) {
        const Trial& t = trials[i];
        if (!drivers[t.seed_index]) drivers[t.seed_index] = factory(t.seed_index);
        const auto start = trial_scene(cfg, rep.cells[t.cell].cell, t.attempt);
        ok[i] = policy::run_episode(*drivers[t.seed_index], start).success;
      }
    } catch (...) {
      std::lock_guard lk(failure_mu);
      if (!failure) failure = std::current_exception();
      next = trials.size();
    }
  };
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned k = 0; k < n_threads; ++k) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);

  for (std::size_t i = 0; i < trials.size(); ++i) {
    auto& cell = rep.cells[trials[i].cell];
    ++cell.attempts;
    cell.successes += ok[i];
    GroupCount& g = sim::out_of_view(cell.cell.label) ? rep.out_of_view : rep.in_view;
    ++g.trials;
    g.successes += ok[i];
  }
  rep.total = {rep.in_view.successes + rep.out_of_view.successes, rep.in_view.trials + rep.out_of_view.trials};
  spdlog::info("eval {}: total {}/{} ({:.1f}%), in view {}/{}, out of view {}/{}", oracle::to_string(mode),
               rep.total.successes, rep.total.trials, rep.total.percent(), rep.in_view.successes, rep.in_view.trials,
               rep.out_of_view.successes, rep.out_of_view.trials);
  return rep;
}

EvalReport evaluate_oracle(const sim::WorldConfig& cfg, Mode mode, const std::vector<std::uint64_t>& seeds,
                           const EvalOptions& opt) {
  return evaluate_grid(
      cfg, mode, seeds, [mode](std::size_t) { return std::make_unique<policy::OracleDriver>(mode); }, opt);
}

std::string seed_dir(const std::string& ckpt_dir, std::uint64_t seed) {
  return (fs::path(ckpt_dir) / ("seed-" + std::to_string(seed))).string();
}

EvalReport evaluate_checkpoints(const sim::WorldConfig& cfg, Mode mode, const std::string& ckpt_dir,
                                const std::vector<std::uint64_t>& seeds, const EvalOptions& opt) {
  // Load everything up front so a missing file fails before any rollout.
  std::vector<std::shared_ptr<const policy::PolicyModels>> models;
  for (auto s : seeds)
    models.push_back(std::make_shared<const policy::PolicyModels>(policy::load_policy(seed_dir(ckpt_dir, s), mode, cfg)));
  return evaluate_grid(
      cfg, mode, seeds,
      [models](std::size_t i) -> std::unique_ptr<policy::Driver> {
        // The driver keeps a reference; the shared_ptr in the factory keeps it alive.
        return std::make_unique<policy::PolicyDriver>(*models[i]);
      },
      opt);
}

namespace {

std::ofstream open_out(const std::string& path) {
  const fs::path p(path);
  if (p.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
  }
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  return f;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

void report_csv(const EvalReport& r, const std::string& path) {
  auto f = open_out(path);
  std::string seeds;
  for (std::size_t i = 0; i < r.seeds.size(); ++i) seeds += (i ? ";" : "") + std::to_string(r.seeds[i]);
  f << "group,successes,trials,percent,mode,seeds,config_hash\n";
  const std::pair<const char*, const GroupCount*> rows[] = {
      {"InView", &r.in_view}, {"OutOfView", &r.out_of_view}, {"Total", &r.total}};
  for (const auto& [name, g] : rows)
    f << fmt::format("{},{},{},{:.1f},{},{},{:016x}\n", name, g->successes, g->trials, g->percent(),
                     oracle::to_string(r.mode), seeds, r.config_hash);
  if (!f) throw IoError("write failed: " + path);
}

void heatmap_csv(const EvalReport& r, const std::string& path) {
  std::vector<std::vector<std::string>> grid(r.grid_rows, std::vector<std::string>(r.grid_cols));
  for (int id : r.excluded) grid[id / r.grid_cols][id % r.grid_cols] = "X";
  for (const auto& c : r.cells) grid[c.cell.row][c.cell.col] = std::to_string(c.successes);
  auto f = open_out(path);
  for (const auto& row : grid) {
    for (std::size_t i = 0; i < row.size(); ++i) f << (i ? "," : "") << row[i];
    f << "\n";
  }
  if (!f) throw IoError("write failed: " + path);
}

ReportRows read_report_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path);
  ReportRows rows;
  std::string line;
  std::getline(f, line);
  while (std::getline(f, line)) {
    const auto c = split_csv(line);
    if (c.size() < 3) throw IoError("malformed report row: " + line);
    const GroupCount g{std::stoi(c[1]), std::stoi(c[2])};
    if (c[0] == "InView") rows.in_view = g;
    else if (c[0] == "OutOfView") rows.out_of_view = g;
    else if (c[0] == "Total") rows.total = g;
    else throw IoError("unknown report group: " + c[0]);
  }
  return rows;
}

std::vector<std::vector<std::string>> read_heatmap_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path);
  std::vector<std::vector<std::string>> out;
  std::string line;
  while (std::getline(f, line)) out.push_back(split_csv(line));
  return out;
}

}  // namespace gazeneck::evalcli
