#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gazeneck/policy.hpp"
#include "gazeneck/simworld.hpp"

// Grid evaluation, CSV reports.
namespace gazeneck::evalcli {

using oracle::Mode;

struct GroupCount {
  int successes = 0;
  int trials = 0;
  double percent() const { return trials ? 100.0 * successes / trials : 0.0; }
};

struct CellResult {
  sim::GridCell cell;
  int successes = 0;
  int attempts = 0;
};

struct EvalReport {
  Mode mode = Mode::WithNeck;
  std::vector<std::uint64_t> seeds;
  std::uint64_t config_hash = 0;
  int grid_cols = 0, grid_rows = 0;
  std::vector<CellResult> cells;  // usable cells in id order
  std::vector<int> excluded;      // ids of excluded lattice cells
  GroupCount in_view, out_of_view, total;
};

struct EvalOptions {
  int attempts = 2;  // per seed and cell
  // Restricts evaluation to these cell ids; empty means all 44.
  std::vector<int> cells;
  // Worker threads; 0 uses the hardware concurrency.
  int threads = 0;
};

// Builds one driver per seed index. Drivers are used from one thread each.
using DriverFactory = std::function<std::unique_ptr<policy::Driver>(std::size_t seed_index)>;

// Start scene for one trial: the cell center jittered by up to
// placement_jitter per axis, seeded by (attempt, cell id) so every model sees
// the same scenes.
sim::SceneState trial_scene(const sim::WorldConfig& cfg, const sim::GridCell& cell, int attempt);

// seeds.size() x attempts x cells trials.
EvalReport evaluate_grid(const sim::WorldConfig& cfg, Mode mode, const std::vector<std::uint64_t>& seeds,
                         const DriverFactory& factory, const EvalOptions& opt = {});
// Oracle in place of models.
EvalReport evaluate_oracle(const sim::WorldConfig& cfg, Mode mode, const std::vector<std::uint64_t>& seeds,
                           const EvalOptions& opt = {});
// Learned models from ckpt_dir/seed-<S>/ for each seed. Throws MissingCheckpoint.
EvalReport evaluate_checkpoints(const sim::WorldConfig& cfg, Mode mode, const std::string& ckpt_dir,
                                const std::vector<std::uint64_t>& seeds, const EvalOptions& opt = {});
std::string seed_dir(const std::string& ckpt_dir, std::uint64_t seed);

// group,successes,trials,percent,mode,seeds,config_hash with rows InView,
// OutOfView, Total. Throws IoError.
void report_csv(const EvalReport& r, const std::string& path);
// One line per grid row (row 0 first), success counts or X for excluded cells.
// Cells outside the evaluated subset are left empty. Throws IoError.
void heatmap_csv(const EvalReport& r, const std::string& path);

struct ReportRows {
  GroupCount in_view, out_of_view, total;
};
ReportRows read_report_csv(const std::string& path);
// Cells as strings, row-major.
std::vector<std::vector<std::string>> read_heatmap_csv(const std::string& path);

}  // namespace gazeneck::evalcli
