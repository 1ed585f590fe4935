#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "prunelab/planner.hpp"
#include "prunelab/sensitivity.hpp"

namespace prunelab {

/// Everything a run depends on. Parsed from one JSON file:
///
///   { "seed": 1234,
///     "model": {enc_layers, dec_layers, d_model, n_heads, d_ffn, vocab_size, d_in,
///               max_src_len, max_tgt_len, conv_kernel},
///     "task": {seed, n_train, n_test, t_min, t_max, vocab_size, d_in,
///              sigma_clean, sigma_other, frames_per_token},
///     "train": {steps, lr, batch},
///     "sweep": {grid: [...], layer_block_rho},
///     "diagnostics": {n},
///     "allocation": {target, epsilon},
///     "plan": "path/to/plan.json",
///     "output_dir": "out" }
///
/// Every key is optional; unknown keys are rejected. `seed` seeds both the
/// weight init and the minibatch order.
struct RunConfig {
  std::uint64_t seed = 1234;
  ModelConfig model;
  TaskSpec task;
  TrainOptions train;
  std::vector<double> grid = default_grid();
  double layer_block_rho = 0.5;
  std::size_t diag_n = 64;
  double alloc_target = 0.4;
  double alloc_epsilon = 1.0;
  std::optional<std::string> plan;
  std::string output_dir = "prune-lab-out";
};

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

/// Fully resolved config with defaults filled in, minus output_dir.
nlohmann::json canonical_json(const RunConfig& cfg);
/// Hex SHA-256 of canonical_json(cfg).dump().
std::string config_hash(const RunConfig& cfg);
std::string sha256_hex(std::string_view bytes);

enum class SweepScope { global, side, layer_blocks, components };
std::string_view to_string(SweepScope s);
SweepScope parse_scope(std::string_view s);

/// Artifact names inside the output directory.
namespace artifact {
inline constexpr const char* kManifest = "manifest.json";
inline constexpr const char* kCheckpoint = "model.ckpt";
inline constexpr const char* kLossCurve = "loss_curve.csv";
inline constexpr const char* kSensitivityCsv = "sensitivity.csv";
inline constexpr const char* kSensitivityJson = "sensitivity.json";
inline constexpr const char* kGreedyPlan = "plan_greedy.json";
inline constexpr const char* kPlanUsed = "plan_used.json";
inline constexpr const char* kPrunedCheckpoint = "pruned.ckpt";
inline constexpr const char* kCompressionCsv = "compression.csv";
inline constexpr const char* kCompressionJson = "compression.json";
inline constexpr const char* kReport = "report.json";
std::string sweep_csv(SweepScope s);
std::string sweep_json(SweepScope s);
}  // namespace artifact

/// A command's view of the world: the parsed config, its hash, and where
/// artifacts go. Each written artifact is recorded in manifest.json with the
/// config hash, its SHA-256 and a creation timestamp.
class Workspace {
 public:
  Workspace(RunConfig cfg, std::filesystem::path out_dir, std::size_t jobs = 1);

  const RunConfig& config() const { return cfg_; }
  const std::string& hash() const { return hash_; }
  const std::filesystem::path& dir() const { return dir_; }
  std::size_t jobs() const { return jobs_; }

  std::filesystem::path path(std::string_view name) const { return dir_ / std::string(name); }
  /// Atomically writes `bytes` and records it in the manifest. `extra` is
  /// merged into the manifest entry.
  void write(std::string_view name, const std::string& bytes, std::string_view command,
             const nlohmann::json& extra = nlohmann::json::object());
  void record(std::string_view name, std::string_view command, const nlohmann::json& extra = nlohmann::json::object());

  /// Loads a checkpoint and checks it against the configured model (MismatchError otherwise).
  Model load_model(const std::optional<std::filesystem::path>& checkpoint) const;
  TaskData data() const;

 private:
  RunConfig cfg_;
  std::string hash_;
  std::filesystem::path dir_;
  std::size_t jobs_;
};

/// Output directory precedence: explicit flag, then $PRUNE_LAB_OUT_DIR, then the config.
std::filesystem::path resolve_out_dir(const RunConfig& cfg, const std::optional<std::filesystem::path>& flag);

struct TrainResult {
  std::vector<double> curve;
};
TrainResult cmd_train(Workspace& ws);

SensitivityReport cmd_diagnose(Workspace& ws, const std::optional<std::filesystem::path>& checkpoint);

SweepResult cmd_sweep(Workspace& ws, const std::optional<std::filesystem::path>& checkpoint, SweepScope scope);

/// Greedy allocation from the component sweep artifact under the config's
/// target and epsilon; writes plan_greedy.json.
PrunePlan cmd_allocate(Workspace& ws);

struct PlanSource {
  std::optional<std::filesystem::path> path;
  bool recipe = false;
};

struct CompressionRow {
  std::string label;
  ErrorRates rates;
  CostReport cost;
};
std::vector<CompressionRow> cmd_compress(Workspace& ws, const std::optional<std::filesystem::path>& checkpoint,
                                         const PlanSource& source);

/// Validates the manifest (every artifact present, digest intact, one config
/// hash) and merges the JSON artifacts into report.json. Throws
/// ConsistencyError on any disagreement.
nlohmann::json cmd_report(const std::filesystem::path& out_dir);

// CSV renderers, shared with tests.
std::string format_sig6(double v);
std::string format_pct2(double fraction);
std::string sweep_csv(const SweepResult& r);
std::string sensitivity_csv(const SensitivityReport& r);
std::string compression_csv(const std::vector<CompressionRow>& rows);

nlohmann::json to_json(const ErrorRates& r);
nlohmann::json to_json(const SweepResult& r);
/// Enough of a sweep to re-run allocation: targets, rho, status and deltas.
SweepResult sweep_from_json(const nlohmann::json& j);

/// Maps a library error to the CLI's exit code (2 config, 3 training,
/// 4 mismatch, 5 plan, 6 consistency, 1 anything else).
int exit_code_for(const std::exception& e);

}  // namespace prunelab
