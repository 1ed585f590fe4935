#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "prunelab/metrics.hpp"
#include "prunelab/model.hpp"
#include "prunelab/pruning.hpp"
#include "prunelab/task.hpp"

namespace prunelab {

// --- analytic diagnostics --------------------------------------------------

/// Mean over samples of ||grad_m L(x_i, y_i)||_2 / ||theta_m||_2, with one
/// backward pass per sample. `loss_scale` multiplies the loss. Leaves the
/// model's parameter values untouched (gradients are overwritten).
double first_order_score(Model& model, std::span<const Sample> batch, const Selector& sel,
                         double loss_scale = 1.0);

/// Diagonal Fisher estimate: per parameter, mean of squared per-sample
/// gradients of the NLL loss. Indexed like the registry.
struct FisherDiagonal {
  std::vector<std::vector<double>> values;
  std::size_t samples = 0;
};

FisherDiagonal fisher_diag(Model& model, std::span<const Sample> batch);

/// Arithmetic mean of F over the selector's parameters.
double module_fisher(const FisherDiagonal& fisher, const ParameterRegistry& registry, const Selector& sel);

struct SensitivityEntry {
  std::string module;
  Selector selector;
  Split split = Split::test_clean;
  double s_g = 0.0;
  double s_h = 0.0;
  std::size_t n = 0;
};

struct SensitivityReport {
  std::vector<SensitivityEntry> entries;
};

struct NamedSelector {
  std::string name;
  Selector selector;
};

/// Encoder and decoder modules: every registered parameter of each side.
std::vector<NamedSelector> default_modules();

/// S_g and S_h per (split, module) over the first `n` items of each split.
SensitivityReport diagnose(Model& model, std::span<const Dataset* const> splits,
                           std::span<const NamedSelector> modules, std::size_t n);

// --- empirical sweeps ------------------------------------------------------

/// What a sweep cell prunes: a selector, the global weight pool, or a layer block.
struct PruneTarget {
  enum class Type { selector, global, layer_block };
  Type type = Type::selector;
  Selector selector;
  Side side = Side::encoder;
  Block block = Block::early;

  static PruneTarget of(Selector s) { return {Type::selector, std::move(s), Side::encoder, Block::early}; }
  static PruneTarget global() { return {Type::global, Selector::weights(), Side::encoder, Block::early}; }
  static PruneTarget layer_block(Side side, Block b) { return {Type::layer_block, {}, side, b}; }

  /// Selector-equivalent description (resolved against the model for blocks).
  Selector describe(const ModelConfig& config) const;
  PruneMask apply(Model& model, double rho) const;
  bool operator==(const PruneTarget&) const = default;
};

std::vector<std::vector<int>> decode_all(const Model& model, const Dataset& data);
ErrorRates evaluate(const Model& model, const Dataset& data);

struct SweepCell {
  PruneTarget target;
  Selector selector;  // resolved description of `target`
  double rho = 0.0;
  ErrorRates clean;
  ErrorRates other;
  double delta_other = 0.0;
  double achieved = 0.0;
  bool ok = true;
  std::string status = "ok";
};

struct SweepResult {
  ErrorRates baseline_clean;
  ErrorRates baseline_other;
  std::vector<SweepCell> cells;
};

struct SweepRequest {
  PruneTarget target;
  double rho = 0.0;
};

struct SweepOptions {
  std::size_t jobs = 1;
  /// Evaluation order over requests; result order always follows requests.
  std::optional<std::vector<std::size_t>> order;
};

/// Evaluates every request on its own copy of `model` restored from a
/// snapshot. Cell failures are recorded and do not stop the sweep.
SweepResult run_sweep(const Model& model, std::span<const SweepRequest> requests, const Dataset& clean,
                      const Dataset& other, const SweepOptions& opts = {});

/// Default sparsity grid: 0.1, 0.2, ..., 0.9.
std::vector<double> default_grid();

/// The component rows: encoder self-attn/FFN/conv, decoder self-attn,
/// cross-attn, FFN, token/positional embeddings, output projection, and
/// model-wide layer norms and biases.
std::vector<Selector> component_selectors();

SweepResult component_sweep(const Model& model, std::span<const Selector> selectors, std::span<const double> grid,
                            const Dataset& clean, const Dataset& other, const SweepOptions& opts = {});

/// {encoder, decoder} x {early, mid, late} at one sparsity.
SweepResult layer_block_sweep(const Model& model, const Dataset& clean, const Dataset& other, double rho = 0.5,
                              const SweepOptions& opts = {});

struct PlantedRedundancy {
  double wer_corrupted = 0.0;
  double wer_pruned = 0.0;
  double wer_baseline = 0.0;
  std::size_t corrupted = 0;
};

/// Adds seeded noise (std = half the rho=p magnitude threshold) to a random
/// floor(p*d) subset of the smallest-magnitude half of the selector's
/// weights, evaluates, then magnitude-prunes the selector at p and
/// evaluates again. Works on a copy; `model` is unchanged.
PlantedRedundancy planted_redundancy_check(const Model& model, const Selector& sel, double p, const Dataset& data,
                                           std::uint64_t seed = 99);

}  // namespace prunelab
