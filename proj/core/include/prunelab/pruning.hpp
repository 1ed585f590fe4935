#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "prunelab/model.hpp"

namespace prunelab {

/// Which weights a prune call removed. `retained[i]` parallels the tensor
/// of `param_ids[i]`; true means kept.
struct PruneMask {
  Selector selector;
  double rho = 0.0;
  std::vector<std::size_t> param_ids;
  std::vector<std::vector<bool>> retained;
  std::size_t pooled = 0;  // weights covered
  std::size_t pruned = 0;

  double achieved() const { return pooled ? static_cast<double>(pruned) / static_cast<double>(pooled) : 0.0; }
  bool operator==(const PruneMask&) const = default;
};

/// Number of weights removed from a pool of `d` at target sparsity `rho`:
/// floor(rho * d), guarded against product round-off just below an integer.
std::size_t pruned_count(double rho, std::size_t d);

/// Magnitude at the cut: the floor(rho*d)-th smallest |w| over the pooled
/// selector weights, or -infinity when nothing is pruned.
double magnitude_threshold(const Model& model, const Selector& sel, double rho);

/// Computes the mask that prune() would apply, without touching the model.
/// Ranking is by |w| with ties broken by (registry id, flat index).
PruneMask select_weights(const Model& model, const Selector& sel, double rho);

void apply_mask(Model& model, const PruneMask& mask);

/// One-shot magnitude pruning with a single threshold pooled over `sel`.
PruneMask prune(Model& model, const Selector& sel, double rho);

/// One pooled threshold over every weight matrix (biases and norms excluded).
PruneMask prune_global(Model& model, double rho);

enum class Block { early, mid, late };
std::string_view to_string(Block b);
Block parse_block(std::string_view s);

/// Contiguous thirds of 1..L. The remainder goes to the earliest blocks, so
/// the sizes are ceil/floor of L/3 (L=12 -> 1-4, 5-8, 9-12).
LayerRange block_layers(int layers, Block b);

/// Prunes the attention and FFN weight matrices of a layer block, with a
/// separate threshold per layer.
PruneMask prune_layer_block(Model& model, Side side, Block block, double rho);

nlohmann::json selector_to_json(const Selector& sel);
Selector selector_from_json(const nlohmann::json& j);

/// Mask file (JSON): format, version, selector, rho, pooled, pruned and, per
/// parameter, its name, element count and retained bits as lowercase hex
/// (LSB-first within each byte).
void save_mask(const PruneMask& mask, const Model& model, const std::filesystem::path& path);
PruneMask load_mask(const Model& model, const std::filesystem::path& path);

}  // namespace prunelab
