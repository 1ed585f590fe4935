#pragma once

#include <filesystem>
#include <string_view>
#include <vector>

#include "prunelab/metrics.hpp"
#include "prunelab/pruning.hpp"
#include "prunelab/sensitivity.hpp"

namespace prunelab {

struct PlanEntry {
  Selector selector;
  double rho = 0.0;
  bool operator==(const PlanEntry&) const = default;
};

enum class Provenance { recipe, greedy, manual };
std::string_view to_string(Provenance p);
Provenance parse_provenance(std::string_view s);

struct PrunePlan {
  std::vector<PlanEntry> entries;
  Provenance provenance = Provenance::manual;
  bool infeasible = false;
  bool operator==(const PrunePlan&) const = default;
};

/// Throws PlanError if a rho lies outside [0, 1] or two entries share a parameter.
void validate_plan(const PrunePlan& plan, const ParameterRegistry& registry);

/// Sum over entries of floor(rho * d_entry), divided by the registry total.
double overall_sparsity(const PrunePlan& plan, const ParameterRegistry& registry);

/// The fixed per-component recipe: encoder conv 20%, self-attn 40%, FFN 55%;
/// decoder self-attn 50%, cross-attn 45%, FFN early/mid/late 25/45/30%,
/// token embedding 25%, output projection 25%.
PrunePlan paper_recipe(int dec_layers);

struct PlanApplication {
  std::vector<PruneMask> masks;
  CostReport cost;
};

/// Prunes each entry with its own pooled threshold. Thresholds are taken
/// before any entry is applied, so entry order does not matter. On error the
/// model is restored and the error rethrown.
PlanApplication apply_plan(Model& model, const PrunePlan& plan);

/// Chooses one grid sparsity per swept selector (rho = 0 always allowed)
/// among cells with delta_other <= epsilon, minimizing the summed delta
/// subject to overall_sparsity >= target. Ties go to the lower overall
/// sparsity, then to lower rhos in selector order. When no choice reaches the
/// target, returns every selector at its largest admissible rho, flagged
/// infeasible. Only selector-type cells are used; they must be disjoint.
PrunePlan greedy_allocate(const SweepResult& sweep, const ParameterRegistry& registry, double target,
                          double epsilon);

void save_plan(const PrunePlan& plan, const std::filesystem::path& path);
PrunePlan load_plan(const std::filesystem::path& path);
nlohmann::json plan_to_json(const PrunePlan& plan);
PrunePlan plan_from_json(const nlohmann::json& j);

/// Closed-form registry of Whisper-small (d=768, 12+12 layers, 12 heads,
/// FFN 3072, 80 mel bins, vocab 51865, 1500 audio / 448 text positions).
/// The output projection is tied to the token embedding, so there is no
/// separate output_proj entry; the encoder positional table is counted.
ParameterRegistry whisper_small_registry();

}  // namespace prunelab
