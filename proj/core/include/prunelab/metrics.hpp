#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "prunelab/model.hpp"

namespace prunelab {

struct EditOps {
  std::size_t distance = 0;
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;

  bool operator==(const EditOps&) const = default;
};

/// Unit-cost Levenshtein alignment. The S/D/I split comes from a backtrace
/// that prefers substitution (or match), then deletion, then insertion.
EditOps edit_distance(std::span<const int> ref, std::span<const int> hyp);

/// Character view of a token sequence: the base-10 digits of each token id.
std::vector<int> token_chars(std::span<const int> tokens);

struct ErrorRates {
  double wer = 0.0;  // fraction, may exceed 1
  double cer = 0.0;
  std::size_t substitutions = 0;
  std::size_t deletions = 0;
  std::size_t insertions = 0;
  std::size_t ref_len = 0;
  std::size_t char_errors = 0;
  std::size_t char_ref_len = 0;

  bool operator==(const ErrorRates&) const = default;
};

/// Corpus-pooled WER and CER. Throws MetricError on an empty reference
/// corpus or mismatched list lengths.
ErrorRates error_rates(std::span<const std::vector<int>> refs, std::span<const std::vector<int>> hyps);

/// pruned.wer - baseline.wer in absolute percentage points.
double delta_wer(const ErrorRates& baseline, const ErrorRates& pruned);

/// Multiply-add FLOPs of projecting one row through a d_in x d_out matrix.
inline double projection_flops(std::size_t d_in, std::size_t d_out) {
  return 2.0 * static_cast<double>(d_in) * static_cast<double>(d_out);
}

/// Analytic FLOPs of one teacher-forced forward pass at maximum lengths
/// (max_src_len frames, max_tgt_len decoder positions). Only matrix
/// products are counted, at 2 FLOPs per multiply-add.
struct FlopBreakdown {
  std::vector<double> per_param;  // dense FLOPs attributable to each registry entry
  double attention_core = 0.0;    // QK^T and AV products (weight-free)

  double dense_total() const;
};

FlopBreakdown flop_breakdown(const ModelConfig& config, const ParameterRegistry& registry);

struct CostReport {
  std::size_t total_params = 0;
  std::size_t nonzero_params = 0;
  double sparsity = 0.0;
  double dense_flops = 0.0;
  /// Weight FLOPs scaled by each tensor's density, plus attention core.
  double flops_per_step = 0.0;
  /// Nonzero values at 4 bytes plus a 4-byte flat index per nonzero.
  std::size_t sparse_size_bytes = 0;
};

CostReport cost_report(const Model& model);

}  // namespace prunelab
