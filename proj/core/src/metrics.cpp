#include "prunelab/metrics.hpp"

#include <string>

#include "prunelab/errors.hpp"

namespace prunelab {

EditOps edit_distance(std::span<const int> ref, std::span<const int> hyp) {
  const std::size_t m = ref.size(), n = hyp.size();
  std::vector<std::size_t> d((m + 1) * (n + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return d[i * (n + 1) + j]; };
  for (std::size_t i = 0; i <= m; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= n; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= m; ++i)
    for (std::size_t j = 1; j <= n; ++j) {
      const std::size_t diag = at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      at(i, j) = std::min({diag, at(i - 1, j) + 1, at(i, j - 1) + 1});
    }

  EditOps ops;
  ops.distance = at(m, n);
  std::size_t i = m, j = n;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      if (ref[i - 1] != hyp[j - 1]) ++ops.substitutions;
      --i;
      --j;
    } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ++ops.deletions;
      --i;
    } else {
      ++ops.insertions;
      --j;
    }
  }
  return ops;
}

std::vector<int> token_chars(std::span<const int> tokens) {
  std::vector<int> out;
  for (int t : tokens)
    for (char c : std::to_string(t)) out.push_back(c - '0');
  return out;
}

ErrorRates error_rates(std::span<const std::vector<int>> refs, std::span<const std::vector<int>> hyps) {
  if (refs.size() != hyps.size())
    throw MetricError("reference and hypothesis lists differ in length (" + std::to_string(refs.size()) +
                      " vs " + std::to_string(hyps.size()) + ")");
  ErrorRates r;
  for (std::size_t k = 0; k < refs.size(); ++k) {
    const auto ops = edit_distance(refs[k], hyps[k]);
    r.substitutions += ops.substitutions;
    r.deletions += ops.deletions;
    r.insertions += ops.insertions;
    r.ref_len += refs[k].size();
    const auto rc = token_chars(refs[k]);
    r.char_errors += edit_distance(rc, token_chars(hyps[k])).distance;
    r.char_ref_len += rc.size();
  }
  if (r.ref_len == 0) throw MetricError("empty reference corpus");
  r.wer = static_cast<double>(r.substitutions + r.deletions + r.insertions) / static_cast<double>(r.ref_len);
  r.cer = static_cast<double>(r.char_errors) / static_cast<double>(r.char_ref_len);
  return r;
}

double delta_wer(const ErrorRates& baseline, const ErrorRates& pruned) {
  return 100.0 * pruned.wer - 100.0 * baseline.wer;
}

double FlopBreakdown::dense_total() const {
  double t = attention_core;
  for (double f : per_param) t += f;
  return t;
}

FlopBreakdown flop_breakdown(const ModelConfig& c, const ParameterRegistry& registry) {
  const double t_src = c.max_src_len;
  const double t_enc = (c.max_src_len - 1) / 2 + 1;  // stride-2 conv with "same" padding
  const double t_dec = c.max_tgt_len;
  const double d = c.d_model;

  FlopBreakdown fb;
  fb.per_param.assign(registry.size(), 0.0);
  for (const auto& e : registry.entries()) {
    double f = 0.0;
    switch (e.tag.kind) {
      case Kind::conv: {
        const double t_out = e.name == "encoder.conv1.weight" ? t_src : t_enc;
        f = 2.0 * static_cast<double>(e.count) * t_out;
        break;
      }
      case Kind::self_attn:
      case Kind::ffn:
      case Kind::output_proj:
        f = projection_flops(e.shape[0], e.shape[1]) * (e.tag.side == Side::encoder ? t_enc : t_dec);
        break;
      case Kind::cross_attn: {
        const bool from_encoder = e.name.ends_with(".k.weight") || e.name.ends_with(".v.weight");
        f = projection_flops(e.shape[0], e.shape[1]) * (from_encoder ? t_enc : t_dec);
        break;
      }
      default:
        break;  // lookups, norms and biases carry no matrix products
    }
    fb.per_param[e.id] = f;
  }
  // QK^T and AV: 2 * Tq * Tk * d each.
  fb.attention_core = c.enc_layers * 2.0 * (2.0 * t_enc * t_enc * d) +
                      c.dec_layers * 2.0 * (2.0 * t_dec * t_dec * d + 2.0 * t_dec * t_enc * d);
  return fb;
}

CostReport cost_report(const Model& model) {
  CostReport r;
  const auto& reg = model.registry();
  const auto fb = flop_breakdown(model.config(), reg);
  r.total_params = reg.total_count();
  r.dense_flops = fb.dense_total();
  r.flops_per_step = fb.attention_core;
  for (const auto& e : reg.entries()) {
    std::size_t nz = 0;
    for (double v : model.param(e.id).data) nz += (v != 0.0);
    r.nonzero_params += nz;
    r.flops_per_step += fb.per_param[e.id] * static_cast<double>(nz) / static_cast<double>(e.count);
  }
  r.sparsity = 1.0 - static_cast<double>(r.nonzero_params) / static_cast<double>(r.total_params);
  r.sparse_size_bytes = r.nonzero_params * 8;
  return r;
}

}  // namespace prunelab
