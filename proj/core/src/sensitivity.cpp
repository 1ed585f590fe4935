#include "prunelab/sensitivity.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <random>
#include <thread>

#include "prunelab/errors.hpp"

namespace prunelab {

namespace {

/// Overwrites parameter gradients with those of one sample's loss.
void sample_gradient(Model& model, const Sample& s, double loss_scale) {
  model.zero_grad();
  Graph g;
  Var loss = model.sample_loss(g, s);
  g.backward(loss, loss_scale);
}

}  // namespace

double first_order_score(Model& model, std::span<const Sample> batch, const Selector& sel, double loss_scale) {
  if (batch.empty()) throw ArgumentError("first_order_score needs a nonempty batch");
  const auto ids = model.registry().resolve(sel);
  if (ids.empty()) throw SelectorError("selector " + sel.str() + " matches no parameters");
  double theta_sq = 0.0;
  for (auto id : ids)
    for (double w : model.param(id).data) theta_sq += w * w;
  const double theta_norm = std::sqrt(theta_sq);
  if (theta_norm == 0.0) throw DegenerateModuleError("module " + sel.str() + " has zero weight norm");

  double total = 0.0;
  for (const auto& s : batch) {
    sample_gradient(model, s, loss_scale);
    double g_sq = 0.0;
    for (auto id : ids)
      for (double g : model.param(id).grad) g_sq += g * g;
    total += std::sqrt(g_sq) / theta_norm;
  }
  return total / static_cast<double>(batch.size());
}

FisherDiagonal fisher_diag(Model& model, std::span<const Sample> batch) {
  if (batch.empty()) throw ArgumentError("fisher_diag needs a nonempty batch");
  FisherDiagonal f;
  f.samples = batch.size();
  for (const auto& p : model.params()) f.values.emplace_back(p.numel(), 0.0);
  for (const auto& s : batch) {
    sample_gradient(model, s, 1.0);
    for (std::size_t i = 0; i < f.values.size(); ++i) {
      const auto& g = model.param(i).grad;
      auto& acc = f.values[i];
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += g[j] * g[j];
    }
  }
  const double n = static_cast<double>(batch.size());
  for (auto& v : f.values)
    for (auto& x : v) x /= n;
  return f;
}

double module_fisher(const FisherDiagonal& fisher, const ParameterRegistry& registry, const Selector& sel) {
  const auto ids = registry.resolve(sel);
  if (ids.empty()) throw SelectorError("selector " + sel.str() + " matches no parameters");
  if (fisher.values.size() != registry.size()) throw ArgumentError("Fisher diagonal does not match registry");
  double sum = 0.0;
  std::size_t count = 0;
  for (auto id : ids) {
    for (double v : fisher.values[id]) sum += v;
    count += fisher.values[id].size();
  }
  return sum / static_cast<double>(count);
}

std::vector<NamedSelector> default_modules() {
  return {{"encoder", Selector{Side::encoder, std::nullopt, std::nullopt}},
          {"decoder", Selector{Side::decoder, std::nullopt, std::nullopt}}};
}

SensitivityReport diagnose(Model& model, std::span<const Dataset* const> splits,
                           std::span<const NamedSelector> modules, std::size_t n) {
  SensitivityReport report;
  for (const Dataset* ds : splits) {
    const std::size_t take = std::min(n, ds->size());
    std::span<const Sample> batch(ds->items.data(), take);
    const auto fisher = fisher_diag(model, batch);
    for (const auto& m : modules) {
      SensitivityEntry e;
      e.module = m.name;
      e.selector = m.selector;
      e.split = ds->split;
      e.s_g = first_order_score(model, batch, m.selector);
      e.s_h = module_fisher(fisher, model.registry(), m.selector);
      e.n = take;
      report.entries.push_back(std::move(e));
    }
  }
  return report;
}

// ---------------------------------------------------------------------------

Selector PruneTarget::describe(const ModelConfig& config) const {
  switch (type) {
    case Type::selector: return selector;
    case Type::global: return Selector::weights();
    case Type::layer_block: {
      const int L = side == Side::encoder ? config.enc_layers : config.dec_layers;
      return Selector{side, std::vector<Kind>{Kind::self_attn, Kind::cross_attn, Kind::ffn}, block_layers(L, block)};
    }
  }
  return selector;
}

PruneMask PruneTarget::apply(Model& model, double rho) const {
  switch (type) {
    case Type::selector: return prune(model, selector, rho);
    case Type::global: return prune_global(model, rho);
    case Type::layer_block: return prune_layer_block(model, side, block, rho);
  }
  throw ArgumentError("unknown prune target");
}

std::vector<std::vector<int>> decode_all(const Model& model, const Dataset& data) {
  std::vector<std::vector<int>> out;
  out.reserve(data.size());
  for (const auto& s : data.items) out.push_back(model.greedy_decode(s.frames));
  return out;
}

ErrorRates evaluate(const Model& model, const Dataset& data) {
  std::vector<std::vector<int>> refs;
  refs.reserve(data.size());
  for (const auto& s : data.items) refs.push_back(s.target);
  return error_rates(refs, decode_all(model, data));
}

SweepResult run_sweep(const Model& model, std::span<const SweepRequest> requests, const Dataset& clean,
                      const Dataset& other, const SweepOptions& opts) {
  SweepResult result;
  result.baseline_clean = evaluate(model, clean);
  result.baseline_other = evaluate(model, other);
  result.cells.resize(requests.size());

  std::vector<std::size_t> order(requests.size());
  std::iota(order.begin(), order.end(), 0);
  if (opts.order) {
    auto sorted = *opts.order;
    std::sort(sorted.begin(), sorted.end());
    if (sorted != order) throw ArgumentError("sweep order must be a permutation of the request indices");
    order = *opts.order;
  }

  const auto snap = model.snapshot();
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    Model local = model;
    for (std::size_t k = next++; k < order.size(); k = next++) {
      const std::size_t idx = order[k];
      const auto& req = requests[idx];
      SweepCell cell;
      cell.target = req.target;
      cell.selector = req.target.describe(model.config());
      cell.rho = req.rho;
      try {
        local.restore(snap);
        cell.achieved = req.target.apply(local, req.rho).achieved();
        cell.clean = evaluate(local, clean);
        cell.other = evaluate(local, other);
        cell.delta_other = delta_wer(result.baseline_other, cell.other);
      } catch (const Error& e) {
        cell.ok = false;
        cell.status = std::string("failed: ") + e.what();
      }
      result.cells[idx] = std::move(cell);
    }
  };

  const std::size_t jobs = std::clamp<std::size_t>(opts.jobs, 1, std::max<std::size_t>(1, requests.size()));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
  }
  return result;
}

std::vector<double> default_grid() {
  std::vector<double> g;
  for (int i = 1; i <= 9; ++i) g.push_back(i / 10.0);
  return g;
}

std::vector<Selector> component_selectors() {
  const auto E = Side::encoder, D = Side::decoder;
  return {Selector::of(E, Kind::self_attn), Selector::of(E, Kind::ffn),        Selector::of(E, Kind::conv),
          Selector::of(D, Kind::self_attn), Selector::of(D, Kind::cross_attn), Selector::of(D, Kind::ffn),
          Selector::of(D, Kind::token_emb), Selector::of(Side::shared, Kind::pos_emb),   Selector::of(D, Kind::output_proj),
          Selector::of(Kind::layer_norm),   Selector::of(Kind::bias)};
}

SweepResult component_sweep(const Model& model, std::span<const Selector> selectors, std::span<const double> grid,
                            const Dataset& clean, const Dataset& other, const SweepOptions& opts) {
  std::vector<SweepRequest> reqs;
  for (const auto& s : selectors)
    for (double rho : grid) reqs.push_back({PruneTarget::of(s), rho});
  return run_sweep(model, reqs, clean, other, opts);
}

SweepResult layer_block_sweep(const Model& model, const Dataset& clean, const Dataset& other, double rho,
                              const SweepOptions& opts) {
  std::vector<SweepRequest> reqs;
  for (auto b : {Block::early, Block::mid, Block::late})
    for (auto side : {Side::encoder, Side::decoder}) reqs.push_back({PruneTarget::layer_block(side, b), rho});
  return run_sweep(model, reqs, clean, other, opts);
}

PlantedRedundancy planted_redundancy_check(const Model& model, const Selector& sel, double p, const Dataset& data,
                                           std::uint64_t seed) {
  if (!(p > 0.0 && p < 0.5)) throw ArgumentError("planted fraction must lie in (0, 0.5)");
  PlantedRedundancy out;
  out.wer_baseline = evaluate(model, data).wer;

  Model work = model;
  const double tau = magnitude_threshold(work, sel, p);
  const auto ids = work.registry().resolve(sel);

  // Rank pooled weights by (|w|, pooled position), matching the pruning order.
  struct Ref {
    double mag;
    std::size_t order;
    double* w;
  };
  std::vector<Ref> pool;
  for (auto id : ids)
    for (double& w : work.param(id).data) pool.push_back({std::abs(w), pool.size(), &w});
  std::sort(pool.begin(), pool.end(), [](const Ref& a, const Ref& b) {
    return a.mag < b.mag || (a.mag == b.mag && a.order < b.order);
  });
  const std::size_t half = pool.size() / 2;
  const std::size_t k = pruned_count(p, pool.size());
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> pick(half);
  std::iota(pick.begin(), pick.end(), 0);
  std::shuffle(pick.begin(), pick.end(), rng);
  if (k > 0 && tau > 0.0) {
    std::normal_distribution<double> noise(0.0, 0.5 * tau);
    for (std::size_t i = 0; i < k; ++i) *pool[pick[i]].w += noise(rng);
  }
  out.corrupted = k;
  out.wer_corrupted = evaluate(work, data).wer;

  prune(work, sel, p);
  out.wer_pruned = evaluate(work, data).wer;
  return out;
}

}  // namespace prunelab
