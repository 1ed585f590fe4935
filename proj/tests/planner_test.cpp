#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <random>

#include "prunelab/errors.hpp"
#include "prunelab/planner.hpp"
#include "test_util.hpp"

using namespace prunelab;

namespace {

SweepCell cell(const Selector& s, double rho, double delta, bool ok = true) {
  SweepCell c;
  c.target = PruneTarget::of(s);
  c.selector = s;
  c.rho = rho;
  c.delta_other = delta;
  c.ok = ok;
  c.status = ok ? "ok" : "failed: synthetic";
  return c;
}

const std::vector<double> kGrid{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};

// Enumerates every grid combination (rho = 0 included) and keeps the best
// feasible one under (sum delta, pruned count, rho vector).
PrunePlan brute_force(const std::vector<Selector>& sels, const std::vector<std::vector<double>>& deltas,
                      const ParameterRegistry& R, double target, double eps) {
  const std::size_t n = sels.size();
  std::vector<std::size_t> pick(n, 0);  // 0 = unpruned, i = kGrid[i-1]
  bool found = false;
  double best_delta = 0;
  std::size_t best_count = 0;
  std::vector<double> best_rhos;
  for (;;) {
    bool admissible = true;
    double sum = 0;
    std::size_t count = 0;
    std::vector<double> rhos(n, 0.0);
    for (std::size_t s = 0; s < n; ++s) {
      if (pick[s] == 0) continue;
      const double delta = deltas[s][pick[s] - 1];
      if (delta > eps) admissible = false;
      sum += delta;
      rhos[s] = kGrid[pick[s] - 1];
      count += pruned_count(rhos[s], R.count(sels[s]));
    }
    if (admissible && static_cast<double>(count) / R.total_count() >= target) {
      const bool better = !found || sum < best_delta - 1e-12 ||
                          (std::abs(sum - best_delta) <= 1e-12 &&
                           (count < best_count || (count == best_count && rhos < best_rhos)));
      if (better) {
        found = true;
        best_delta = sum;
        best_count = count;
        best_rhos = rhos;
      }
    }
    std::size_t s = 0;
    while (s < n && ++pick[s] > kGrid.size()) pick[s++] = 0;
    if (s == n) break;
  }
  PrunePlan p;
  p.provenance = Provenance::greedy;
  if (!found) {
    p.infeasible = true;
    best_rhos.assign(n, 0.0);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t g = 0; g < kGrid.size(); ++g)
        if (deltas[s][g] <= eps) best_rhos[s] = kGrid[g];
  }
  for (std::size_t s = 0; s < n; ++s)
    if (best_rhos[s] > 0.0) p.entries.push_back({sels[s], best_rhos[s]});
  return p;
}

double sum_delta(const PrunePlan& p, const std::vector<Selector>& sels, const std::vector<std::vector<double>>& deltas) {
  double sum = 0;
  for (const auto& e : p.entries) {
    const auto s = std::find(sels.begin(), sels.end(), e.selector) - sels.begin();
    const auto g = std::find_if(kGrid.begin(), kGrid.end(), [&](double r) { return std::abs(r - e.rho) < 1e-12; }) -
                   kGrid.begin();
    sum += deltas[s][g];
  }
  return sum;
}

}  // namespace

TEST_CASE("overall sparsity") {
  auto m = Model::build(testutil::small_config());
  const auto& R = m.registry();
  const auto a = Selector{Side::encoder, std::vector<Kind>{Kind::ffn}, LayerRange{1, 1}};
  const auto b = Selector{Side::encoder, std::vector<Kind>{Kind::ffn}, LayerRange{2, 2}};
  REQUIRE(R.count(a) == R.count(b));
  const PrunePlan p{{{a, 0.2}, {b, 0.6}}, Provenance::manual, false};
  const double share = 2.0 * R.count(a) / R.total_count();
  // Floor-based: within one weight per entry of the weighted mean.
  CHECK(std::abs(overall_sparsity(p, R) - (0.2 + 0.6) / 2 * share) <= 2.0 / R.total_count());
  CHECK(overall_sparsity(p, R) ==
        double(pruned_count(0.2, R.count(a)) + pruned_count(0.6, R.count(b))) / R.total_count());
  CHECK(overall_sparsity(PrunePlan{}, R) == 0.0);

  const PrunePlan overlap{{{a, 0.2}, {Selector::of(Side::encoder, Kind::ffn), 0.3}}, Provenance::manual, false};
  CHECK_THROWS_AS(overall_sparsity(overlap, R), PlanError);
  const PrunePlan bad_rho{{{a, 1.2}}, Provenance::manual, false};
  CHECK_THROWS_AS(validate_plan(bad_rho, R), PlanError);
}

TEST_CASE("recipe") {
  const auto p = paper_recipe(6);
  CHECK(p.provenance == Provenance::recipe);
  CHECK(std::find(p.entries.begin(), p.entries.end(), PlanEntry{Selector::of(Side::decoder, Kind::self_attn), 0.5}) !=
        p.entries.end());
  const PlanEntry early{Selector{Side::decoder, std::vector<Kind>{Kind::ffn}, LayerRange{1, 2}}, 0.25};
  CHECK(std::find(p.entries.begin(), p.entries.end(), early) != p.entries.end());
  for (const auto& e : p.entries) {
    REQUIRE(e.selector.kinds.has_value());
    for (Kind k : *e.selector.kinds) {
      CHECK(k != Kind::layer_norm);
      CHECK(k != Kind::bias);
    }
  }
  CHECK(p.entries.size() == 10);
  CHECK_NOTHROW(validate_plan(p, Model::build(ModelConfig{}).registry()));
}

TEST_CASE("recipe on Whisper-small gives the reported 40.8% sparsity") {
  const auto R = whisper_small_registry();
  CHECK(R.total_count() == 241734912);
  CHECK(R.count(Selector{Side::encoder, std::nullopt, std::nullopt}) == 88154112);
  const double s = overall_sparsity(paper_recipe(12), R);
  CHECK(std::abs(100.0 * s - 40.8) <= 0.5);
}

TEST_CASE("apply_plan") {
  auto m = Model::build(testutil::small_config());
  testutil::randomize(m, 31);
  const auto snap = m.snapshot();
  auto plan = paper_recipe(3);

  SUBCASE("empty plan is the identity") {
    const auto r = apply_plan(m, PrunePlan{});
    CHECK(r.masks.empty());
    CHECK(r.cost.sparsity == 0.0);
    CHECK(m.snapshot().values == snap.values);
  }
  SUBCASE("entry order does not matter and sparsity is exact") {
    const auto r = apply_plan(m, plan);
    const auto once = m.snapshot();
    const double pruned = static_cast<double>(r.cost.total_params - r.cost.nonzero_params);
    CHECK(std::abs(pruned / r.cost.total_params - overall_sparsity(plan, m.registry())) < 1.0 / r.cost.total_params);
    std::mt19937_64 rng(3);
    for (int i = 0; i < 3; ++i) {
      m.restore(snap);
      std::shuffle(plan.entries.begin(), plan.entries.end(), rng);
      apply_plan(m, plan);
      for (std::size_t k = 0; k < once.values.size(); ++k)
        CHECK(testutil::bytes_of(m.param(k).data) == testutil::bytes_of(once.values[k]));
    }
    m.restore(snap);
    CHECK(m.snapshot().values == snap.values);
  }
  SUBCASE("failure restores the model") {
    plan.entries.push_back({Selector::of(Side::encoder, Kind::cross_attn), 0.5});
    CHECK_THROWS_AS(apply_plan(m, plan), SelectorError);
    CHECK(m.snapshot().values == snap.values);
  }
}

TEST_CASE("allocation edge cases") {
  auto m = Model::build(testutil::small_config());
  const auto& R = m.registry();
  const std::vector<Selector> sels{Selector::of(Side::encoder, Kind::ffn), Selector::of(Side::decoder, Kind::ffn),
                                   Selector::of(Side::decoder, Kind::cross_attn)};
  SweepResult sweep;
  for (std::size_t s = 0; s < sels.size(); ++s)
    for (double r : kGrid) sweep.cells.push_back(cell(sels[s], r, r * (s + 1)));

  const auto all = greedy_allocate(sweep, R, 1.0, std::numeric_limits<double>::infinity());
  CHECK(all.infeasible);
  REQUIRE(all.entries.size() == 3);
  for (const auto& e : all.entries) CHECK(e.rho == 0.9);

  const auto none = greedy_allocate(sweep, R, 0.0, 1.0);
  CHECK(none.entries.empty());
  CHECK_FALSE(none.infeasible);

  const auto mid = greedy_allocate(sweep, R, 0.1, 1.0);
  CHECK(overall_sparsity(mid, R) >= 0.1);
  for (const auto& e : mid.entries) {
    const auto s = std::find(sels.begin(), sels.end(), e.selector) - sels.begin();
    CHECK(e.rho * (s + 1) <= 1.0 + 1e-12);
  }
  CHECK_THROWS_AS(greedy_allocate(SweepResult{}, R, 0.3, 1.0), ArgumentError);
}

TEST_CASE("allocation matches exhaustive search") {
  auto m = Model::build(testutil::small_config());
  const auto& R = m.registry();
  const std::vector<Selector> pool{Selector::of(Side::encoder, Kind::ffn), Selector::of(Side::decoder, Kind::ffn),
                                   Selector::of(Side::decoder, Kind::cross_attn),
                                   Selector::of(Side::encoder, Kind::self_attn)};
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> delta(-1.0, 4.0), frac(0.0, 0.45), eps(0.0, 3.0);
  for (int inst = 0; inst < 50; ++inst) {
    const std::size_t n = 2 + inst % 2;
    std::vector<Selector> sels(pool.begin(), pool.begin() + n);
    std::vector<std::vector<double>> deltas(n, std::vector<double>(kGrid.size()));
    SweepResult sweep;
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t g = 0; g < kGrid.size(); ++g) {
        deltas[s][g] = delta(rng);
        sweep.cells.push_back(cell(sels[s], kGrid[g], deltas[s][g]));
      }
    // A failed cell is never admissible, whatever its recorded delta.
    sweep.cells.push_back(cell(Selector{Side::shared, std::vector<Kind>{Kind::pos_emb}, std::nullopt}, 0.5, -9, false));
    const double target = frac(rng), e = eps(rng);
    auto want = brute_force(sels, deltas, R, target, e);
    const auto got = greedy_allocate(sweep, R, target, e);
    CAPTURE(inst);
    CHECK(got.infeasible == want.infeasible);
    CHECK(sum_delta(got, sels, deltas) == doctest::Approx(sum_delta(want, sels, deltas)).epsilon(1e-12));
    CHECK(got.entries == want.entries);
    if (!got.infeasible) CHECK(overall_sparsity(got, R) >= target);
  }
}

TEST_CASE("plan files round trip") {
  auto plan = paper_recipe(6);
  plan.entries.push_back({Selector::of(Kind::layer_norm), 0.1});
  const auto path = std::filesystem::temp_directory_path() / "prunelab_plan_test.json";
  save_plan(plan, path);
  CHECK(load_plan(path) == plan);
  CHECK(plan_from_json(plan_to_json(plan)) == plan);
  CHECK(parse_provenance(to_string(Provenance::greedy)) == Provenance::greedy);
  std::filesystem::remove(path);
}
