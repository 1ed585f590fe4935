#include <benchmark/benchmark.h>

#include <random>

#include "prunelab/graph.hpp"
#include "prunelab/metrics.hpp"
#include "prunelab/pruning.hpp"
#include "prunelab/sensitivity.hpp"
#include "prunelab/task.hpp"

using namespace prunelab;

namespace {

Tensor random_tensor(Shape s, std::uint64_t seed) {
  Tensor t(std::move(s));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  for (auto& x : t.data) x = n(rng);
  return t;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_tensor({n, n}, 1), b = random_tensor({n, n}, 2);
  for (auto _ : state) {
    Graph g(false);
    benchmark::DoNotOptimize(g.data(g.matmul(g.constant(a), g.constant(b))).data());
  }
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(64)->Arg(256);

void BM_ForwardBackward(benchmark::State& state) {
  auto m = Model::build(ModelConfig{});
  const auto data = generate(TaskSpec{});
  const auto& s = data.train.items.front();
  for (auto _ : state) {
    m.zero_grad();
    Graph g;
    g.backward(m.sample_loss(g, s));
  }
}
BENCHMARK(BM_ForwardBackward)->Unit(benchmark::kMillisecond);

void BM_GreedyDecode(benchmark::State& state) {
  const auto m = Model::build(ModelConfig{});
  const auto data = generate(TaskSpec{});
  const auto& f = data.test_other.items.front().frames;
  for (auto _ : state) benchmark::DoNotOptimize(m.greedy_decode(f));
}
BENCHMARK(BM_GreedyDecode)->Unit(benchmark::kMicrosecond);

void BM_SelectGlobal(benchmark::State& state) {
  const auto m = Model::build(ModelConfig{});
  const double rho = state.range(0) / 100.0;
  for (auto _ : state) benchmark::DoNotOptimize(select_weights(m, Selector::weights(), rho).pruned);
}
BENCHMARK(BM_SelectGlobal)->Arg(10)->Arg(50)->Arg(90)->Unit(benchmark::kMillisecond);

void BM_EditDistance(benchmark::State& state) {
  std::mt19937_64 rng(3);
  std::vector<int> a(state.range(0)), b(state.range(0));
  for (auto& x : a) x = static_cast<int>(rng() % 64);
  for (auto& x : b) x = static_cast<int>(rng() % 64);
  for (auto _ : state) benchmark::DoNotOptimize(edit_distance(a, b));
}
BENCHMARK(BM_EditDistance)->Arg(12)->Arg(100)->Arg(1000);

}  // namespace

BENCHMARK_MAIN();
