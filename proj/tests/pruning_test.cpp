#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <functional>
#include <random>
#include <set>

#include "prunelab/errors.hpp"
#include "prunelab/pruning.hpp"
#include "test_util.hpp"

using namespace prunelab;

namespace {

using Slot = std::pair<std::size_t, std::size_t>;  // (param id, flat index)

std::set<Slot> pruned_set(const PruneMask& m) {
  std::set<Slot> s;
  for (std::size_t i = 0; i < m.param_ids.size(); ++i)
    for (std::size_t j = 0; j < m.retained[i].size(); ++j)
      if (!m.retained[i][j]) s.insert({m.param_ids[i], j});
  return s;
}

// Concatenate |w| over the selector, stable-sort, take the first floor(rho*d).
std::set<Slot> sort_oracle(const Model& m, const Selector& sel, double rho) {
  std::vector<std::tuple<double, std::size_t, std::size_t>> all;
  for (auto id : m.registry().resolve(sel))
    for (std::size_t j = 0; j < m.param(id).numel(); ++j) all.emplace_back(std::abs(m.param(id).data[j]), id, j);
  std::stable_sort(all.begin(), all.end(), [](auto& a, auto& b) { return std::get<0>(a) < std::get<0>(b); });
  const auto k = static_cast<std::size_t>(std::floor(rho * all.size() + 1e-9));
  std::set<Slot> s;
  for (std::size_t i = 0; i < k; ++i) s.insert({std::get<1>(all[i]), std::get<2>(all[i])});
  return s;
}

std::size_t hash_outside(const Model& m, const std::vector<std::size_t>& inside) {
  std::size_t h = 0;
  for (std::size_t id = 0; id < m.params().size(); ++id) {
    if (std::find(inside.begin(), inside.end(), id) != inside.end()) continue;
    const auto b = testutil::bytes_of(m.param(id).data);
    h = h * 1000003u ^ std::hash<std::string>{}(std::string(b.begin(), b.end()));
  }
  return h;
}

}  // namespace

TEST_CASE("pruned count is exactly floor(rho * d)") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> dd(1, 5000);
  for (int i = 0; i < 1000; ++i) {
    const double rho = u(rng);
    const std::size_t d = dd(rng);
    const auto k = pruned_count(rho, d);
    CHECK(k <= d);
    CHECK(static_cast<double>(k) <= rho * d + 1e-9);
    CHECK(static_cast<double>(k + 1) > rho * d);
  }
  CHECK(pruned_count(0.3, 10) == 3);  // 0.3 * 10 is 2.9999999999999996
  CHECK(pruned_count(0.0, 7) == 0);
  CHECK(pruned_count(1.0, 7) == 7);
}

TEST_CASE("ranking example") {
  auto m = Model::build(testutil::small_config());
  const Selector sel{Side::encoder, std::vector<Kind>{Kind::ffn}, LayerRange{1, 1}};
  const double pattern[] = {0.05, 0.1, 0.3, -0.5};
  for (auto id : m.registry().resolve(sel)) {
    auto& w = m.param(id).data;
    REQUIRE(w.size() % 4 == 0);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = pattern[i % 4];
  }
  const auto mask = select_weights(m, sel, 0.5);
  REQUIRE(mask.param_ids.size() == 2);  // fc1 and fc2 of layer 1
  for (std::size_t i = 0; i < 2; ++i) {
    const auto& w = m.param(mask.param_ids[i]).data;
    for (std::size_t j = 0; j < w.size(); ++j) CHECK(mask.retained[i][j] == (std::abs(w[j]) > 0.1));
  }
  CHECK(magnitude_threshold(m, sel, 0.5) == 0.1);
  CHECK(magnitude_threshold(m, sel, 0.0) == -std::numeric_limits<double>::infinity());
  CHECK(select_weights(m, sel, 0.0).pruned == 0);
}

TEST_CASE("selection agrees with a sort oracle over pooled tensors") {
  auto m = Model::build(testutil::small_config());
  testutil::randomize(m, 3);
  // Plant exact ties across tensors to exercise the order tie-break.
  const auto ids = m.registry().resolve(Selector::of(Side::decoder, Kind::cross_attn));
  for (std::size_t k = 0; k < 20; ++k) {
    m.param(ids[0]).data[k] = 0.01;
    m.param(ids[1]).data[k] = -0.01;
  }
  for (const auto& sel : {Selector::of(Side::decoder, Kind::cross_attn), Selector::weights(), Selector::all()})
    for (double rho : {0.0, 0.013, 0.25, 0.5, 0.77, 1.0}) {
      const auto mask = select_weights(m, sel, rho);
      CHECK(pruned_set(mask) == sort_oracle(m, sel, rho));
      CHECK(mask.pruned == pruned_count(rho, mask.pooled));
      const double tau = magnitude_threshold(m, sel, rho);
      for (auto [id, j] : pruned_set(mask)) CHECK(std::abs(m.param(id).data[j]) <= tau);
    }
}

TEST_CASE("masks nest as rho grows") {
  auto m = Model::build(testutil::small_config());
  testutil::randomize(m, 4);
  for (auto& x : m.param(m.registry().resolve(Selector::weights()).front()).data) x = std::round(x * 10) / 10;
  std::set<Slot> prev;
  for (double rho = 0.0; rho <= 1.0; rho += 0.05) {
    const auto cur = pruned_set(select_weights(m, Selector::weights(), rho));
    CHECK(std::includes(cur.begin(), cur.end(), prev.begin(), prev.end()));
    prev = cur;
  }
}

TEST_CASE("prune zeroes exactly the selection and isolates everything else") {
  auto m = Model::build(testutil::small_config());
  testutil::randomize(m, 5);
  const auto sel = Selector::of(Side::encoder, Kind::self_attn);
  const auto inside = m.registry().resolve(sel);
  const auto before = hash_outside(m, inside);
  const auto ffn_id = m.registry().resolve(Selector::of(Side::encoder, Kind::ffn)).front();
  const auto ffn_bytes = testutil::bytes_of(m.param(ffn_id).data);
  const auto expect = select_weights(m, sel, 0.5);
  const auto mask = prune(m, sel, 0.5);
  CHECK(mask == expect);
  CHECK(mask.achieved() == static_cast<double>(mask.pruned) / mask.pooled);
  CHECK(hash_outside(m, inside) == before);
  CHECK(testutil::bytes_of(m.param(ffn_id).data) == ffn_bytes);
  std::size_t zeros = 0;
  for (auto id : inside)
    for (double x : m.param(id).data) zeros += (x == 0.0);
  CHECK(zeros == mask.pruned);

  SUBCASE("idempotent") {
    const auto snap = m.snapshot();
    apply_mask(m, mask);
    CHECK(m.snapshot().values == snap.values);
  }
  SUBCASE("deterministic") {
    auto m2 = Model::build(testutil::small_config());
    testutil::randomize(m2, 5);
    CHECK(prune(m2, sel, 0.5) == mask);
  }
}

TEST_CASE("rho = 0 is an identity and rho = 1 on cross-attention removes frame dependence") {
  auto c = testutil::small_config();
  auto m = Model::build(c);
  testutil::randomize(m, 6);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  Tensor f1({8, std::size_t(c.d_in)}), f2({8, std::size_t(c.d_in)});
  for (auto& x : f1.data) x = n(rng);
  for (auto& x : f2.data) x = n(rng);
  const int toks[] = {0, 5, 6};
  const auto base = m.logits(f1, toks);
  prune_global(m, 0.0);
  prune(m, Selector::all(), 0.0);
  CHECK(m.logits(f1, toks).data == base.data);
  CHECK(m.logits(f2, toks).data != base.data);
  const auto mask = prune(m, Selector::of(Side::decoder, Kind::cross_attn), 1.0);
  CHECK(mask.pruned == mask.pooled);
  CHECK(m.logits(f1, toks).data == m.logits(f2, toks).data);
}

TEST_CASE("global pruning pools weight matrices only") {
  auto m = Model::build(testutil::small_config());
  testutil::randomize(m, 7);
  const auto weights = m.registry().count(Selector::weights());
  const auto snap = m.snapshot();
  for (double rho : {0.1, 0.33, 0.5, 0.9}) {
    m.restore(snap);
    const auto mask = prune_global(m, rho);
    CHECK(mask.pooled == weights);
    CHECK(std::abs(mask.achieved() - rho) < 1.0 / static_cast<double>(weights));
    for (auto id : m.registry().resolve(Selector::of(Kind::bias)))
      CHECK(m.param(id).data == snap.values[id]);
    for (auto id : m.registry().resolve(Selector::of(Kind::layer_norm)))
      CHECK(m.param(id).data == snap.values[id]);
  }
}

TEST_CASE("layer blocks") {
  CHECK(block_layers(12, Block::early) == LayerRange{1, 4});
  CHECK(block_layers(12, Block::mid) == LayerRange{5, 8});
  CHECK(block_layers(12, Block::late) == LayerRange{9, 12});
  CHECK(block_layers(6, Block::early) == LayerRange{1, 2});
  CHECK(block_layers(6, Block::mid) == LayerRange{3, 4});
  CHECK(block_layers(6, Block::late) == LayerRange{5, 6});
  CHECK(block_layers(7, Block::early) == LayerRange{1, 3});
  CHECK(block_layers(7, Block::mid) == LayerRange{4, 5});
  CHECK(block_layers(7, Block::late) == LayerRange{6, 7});
  CHECK(block_layers(8, Block::mid) == LayerRange{4, 6});
  CHECK_THROWS_AS(block_layers(2, Block::early), ArgumentError);
  CHECK(parse_block(to_string(Block::mid)) == Block::mid);
  CHECK_THROWS_AS(parse_block("middle-ish"), ArgumentError);
}

TEST_CASE("block masks union to per-layer pruning") {
  auto m = Model::build(testutil::small_config());
  testutil::randomize(m, 8);
  const auto snap = m.snapshot();
  for (Side side : {Side::encoder, Side::decoder}) {
    m.restore(snap);
    std::set<Slot> blocks;
    for (Block b : {Block::early, Block::mid, Block::late}) {
      const auto s = pruned_set(prune_layer_block(m, side, b, 0.4));
      blocks.insert(s.begin(), s.end());
    }
    m.restore(snap);
    std::set<Slot> per_layer;
    for (int l = 1; l <= 3; ++l) {
      const Selector sel{side, std::vector<Kind>{Kind::self_attn, Kind::cross_attn, Kind::ffn}, LayerRange{l, l}};
      const auto s = pruned_set(prune(m, sel, 0.4));
      per_layer.insert(s.begin(), s.end());
    }
    CHECK(blocks == per_layer);
  }
}

TEST_CASE("mask file round trip") {
  auto m = Model::build(testutil::small_config());
  testutil::randomize(m, 9);
  const auto mask = select_weights(m, Selector{Side::decoder, std::vector<Kind>{Kind::ffn}, LayerRange{2, 3}}, 0.37);
  const auto path = std::filesystem::temp_directory_path() / "prunelab_mask_test.json";
  save_mask(mask, m, path);
  CHECK(load_mask(m, path) == mask);
  auto other = Model::build(testutil::small_config());
  CHECK(load_mask(other, path) == mask);
  auto c2 = testutil::small_config();
  c2.d_ffn = 48;
  auto wrong = Model::build(c2);
  CHECK_THROWS_AS(load_mask(wrong, path), FormatError);
  std::filesystem::remove(path);
}

TEST_CASE("pruning errors") {
  auto m = Model::build(testutil::small_config());
  CHECK_THROWS_AS(prune(m, Selector::of(Side::encoder, Kind::cross_attn), 0.5), SelectorError);
  CHECK_THROWS_AS(prune(m, Selector{Side::decoder, std::nullopt, LayerRange{7, 9}}, 0.5), SelectorError);
  CHECK_THROWS_AS(prune(m, Selector::all(), 1.5), ArgumentError);
  CHECK_THROWS_AS(prune_global(m, -0.1), ArgumentError);
}
