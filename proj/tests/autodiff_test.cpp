#include <doctest.h>

#include <cmath>
#include <random>

#include "prunelab/errors.hpp"
#include "prunelab/graph.hpp"
#include "test_util.hpp"

using namespace prunelab;

namespace {

Tensor random_tensor(Shape s, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(std::move(s), true);
  std::normal_distribution<double> n(0.0, scale);
  for (auto& x : t.data) x = n(rng);
  return t;
}

using Op = std::function<Var(Graph&, std::vector<Var>&)>;

/// Reduces op(inputs) to sum(w * y) with fixed random w, then compares each
/// input's gradient with central differences. Returns the worst relative error.
double check_op(std::vector<Tensor> inputs, const Op& op, std::uint64_t seed = 5) {
  auto eval = [&](bool with_grad) {
    Graph g;
    std::vector<Var> vs;
    for (auto& t : inputs) vs.push_back(g.param(t));
    Var y = op(g, vs);
    const auto n = shape_numel(g.shape(y));
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    Tensor w({n, 1});
    for (auto& x : w.data) x = nd(rng);
    Var s = g.matmul(g.reshape(y, {1, n}), g.constant(w));
    const double v = g.data(s)[0];
    if (with_grad) g.backward(s);
    return v;
  };
  for (auto& t : inputs) t.zero_grad();
  eval(true);
  double worst = 0.0;
  const double h = 1e-6;
  for (auto& t : inputs) {
    const auto analytic = t.grad;
    std::vector<double> numeric(t.numel());
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double x0 = t.data[i];
      t.data[i] = x0 + h;
      const double up = eval(false);
      t.data[i] = x0 - h;
      const double down = eval(false);
      t.data[i] = x0;
      numeric[i] = (up - down) / (2 * h);
    }
    worst = std::max(worst, testutil::rel_err(analytic, numeric));
  }
  return worst;
}

}  // namespace

TEST_CASE("every op's gradient matches central differences") {
  std::mt19937_64 rng(1);
  const double tol = 1e-7;
  CHECK(check_op({random_tensor({3, 4}, rng), random_tensor({4, 5}, rng)},
                 [](Graph& g, auto& v) { return g.matmul(v[0], v[1]); }) < tol);
  CHECK(check_op({random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)},
                 [](Graph& g, auto& v) { return g.add(v[0], v[1]); }) < tol);
  CHECK(check_op({random_tensor({3, 4}, rng), random_tensor({4}, rng)},
                 [](Graph& g, auto& v) { return g.add(v[0], v[1]); }) < tol);
  CHECK(check_op({random_tensor({2, 3}, rng)}, [](Graph& g, auto& v) { return g.scale(v[0], -1.7); }) < tol);
  CHECK(check_op({random_tensor({3, 6}, rng, 2.0)}, [](Graph& g, auto& v) { return g.softmax(v[0]); }) < tol);
  CHECK(check_op({random_tensor({3, 6}, rng), random_tensor({6}, rng), random_tensor({6}, rng)},
                 [](Graph& g, auto& v) { return g.layer_norm(v[0], v[1], v[2], 1e-5); }) < 1e-6);
  CHECK(check_op({random_tensor({3, 5}, rng, 2.0)}, [](Graph& g, auto& v) { return g.gelu(v[0]); }) < tol);
  CHECK(check_op({random_tensor({5, 3}, rng)},
                 [](Graph& g, auto& v) {
                   const int ids[] = {4, 0, 4, 2};
                   return g.embedding(v[0], ids);
                 }) < tol);
  for (std::size_t stride : {1u, 2u}) {
    CHECK(check_op({random_tensor({7, 3}, rng), random_tensor({4, 3, 3}, rng)},
                   [&](Graph& g, auto& v) { return g.conv1d(v[0], v[1], stride, 1); }) < tol);
  }
  CHECK(check_op({random_tensor({3, 4}, rng)}, [](Graph& g, auto& v) { return g.transpose(v[0]); }) < tol);
  CHECK(check_op({random_tensor({3, 4}, rng)}, [](Graph& g, auto& v) { return g.slice_cols(v[0], 1, 2); }) < tol);
  CHECK(check_op({random_tensor({3, 2}, rng), random_tensor({3, 3}, rng)},
                 [](Graph& g, auto& v) {
                   const Var parts[] = {v[0], v[1]};
                   return g.concat_cols(parts);
                 }) < tol);
  CHECK(check_op({random_tensor({2, 3}, rng), random_tensor({1, 3}, rng)},
                 [](Graph& g, auto& v) { return g.concat_rows(v[0], v[1]); }) < tol);
  CHECK(check_op({random_tensor({4, 6}, rng, 2.0)},
                 [](Graph& g, auto& v) {
                   const int t[] = {1, 5, 0, 5};
                   return g.cross_entropy(v[0], t);
                 }) < tol);
}

TEST_CASE("a reused input accumulates both gradient paths") {
  std::mt19937_64 rng(2);
  CHECK(check_op({random_tensor({3, 3}, rng)},
                 [](Graph& g, auto& v) { return g.matmul(v[0], g.gelu(v[0])); }) < 1e-7);
}

TEST_CASE("softmax matches a long-double oracle and survives large logits") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-50.0, 50.0);
  Tensor x({4, 9});
  for (auto& v : x.data) v = u(rng);
  x.at(0, 0) = 800.0;  // exp overflows without max subtraction
  Graph g(false);
  const auto y = g.value(g.softmax(g.constant(x)));
  for (std::size_t r = 0; r < 4; ++r) {
    long double mx = -1e300L, sum = 0.0L;
    for (std::size_t c = 0; c < 9; ++c) mx = std::max<long double>(mx, x.at(r, c));
    for (std::size_t c = 0; c < 9; ++c) sum += std::exp(static_cast<long double>(x.at(r, c)) - mx);
    for (std::size_t c = 0; c < 9; ++c) {
      const long double ref = std::exp(static_cast<long double>(x.at(r, c)) - mx) / sum;
      CHECK(std::isfinite(y.at(r, c)));
      CHECK(std::abs(static_cast<long double>(y.at(r, c)) - ref) <= 1e-15L + 1e-13L * ref);
    }
  }
}

TEST_CASE("layer_norm of a constant row with eps=0 is finite") {
  Graph g;
  Tensor x({1, 4}, {2.0, 2.0, 2.0, 2.0});
  Tensor gamma({4}, {1, 1, 1, 1}), beta({4}, {0.5, 0.5, 0.5, 0.5});
  const auto y = g.value(g.layer_norm(g.constant(x), g.constant(gamma), g.constant(beta), 0.0));
  for (double v : y.data) CHECK(v == 0.5);
}

TEST_CASE("backward contract") {
  SUBCASE("empty graph") {
    Graph g;
    CHECK_THROWS_AS(g.backward(Var{}), StateError);
  }
  SUBCASE("twice") {
    Tensor w(Shape{1, 1}, std::vector<double>{2.0}, true);
    Graph g;
    Var l = g.scale(g.param(w), 3.0);
    g.backward(l);
    CHECK(w.grad[0] == 3.0);
    CHECK_THROWS_AS(g.backward(l), StateError);
  }
  SUBCASE("inference graph") {
    Tensor w(Shape{1, 1}, std::vector<double>{2.0}, true);
    Graph g(false);
    Var l = g.scale(g.constant_ref(w), 3.0);
    CHECK_THROWS_AS(g.backward(l), StateError);
  }
  SUBCASE("non-scalar loss") {
    Tensor w(Shape{2, 1}, std::vector<double>{1.0, 2.0}, true);
    Graph g;
    CHECK_THROWS_AS(g.backward(g.param(w)), DimensionError);
  }
  SUBCASE("seed scales gradients") {
    Tensor w(Shape{1, 1}, std::vector<double>{2.0}, true);
    Graph g;
    g.backward(g.scale(g.param(w), 3.0), 0.5);
    CHECK(w.grad[0] == 1.5);
  }
}

TEST_CASE("shape errors") {
  Graph g;
  Var a = g.constant(Tensor({2, 3}));
  Var b = g.constant(Tensor({2, 3}));
  CHECK_THROWS_AS(g.matmul(a, b), DimensionError);
  CHECK_THROWS_AS(g.add(a, g.constant(Tensor({3, 2}))), DimensionError);
  CHECK_THROWS_AS(g.reshape(a, {4, 2}), DimensionError);
  CHECK_THROWS_AS(g.slice_cols(a, 2, 2), DimensionError);
  const int bad[] = {5};
  CHECK_THROWS_AS(g.embedding(a, bad), IndexError);
  CHECK_THROWS_AS(Tensor({2, 0}), DimensionError);
}
