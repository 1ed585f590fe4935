#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "prunelab/graph.hpp"
#include "prunelab/model.hpp"
#include "prunelab/task.hpp"

namespace testutil {

inline prunelab::ModelConfig small_config(std::uint64_t seed = 11) {
  prunelab::ModelConfig c;
  c.enc_layers = 3;
  c.dec_layers = 3;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ffn = 32;
  c.vocab_size = 12;
  c.d_in = 4;
  c.max_src_len = 12;
  c.max_tgt_len = 8;
  c.seed = seed;
  return c;
}

inline prunelab::TaskSpec small_task(const prunelab::ModelConfig& c, std::uint64_t seed = 3) {
  prunelab::TaskSpec t;
  t.seed = seed;
  t.n_train = 16;
  t.n_test = 8;
  t.t_min = 2;
  t.t_max = 5;
  t.vocab_size = c.vocab_size;
  t.d_in = c.d_in;
  return t;
}

/// Weights drawn wider than the init so that biases, norms and attention
/// patterns are all non-trivial.
inline void randomize(prunelab::Model& m, std::uint64_t seed, double scale = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (auto& p : m.params())
    for (auto& x : p.data) x = n(rng);
}

inline double rel_err(double a, double b) {
  const double den = std::max({std::abs(a), std::abs(b), 1e-300});
  return std::abs(a - b) / den;
}

/// ||a - b|| / max(||a||, ||b||).
inline double rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double den = std::sqrt(std::max(na, nb));
  return den == 0.0 ? std::sqrt(d) : std::sqrt(d) / den;
}

inline std::vector<std::uint8_t> bytes_of(const std::vector<double>& v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(v.data());
  return {p, p + v.size() * sizeof(double)};
}

/// Naive oracle: one backward per sample, every parameter gradient copied out.
inline std::vector<std::vector<std::vector<double>>> per_sample_grads(prunelab::Model& m,
                                                                      std::span<const prunelab::Sample> batch) {
  std::vector<std::vector<std::vector<double>>> out;
  for (const auto& s : batch) {
    m.zero_grad();
    prunelab::Graph g;
    g.backward(m.sample_loss(g, s));
    std::vector<std::vector<double>> gs;
    for (const auto& p : m.params()) gs.push_back(p.grad);
    out.push_back(std::move(gs));
  }
  return out;
}

inline std::vector<double> flatten(const std::vector<std::vector<double>>& v) {
  std::vector<double> f;
  for (const auto& x : v) f.insert(f.end(), x.begin(), x.end());
  return f;
}

}  // namespace testutil
