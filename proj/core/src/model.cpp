#include "prunelab/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "prunelab/errors.hpp"

namespace prunelab {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("invalid model config: " + what); };
  if (enc_layers < 1) fail("enc_layers must be >= 1");
  if (dec_layers < 1) fail("dec_layers must be >= 1");
  if (d_model <= 0) fail("d_model must be positive");
  if (n_heads <= 0) fail("n_heads must be positive");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (d_model % 2 != 0) fail("d_model must be even");
  if (d_ffn <= 0) fail("d_ffn must be positive");
  if (vocab_size <= kFirstContentToken) fail("vocab_size must exceed the reserved token count");
  if (d_in <= 0) fail("d_in must be positive");
  if (max_src_len <= 0) fail("max_src_len must be positive");
  if (max_tgt_len <= 1) fail("max_tgt_len must be at least 2");
  if (conv_kernel <= 0 || conv_kernel % 2 == 0) fail("conv_kernel must be a positive odd number");
}

std::size_t ParameterSnapshot::size() const {
  std::size_t n = 0;
  for (const auto& v : values) n += v.size();
  return n;
}

Tensor sinusoid_table(std::size_t length, std::size_t dim) {
  Tensor t({length, dim});
  const std::size_t half = dim / 2;
  const double inc = half > 1 ? std::log(10000.0) / static_cast<double>(half - 1) : 0.0;
  for (std::size_t p = 0; p < length; ++p)
    for (std::size_t i = 0; i < half; ++i) {
      const double angle = static_cast<double>(p) * std::exp(-inc * static_cast<double>(i));
      t.at(p, i) = std::sin(angle);
      t.at(p, half + i) = std::cos(angle);
    }
  return t;
}

// ---------------------------------------------------------------------------

class Model::Binder {
 public:
  Binder(Graph& g, const Model& m, Model* mut) : g(g), m_(m), mut_(mut), bound_(m.params_.size()) {}

  Var operator()(std::size_t id) {
    if (!bound_[id].valid())
      bound_[id] = (mut_ && g.recording()) ? g.param(mut_->params_[id]) : g.constant_ref(m_.params_[id]);
    return bound_[id];
  }

  Graph& g;

 private:
  const Model& m_;
  Model* mut_;
  std::vector<Var> bound_;
};

struct Model::DecoderCache {
  std::vector<Var> self_k, self_v, cross_k, cross_v;
  std::size_t past = 0;
};

Model Model::build(const ModelConfig& config) {
  config.validate();
  Model m;
  m.config_ = config;
  const std::size_t d = config.d_model, f = config.d_ffn, k = config.conv_kernel;
  const std::size_t V = config.vocab_size;
  auto& R = m.registry_;

  auto add = [&](std::string name, Side side, Kind kind, std::optional<int> layer, Shape shape) {
    return R.add(std::move(name), ComponentTag{side, kind, layer}, std::move(shape));
  };
  auto attention = [&](const std::string& p, Side side, Kind kind, int layer) {
    Attention a{};
    a.wq = add(p + ".q.weight", side, kind, layer, {d, d});
    a.bq = add(p + ".q.bias", side, Kind::bias, layer, {d});
    a.wk = add(p + ".k.weight", side, kind, layer, {d, d});
    a.wv = add(p + ".v.weight", side, kind, layer, {d, d});
    a.bv = add(p + ".v.bias", side, Kind::bias, layer, {d});
    a.wo = add(p + ".out.weight", side, kind, layer, {d, d});
    a.bo = add(p + ".out.bias", side, Kind::bias, layer, {d});
    return a;
  };
  auto norm = [&](const std::string& p, Side side, std::optional<int> layer) {
    Norm n{};
    n.gamma = add(p + ".weight", side, Kind::layer_norm, layer, {d});
    n.beta = add(p + ".bias", side, Kind::layer_norm, layer, {d});
    return n;
  };
  auto ffn = [&](const std::string& p, Side side, int layer) {
    Ffn n{};
    n.w1 = add(p + ".fc1.weight", side, Kind::ffn, layer, {d, f});
    n.b1 = add(p + ".fc1.bias", side, Kind::bias, layer, {f});
    n.w2 = add(p + ".fc2.weight", side, Kind::ffn, layer, {f, d});
    n.b2 = add(p + ".fc2.bias", side, Kind::bias, layer, {d});
    return n;
  };

  const auto E = Side::encoder, D = Side::decoder;
  m.conv1_w_ = add("encoder.conv1.weight", E, Kind::conv, std::nullopt, {d, std::size_t(config.d_in), k});
  m.conv1_b_ = add("encoder.conv1.bias", E, Kind::bias, std::nullopt, {d});
  m.conv2_w_ = add("encoder.conv2.weight", E, Kind::conv, std::nullopt, {d, d, k});
  m.conv2_b_ = add("encoder.conv2.bias", E, Kind::bias, std::nullopt, {d});
  for (int l = 1; l <= config.enc_layers; ++l) {
    const std::string p = "encoder.layers." + std::to_string(l);
    EncoderLayer L;
    L.ln1 = norm(p + ".attn_ln", E, l);
    L.attn = attention(p + ".attn", E, Kind::self_attn, l);
    L.ln2 = norm(p + ".ffn_ln", E, l);
    L.ffn = ffn(p + ".ffn", E, l);
    m.enc_.push_back(L);
  }
  m.enc_ln_ = norm("encoder.ln_post", E, std::nullopt);

  m.tok_emb_ = add("decoder.token_embedding", D, Kind::token_emb, std::nullopt, {V, d});
  m.pos_emb_ = add("decoder.positional_embedding", Side::shared, Kind::pos_emb, std::nullopt,
                   {std::size_t(config.max_tgt_len), d});
  for (int l = 1; l <= config.dec_layers; ++l) {
    const std::string p = "decoder.layers." + std::to_string(l);
    DecoderLayer L;
    L.ln1 = norm(p + ".attn_ln", D, l);
    L.self_attn = attention(p + ".attn", D, Kind::self_attn, l);
    L.ln2 = norm(p + ".cross_attn_ln", D, l);
    L.cross_attn = attention(p + ".cross_attn", D, Kind::cross_attn, l);
    L.ln3 = norm(p + ".ffn_ln", D, l);
    L.ffn = ffn(p + ".ffn", D, l);
    m.dec_.push_back(L);
  }
  m.dec_ln_ = norm("decoder.ln", D, std::nullopt);
  m.out_w_ = add("decoder.output_proj.weight", D, Kind::output_proj, std::nullopt, {d, V});
  m.out_b_ = add("decoder.output_proj.bias", D, Kind::bias, std::nullopt, {V});

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  m.params_.reserve(R.size());
  for (const auto& e : R.entries()) {
    Tensor t(e.shape, true);
    if (e.tag.kind == Kind::layer_norm) {
      if (e.name.ends_with(".weight")) std::fill(t.data.begin(), t.data.end(), 1.0);
    } else if (e.tag.kind == Kind::conv) {
      // Fan-in scale: at 0.02 the frame signal is buried under the sinusoid.
      const double std_dev = 1.0 / std::sqrt(static_cast<double>(e.shape[1] * e.shape[2]));
      for (auto& x : t.data) x = std_dev * unit(rng);
    } else if (e.tag.kind != Kind::bias) {
      for (auto& x : t.data) x = 0.02 * unit(rng);
    }
    m.params_.push_back(std::move(t));
  }
  return m;
}

void Model::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

Var Model::norm(Binder& b, const Norm& n, Var x) const {
  return b.g.layer_norm(x, b(n.gamma), b(n.beta), 1e-5);
}

Var Model::ffn(Binder& b, const Ffn& f, Var x) const {
  auto& g = b.g;
  Var h = g.gelu(g.add(g.matmul(x, b(f.w1)), b(f.b1)));
  return g.add(g.matmul(h, b(f.w2)), b(f.b2));
}

Var Model::attention(Binder& b, const Attention& a, Var x, Var keys, Var values, std::size_t past,
                     bool causal) const {
  auto& g = b.g;
  const std::size_t H = config_.n_heads;
  const std::size_t dh = config_.d_model / H;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Var q = g.add(g.matmul(x, b(a.wq)), b(a.bq));
  const std::size_t nq = g.shape(q)[0];
  const std::size_t nk = g.shape(keys)[0];

  Var mask;
  if (causal && nq > 1) {
    Tensor m({nq, nk});
    for (std::size_t i = 0; i < nq; ++i)
      for (std::size_t j = 0; j < nk; ++j)
        if (j > past + i) m.at(i, j) = -std::numeric_limits<double>::infinity();
    mask = g.constant(std::move(m));
  }

  std::vector<Var> heads;
  heads.reserve(H);
  for (std::size_t h = 0; h < H; ++h) {
    Var qh = g.slice_cols(q, h * dh, dh);
    Var kh = g.slice_cols(keys, h * dh, dh);
    Var vh = g.slice_cols(values, h * dh, dh);
    Var scores = g.scale(g.matmul(qh, g.transpose(kh)), inv_sqrt);
    if (mask.valid()) scores = g.add(scores, mask);
    heads.push_back(g.matmul(g.softmax(scores), vh));
  }
  Var cat = g.concat_cols(heads);
  return g.add(g.matmul(cat, b(a.wo)), b(a.bo));
}

Var Model::encode(Binder& b, const Tensor& frames) const {
  auto& g = b.g;
  if (frames.rank() != 2 || frames.shape[1] != static_cast<std::size_t>(config_.d_in))
    throw DimensionError("frames must be [T x " + std::to_string(config_.d_in) + "], got " +
                         shape_str(frames.shape));
  if (frames.shape[0] > static_cast<std::size_t>(config_.max_src_len))
    throw LengthError("source length " + std::to_string(frames.shape[0]) + " exceeds max_src_len " +
                      std::to_string(config_.max_src_len));
  const std::size_t pad = config_.conv_kernel / 2;
  Var x = g.constant(frames);
  x = g.gelu(g.add(g.conv1d(x, b(conv1_w_), 1, pad), b(conv1_b_)));
  x = g.gelu(g.add(g.conv1d(x, b(conv2_w_), 2, pad), b(conv2_b_)));
  x = g.add(x, g.constant(sinusoid_table(g.shape(x)[0], config_.d_model)));
  for (const auto& L : enc_) {
    Var h = norm(b, L.ln1, x);
    Var k = g.matmul(h, b(L.attn.wk));
    Var v = g.add(g.matmul(h, b(L.attn.wv)), b(L.attn.bv));
    x = g.add(x, attention(b, L.attn, h, k, v, 0, false));
    x = g.add(x, ffn(b, L.ffn, norm(b, L.ln2, x)));
  }
  return norm(b, enc_ln_, x);
}

void Model::prepare_cross(Binder& b, Var enc, DecoderCache& cache) const {
  auto& g = b.g;
  cache.self_k.assign(dec_.size(), Var{});
  cache.self_v.assign(dec_.size(), Var{});
  cache.cross_k.clear();
  cache.cross_v.clear();
  for (const auto& L : dec_) {
    cache.cross_k.push_back(g.matmul(enc, b(L.cross_attn.wk)));
    cache.cross_v.push_back(g.add(g.matmul(enc, b(L.cross_attn.wv)), b(L.cross_attn.bv)));
  }
  cache.past = 0;
}

Var Model::decode(Binder& b, DecoderCache& cache, std::span<const int> tokens) const {
  auto& g = b.g;
  if (tokens.empty()) throw LengthError("decoder input is empty");
  if (cache.past + tokens.size() > static_cast<std::size_t>(config_.max_tgt_len))
    throw LengthError("decoder length " + std::to_string(cache.past + tokens.size()) +
                      " exceeds max_tgt_len " + std::to_string(config_.max_tgt_len));
  std::vector<int> positions(tokens.size());
  std::iota(positions.begin(), positions.end(), static_cast<int>(cache.past));
  Var x = g.add(g.embedding(b(tok_emb_), tokens), g.embedding(b(pos_emb_), positions));
  for (std::size_t l = 0; l < dec_.size(); ++l) {
    const auto& L = dec_[l];
    Var h = norm(b, L.ln1, x);
    Var k = g.matmul(h, b(L.self_attn.wk));
    Var v = g.add(g.matmul(h, b(L.self_attn.wv)), b(L.self_attn.bv));
    if (cache.self_k[l].valid()) {
      k = g.concat_rows(cache.self_k[l], k);
      v = g.concat_rows(cache.self_v[l], v);
    }
    cache.self_k[l] = k;
    cache.self_v[l] = v;
    x = g.add(x, attention(b, L.self_attn, h, k, v, cache.past, true));
    x = g.add(x, attention(b, L.cross_attn, norm(b, L.ln2, x), cache.cross_k[l], cache.cross_v[l], 0, false));
    x = g.add(x, ffn(b, L.ffn, norm(b, L.ln3, x)));
  }
  cache.past += tokens.size();
  x = norm(b, dec_ln_, x);
  return g.add(g.matmul(x, b(out_w_)), b(out_b_));
}

Var Model::forward(Graph& g, const Tensor& frames, std::span<const int> tgt_tokens) {
  Binder b(g, *this, this);
  DecoderCache cache;
  Var enc = encode(b, frames);
  prepare_cross(b, enc, cache);
  return decode(b, cache, tgt_tokens);
}

Tensor Model::logits(const Tensor& frames, std::span<const int> tgt_tokens) const {
  Graph g(false);
  Binder b(g, *this, nullptr);
  DecoderCache cache;
  Var enc = encode(b, frames);
  prepare_cross(b, enc, cache);
  return g.value(decode(b, cache, tgt_tokens));
}

namespace {

void teacher_forcing(const Sample& s, std::vector<int>& in, std::vector<int>& out) {
  in.assign(1, kBos);
  in.insert(in.end(), s.target.begin(), s.target.end());
  out.assign(s.target.begin(), s.target.end());
  out.push_back(kEos);
}

}  // namespace

Var Model::sample_loss(Graph& g, const Sample& s) {
  std::vector<int> in, out;
  teacher_forcing(s, in, out);
  return g.cross_entropy(forward(g, s.frames, in), out);
}

double Model::loss(const Sample& s) const {
  std::vector<int> in, out;
  teacher_forcing(s, in, out);
  Graph g(false);
  Binder b(g, *this, nullptr);
  DecoderCache cache;
  Var enc = encode(b, s.frames);
  prepare_cross(b, enc, cache);
  return g.data(g.cross_entropy(decode(b, cache, in), out))[0];
}

std::vector<int> Model::greedy_decode(const Tensor& frames, std::size_t max_len) const {
  if (max_len > static_cast<std::size_t>(config_.max_tgt_len))
    throw LengthError("max_len " + std::to_string(max_len) + " exceeds max_tgt_len " +
                      std::to_string(config_.max_tgt_len));
  Graph g(false);
  Binder b(g, *this, nullptr);
  DecoderCache cache;
  Var enc = encode(b, frames);
  prepare_cross(b, enc, cache);
  std::vector<int> out;
  int token = kBos;
  for (std::size_t step = 0; step < max_len; ++step) {
    const int in[1] = {token};
    auto logits = g.data(decode(b, cache, in));
    const int next = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    if (next == kEos) break;
    out.push_back(next);
    token = next;
  }
  return out;
}

std::vector<int> Model::greedy_decode(const Tensor& frames) const {
  return greedy_decode(frames, static_cast<std::size_t>(config_.max_tgt_len));
}

ParameterSnapshot Model::snapshot() const {
  ParameterSnapshot s;
  s.config = config_;
  s.values.reserve(params_.size());
  for (const auto& p : params_) s.values.push_back(p.data);
  return s;
}

void Model::restore(const ParameterSnapshot& snap) {
  if (!(snap.config == config_)) throw SnapshotError("snapshot was taken from a different model config");
  if (snap.values.size() != params_.size()) throw SnapshotError("snapshot parameter count mismatch");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (snap.values[i].size() != params_[i].data.size())
      throw SnapshotError("snapshot tensor size mismatch for " + registry_.at(i).name);
  }
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i].data = snap.values[i];
}

// ---------------------------------------------------------------------------

std::vector<double> train(Model& model, std::span<const Sample> data, const TrainOptions& opts) {
  if (data.empty()) throw ArgumentError("training set is empty");
  if (opts.batch == 0) throw ArgumentError("batch size must be positive");
  std::mt19937_64 rng(opts.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;

  std::vector<double> curve;
  curve.reserve(opts.steps);
  const double inv_batch = 1.0 / static_cast<double>(opts.batch);
  for (std::size_t step = 0; step < opts.steps; ++step) {
    model.zero_grad();
    double total = 0.0;
    for (std::size_t i = 0; i < opts.batch; ++i) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const Sample& s = data[order[cursor++]];
      Graph g;
      Var loss = model.sample_loss(g, s);
      const double v = g.data(loss)[0];
      if (!std::isfinite(v))
        throw TrainingError("loss became non-finite at step " + std::to_string(step));
      g.backward(loss, inv_batch);
      total += v;
    }
    curve.push_back(total * inv_batch);
    if (opts.lr == 0.0) continue;
    for (auto& p : model.params())
      for (std::size_t j = 0; j < p.data.size(); ++j) p.data[j] -= opts.lr * p.grad[j];
  }
  return curve;
}

}  // namespace prunelab
