#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "prunelab/graph.hpp"
#include "prunelab/registry.hpp"
#include "prunelab/tensor.hpp"

namespace prunelab {

/// Reserved token ids. Content tokens occupy [kFirstContentToken, vocab_size).
inline constexpr int kBos = 0;
inline constexpr int kEos = 1;
inline constexpr int kFirstContentToken = 2;

struct ModelConfig {
  int enc_layers = 6;
  int dec_layers = 6;
  int d_model = 64;
  int n_heads = 4;
  int d_ffn = 256;
  int vocab_size = 64;
  int d_in = 16;         // frame feature dimensionality
  int max_src_len = 32;  // frames
  int max_tgt_len = 16;  // decoder positions, BOS included
  int conv_kernel = 3;
  std::uint64_t seed = 1234;

  /// Throws ConfigError naming the first violated constraint.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// One transcribed utterance: frames [T_src x d_in] and its content tokens.
struct Sample {
  Tensor frames;
  std::vector<int> target;
};

struct ParameterSnapshot {
  ModelConfig config;
  std::vector<std::vector<double>> values;

  std::size_t size() const;
};

/// Whisper-shaped pre-LN encoder-decoder transformer.
///
/// Encoder: conv(k, stride 1) -> GELU -> conv(k, stride 2) -> GELU -> fixed
/// sinusoidal positions -> blocks -> LayerNorm. Decoder: token + learned
/// positional embeddings -> blocks (causal self-attn, cross-attn, FFN) ->
/// LayerNorm -> untied output projection.
class Model {
 public:
  static Model build(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const ParameterRegistry& registry() const { return registry_; }
  std::vector<Tensor>& params() { return params_; }
  const std::vector<Tensor>& params() const { return params_; }
  Tensor& param(std::size_t id) { return params_.at(id); }
  const Tensor& param(std::size_t id) const { return params_.at(id); }
  std::size_t parameter_count() const { return registry_.total_count(); }

  void zero_grad();

  /// Teacher-forced pass recorded on `g`; `tgt_tokens` is the decoder input
  /// (BOS first). Returns logits [T_tgt x vocab].
  Var forward(Graph& g, const Tensor& frames, std::span<const int> tgt_tokens);
  /// Inference-only teacher-forced logits.
  Tensor logits(const Tensor& frames, std::span<const int> tgt_tokens) const;

  /// Loss of one sample: input [BOS, y...], targets [y..., EOS].
  Var sample_loss(Graph& g, const Sample& s);
  double loss(const Sample& s) const;

  /// Argmax decoding from BOS; stops after EOS or `max_len` generated
  /// tokens. The returned sequence excludes BOS and EOS.
  std::vector<int> greedy_decode(const Tensor& frames, std::size_t max_len) const;
  std::vector<int> greedy_decode(const Tensor& frames) const;

  ParameterSnapshot snapshot() const;
  void restore(const ParameterSnapshot& snap);

 private:
  struct Attention {
    std::size_t wq, bq, wk, wv, bv, wo, bo;
  };
  struct Norm {
    std::size_t gamma, beta;
  };
  struct Ffn {
    std::size_t w1, b1, w2, b2;
  };
  struct EncoderLayer {
    Norm ln1;
    Attention attn;
    Norm ln2;
    Ffn ffn;
  };
  struct DecoderLayer {
    Norm ln1;
    Attention self_attn;
    Norm ln2;
    Attention cross_attn;
    Norm ln3;
    Ffn ffn;
  };

  class Binder;
  struct DecoderCache;

  Model() = default;
  Var encode(Binder& b, const Tensor& frames) const;
  void prepare_cross(Binder& b, Var enc, DecoderCache& cache) const;
  Var decode(Binder& b, DecoderCache& cache, std::span<const int> tokens) const;
  Var attention(Binder& b, const Attention& a, Var x, Var keys, Var values, std::size_t past,
                bool causal) const;
  Var ffn(Binder& b, const Ffn& f, Var x) const;
  Var norm(Binder& b, const Norm& n, Var x) const;

  ModelConfig config_;
  ParameterRegistry registry_;
  std::vector<Tensor> params_;

  std::size_t conv1_w_ = 0, conv1_b_ = 0, conv2_w_ = 0, conv2_b_ = 0;
  std::vector<EncoderLayer> enc_;
  Norm enc_ln_{};
  std::size_t tok_emb_ = 0, pos_emb_ = 0;
  std::vector<DecoderLayer> dec_;
  Norm dec_ln_{};
  std::size_t out_w_ = 0, out_b_ = 0;
};

/// Fixed sinusoidal table [length x dim], sin half followed by cos half.
Tensor sinusoid_table(std::size_t length, std::size_t dim);

struct TrainOptions {
  std::size_t steps = 1500;
  double lr = 0.3;
  std::size_t batch = 16;
  std::uint64_t seed = 1;
};

/// Plain minibatch SGD with a fixed learning rate over a seeded, reshuffled
/// cycle through `data`. Returns the per-step mean NLL. Throws TrainingError
/// if a loss goes non-finite.
std::vector<double> train(Model& model, std::span<const Sample> data, const TrainOptions& opts);

}  // namespace prunelab
