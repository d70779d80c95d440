#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "lpt/optim.hpp"
#include "lpt/tape.hpp"

namespace lpt {

struct ModelConfig {
  std::size_t n_layers = 12;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t vocab_size = 512;
  std::size_t max_seq_len = 160;

  // Throws ConfigError naming the offending field.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

template <std::floating_point T>
struct LayerWeights {
  Tensor<T> ln1_gain, ln1_bias;
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;  // d×d (input × output) and d
  Tensor<T> ln2_gain, ln2_bias;
  Tensor<T> ff1_w, ff1_b;  // d×d_ff, d_ff
  Tensor<T> ff2_w, ff2_b;  // d_ff×d, d
};

// Pre-LayerNorm transformer encoder with an MLM head tied to the token
// embeddings (plus a per-token output bias).
template <std::floating_point T>
struct EncoderWeights {
  Tensor<T> token_embedding;     // V×d
  Tensor<T> position_embedding;  // max_seq_len×d
  std::vector<LayerWeights<T>> layers;
  Tensor<T> final_gain, final_bias;
  Tensor<T> mlm_bias;  // V

  static EncoderWeights initialize(const ModelConfig& config, std::uint64_t seed);
  // Rebuilds weights from named tensors, checking every name and shape.
  static EncoderWeights from_named(const ModelConfig& config, const ParameterList<T>& named);

  // Stable names ("layers.3.wq", ...). Tensors share storage with *this.
  ParameterList<T> named() const;
  EncoderWeights clone() const;
  // Registers every weight as a trainable leaf (pretraining only).
  EncoderWeights bind(Tape<T>& tape) const;
  // FNV-1a over names, shapes and raw bytes.
  std::uint64_t fingerprint() const;
  std::size_t parameter_count() const { return scalar_count(named()); }
};

// Token plus positional embeddings.
template <std::floating_point T>
Tensor<T> embed(Tape<T>& tape, const EncoderWeights<T>& w, const ModelConfig& config,
                std::span<const std::size_t> token_ids);

// One pre-LN block: x + Attn(LN1(x)), then + FFN(LN2(·)).
template <std::floating_point T>
Tensor<T> encoder_layer(Tape<T>& tape, const LayerWeights<T>& w, const ModelConfig& config, const Tensor<T>& x,
                        const ValidMask& mask);

// Input of transformer layer k (1-based): embeddings passed through layers
// 1..k-1. Runs with recording disabled; the result is a constant.
template <std::floating_point T>
Tensor<T> forward_lower(Tape<T>& tape, const EncoderWeights<T>& w, const ModelConfig& config,
                        std::span<const std::size_t> token_ids, const ValidMask& mask, std::size_t k);

// Layers k..L plus the final layer norm over a sequence that already holds any
// prompt rows. Each layer output passes through Tape::layer_boundary.
template <std::floating_point T>
Tensor<T> forward_upper(Tape<T>& tape, const EncoderWeights<T>& w, const ModelConfig& config, const Tensor<T>& hidden,
                        const ValidMask& mask, std::size_t k);

// Monolithic forward: embeddings, all layers, final layer norm.
template <std::floating_point T>
Tensor<T> forward_full(Tape<T>& tape, const EncoderWeights<T>& w, const ModelConfig& config,
                       std::span<const std::size_t> token_ids, const ValidMask& mask);

// Tied-embedding readout of row `mask_position`, restricted to the given
// token ids, in the order given: [1 × ids.size()].
template <std::floating_point T>
Tensor<T> mlm_logits_at(Tape<T>& tape, const EncoderWeights<T>& w, const Tensor<T>& final_states,
                        std::size_t mask_position, std::span<const std::size_t> verbalizer_ids);

// Full-vocabulary readout of every row of `states`: [rows × V].
template <std::floating_point T>
Tensor<T> mlm_logits(Tape<T>& tape, const EncoderWeights<T>& w, const Tensor<T>& states);

ValidMask all_valid(std::size_t n);

// ---------------------------------------------------------------------------
// Toy masked-language-model pretraining

struct PretrainOptions {
  double mlm_prob = 0.15;
  std::size_t steps = 3000;
  std::size_t batch_size = 16;
  double peak_lr = 2e-3;
  double warmup_rate = 0.06;
  double weight_decay = 0.01;
  std::uint64_t seed = 1;
  double heldout_fraction = 0.1;
  std::size_t mask_token_id = 4;
  // Ids below this are reserved specials and are never masked or sampled.
  std::size_t first_regular_id = 5;
};

struct PretrainReport {
  double initial_heldout_loss = 0;
  double final_heldout_loss = 0;
  double heldout_mask_accuracy = 0;
  std::size_t train_sequences = 0;
  std::size_t heldout_sequences = 0;
  std::size_t train_tokens = 0;
  std::vector<double> loss_curve;
};

template <std::floating_point T>
struct PretrainResult {
  EncoderWeights<T> weights;
  PretrainReport report;
};

using TokenSequence = std::vector<std::size_t>;

template <std::floating_point T>
PretrainResult<T> pretrain_toy(const ModelConfig& config, const std::vector<TokenSequence>& corpus,
                               const PretrainOptions& options);

}  // namespace lpt
