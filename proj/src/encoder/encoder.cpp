#include "lpt/encoder.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <map>
#include <random>
#include <utility>

namespace lpt {

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("model." + what);
  };
  require(n_layers >= 1, "n_layers must be positive");
  require(d_model >= 1, "d_model must be positive");
  require(n_heads >= 1 && d_model % n_heads == 0, "n_heads must divide d_model");
  require(d_ff >= 1, "d_ff must be positive");
  require(vocab_size >= 1, "vocab_size must be positive");
  require(max_seq_len >= 1, "max_seq_len must be positive");
}

ValidMask all_valid(std::size_t n) { return ValidMask(n, 1); }

namespace {

// Normal: N(0, 0.02) for embeddings; FanIn: N(0, 1/fan_in) for projections.
enum class Init { Normal, FanIn, Zero, One };

template <std::floating_point T>
struct LayerField {
  const char* name;
  Tensor<T> LayerWeights<T>::*member;
  Init init;
};

template <std::floating_point T>
const std::array<LayerField<T>, 16>& layer_fields() {
  using L = LayerWeights<T>;
  static const std::array<LayerField<T>, 16> fields{{
      {"ln1_gain", &L::ln1_gain, Init::One},
      {"ln1_bias", &L::ln1_bias, Init::Zero},
      {"wq", &L::wq, Init::FanIn},
      {"bq", &L::bq, Init::Zero},
      {"wk", &L::wk, Init::FanIn},
      {"bk", &L::bk, Init::Zero},
      {"wv", &L::wv, Init::FanIn},
      {"bv", &L::bv, Init::Zero},
      {"wo", &L::wo, Init::FanIn},
      {"bo", &L::bo, Init::Zero},
      {"ln2_gain", &L::ln2_gain, Init::One},
      {"ln2_bias", &L::ln2_bias, Init::Zero},
      {"ff1_w", &L::ff1_w, Init::FanIn},
      {"ff1_b", &L::ff1_b, Init::Zero},
      {"ff2_w", &L::ff2_w, Init::FanIn},
      {"ff2_b", &L::ff2_b, Init::Zero},
  }};
  return fields;
}

Shape layer_field_shape(const std::string& name, const ModelConfig& c) {
  const std::size_t d = c.d_model, f = c.d_ff;
  if (name == "ff1_w") return {d, f};
  if (name == "ff1_b") return {f};
  if (name == "ff2_w") return {f, d};
  if (name[0] == 'w') return {d, d};
  return {d};
}

template <std::floating_point T>
Tensor<T> make(Shape shape, Init init, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  auto v = t.mutable_values();
  if (init == Init::One) {
    std::fill(v.begin(), v.end(), T(1));
  } else if (init == Init::Normal || init == Init::FanIn) {
    const double std = init == Init::Normal ? 0.02 : 1.0 / std::sqrt(static_cast<double>(t.shape()[0]));
    std::normal_distribution<double> dist(0.0, std);
    for (auto& x : v) x = static_cast<T>(dist(rng));
  }
  return t;
}

}  // namespace

template <std::floating_point T>
EncoderWeights<T> EncoderWeights<T>::initialize(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config.d_model;
  EncoderWeights w;
  w.token_embedding = make<T>({config.vocab_size, d}, Init::Normal, rng);
  w.position_embedding = make<T>({config.max_seq_len, d}, Init::Normal, rng);
  w.layers.resize(config.n_layers);
  for (auto& layer : w.layers)
    for (const auto& f : layer_fields<T>()) layer.*f.member = make<T>(layer_field_shape(f.name, config), f.init, rng);
  w.final_gain = make<T>({d}, Init::One, rng);
  w.final_bias = make<T>({d}, Init::Zero, rng);
  w.mlm_bias = make<T>({config.vocab_size}, Init::Zero, rng);
  return w;
}

template <std::floating_point T>
ParameterList<T> EncoderWeights<T>::named() const {
  ParameterList<T> out;
  out.push_back({"token_embedding", token_embedding});
  out.push_back({"position_embedding", position_embedding});
  for (std::size_t i = 0; i < layers.size(); ++i)
    for (const auto& f : layer_fields<T>())
      out.push_back({"layers." + std::to_string(i) + "." + f.name, layers[i].*f.member});
  out.push_back({"final_gain", final_gain});
  out.push_back({"final_bias", final_bias});
  out.push_back({"mlm_bias", mlm_bias});
  return out;
}

template <std::floating_point T>
EncoderWeights<T> EncoderWeights<T>::from_named(const ModelConfig& config, const ParameterList<T>& named) {
  config.validate();
  std::map<std::string, const Tensor<T>*> by_name;
  for (const auto& p : named) by_name[p.name] = &p.tensor;
  auto take = [&](const std::string& name, const Shape& shape) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("encoder weights: missing tensor '" + name + "'");
    if (it->second->shape() != shape) {
      throw DataError("encoder weights: tensor '" + name + "' has shape " + shape_string(it->second->shape()) +
                      ", config expects " + shape_string(shape));
    }
    return it->second->clone();
  };
  const std::size_t d = config.d_model;
  EncoderWeights w;
  w.token_embedding = take("token_embedding", {config.vocab_size, d});
  w.position_embedding = take("position_embedding", {config.max_seq_len, d});
  w.layers.resize(config.n_layers);
  for (std::size_t i = 0; i < config.n_layers; ++i)
    for (const auto& f : layer_fields<T>())
      w.layers[i].*f.member = take("layers." + std::to_string(i) + "." + f.name, layer_field_shape(f.name, config));
  w.final_gain = take("final_gain", {d});
  w.final_bias = take("final_bias", {d});
  w.mlm_bias = take("mlm_bias", {config.vocab_size});
  return w;
}

template <std::floating_point T>
EncoderWeights<T> EncoderWeights<T>::clone() const {
  EncoderWeights w = *this;
  w.token_embedding = token_embedding.clone();
  w.position_embedding = position_embedding.clone();
  for (auto& layer : w.layers)
    for (const auto& f : layer_fields<T>()) layer.*f.member = (layer.*f.member).clone();
  w.final_gain = final_gain.clone();
  w.final_bias = final_bias.clone();
  w.mlm_bias = mlm_bias.clone();
  return w;
}

template <std::floating_point T>
EncoderWeights<T> EncoderWeights<T>::bind(Tape<T>& tape) const {
  EncoderWeights w = *this;
  w.token_embedding = tape.parameter("token_embedding", token_embedding);
  w.position_embedding = tape.parameter("position_embedding", position_embedding);
  for (std::size_t i = 0; i < w.layers.size(); ++i)
    for (const auto& f : layer_fields<T>())
      w.layers[i].*f.member = tape.parameter("layers." + std::to_string(i) + "." + f.name, layers[i].*f.member);
  w.final_gain = tape.parameter("final_gain", final_gain);
  w.final_bias = tape.parameter("final_bias", final_bias);
  w.mlm_bias = tape.parameter("mlm_bias", mlm_bias);
  return w;
}

template <std::floating_point T>
std::uint64_t EncoderWeights<T>::fingerprint() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& p : named()) {
    mix(p.name.data(), p.name.size());
    for (std::size_t dim : p.tensor.shape()) mix(&dim, sizeof dim);
    mix(p.tensor.values().data(), p.tensor.numel() * sizeof(T));
  }
  return h;
}

// ---------------------------------------------------------------------------
// Forward passes

template <std::floating_point T>
Tensor<T> embed(Tape<T>& tape, const EncoderWeights<T>& w, const ModelConfig& config,
                std::span<const std::size_t> token_ids) {
  if (token_ids.size() > config.max_seq_len) {
    throw DimensionError("sequence of " + std::to_string(token_ids.size()) + " tokens exceeds max_seq_len " +
                         std::to_string(config.max_seq_len));
  }
  std::vector<std::size_t> positions(token_ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
  return tape.add(tape.embedding_lookup(w.token_embedding, token_ids),
                  tape.embedding_lookup(w.position_embedding, positions));
}

template <std::floating_point T>
Tensor<T> encoder_layer(Tape<T>& tape, const LayerWeights<T>& w, const ModelConfig& config, const Tensor<T>& x,
                        const ValidMask& mask) {
  auto linear = [&tape](const Tensor<T>& in, const Tensor<T>& weight, const Tensor<T>& bias) {
    return tape.add_row_vector(tape.matmul(in, weight), bias);
  };
  const Tensor<T> a = tape.layer_norm(x, w.ln1_gain, w.ln1_bias);
  const Tensor<T> attended =
      tape.attention(linear(a, w.wq, w.bq), linear(a, w.wk, w.bk), linear(a, w.wv, w.bv), mask, config.n_heads);
  const Tensor<T> h = tape.add(x, linear(attended, w.wo, w.bo));
  const Tensor<T> f = tape.layer_norm(h, w.ln2_gain, w.ln2_bias);
  return tape.add(h, linear(tape.gelu(linear(f, w.ff1_w, w.ff1_b)), w.ff2_w, w.ff2_b));
}

namespace {

void check_mask(std::size_t rows, const ValidMask& mask) {
  if (mask.size() != rows) {
    throw DimensionError("pad mask of length " + std::to_string(mask.size()) + " for " + std::to_string(rows) +
                         " positions");
  }
}

}  // namespace

template <std::floating_point T>
Tensor<T> forward_lower(Tape<T>& tape, const EncoderWeights<T>& w, const ModelConfig& config,
                        std::span<const std::size_t> token_ids, const ValidMask& mask, std::size_t k) {
  if (k < 1 || k > config.n_layers + 1) {
    throw ContractError("forward_lower: prompt layer " + std::to_string(k) + " outside 1.." +
                        std::to_string(config.n_layers + 1));
  }
  check_mask(token_ids.size(), mask);
  NoRecordScope<T> frozen(tape);
  Tensor<T> x = embed(tape, w, config, token_ids);
  for (std::size_t layer = 1; layer < k; ++layer) x = encoder_layer(tape, w.layers[layer - 1], config, x, mask);
  return x;
}

template <std::floating_point T>
Tensor<T> forward_upper(Tape<T>& tape, const EncoderWeights<T>& w, const ModelConfig& config, const Tensor<T>& hidden,
                        const ValidMask& mask, std::size_t k) {
  if (k < 1 || k > config.n_layers + 1) {
    throw ContractError("forward_upper: prompt layer " + std::to_string(k) + " outside 1.." +
                        std::to_string(config.n_layers + 1));
  }
  if (hidden.rank() != 2 || hidden.shape()[1] != config.d_model) {
    throw DimensionError("forward_upper: hidden states " + shape_string(hidden.shape()) + " do not have width d_model=" +
                         std::to_string(config.d_model));
  }
  check_mask(hidden.rows(), mask);
  Tensor<T> x = hidden;
  for (std::size_t layer = k; layer <= config.n_layers; ++layer) {
    x = tape.layer_boundary(encoder_layer(tape, w.layers[layer - 1], config, x, mask), layer);
  }
  return tape.layer_norm(x, w.final_gain, w.final_bias);
}

template <std::floating_point T>
Tensor<T> forward_full(Tape<T>& tape, const EncoderWeights<T>& w, const ModelConfig& config,
                       std::span<const std::size_t> token_ids, const ValidMask& mask) {
  check_mask(token_ids.size(), mask);
  return forward_upper(tape, w, config, embed(tape, w, config, token_ids), mask, 1);
}

template <std::floating_point T>
Tensor<T> mlm_logits_at(Tape<T>& tape, const EncoderWeights<T>& w, const Tensor<T>& final_states,
                        std::size_t mask_position, std::span<const std::size_t> verbalizer_ids) {
  if (verbalizer_ids.empty()) throw ContractError("mlm_logits_at: empty verbalizer");
  if (mask_position >= final_states.rows()) {
    throw ContractError("mlm_logits_at: mask position " + std::to_string(mask_position) + " outside sequence of " +
                        std::to_string(final_states.rows()));
  }
  const Tensor<T> row = tape.slice_rows(final_states, mask_position, 1);
  const Tensor<T> label_embeddings = tape.embedding_lookup(w.token_embedding, verbalizer_ids);
  const Tensor<T> label_bias = tape.reshape(
      tape.embedding_lookup(tape.reshape(w.mlm_bias, {w.mlm_bias.numel(), 1}), verbalizer_ids),
      {verbalizer_ids.size()});
  return tape.add_row_vector(tape.matmul_nt(row, label_embeddings), label_bias);
}

template <std::floating_point T>
Tensor<T> mlm_logits(Tape<T>& tape, const EncoderWeights<T>& w, const Tensor<T>& states) {
  return tape.add_row_vector(tape.matmul_nt(states, w.token_embedding), w.mlm_bias);
}

#define LPT_INSTANTIATE_ENCODER(T)                                                                                    \
  template struct EncoderWeights<T>;                                                                                   \
  template Tensor<T> embed(Tape<T>&, const EncoderWeights<T>&, const ModelConfig&, std::span<const std::size_t>);      \
  template Tensor<T> encoder_layer(Tape<T>&, const LayerWeights<T>&, const ModelConfig&, const Tensor<T>&,            \
                                   const ValidMask&);                                                                  \
  template Tensor<T> forward_lower(Tape<T>&, const EncoderWeights<T>&, const ModelConfig&,                            \
                                   std::span<const std::size_t>, const ValidMask&, std::size_t);                       \
  template Tensor<T> forward_upper(Tape<T>&, const EncoderWeights<T>&, const ModelConfig&, const Tensor<T>&,          \
                                   const ValidMask&, std::size_t);                                                     \
  template Tensor<T> forward_full(Tape<T>&, const EncoderWeights<T>&, const ModelConfig&,                             \
                                  std::span<const std::size_t>, const ValidMask&);                                     \
  template Tensor<T> mlm_logits_at(Tape<T>&, const EncoderWeights<T>&, const Tensor<T>&, std::size_t,                 \
                                   std::span<const std::size_t>);                                                      \
  template Tensor<T> mlm_logits(Tape<T>&, const EncoderWeights<T>&, const Tensor<T>&);

LPT_INSTANTIATE_ENCODER(float)
LPT_INSTANTIATE_ENCODER(double)

}  // namespace lpt
