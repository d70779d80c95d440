#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "lpt/encoder.hpp"
#include "lpt/optim.hpp"
#include "lpt/tape.hpp"

namespace lpt {

enum class PromptMethod { PT, LateNoPG, NPG, APPG, MPPG };

std::string method_name(PromptMethod method);
// Accepts PT, LATE, LATE_NOPG, NPG, APPG, MPPG (case-insensitive).
std::optional<PromptMethod> parse_method(std::string_view text);
bool uses_generator(PromptMethod method) noexcept;

std::size_t default_prompt_layer(std::size_t n_layers);

struct PromptSpec {
  PromptMethod method = PromptMethod::NPG;
  std::size_t l = 5;   // prompt length
  std::size_t k = 1;   // 1-based prompt layer
  std::size_t m = 128; // generator bottleneck width

  // l = 20 for PT and LATE_NOPG, 5 for generators; m = 128; k = 1 for PT and
  // the middle layer otherwise.
  static PromptSpec defaults(PromptMethod method, const ModelConfig& config);
  // Throws ConfigError naming the offending field.
  void validate(const ModelConfig& config) const;
  bool operator==(const PromptSpec&) const = default;
};

std::size_t count_tunable(const PromptSpec& spec, const ModelConfig& config);

template <std::floating_point T>
struct GeneratorWeights {
  // NPG: w1 m×d, b1 m, w2 (l·d)×m, b2 l·d.  PPG: w1 m×d, b1 m, w2 d×m, b2 d.
  Tensor<T> w1, b1, w2, b2;

  // Linear-layer style uniform(±1/sqrt(fan_in)) weights and biases.
  static GeneratorWeights initialize(const PromptSpec& spec, std::size_t d_model, std::uint64_t seed);
  ParameterList<T> named() const;
};

// i.i.d. N(0, 0.02²) entries, seeded.
template <std::floating_point T>
Tensor<T> init_soft_prompt(std::size_t l, std::size_t d, std::uint64_t seed);

// p = reshape(W2·relu(W1·h + b1) + b2, l×d). h_cls ([d] or [1×d]) is detached.
template <std::floating_point T>
Tensor<T> npg_generate(Tape<T>& tape, const Tensor<T>& h_cls, const GeneratorWeights<T>& gw, std::size_t l,
                       std::size_t d);

// p = (W2·relu(pool_l(W1·Hᵀ + b1)) + b2)ᵀ over the non-pad prefix of H. H is
// detached. Pad rows must form a suffix.
template <std::floating_point T>
Tensor<T> ppg_generate(Tape<T>& tape, const Tensor<T>& h, const ValidMask& pad_mask, const GeneratorWeights<T>& gw,
                       std::size_t l, PoolMode mode);

template <std::floating_point T>
struct InsertedPrompt {
  Tensor<T> states;       // (l+n)×d
  ValidMask mask;         // prompt rows attendable, then the original mask
  std::size_t shift = 0;  // = l
};

template <std::floating_point T>
InsertedPrompt<T> insert_prompt(Tape<T>& tape, const Tensor<T>& prompt, const Tensor<T>& hidden,
                                const ValidMask& pad_mask);

// The tunable state of one prompt method: either a soft prompt matrix or
// generator weights.
template <std::floating_point T>
struct PromptParameters {
  PromptSpec spec;
  std::optional<Tensor<T>> soft_prompt;
  std::optional<GeneratorWeights<T>> generator;

  static PromptParameters initialize(const PromptSpec& spec, const ModelConfig& config, std::uint64_t seed);
  static PromptParameters from_named(const PromptSpec& spec, const ModelConfig& config, const ParameterList<T>& named);
  // Names: "prompt" or "generator.w1" ... "generator.b2".
  ParameterList<T> named() const;
  PromptParameters clone() const;
  PromptParameters bind(Tape<T>& tape) const;

  // Prompt for one input given the output of forward_lower (n×d).
  Tensor<T> generate(Tape<T>& tape, const Tensor<T>& lower_states, const ValidMask& pad_mask) const;
};

extern template struct GeneratorWeights<float>;
extern template struct GeneratorWeights<double>;
extern template struct PromptParameters<float>;
extern template struct PromptParameters<double>;

}  // namespace lpt
