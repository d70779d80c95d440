#include "lpt/prompting.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <random>

#include "lpt/errors.hpp"

namespace lpt {

std::string method_name(PromptMethod method) {
  switch (method) {
    case PromptMethod::PT: return "PT";
    case PromptMethod::LateNoPG: return "LATE_NOPG";
    case PromptMethod::NPG: return "NPG";
    case PromptMethod::APPG: return "APPG";
    case PromptMethod::MPPG: return "MPPG";
  }
  return "?";
}

std::optional<PromptMethod> parse_method(std::string_view text) {
  std::string s(text);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  if (s == "PT") return PromptMethod::PT;
  if (s == "LATE" || s == "LATE_NOPG") return PromptMethod::LateNoPG;
  if (s == "NPG") return PromptMethod::NPG;
  if (s == "APPG") return PromptMethod::APPG;
  if (s == "MPPG") return PromptMethod::MPPG;
  return std::nullopt;
}

bool uses_generator(PromptMethod method) noexcept {
  return method == PromptMethod::NPG || method == PromptMethod::APPG || method == PromptMethod::MPPG;
}

std::size_t default_prompt_layer(std::size_t n_layers) {
  if (n_layers == 0) throw ConfigError("default_prompt_layer: model.n_layers must be positive");
  return n_layers / 2 + 1;
}

PromptSpec PromptSpec::defaults(PromptMethod method, const ModelConfig& config) {
  PromptSpec spec;
  spec.method = method;
  spec.l = uses_generator(method) ? 5 : 20;
  spec.m = 128;
  spec.k = method == PromptMethod::PT ? 1 : default_prompt_layer(config.n_layers);
  return spec;
}

void PromptSpec::validate(const ModelConfig& config) const {
  if (l < 1) throw ConfigError("prompt.l must be at least 1");
  if (k < 1 || k > config.n_layers) {
    throw ConfigError("prompt.k = " + std::to_string(k) + " is outside 1.." + std::to_string(config.n_layers));
  }
  if (method == PromptMethod::PT && k != 1) {
    throw ConfigError("prompt.k = " + std::to_string(k) + " conflicts with method PT, which always uses layer 1");
  }
  if (uses_generator(method) && m < 1) throw ConfigError("prompt.m must be at least 1 for " + method_name(method));
}

std::size_t count_tunable(const PromptSpec& spec, const ModelConfig& config) {
  const std::size_t d = config.d_model, l = spec.l, m = spec.m;
  switch (spec.method) {
    case PromptMethod::PT:
    case PromptMethod::LateNoPG: return l * d;
    case PromptMethod::NPG: return m * d + m + l * d * m + l * d;
    case PromptMethod::APPG:
    case PromptMethod::MPPG: return m * d + m + d * m + d;
  }
  return 0;
}

namespace {

template <std::floating_point T>
Tensor<T> uniform(Shape shape, double bound, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& x : t.mutable_values()) x = static_cast<T>(dist(rng));
  return t;
}

template <std::floating_point T>
void expect_shape(const Tensor<T>& t, const Shape& shape, const char* what) {
  if (t.shape() != shape) {
    throw DimensionError(std::string(what) + " has shape " + shape_string(t.shape()) + ", expected " +
                         shape_string(shape));
  }
}

template <std::floating_point T>
Tensor<T> take(const std::map<std::string, const Tensor<T>*>& by_name, const std::string& name, const Shape& shape) {
  auto it = by_name.find(name);
  if (it == by_name.end()) throw DataError("prompt parameters: missing tensor '" + name + "'");
  if (it->second->shape() != shape) {
    throw DataError("prompt parameters: tensor '" + name + "' has shape " + shape_string(it->second->shape()) +
                    ", expected " + shape_string(shape));
  }
  return it->second->clone();
}

struct GeneratorShapes {
  Shape w1, b1, w2, b2;
};

GeneratorShapes generator_shapes(const PromptSpec& spec, std::size_t d) {
  const std::size_t m = spec.m;
  if (spec.method == PromptMethod::NPG) return {{m, d}, {m}, {spec.l * d, m}, {spec.l * d}};
  return {{m, d}, {m}, {d, m}, {d}};
}

}  // namespace

template <std::floating_point T>
GeneratorWeights<T> GeneratorWeights<T>::initialize(const PromptSpec& spec, std::size_t d_model, std::uint64_t seed) {
  if (!uses_generator(spec.method)) throw ContractError("method " + method_name(spec.method) + " has no generator");
  std::mt19937_64 rng(seed);
  const auto s = generator_shapes(spec, d_model);
  const double b_in = 1.0 / std::sqrt(static_cast<double>(d_model));
  const double b_mid = 1.0 / std::sqrt(static_cast<double>(spec.m));
  GeneratorWeights g;
  g.w1 = uniform<T>(s.w1, b_in, rng);
  g.b1 = uniform<T>(s.b1, b_in, rng);
  g.w2 = uniform<T>(s.w2, b_mid, rng);
  g.b2 = uniform<T>(s.b2, b_mid, rng);
  return g;
}

template <std::floating_point T>
ParameterList<T> GeneratorWeights<T>::named() const {
  return {{"generator.w1", w1}, {"generator.b1", b1}, {"generator.w2", w2}, {"generator.b2", b2}};
}

template <std::floating_point T>
Tensor<T> init_soft_prompt(std::size_t l, std::size_t d, std::uint64_t seed) {
  if (l == 0 || d == 0) throw ContractError("init_soft_prompt: l and d must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 0.02);
  Tensor<T> p({l, d});
  for (auto& x : p.mutable_values()) x = static_cast<T>(dist(rng));
  return p;
}

template <std::floating_point T>
Tensor<T> npg_generate(Tape<T>& tape, const Tensor<T>& h_cls, const GeneratorWeights<T>& gw, std::size_t l,
                       std::size_t d) {
  if (h_cls.numel() != d || (h_cls.rank() == 2 && h_cls.rows() != 1)) {
    throw DimensionError("npg_generate: h_cls has shape " + shape_string(h_cls.shape()) + ", expected [" +
                         std::to_string(d) + "]");
  }
  const std::size_t m = gw.w1.rows();
  expect_shape(gw.w1, {m, d}, "generator.w1");
  expect_shape(gw.b1, {m}, "generator.b1");
  expect_shape(gw.w2, {l * d, m}, "generator.w2");
  expect_shape(gw.b2, {l * d}, "generator.b2");
  const auto src = h_cls.values();
  const Tensor<T> h({1, d}, std::vector<T>(src.begin(), src.end()));  // detached copy
  const Tensor<T> z = tape.relu(tape.add_row_vector(tape.matmul_nt(h, gw.w1), gw.b1));
  const Tensor<T> p = tape.add_row_vector(tape.matmul_nt(z, gw.w2), gw.b2);
  return tape.reshape(p, {l, d});
}

template <std::floating_point T>
Tensor<T> ppg_generate(Tape<T>& tape, const Tensor<T>& h, const ValidMask& pad_mask, const GeneratorWeights<T>& gw,
                       std::size_t l, PoolMode mode) {
  if (h.rank() != 2) throw DimensionError("ppg_generate: h has shape " + shape_string(h.shape()) + ", expected [nxd]");
  const std::size_t n = h.rows(), d = h.cols(), m = gw.w1.rows();
  if (pad_mask.size() != n) {
    throw DimensionError("ppg_generate: pad mask has " + std::to_string(pad_mask.size()) + " entries for " +
                         std::to_string(n) + " rows");
  }
  expect_shape(gw.w1, {m, d}, "generator.w1");
  expect_shape(gw.b1, {m}, "generator.b1");
  expect_shape(gw.w2, {d, m}, "generator.w2");
  expect_shape(gw.b2, {d}, "generator.b2");
  const auto valid = static_cast<std::size_t>(std::count(pad_mask.begin(), pad_mask.end(), std::uint8_t{1}));
  if (!std::all_of(pad_mask.begin(), pad_mask.begin() + static_cast<std::ptrdiff_t>(valid),
                   [](std::uint8_t v) { return v == 1; })) {
    throw ContractError("ppg_generate: pad positions must follow all non-pad positions");
  }
  const Tensor<T> a = tape.add_col_vector(tape.matmul_nt(gw.w1, detach(h)), gw.b1);  // m×n
  const Tensor<T> pooled = tape.relu(tape.bucket_pool(a, l, mode, valid));          // m×l
  const Tensor<T> up = tape.add_col_vector(tape.matmul(gw.w2, pooled), gw.b2);       // d×l
  return tape.transpose(up);
}

template <std::floating_point T>
InsertedPrompt<T> insert_prompt(Tape<T>& tape, const Tensor<T>& prompt, const Tensor<T>& hidden,
                                const ValidMask& pad_mask) {
  if (hidden.rank() != 2 || pad_mask.size() != hidden.rows()) {
    throw DimensionError("insert_prompt: hidden " + shape_string(hidden.shape()) + " with a mask of " +
                         std::to_string(pad_mask.size()) + " entries");
  }
  if (prompt.numel() == 0) return {hidden, pad_mask, 0};
  if (prompt.rank() != 2 || prompt.cols() != hidden.cols()) {
    throw DimensionError("insert_prompt: prompt " + shape_string(prompt.shape()) + " does not match hidden " +
                         shape_string(hidden.shape()));
  }
  InsertedPrompt<T> out;
  out.shift = prompt.rows();
  out.states = tape.concat_rows(prompt, hidden);
  out.mask.assign(out.shift, 1);
  out.mask.insert(out.mask.end(), pad_mask.begin(), pad_mask.end());
  return out;
}

template <std::floating_point T>
PromptParameters<T> PromptParameters<T>::initialize(const PromptSpec& spec, const ModelConfig& config,
                                                    std::uint64_t seed) {
  spec.validate(config);
  PromptParameters p;
  p.spec = spec;
  if (uses_generator(spec.method)) {
    p.generator = GeneratorWeights<T>::initialize(spec, config.d_model, seed);
  } else {
    p.soft_prompt = init_soft_prompt<T>(spec.l, config.d_model, seed);
  }
  return p;
}

template <std::floating_point T>
PromptParameters<T> PromptParameters<T>::from_named(const PromptSpec& spec, const ModelConfig& config,
                                                    const ParameterList<T>& named) {
  spec.validate(config);
  std::map<std::string, const Tensor<T>*> by_name;
  for (const auto& p : named) by_name[p.name] = &p.tensor;
  PromptParameters out;
  out.spec = spec;
  if (uses_generator(spec.method)) {
    const auto s = generator_shapes(spec, config.d_model);
    out.generator = GeneratorWeights<T>{take(by_name, "generator.w1", s.w1), take(by_name, "generator.b1", s.b1),
                                        take(by_name, "generator.w2", s.w2), take(by_name, "generator.b2", s.b2)};
  } else {
    out.soft_prompt = take(by_name, "prompt", {spec.l, config.d_model});
  }
  return out;
}

template <std::floating_point T>
ParameterList<T> PromptParameters<T>::named() const {
  if (generator) return generator->named();
  return {{"prompt", *soft_prompt}};
}

template <std::floating_point T>
PromptParameters<T> PromptParameters<T>::clone() const {
  PromptParameters out = *this;
  if (generator) {
    out.generator = GeneratorWeights<T>{generator->w1.clone(), generator->b1.clone(), generator->w2.clone(),
                                        generator->b2.clone()};
  }
  if (soft_prompt) out.soft_prompt = soft_prompt->clone();
  return out;
}

template <std::floating_point T>
PromptParameters<T> PromptParameters<T>::bind(Tape<T>& tape) const {
  PromptParameters out = *this;
  if (generator) {
    out.generator = GeneratorWeights<T>{
        tape.parameter("generator.w1", generator->w1), tape.parameter("generator.b1", generator->b1),
        tape.parameter("generator.w2", generator->w2), tape.parameter("generator.b2", generator->b2)};
  }
  if (soft_prompt) out.soft_prompt = tape.parameter("prompt", *soft_prompt);
  return out;
}

template <std::floating_point T>
Tensor<T> PromptParameters<T>::generate(Tape<T>& tape, const Tensor<T>& lower_states,
                                        const ValidMask& pad_mask) const {
  const std::size_t d = lower_states.cols();
  switch (spec.method) {
    case PromptMethod::PT:
    case PromptMethod::LateNoPG: return *soft_prompt;
    case PromptMethod::NPG:
    {
      const auto first = lower_states.values().first(d);
      return npg_generate(tape, Tensor<T>({d}, std::vector<T>(first.begin(), first.end())), *generator, spec.l, d);
    }
    case PromptMethod::APPG: return ppg_generate(tape, lower_states, pad_mask, *generator, spec.l, PoolMode::Avg);
    case PromptMethod::MPPG: return ppg_generate(tape, lower_states, pad_mask, *generator, spec.l, PoolMode::Max);
  }
  throw ContractError("unknown prompt method");
}

#define LPT_INSTANTIATE_PROMPTING(T)                                                                                \
  template struct GeneratorWeights<T>;                                                                              \
  template struct PromptParameters<T>;                                                                              \
  template Tensor<T> init_soft_prompt<T>(std::size_t, std::size_t, std::uint64_t);                                  \
  template Tensor<T> npg_generate(Tape<T>&, const Tensor<T>&, const GeneratorWeights<T>&, std::size_t, std::size_t); \
  template Tensor<T> ppg_generate(Tape<T>&, const Tensor<T>&, const ValidMask&, const GeneratorWeights<T>&,          \
                                  std::size_t, PoolMode);                                                           \
  template InsertedPrompt<T> insert_prompt(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const ValidMask&);

LPT_INSTANTIATE_PROMPTING(float)
LPT_INSTANTIATE_PROMPTING(double)

}  // namespace lpt
