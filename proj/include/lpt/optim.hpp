#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lpt/tape.hpp"

namespace lpt {

template <std::floating_point T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

// Ordered set of named tensors. Copies share storage with the originals, so
// updating a list returned by e.g. EncoderWeights::named() updates the weights.
template <std::floating_point T>
using ParameterList = std::vector<NamedTensor<T>>;

// Registers every tensor as a trainable leaf under its own name.
template <std::floating_point T>
ParameterList<T> bind_parameters(Tape<T>& tape, const ParameterList<T>& params) {
  ParameterList<T> bound;
  bound.reserve(params.size());
  for (const auto& p : params) bound.push_back({p.name, tape.parameter(p.name, p.tensor)});
  return bound;
}

template <std::floating_point T>
std::size_t scalar_count(const ParameterList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

struct AdamWConfig {
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Decoupled-weight-decay Adam. State exists only for the parameters handed to
// the constructor; a gradient for anything else is a contract violation.
template <std::floating_point T>
class AdamW {
 public:
  AdamW(AdamWConfig config, const ParameterList<T>& params);

  // Gradients are looked up by leaf name.
  void step(ParameterList<T>& params, const Gradients<T>& grads, double lr);
  void step(ParameterList<T>& params, const std::map<std::string, std::vector<T>>& grads, double lr);

  std::size_t tracked_scalars() const noexcept;
  std::int64_t steps_taken() const noexcept { return t_; }
  const std::vector<T>& first_moment(const std::string& name) const { return state_.at(name).m; }
  const std::vector<T>& second_moment(const std::string& name) const { return state_.at(name).v; }

 private:
  struct Moments {
    std::vector<T> m, v;
  };
  void update(NamedTensor<T>& p, std::span<const T> g, double lr);

  AdamWConfig config_;
  std::map<std::string, Moments> state_;
  std::int64_t t_ = 0;
};

// Linear warmup from 0 to peak over ceil(warmup_rate·total) steps, then
// linear decay to 0 at `total`.
double linear_schedule(std::int64_t step, std::int64_t total, double peak_lr, double warmup_rate);

extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace lpt
