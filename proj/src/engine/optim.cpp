#include "lpt/optim.hpp"

#include <cmath>

namespace lpt {

template <std::floating_point T>
AdamW<T>::AdamW(AdamWConfig config, const ParameterList<T>& params) : config_(config) {
  for (const auto& p : params) {
    auto [it, inserted] = state_.emplace(p.name, Moments{std::vector<T>(p.tensor.numel()), std::vector<T>(p.tensor.numel())});
    if (!inserted) throw ContractError("AdamW: duplicate parameter name '" + p.name + "'");
  }
}

template <std::floating_point T>
std::size_t AdamW<T>::tracked_scalars() const noexcept {
  std::size_t n = 0;
  for (const auto& [_, s] : state_) n += s.m.size();
  return n;
}

template <std::floating_point T>
void AdamW<T>::update(NamedTensor<T>& p, std::span<const T> g, double lr) {
  auto& s = state_.at(p.name);
  if (g.size() != s.m.size()) {
    throw DimensionError("AdamW: gradient for '" + p.name + "' has " + std::to_string(g.size()) + " values, expected " +
                         std::to_string(s.m.size()));
  }
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  auto theta = p.tensor.mutable_values();
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double gi = g[i];
    const double m = b1 * s.m[i] + (1.0 - b1) * gi;
    const double v = b2 * s.v[i] + (1.0 - b2) * gi * gi;
    s.m[i] = static_cast<T>(m);
    s.v[i] = static_cast<T>(v);
    const double m_hat = m / c1, v_hat = v / c2;
    const double th = theta[i];
    theta[i] = static_cast<T>(th - lr * (m_hat / (std::sqrt(v_hat) + config_.eps) + config_.weight_decay * th));
  }
}

template <std::floating_point T>
void AdamW<T>::step(ParameterList<T>& params, const Gradients<T>& grads, double lr) {
  for (const auto& name : grads.leaf_names()) {
    if (!state_.contains(name)) {
      throw ContractError("AdamW: gradient for frozen parameter '" + name + "'");
    }
  }
  ++t_;
  for (auto& p : params) {
    if (!state_.contains(p.name)) throw ContractError("AdamW: parameter '" + p.name + "' has no optimizer state");
    update(p, grads.of_leaf(p.name).values(), lr);
  }
}

template <std::floating_point T>
void AdamW<T>::step(ParameterList<T>& params, const std::map<std::string, std::vector<T>>& grads, double lr) {
  for (const auto& [name, _] : grads) {
    if (!state_.contains(name)) throw ContractError("AdamW: gradient for frozen parameter '" + name + "'");
  }
  ++t_;
  for (auto& p : params) {
    auto it = grads.find(p.name);
    if (it == grads.end()) throw ContractError("AdamW: missing gradient for '" + p.name + "'");
    update(p, it->second, lr);
  }
}

double linear_schedule(std::int64_t step, std::int64_t total, double peak_lr, double warmup_rate) {
  if (total <= 0) return 0.0;
  step = std::clamp<std::int64_t>(step, 0, total);
  const auto warmup = static_cast<std::int64_t>(std::ceil(warmup_rate * static_cast<double>(total) - 1e-9));
  if (warmup > 0 && step < warmup) return peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (total == warmup) return peak_lr;
  return peak_lr * static_cast<double>(total - step) / static_cast<double>(total - warmup);
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace lpt
