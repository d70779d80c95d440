#pragma once

// Central finite-difference oracle used by the gradient tests. It only
// evaluates the forward function; the analytic path under test is consulted
// solely through Tape::backward.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "lpt/tape.hpp"

namespace lpt::testing {

template <typename T>
using LossFn = std::function<Tensor<T>(Tape<T>&, const std::vector<Tensor<T>>&)>;

template <typename T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, T lo = T(-1), T hi = T(1)) {
  std::uniform_real_distribution<T> dist(lo, hi);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor<T>(std::move(shape), std::move(v));
}

// Returns the worst relative error ||analytic - numeric|| / max(||analytic||, ||numeric||)
// over all inputs. Each input is registered as a leaf named "x<i>".
template <typename T>
double max_relative_error(const std::vector<Tensor<T>>& inputs, const LossFn<T>& fn, double eps = 1e-4) {
  Tape<T> tape;
  std::vector<Tensor<T>> leaves;
  for (std::size_t i = 0; i < inputs.size(); ++i) leaves.push_back(tape.parameter("x" + std::to_string(i), inputs[i]));
  const Tensor<T> loss = fn(tape, leaves);
  const auto grads = tape.backward(loss);

  double worst = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<double> numeric(inputs[i].numel());
    for (std::size_t j = 0; j < inputs[i].numel(); ++j) {
      auto eval_at = [&](double delta) {
        std::vector<Tensor<T>> perturbed;
        for (const auto& in : inputs) perturbed.push_back(in.clone());
        perturbed[i].mutable_values()[j] += static_cast<T>(delta);
        Tape<T> t;
        t.set_recording(false);
        return static_cast<double>(fn(t, perturbed)[0]);
      };
      numeric[j] = (eval_at(eps) - eval_at(-eps)) / (2 * eps);
    }
    double diff = 0, na = 0, nn = 0;
    const bool has = grads.has(leaves[i]);
    for (std::size_t j = 0; j < numeric.size(); ++j) {
      const double a = has ? static_cast<double>(grads.of(leaves[i])[j]) : 0.0;
      diff += (a - numeric[j]) * (a - numeric[j]);
      na += a * a;
      nn += numeric[j] * numeric[j];
    }
    const double scale = std::sqrt(std::max(na, nn));
    if (scale < 1e-9) continue;  // identically zero gradient on both routes
    worst = std::max(worst, std::sqrt(diff) / scale);
  }
  return worst;
}

}  // namespace lpt::testing
