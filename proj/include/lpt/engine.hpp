#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "lpt/encoder.hpp"
#include "lpt/optim.hpp"
#include "lpt/prompting.hpp"
#include "lpt/tasks.hpp"

namespace lpt {

struct TrainConfig {
  double peak_lr = 5e-3;
  double warmup_rate = 0.06;
  std::size_t batch_size = 8;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Few-shot budget in optimizer steps. When epochs > 0 the budget is
  // epochs·ceil(|train|/batch_size) and dev evaluation runs once per epoch.
  std::size_t steps = 1000;
  std::size_t epochs = 0;
  std::size_t eval_every = 50;
  std::size_t dev_size = 1000;
  std::uint64_t seed = 1;
  // Reuse forward_lower outputs across steps. The lower stack is frozen and
  // runs without recording, so the cached states equal recomputed ones.
  bool cache_lower_states = true;

  void validate() const;
  AdamWConfig adamw() const { return {weight_decay, beta1, beta2, eps}; }
  bool operator==(const TrainConfig&) const = default;
};

struct Metrics {
  std::size_t count = 0;
  double accuracy = 0;
  std::optional<double> f1;  // binary F1, positive class = first label

  // Accuracy for accuracy tasks; mean of accuracy and F1 otherwise.
  double primary() const noexcept { return f1 ? (accuracy + *f1) / 2 : accuracy; }
};

// Throws DataError on an empty prediction list or a length mismatch.
Metrics compute_metrics(const std::vector<std::size_t>& predictions, const std::vector<std::size_t>& labels,
                        Metric metric);

struct EvalPoint {
  std::size_t step = 0;
  Metrics dev;
};

template <std::floating_point T>
struct RunRecord {
  std::string task;
  PromptSpec prompt;
  TrainConfig train;
  std::size_t train_examples = 0;
  std::size_t tunable_params = 0;
  std::size_t optimizer_scalars = 0;
  std::set<std::string> gradient_leaves;
  std::size_t layer_backward_per_example = 0;
  std::uint64_t frozen_fingerprint_before = 0;
  std::uint64_t frozen_fingerprint_after = 0;
  std::vector<double> loss_curve;  // one entry per step
  std::vector<EvalPoint> dev_curve;
  std::size_t best_step = 0;
  Metrics best_dev;
  std::optional<Metrics> test;
  double seconds = 0;
  PromptParameters<T> best;  // tunable state at best_step
  PromptParameters<T> final;
};

struct EncodedTask {
  TaskSpec spec;
  TokenIds verbalizer;
  std::vector<EncodedExample> train, dev, test;
};

// Applies the template (inputs cut to max_seq_len − l) and verbalizer.
EncodedTask encode_task(const TaskSpec& spec, const Vocabulary& vocab, const Split& split, const ModelConfig& config,
                        const PromptSpec& prompt);

// Restricted label-word logits [1×|Y|] for one example.
template <std::floating_point T>
Tensor<T> classify(Tape<T>& tape, const EncoderWeights<T>& frozen, const ModelConfig& config,
                   const PromptParameters<T>& prompt, const EncodedExample& example, const TokenIds& verbalizer,
                   const Tensor<T>* cached_lower = nullptr);

template <std::floating_point T>
std::vector<std::size_t> predict(const EncoderWeights<T>& frozen, const ModelConfig& config,
                                 const PromptParameters<T>& prompt, const std::vector<EncodedExample>& examples,
                                 const TokenIds& verbalizer);

template <std::floating_point T>
Metrics evaluate(const EncoderWeights<T>& frozen, const ModelConfig& config, const PromptParameters<T>& prompt,
                 const EncodedTask& task, const std::vector<EncodedExample>& examples);

// Called after each step with (step, loss).
using StepCallback = std::function<void(std::size_t, double)>;

// Truncated-backprop tuning of the prompt parameters; `frozen` is never
// modified. Throws DivergenceError on a non-finite loss.
template <std::floating_point T>
RunRecord<T> train(const EncoderWeights<T>& frozen, const ModelConfig& config, const PromptSpec& prompt,
                   const EncodedTask& task, const TrainConfig& train_config, const StepCallback& on_step = {});

extern template struct RunRecord<float>;
extern template struct RunRecord<double>;

}  // namespace lpt
