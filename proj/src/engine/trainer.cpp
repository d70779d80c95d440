#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "lpt/engine.hpp"
#include "lpt/errors.hpp"

namespace lpt {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
  if (steps == 0 && epochs == 0) throw ConfigError("train.steps or train.epochs must be positive");
  if (!(peak_lr > 0) || !std::isfinite(peak_lr)) throw ConfigError("train.peak_lr must be a positive number");
  if (warmup_rate < 0 || warmup_rate >= 1) throw ConfigError("train.warmup_rate must lie in [0, 1)");
  if (weight_decay < 0) throw ConfigError("train.weight_decay must be non-negative");
  if (beta1 < 0 || beta1 >= 1) throw ConfigError("train.beta1 must lie in [0, 1)");
  if (beta2 < 0 || beta2 >= 1) throw ConfigError("train.beta2 must lie in [0, 1)");
  if (!(eps > 0)) throw ConfigError("train.eps must be positive");
}

Metrics compute_metrics(const std::vector<std::size_t>& predictions, const std::vector<std::size_t>& labels,
                        Metric metric) {
  if (predictions.empty()) throw DataError("evaluate: empty split");
  if (predictions.size() != labels.size()) {
    throw DataError("evaluate: " + std::to_string(predictions.size()) + " predictions for " +
                    std::to_string(labels.size()) + " labels");
  }
  Metrics m;
  m.count = predictions.size();
  std::size_t correct = 0, tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    correct += predictions[i] == labels[i];
    const bool pred_pos = predictions[i] == 0, gold_pos = labels[i] == 0;
    tp += pred_pos && gold_pos;
    fp += pred_pos && !gold_pos;
    fn += !pred_pos && gold_pos;
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(m.count);
  if (metric == Metric::AccuracyAndF1) {
    const std::size_t denom = 2 * tp + fp + fn;
    m.f1 = denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
  }
  return m;
}

EncodedTask encode_task(const TaskSpec& spec, const Vocabulary& vocab, const Split& split, const ModelConfig& config,
                        const PromptSpec& prompt) {
  spec.validate();
  if (prompt.l >= config.max_seq_len) {
    throw ConfigError("prompt.l = " + std::to_string(prompt.l) + " leaves no room for input within model.max_seq_len");
  }
  const std::size_t max_len = config.max_seq_len - prompt.l;
  EncodedTask out{spec, verbalize(spec, vocab), {}, {}, {}};
  auto encode = [&](const std::vector<Example>& examples, std::vector<EncodedExample>& into) {
    into.reserve(examples.size());
    for (const auto& ex : examples) {
      if (ex.label >= spec.num_labels()) {
        throw DataError("task '" + spec.name + "': label id " + std::to_string(ex.label) + " out of range");
      }
      into.push_back(apply_template(spec, ex, vocab, max_len));
    }
  };
  encode(split.train, out.train);
  encode(split.dev, out.dev);
  encode(split.test, out.test);
  return out;
}

template <std::floating_point T>
Tensor<T> classify(Tape<T>& tape, const EncoderWeights<T>& frozen, const ModelConfig& config,
                   const PromptParameters<T>& prompt, const EncodedExample& example, const TokenIds& verbalizer,
                   const Tensor<T>* cached_lower) {
  const ValidMask mask = all_valid(example.ids.size());
  const std::size_t k = prompt.spec.k;
  const Tensor<T> lower = cached_lower ? *cached_lower : forward_lower(tape, frozen, config, example.ids, mask, k);
  const Tensor<T> p = prompt.generate(tape, lower, mask);
  const InsertedPrompt<T> ins = insert_prompt(tape, p, lower, mask);
  const Tensor<T> upper = forward_upper(tape, frozen, config, ins.states, ins.mask, k);
  return mlm_logits_at(tape, frozen, upper, example.mask_position + ins.shift, verbalizer);
}

namespace {

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::distance(v.begin(), std::max_element(v.begin(), v.end())));
}

template <std::floating_point T>
std::vector<std::size_t> predict_with(const EncoderWeights<T>& frozen, const ModelConfig& config,
                                      const PromptParameters<T>& prompt, const std::vector<EncodedExample>& examples,
                                      const TokenIds& verbalizer, const std::vector<Tensor<T>>* cache) {
  std::vector<std::size_t> out;
  out.reserve(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    Tape<T> tape;
    tape.set_recording(false);
    const Tensor<T> logits =
        classify(tape, frozen, config, prompt, examples[i], verbalizer, cache ? &(*cache)[i] : nullptr);
    std::vector<double> row(logits.values().begin(), logits.values().end());
    out.push_back(argmax(row));
  }
  return out;
}

std::vector<std::size_t> labels_of(const std::vector<EncodedExample>& examples) {
  std::vector<std::size_t> labels;
  labels.reserve(examples.size());
  for (const auto& e : examples) labels.push_back(e.label);
  return labels;
}

template <std::floating_point T>
std::vector<Tensor<T>> lower_cache(const EncoderWeights<T>& frozen, const ModelConfig& config, std::size_t k,
                                   const std::vector<EncodedExample>& examples) {
  std::vector<Tensor<T>> cache;
  cache.reserve(examples.size());
  for (const auto& e : examples) {
    Tape<T> tape;
    cache.push_back(forward_lower(tape, frozen, config, e.ids, all_valid(e.ids.size()), k));
  }
  return cache;
}

std::string format_lr(double lr) {
  std::ostringstream s;
  s << lr;
  return s.str();
}

}  // namespace

template <std::floating_point T>
std::vector<std::size_t> predict(const EncoderWeights<T>& frozen, const ModelConfig& config,
                                 const PromptParameters<T>& prompt, const std::vector<EncodedExample>& examples,
                                 const TokenIds& verbalizer) {
  return predict_with<T>(frozen, config, prompt, examples, verbalizer, nullptr);
}

template <std::floating_point T>
Metrics evaluate(const EncoderWeights<T>& frozen, const ModelConfig& config, const PromptParameters<T>& prompt,
                 const EncodedTask& task, const std::vector<EncodedExample>& examples) {
  return compute_metrics(predict(frozen, config, prompt, examples, task.verbalizer), labels_of(examples),
                         task.spec.metric);
}

template <std::floating_point T>
RunRecord<T> train(const EncoderWeights<T>& frozen, const ModelConfig& config, const PromptSpec& prompt,
                   const EncodedTask& task, const TrainConfig& tc, const StepCallback& on_step) {
  config.validate();
  prompt.validate(config);
  tc.validate();
  if (task.train.empty()) throw DataError("train: task '" + task.spec.name + "' has no training examples");
  const auto start = std::chrono::steady_clock::now();

  RunRecord<T> record;
  record.task = task.spec.name;
  record.prompt = prompt;
  record.train = tc;
  record.train_examples = task.train.size();
  record.tunable_params = count_tunable(prompt, config);
  record.frozen_fingerprint_before = frozen.fingerprint();

  PromptParameters<T> params = PromptParameters<T>::initialize(prompt, config, tc.seed);
  ParameterList<T> tunable = params.named();
  AdamW<T> optimizer(tc.adamw(), tunable);
  record.optimizer_scalars = optimizer.tracked_scalars();

  const std::size_t steps_per_epoch = (task.train.size() + tc.batch_size - 1) / tc.batch_size;
  const std::size_t total_steps = tc.epochs > 0 ? tc.epochs * steps_per_epoch : tc.steps;
  const std::size_t eval_every = tc.epochs > 0 ? steps_per_epoch : tc.eval_every;

  std::vector<Tensor<T>> train_cache, dev_cache;
  if (tc.cache_lower_states) {
    train_cache = lower_cache(frozen, config, prompt.k, task.train);
    dev_cache = lower_cache(frozen, config, prompt.k, task.dev);
  }
  const auto dev_labels = labels_of(task.dev);
  auto dev_metrics = [&](const PromptParameters<T>& p) {
    return compute_metrics(predict_with<T>(frozen, config, p, task.dev, task.verbalizer,
                                           tc.cache_lower_states ? &dev_cache : nullptr),
                           dev_labels, task.spec.metric);
  };

  std::mt19937_64 order_rng(tc.seed ^ 0x5851f42d4c957f2dULL);
  std::vector<std::size_t> order(task.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  bool have_best = false;
  record.best = params.clone();

  for (std::size_t step = 0; step < total_steps; ++step) {
    Tape<T> tape;
    const PromptParameters<T> bound = params.bind(tape);
    Tensor<T> total;
    for (std::size_t b = 0; b < tc.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), order_rng);
        cursor = 0;
      }
      const std::size_t i = order[cursor++];
      const EncodedExample& ex = task.train[i];
      const Tensor<T> logits =
          classify(tape, frozen, config, bound, ex, task.verbalizer, tc.cache_lower_states ? &train_cache[i] : nullptr);
      const std::size_t target[] = {ex.label};
      const Tensor<T> loss = tape.cross_entropy(logits, target);
      total = b == 0 ? loss : tape.add(total, loss);
    }
    total = tape.scale(total, T(1) / static_cast<T>(tc.batch_size));
    const double lr = linear_schedule(static_cast<std::int64_t>(step), static_cast<std::int64_t>(total_steps),
                                      tc.peak_lr, tc.warmup_rate);
    const double loss_value = static_cast<double>(total[0]);
    if (!std::isfinite(loss_value)) {
      throw DivergenceError("train: non-finite loss at step " + std::to_string(step + 1) + " (lr " + format_lr(lr) +
                            ")");
    }
    record.loss_curve.push_back(loss_value);

    const Gradients<T> grads = tape.backward(total);
    if (step == 0) {
      record.gradient_leaves = grads.leaf_names();
      record.layer_backward_per_example = grads.layer_backward_count() / tc.batch_size;
    }
    optimizer.step(tunable, grads, lr);
    if (on_step) on_step(step + 1, loss_value);

    const bool last = step + 1 == total_steps;
    if (!task.dev.empty() && eval_every > 0 && ((step + 1) % eval_every == 0 || last)) {
      const Metrics m = dev_metrics(params);
      record.dev_curve.push_back({step + 1, m});
      if (!have_best || m.primary() > record.best_dev.primary()) {
        have_best = true;
        record.best_step = step + 1;
        record.best_dev = m;
        record.best = params.clone();
      }
    }
  }
  if (!have_best) {
    record.best_step = total_steps;
    record.best = params.clone();
  }
  record.final = params.clone();
  if (!task.test.empty()) record.test = evaluate(frozen, config, record.best, task, task.test);
  record.frozen_fingerprint_after = frozen.fingerprint();
  if (record.frozen_fingerprint_after != record.frozen_fingerprint_before) {
    throw ContractError("train: frozen backbone weights changed during tuning");
  }
  record.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return record;
}

template struct RunRecord<float>;
template struct RunRecord<double>;

#define LPT_INSTANTIATE_ENGINE(T)                                                                                      \
  template Tensor<T> classify(Tape<T>&, const EncoderWeights<T>&, const ModelConfig&, const PromptParameters<T>&,     \
                              const EncodedExample&, const TokenIds&, const Tensor<T>*);                               \
  template std::vector<std::size_t> predict(const EncoderWeights<T>&, const ModelConfig&, const PromptParameters<T>&, \
                                            const std::vector<EncodedExample>&, const TokenIds&);                     \
  template Metrics evaluate(const EncoderWeights<T>&, const ModelConfig&, const PromptParameters<T>&,                 \
                            const EncodedTask&, const std::vector<EncodedExample>&);                                  \
  template RunRecord<T> train(const EncoderWeights<T>&, const ModelConfig&, const PromptSpec&, const EncodedTask&,    \
                              const TrainConfig&, const StepCallback&);

LPT_INSTANTIATE_ENGINE(float)
LPT_INSTANTIATE_ENGINE(double)

}  // namespace lpt
