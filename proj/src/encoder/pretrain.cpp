#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "lpt/encoder.hpp"

namespace lpt {

namespace {

struct MaskedSequence {
  TokenSequence input;
  std::vector<std::size_t> positions;
  std::vector<std::size_t> targets;
};

// BERT-style corruption: each regular token is selected with probability
// mlm_prob (at least one per sequence); selected tokens become [MASK] 80% of
// the time, a random regular token 10%, and stay unchanged 10%.
MaskedSequence corrupt(const TokenSequence& seq, std::mt19937_64& rng, const PretrainOptions& opt,
                       std::size_t vocab_size) {
  MaskedSequence out{seq, {}, {}};
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < seq.size(); ++i)
    if (seq[i] >= opt.first_regular_id) candidates.push_back(i);
  if (candidates.empty()) return out;

  std::bernoulli_distribution pick(opt.mlm_prob);
  for (std::size_t i : candidates)
    if (pick(rng)) out.positions.push_back(i);
  if (out.positions.empty()) {
    std::uniform_int_distribution<std::size_t> any(0, candidates.size() - 1);
    out.positions.push_back(candidates[any(rng)]);
  }
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> random_token(opt.first_regular_id, vocab_size - 1);
  for (std::size_t pos : out.positions) {
    out.targets.push_back(seq[pos]);
    const double r = u(rng);
    if (r < 0.8) {
      out.input[pos] = opt.mask_token_id;
    } else if (r < 0.9) {
      out.input[pos] = random_token(rng);
    }
  }
  return out;
}

template <std::floating_point T>
Tensor<T> masked_loss(Tape<T>& tape, const EncoderWeights<T>& w, const ModelConfig& config, const MaskedSequence& m) {
  const Tensor<T> states = forward_full(tape, w, config, m.input, all_valid(m.input.size()));
  const Tensor<T> rows = tape.embedding_lookup(states, m.positions);
  return tape.cross_entropy(mlm_logits(tape, w, rows), m.targets);
}

struct HeldoutScore {
  double loss = 0;
  double accuracy = 0;
};

template <std::floating_point T>
HeldoutScore score(const EncoderWeights<T>& w, const ModelConfig& config, const std::vector<MaskedSequence>& heldout) {
  HeldoutScore s;
  std::size_t predicted = 0, correct = 0;
  for (const auto& m : heldout) {
    if (m.positions.empty()) continue;
    Tape<T> tape;
    tape.set_recording(false);
    const Tensor<T> states = forward_full(tape, w, config, m.input, all_valid(m.input.size()));
    const Tensor<T> logits = mlm_logits(tape, w, tape.embedding_lookup(states, m.positions));
    s.loss += static_cast<double>(tape.cross_entropy(logits, m.targets)[0]) * static_cast<double>(m.positions.size());
    const std::size_t v = logits.cols();
    for (std::size_t r = 0; r < m.positions.size(); ++r) {
      const auto row = logits.values().subspan(r * v, v);
      const auto best = static_cast<std::size_t>(std::distance(row.begin(), std::max_element(row.begin(), row.end())));
      correct += best == m.targets[r];
      ++predicted;
    }
  }
  if (predicted > 0) {
    s.loss /= static_cast<double>(predicted);
    s.accuracy = static_cast<double>(correct) / static_cast<double>(predicted);
  }
  return s;
}

}  // namespace

template <std::floating_point T>
PretrainResult<T> pretrain_toy(const ModelConfig& config, const std::vector<TokenSequence>& corpus,
                               const PretrainOptions& options) {
  config.validate();
  if (options.batch_size == 0) throw ConfigError("pretrain.batch_size must be positive");
  if (options.mlm_prob <= 0 || options.mlm_prob >= 1) throw ConfigError("pretrain.mlm_prob must lie in (0, 1)");
  if (corpus.empty()) throw DataError("pretrain: corpus is empty");

  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_heldout = std::min<std::size_t>(
      corpus.size() - 1, std::max<std::size_t>(1, static_cast<std::size_t>(options.heldout_fraction * corpus.size())));
  std::vector<std::size_t> heldout_ids(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_heldout));
  std::vector<std::size_t> train_ids(order.begin() + static_cast<std::ptrdiff_t>(n_heldout), order.end());
  if (train_ids.size() < options.batch_size) {
    throw DataError("pretrain: corpus of " + std::to_string(corpus.size()) + " sequences is shorter than one batch of " +
                    std::to_string(options.batch_size) + " after holding out " + std::to_string(n_heldout));
  }

  PretrainResult<T> result{EncoderWeights<T>::initialize(config, options.seed), {}};
  auto& report = result.report;
  report.train_sequences = train_ids.size();
  report.heldout_sequences = heldout_ids.size();
  for (std::size_t i : train_ids) report.train_tokens += corpus[i].size();

  std::mt19937_64 heldout_rng(options.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<MaskedSequence> heldout;
  for (std::size_t i : heldout_ids) heldout.push_back(corrupt(corpus[i], heldout_rng, options, config.vocab_size));
  report.initial_heldout_loss = score(result.weights, config, heldout).loss;

  ParameterList<T> params = result.weights.named();
  AdamW<T> optimizer(AdamWConfig{options.weight_decay, 0.9, 0.999, 1e-8}, params);
  std::size_t cursor = train_ids.size();
  for (std::size_t step = 0; step < options.steps; ++step) {
    Tape<T> tape;
    const EncoderWeights<T> bound = result.weights.bind(tape);
    Tensor<T> total;
    for (std::size_t b = 0; b < options.batch_size; ++b) {
      if (cursor == train_ids.size()) {
        std::shuffle(train_ids.begin(), train_ids.end(), rng);
        cursor = 0;
      }
      const MaskedSequence m = corrupt(corpus[train_ids[cursor++]], rng, options, config.vocab_size);
      if (m.positions.empty()) continue;
      const Tensor<T> loss = masked_loss(tape, bound, config, m);
      total = total.numel() == 0 ? loss : tape.add(total, loss);
    }
    if (total.numel() == 0) continue;
    total = tape.scale(total, T(1) / static_cast<T>(options.batch_size));
    const double value = static_cast<double>(total[0]);
    if (!std::isfinite(value)) {
      throw DivergenceError("pretrain: non-finite loss at step " + std::to_string(step));
    }
    report.loss_curve.push_back(value);
    const auto grads = tape.backward(total);
    const double lr = linear_schedule(static_cast<std::int64_t>(step), static_cast<std::int64_t>(options.steps),
                                      options.peak_lr, options.warmup_rate);
    optimizer.step(params, grads, lr);
  }

  const HeldoutScore final_score = score(result.weights, config, heldout);
  report.final_heldout_loss = final_score.loss;
  report.heldout_mask_accuracy = final_score.accuracy;
  return result;
}

template PretrainResult<float> pretrain_toy(const ModelConfig&, const std::vector<TokenSequence>&,
                                            const PretrainOptions&);
template PretrainResult<double> pretrain_toy(const ModelConfig&, const std::vector<TokenSequence>&,
                                             const PretrainOptions&);

}  // namespace lpt
