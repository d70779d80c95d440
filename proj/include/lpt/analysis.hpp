#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "lpt/engine.hpp"

namespace lpt {

// ---------------------------------------------------------------------------
// Mutual-information probe

struct ProbeConfig {
  std::size_t steps = 500;
  std::size_t batch_size = 64;
  std::size_t width_multiplier = 4;  // hidden width = multiplier · d
  double peak_lr = 1e-3;
  double warmup_rate = 0.06;
  double weight_decay = 0.01;
  std::uint64_t seed = 1;
};

struct ProbeResult {
  double accuracy = 0;
  double cross_entropy = 0;  // held-out, nats
  double mi = 0;             // max(0, H(y) − cross_entropy)
};

struct LayerMI {
  std::size_t layer = 0;  // 0 = embeddings, i = output of layer i
  ProbeResult probe;
};

struct MIProfile {
  double label_entropy = 0;  // H(y) of the training labels, nats
  std::vector<LayerMI> layers;
};

// Empirical label entropy in nats.
double label_entropy(const std::vector<std::size_t>& labels, std::size_t num_classes);

// Trains a fresh two-hidden-layer ReLU perceptron on (train_x, train_y) and
// scores it on the held-out rows. Features are rows of an n×d matrix.
// Throws DataError when fewer than two classes occur in train_y.
ProbeResult train_probe(const Tensor<double>& train_x, const std::vector<std::size_t>& train_y,
                        const Tensor<double>& heldout_x, const std::vector<std::size_t>& heldout_y,
                        std::size_t num_classes, const ProbeConfig& config);

// Hidden state at each example's [MASK] position after every layer 0..L of
// the frozen model, without prompts. Result[layer] is n×d.
template <std::floating_point T>
std::vector<Tensor<double>> collect_layer_states(const EncoderWeights<T>& frozen, const ModelConfig& config,
                                                 const std::vector<EncodedExample>& examples);

template <std::floating_point T>
MIProfile mi_probe(const EncoderWeights<T>& frozen, const ModelConfig& config, const std::vector<EncodedExample>& train,
                   const std::vector<EncodedExample>& heldout, std::size_t num_classes, const ProbeConfig& probe);

void write_mi_csv(std::ostream& out, const MIProfile& profile);

// ---------------------------------------------------------------------------
// Prompt-layer sweep

struct SweepRun {
  std::uint64_t seed = 0;
  double dev_metric = 0;
  std::optional<double> test_metric;
  std::vector<double> loss_curve;
  std::vector<EvalPoint> dev_curve;
};

struct SweepRow {
  std::size_t layer = 0;
  std::vector<SweepRun> runs;
  double mean = 0;  // of dev_metric over seeds
  double stddev = 0;
};

struct SweepTable {
  std::string method;
  std::vector<SweepRow> rows;
};

using TaskForSeed = std::function<EncodedTask(std::uint64_t seed)>;

// One train() per (layer, seed); the template's k is replaced by each layer.
template <std::floating_point T>
SweepTable layer_sweep(const EncoderWeights<T>& frozen, const ModelConfig& config, const PromptSpec& spec_template,
                       const std::vector<std::size_t>& layers, const std::vector<std::uint64_t>& seeds,
                       const TrainConfig& train_config, const TaskForSeed& task_for_seed);

void write_sweep_csv(std::ostream& out, const SweepTable& table);

// Mean and population standard deviation.
std::pair<double, double> mean_std(const std::vector<double>& xs);

// ---------------------------------------------------------------------------
// Efficiency benchmark

struct BenchConfig {
  std::size_t seq_len = 128;
  std::size_t batch_size = 2;
  std::size_t warmup_steps = 20;
  std::size_t timed_steps = 200;
  std::uint64_t seed = 1;
};

struct EfficiencyReport {
  std::string method;
  std::size_t layer = 0;
  std::size_t tunable_params = 0;
  double tokens_per_ms = 0;
  double elapsed_ms = 0;
  std::size_t tokens = 0;  // processed during timed steps
  std::size_t activation_bytes = 0;  // per training step
  std::size_t backward_layer_count = 0;  // per example
};

// Times full training steps (no lower-state caching) on a fixed-length
// synthetic batch. Throws ConfigError when timed_steps < warmup_steps.
template <std::floating_point T>
EfficiencyReport bench(const EncoderWeights<T>& frozen, const ModelConfig& config, const PromptSpec& spec,
                       const BenchConfig& bench_config);

void write_bench_csv(std::ostream& out, const std::vector<EfficiencyReport>& reports);

}  // namespace lpt
