#include "lpt/analysis.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>

#include "lpt/errors.hpp"

namespace lpt {

double label_entropy(const std::vector<std::size_t>& labels, std::size_t num_classes) {
  if (labels.empty()) return 0;
  std::vector<double> counts(num_classes, 0);
  for (std::size_t y : labels) {
    if (y >= num_classes) throw DataError("label " + std::to_string(y) + " outside " + std::to_string(num_classes) + " classes");
    counts[y] += 1;
  }
  double h = 0;
  for (double c : counts) {
    if (c > 0) {
      const double p = c / static_cast<double>(labels.size());
      h -= p * std::log(p);
    }
  }
  return h;
}

namespace {

struct Probe {
  ParameterList<double> params;

  static Probe initialize(std::size_t d, std::size_t width, std::size_t classes, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto uniform = [&](Shape shape, std::size_t fan_in) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      std::uniform_real_distribution<double> u(-bound, bound);
      Tensor<double> t(std::move(shape));
      for (double& v : t.mutable_values()) v = u(rng);
      return t;
    };
    Probe p;
    p.params = {{"w1", uniform({d, width}, d)},         {"b1", uniform({width}, d)},
                {"w2", uniform({width, width}, width)}, {"b2", uniform({width}, width)},
                {"w3", uniform({width, classes}, width)}, {"b3", uniform({classes}, width)}};
    return p;
  }

  static Tensor<double> logits(Tape<double>& tape, const ParameterList<double>& p, const Tensor<double>& x) {
    Tensor<double> h = tape.relu(tape.add_row_vector(tape.matmul(x, p[0].tensor), p[1].tensor));
    h = tape.relu(tape.add_row_vector(tape.matmul(h, p[2].tensor), p[3].tensor));
    return tape.add_row_vector(tape.matmul(h, p[4].tensor), p[5].tensor);
  }
};

Tensor<double> gather_rows(const Tensor<double>& x, std::span<const std::size_t> rows) {
  const std::size_t d = x.cols();
  std::vector<double> out;
  out.reserve(rows.size() * d);
  for (std::size_t r : rows) {
    const auto v = x.values().subspan(r * d, d);
    out.insert(out.end(), v.begin(), v.end());
  }
  return Tensor<double>({rows.size(), d}, std::move(out));
}

}  // namespace

ProbeResult train_probe(const Tensor<double>& train_x, const std::vector<std::size_t>& train_y,
                        const Tensor<double>& heldout_x, const std::vector<std::size_t>& heldout_y,
                        std::size_t num_classes, const ProbeConfig& config) {
  if (train_x.rank() != 2 || heldout_x.rank() != 2 || train_x.cols() != heldout_x.cols()) {
    throw DimensionError("mi_probe: feature shapes " + shape_string(train_x.shape()) + " and " +
                         shape_string(heldout_x.shape()) + " do not agree");
  }
  if (train_x.rows() != train_y.size() || heldout_x.rows() != heldout_y.size()) {
    throw DimensionError("mi_probe: feature rows and label counts differ");
  }
  if (heldout_y.empty()) throw DataError("mi_probe: empty held-out split");
  std::vector<bool> seen(num_classes, false);
  std::size_t distinct = 0;
  for (std::size_t y : train_y) {
    if (y >= num_classes) throw DataError("mi_probe: label " + std::to_string(y) + " out of range");
    if (!seen[y]) ++distinct, seen[y] = true;
  }
  if (distinct < 2) throw DataError("mi_probe: fewer than 2 classes present in the training labels");

  const std::size_t d = train_x.cols();
  Probe probe = Probe::initialize(d, config.width_multiplier * d, num_classes, config.seed);
  AdamW<double> optimizer({config.weight_decay, 0.9, 0.999, 1e-8}, probe.params);
  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(train_y.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  const std::size_t batch = std::min(config.batch_size, order.size());

  for (std::size_t step = 0; step < config.steps; ++step) {
    std::vector<std::size_t> rows, targets;
    for (std::size_t b = 0; b < batch; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      rows.push_back(order[cursor]);
      targets.push_back(train_y[order[cursor++]]);
    }
    Tape<double> tape;
    const ParameterList<double> bound = bind_parameters(tape, probe.params);
    const Tensor<double> loss = tape.cross_entropy(Probe::logits(tape, bound, gather_rows(train_x, rows)), targets);
    const double lr = linear_schedule(static_cast<std::int64_t>(step), static_cast<std::int64_t>(config.steps),
                                      config.peak_lr, config.warmup_rate);
    optimizer.step(probe.params, tape.backward(loss), lr);
  }

  Tape<double> tape;
  tape.set_recording(false);
  const Tensor<double> logits = Probe::logits(tape, probe.params, heldout_x);
  ProbeResult result;
  double nll = 0;
  std::size_t correct = 0;
  for (std::size_t r = 0; r < heldout_y.size(); ++r) {
    const auto row = logits.values().subspan(r * num_classes, num_classes);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0;
    for (double v : row) z += std::exp(v - mx);
    nll += std::log(z) + mx - row[heldout_y[r]];
    correct += static_cast<std::size_t>(std::distance(row.begin(), std::max_element(row.begin(), row.end()))) ==
               heldout_y[r];
  }
  const double n = static_cast<double>(heldout_y.size());
  result.accuracy = static_cast<double>(correct) / n;
  result.cross_entropy = nll / n;
  result.mi = std::max(0.0, label_entropy(train_y, num_classes) - result.cross_entropy);
  return result;
}

template <std::floating_point T>
std::vector<Tensor<double>> collect_layer_states(const EncoderWeights<T>& frozen, const ModelConfig& config,
                                                 const std::vector<EncodedExample>& examples) {
  const std::size_t d = config.d_model, L = config.n_layers;
  std::vector<std::vector<double>> rows(L + 1);
  for (auto& r : rows) r.reserve(examples.size() * d);
  for (const auto& ex : examples) {
    Tape<T> tape;
    tape.set_recording(false);
    const ValidMask mask = all_valid(ex.ids.size());
    Tensor<T> x = embed(tape, frozen, config, ex.ids);
    for (std::size_t layer = 0;; ++layer) {
      const auto v = x.values().subspan(ex.mask_position * d, d);
      rows[layer].insert(rows[layer].end(), v.begin(), v.end());
      if (layer == L) break;
      x = encoder_layer(tape, frozen.layers[layer], config, x, mask);
    }
  }
  std::vector<Tensor<double>> out;
  for (auto& r : rows) out.emplace_back(Shape{examples.size(), d}, std::move(r));
  return out;
}

template <std::floating_point T>
MIProfile mi_probe(const EncoderWeights<T>& frozen, const ModelConfig& config, const std::vector<EncodedExample>& train,
                   const std::vector<EncodedExample>& heldout, std::size_t num_classes, const ProbeConfig& probe) {
  auto labels = [](const std::vector<EncodedExample>& xs) {
    std::vector<std::size_t> y;
    for (const auto& e : xs) y.push_back(e.label);
    return y;
  };
  const auto train_y = labels(train), heldout_y = labels(heldout);
  const auto train_x = collect_layer_states(frozen, config, train);
  const auto heldout_x = collect_layer_states(frozen, config, heldout);
  MIProfile profile;
  profile.label_entropy = label_entropy(train_y, num_classes);
  for (std::size_t layer = 0; layer < train_x.size(); ++layer) {
    profile.layers.push_back({layer, train_probe(train_x[layer], train_y, heldout_x[layer], heldout_y, num_classes, probe)});
  }
  return profile;
}

void write_mi_csv(std::ostream& out, const MIProfile& profile) {
  out << "layer,accuracy,cross_entropy,mi,label_entropy\n";
  for (const auto& l : profile.layers) {
    out << l.layer << ',' << l.probe.accuracy << ',' << l.probe.cross_entropy << ',' << l.probe.mi << ','
        << profile.label_entropy << '\n';
  }
}

std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0, 0};
  const double n = static_cast<double>(xs.size());
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  double var = 0;
  for (double x : xs) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / n)};
}

template <std::floating_point T>
SweepTable layer_sweep(const EncoderWeights<T>& frozen, const ModelConfig& config, const PromptSpec& spec_template,
                       const std::vector<std::size_t>& layers, const std::vector<std::uint64_t>& seeds,
                       const TrainConfig& train_config, const TaskForSeed& task_for_seed) {
  if (layers.empty() || seeds.empty()) throw ConfigError("sweep: layers and seeds must be non-empty");
  for (std::size_t k : layers) {
    PromptSpec spec = spec_template;
    spec.k = k;
    spec.validate(config);
  }
  SweepTable table{method_name(spec_template.method), {}};
  for (std::size_t k : layers) {
    PromptSpec spec = spec_template;
    spec.k = k;
    SweepRow row{k, {}, 0, 0};
    std::vector<double> devs;
    for (std::uint64_t seed : seeds) {
      TrainConfig tc = train_config;
      tc.seed = seed;
      const EncodedTask task = task_for_seed(seed);
      const RunRecord<T> rec = train(frozen, config, spec, task, tc);
      SweepRun run{seed, rec.best_dev.primary(), std::nullopt, rec.loss_curve, rec.dev_curve};
      if (rec.test) run.test_metric = rec.test->primary();
      devs.push_back(run.dev_metric);
      row.runs.push_back(std::move(run));
    }
    std::tie(row.mean, row.stddev) = mean_std(devs);
    table.rows.push_back(std::move(row));
  }
  return table;
}

void write_sweep_csv(std::ostream& out, const SweepTable& table) {
  out << "method,layer,runs,dev_mean,dev_std,test_mean,test_std\n";
  for (const auto& row : table.rows) {
    std::vector<double> tests;
    for (const auto& r : row.runs)
      if (r.test_metric) tests.push_back(*r.test_metric);
    const auto [tm, ts] = mean_std(tests);
    out << table.method << ',' << row.layer << ',' << row.runs.size() << ',' << row.mean << ',' << row.stddev << ',';
    if (tests.empty()) {
      out << ",\n";
    } else {
      out << tm << ',' << ts << '\n';
    }
  }
}

template <std::floating_point T>
EfficiencyReport bench(const EncoderWeights<T>& frozen, const ModelConfig& config, const PromptSpec& spec,
                       const BenchConfig& bc) {
  config.validate();
  spec.validate(config);
  if (bc.timed_steps < bc.warmup_steps) {
    throw ConfigError("bench: timed_steps = " + std::to_string(bc.timed_steps) + " is fewer than warmup_steps = " +
                      std::to_string(bc.warmup_steps));
  }
  if (bc.timed_steps == 0 || bc.batch_size == 0) throw ConfigError("bench: timed_steps and batch_size must be positive");
  if (bc.seq_len < 3 || bc.seq_len + spec.l > config.max_seq_len) {
    throw ConfigError("bench: seq_len + prompt.l must lie in [3, model.max_seq_len]");
  }

  // Fixed-length synthetic batch: [CLS] random tokens [MASK] [SEP].
  std::mt19937_64 rng(bc.seed);
  std::uniform_int_distribution<std::size_t> token(SpecialTokens::count, config.vocab_size - 1);
  std::vector<EncodedExample> batch;
  for (std::size_t b = 0; b < bc.batch_size; ++b) {
    EncodedExample ex;
    ex.ids.push_back(SpecialTokens::cls);
    while (ex.ids.size() < bc.seq_len - 2) ex.ids.push_back(token(rng));
    ex.mask_position = ex.ids.size();
    ex.ids.push_back(SpecialTokens::mask);
    ex.ids.push_back(SpecialTokens::sep);
    ex.label = b % 2;
    batch.push_back(std::move(ex));
  }
  const TokenIds verbalizer{SpecialTokens::count, SpecialTokens::count + 1};

  PromptParameters<T> params = PromptParameters<T>::initialize(spec, config, bc.seed);
  ParameterList<T> tunable = params.named();
  AdamW<T> optimizer(AdamWConfig{}, tunable);

  EfficiencyReport report;
  report.method = method_name(spec.method);
  report.layer = spec.k;
  report.tunable_params = count_tunable(spec, config);
  auto run_step = [&]() {
    Tape<T> tape;
    const PromptParameters<T> bound = params.bind(tape);
    Tensor<T> total;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const Tensor<T> logits = classify(tape, frozen, config, bound, batch[b], verbalizer);
      const std::size_t target[] = {batch[b].label};
      const Tensor<T> loss = tape.cross_entropy(logits, target);
      total = b == 0 ? loss : tape.add(total, loss);
    }
    total = tape.scale(total, T(1) / static_cast<T>(batch.size()));
    const Gradients<T> grads = tape.backward(total);
    optimizer.step(tunable, grads, 1e-3);
    report.activation_bytes = tape.activation_bytes();
    report.backward_layer_count = grads.layer_backward_count() / batch.size();
  };

  for (std::size_t s = 0; s < bc.warmup_steps; ++s) run_step();
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t s = 0; s < bc.timed_steps; ++s) run_step();
  report.elapsed_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  report.tokens = bc.timed_steps * bc.batch_size * bc.seq_len;
  report.tokens_per_ms = static_cast<double>(report.tokens) / report.elapsed_ms;
  return report;
}

void write_bench_csv(std::ostream& out, const std::vector<EfficiencyReport>& reports) {
  out << "method,layer,tunable_params,tokens_per_ms,elapsed_ms,tokens,activation_bytes,backward_layer_count\n";
  for (const auto& r : reports) {
    out << r.method << ',' << r.layer << ',' << r.tunable_params << ',' << r.tokens_per_ms << ',' << r.elapsed_ms
        << ',' << r.tokens << ',' << r.activation_bytes << ',' << r.backward_layer_count << '\n';
  }
}

#define LPT_INSTANTIATE_ANALYSIS(T)                                                                                  \
  template std::vector<Tensor<double>> collect_layer_states(const EncoderWeights<T>&, const ModelConfig&,            \
                                                            const std::vector<EncodedExample>&);                     \
  template MIProfile mi_probe(const EncoderWeights<T>&, const ModelConfig&, const std::vector<EncodedExample>&,      \
                              const std::vector<EncodedExample>&, std::size_t, const ProbeConfig&);                  \
  template SweepTable layer_sweep(const EncoderWeights<T>&, const ModelConfig&, const PromptSpec&,                   \
                                  const std::vector<std::size_t>&, const std::vector<std::uint64_t>&,                \
                                  const TrainConfig&, const TaskForSeed&);                                           \
  template EfficiencyReport bench(const EncoderWeights<T>&, const ModelConfig&, const PromptSpec&, const BenchConfig&);

LPT_INSTANTIATE_ANALYSIS(float)
LPT_INSTANTIATE_ANALYSIS(double)

}  // namespace lpt
