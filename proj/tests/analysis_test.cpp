#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "lpt/analysis.hpp"

using namespace lpt;

namespace {

using D = double;

struct Features {
  Tensor<D> x;
  std::vector<std::size_t> y;
};

// Uniform labels; each row is the one-hot code of its label, widened to `d`.
Features one_hot(std::size_t n, std::size_t classes, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> label(0, classes - 1);
  Features f{Tensor<D>({n, d}), {}};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = label(rng);
    f.y.push_back(y);
    f.x.mutable_values()[i * d + y] = 1;
  }
  return f;
}

std::vector<std::size_t> shuffled(std::vector<std::size_t> y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::shuffle(y.begin(), y.end(), rng);
  return y;
}

ModelConfig small_model() {
  ModelConfig c;
  c.n_layers = 3;
  c.d_model = 16;
  c.n_heads = 4;
  c.d_ff = 32;
  c.vocab_size = ToyGrammar::kVocabSize;
  c.max_seq_len = 64;
  return c;
}

}  // namespace

TEST(LabelEntropy, KnownValues) {
  EXPECT_NEAR(label_entropy({0, 1, 0, 1}, 2), std::log(2.0), 1e-12);
  EXPECT_NEAR(label_entropy({0, 1, 2, 3, 4, 5}, 6), std::log(6.0), 1e-12);
  EXPECT_EQ(label_entropy({1, 1, 1}, 2), 0.0);
}

TEST(TrainProbe, InformativeFeaturesRecoverLabelEntropy) {
  for (std::size_t classes : {2u, 6u}) {
    const auto train = one_hot(2000, classes, 8, 1), held = one_hot(1000, classes, 8, 2);
    const auto r = train_probe(train.x, train.y, held.x, held.y, classes, ProbeConfig{});
    const double h = label_entropy(train.y, classes);
    EXPECT_GE(r.accuracy, 0.99) << classes;
    EXPECT_NEAR(r.mi, h, 0.05) << classes;
    EXPECT_LE(r.mi, h + 1e-9);
  }
}

TEST(TrainProbe, ShuffledLabelsCarryNoInformation) {
  for (std::size_t classes : {2u, 6u}) {
    const auto train = one_hot(2000, classes, 8, 3), held = one_hot(2000, classes, 8, 4);
    const auto r = train_probe(train.x, shuffled(train.y, 5), held.x, shuffled(held.y, 6), classes, ProbeConfig{});
    EXPECT_LE(r.mi, 0.05) << classes;
    EXPECT_NEAR(r.accuracy, 1.0 / static_cast<double>(classes), 0.05) << classes;
  }
}

TEST(TrainProbe, InvariantToLabelPermutation) {
  const auto train = one_hot(600, 3, 6, 7), held = one_hot(300, 3, 6, 8);
  const auto base = train_probe(train.x, train.y, held.x, held.y, 3, ProbeConfig{});
  auto relabel = [](std::vector<std::size_t> y) {
    for (auto& v : y) v = (v + 1) % 3;
    return y;
  };
  const auto perm = train_probe(train.x, relabel(train.y), held.x, relabel(held.y), 3, ProbeConfig{});
  EXPECT_NEAR(perm.accuracy, base.accuracy, 0.02);
  EXPECT_NEAR(perm.mi, base.mi, 0.05);
}

TEST(TrainProbe, RequiresTwoClasses) {
  const auto f = one_hot(10, 2, 4, 1);
  EXPECT_THROW(train_probe(f.x, std::vector<std::size_t>(10, 1), f.x, f.y, 2, ProbeConfig{}), DataError);
  EXPECT_THROW(train_probe(f.x, std::vector<std::size_t>(9, 1), f.x, f.y, 2, ProbeConfig{}), DimensionError);
}

TEST(MiProbe, ProfileCoversEveryLayer) {
  const auto cfg = small_model();
  const auto w = EncoderWeights<float>::initialize(cfg, 1);
  const ToyGrammar g;
  Split split;
  split.train = g.sentiment_examples(40, 1);
  split.dev = g.sentiment_examples(20, 2);
  const auto task = encode_task(toy_sentiment_task(), g.vocabulary(), split, cfg, PromptSpec{});
  const auto states = collect_layer_states(w, cfg, task.train);
  ASSERT_EQ(states.size(), cfg.n_layers + 1);
  EXPECT_EQ(states[0].shape(), (Shape{40, cfg.d_model}));
  // Layer 0 is the embedding of the [MASK] token at its position.
  const auto& e = task.train[0];
  for (std::size_t j = 0; j < cfg.d_model; ++j) {
    EXPECT_NEAR(states[0].at(0, j),
                w.token_embedding.at(SpecialTokens::mask, j) + w.position_embedding.at(e.mask_position, j), 1e-7);
  }
  ProbeConfig pc;
  pc.steps = 20;
  const auto profile = mi_probe(w, cfg, task.train, task.dev, 2, pc);
  ASSERT_EQ(profile.layers.size(), cfg.n_layers + 1);
  for (const auto& l : profile.layers) {
    EXPECT_GE(l.probe.accuracy, 0.0);
    EXPECT_LE(l.probe.accuracy, 1.0);
    EXPECT_LE(l.probe.mi, profile.label_entropy + 1e-9);
  }
  std::ostringstream csv;
  write_mi_csv(csv, profile);
  const std::string text = csv.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), static_cast<long>(cfg.n_layers + 2));
}

TEST(MeanStd, PopulationStatistics) {
  const auto [m, s] = mean_std({1, 2, 3, 4});
  EXPECT_DOUBLE_EQ(m, 2.5);
  EXPECT_DOUBLE_EQ(s, std::sqrt(1.25));
  EXPECT_EQ(mean_std({}).first, 0.0);
}

TEST(LayerSweep, BookkeepingAndFirstLayerMatchesPromptTuning) {
  const auto cfg = small_model();
  const auto w = EncoderWeights<D>::initialize(cfg, 1);
  const ToyGrammar g;
  const auto full = g.sentiment_examples(60, 9);
  PromptSpec late;
  late.method = PromptMethod::LateNoPG;
  late.l = 4;
  TaskForSeed task_for_seed = [&](std::uint64_t seed) {
    Split s = few_shot_split(full, 8, seed, 10);
    return encode_task(toy_sentiment_task(), g.vocabulary(), s, cfg, late);
  };
  TrainConfig tc;
  tc.steps = 3;
  tc.batch_size = 2;
  tc.eval_every = 3;
  const auto table = layer_sweep(w, cfg, late, {1, 2, 3}, {1, 2}, tc, task_for_seed);
  EXPECT_EQ(table.method, "LATE_NOPG");
  ASSERT_EQ(table.rows.size(), 3u);
  for (const auto& row : table.rows) {
    EXPECT_EQ(row.runs.size(), 2u);
    std::vector<double> devs;
    for (const auto& r : row.runs) devs.push_back(r.dev_metric);
    EXPECT_DOUBLE_EQ(row.mean, mean_std(devs).first);
  }

  PromptSpec pt = late;
  pt.method = PromptMethod::PT;
  pt.k = 1;
  for (std::size_t i = 0; i < 2; ++i) {
    TrainConfig t = tc;
    t.seed = table.rows[0].runs[i].seed;
    const auto rec = train(w, cfg, pt, task_for_seed(t.seed), t);
    EXPECT_EQ(rec.loss_curve, table.rows[0].runs[i].loss_curve);
  }

  std::ostringstream csv;
  write_sweep_csv(csv, table);
  const std::string text = csv.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 4);
  EXPECT_THROW(layer_sweep(w, cfg, late, {4}, {1}, tc, task_for_seed), ConfigError);
}

TEST(Bench, AccountingAndTrends) {
  auto cfg = small_model();
  cfg.n_layers = 4;
  const auto w = EncoderWeights<float>::initialize(cfg, 1);
  BenchConfig bc;
  bc.seq_len = 24;
  bc.warmup_steps = 1;
  bc.timed_steps = 2;
  PromptSpec pt;
  pt.method = PromptMethod::PT;
  pt.l = 4;
  pt.k = 1;
  const auto base = bench(w, cfg, pt, bc);
  EXPECT_EQ(base.backward_layer_count, 4u);
  EXPECT_EQ(base.tokens, 2u * 2 * 24);
  EXPECT_GT(base.tokens_per_ms, 0.0);
  EXPECT_EQ(base.tunable_params, count_tunable(pt, cfg));
  std::size_t previous = base.activation_bytes;
  for (std::size_t k = 2; k <= 4; ++k) {
    PromptSpec late = pt;
    late.method = PromptMethod::LateNoPG;
    late.k = k;
    const auto r = bench(w, cfg, late, bc);
    EXPECT_EQ(r.backward_layer_count, cfg.n_layers - k + 1);
    EXPECT_LT(r.activation_bytes, previous);
    previous = r.activation_bytes;
  }
  bc.timed_steps = 0;
  EXPECT_THROW(bench(w, cfg, pt, bc), ConfigError);
  std::ostringstream csv;
  write_bench_csv(csv, {base});
  EXPECT_NE(csv.str().find("PT,1,"), std::string::npos);
}
