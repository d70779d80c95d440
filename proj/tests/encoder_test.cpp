#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "gradcheck.hpp"
#include "lpt/encoder.hpp"
#include "lpt/prompting.hpp"

using namespace lpt;
using lpt::testing::random_tensor;

namespace {

using D = double;

ModelConfig tiny(std::size_t layers = 3, std::size_t d = 16) {
  ModelConfig c;
  c.n_layers = layers;
  c.d_model = d;
  c.n_heads = 4;
  c.d_ff = 32;
  c.vocab_size = 40;
  c.max_seq_len = 24;
  return c;
}

double max_abs_diff(const Tensor<D>& a, const Tensor<D>& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double worst = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

std::vector<D> layer_norm_ref(std::span<const D> x, std::span<const D> gain, std::span<const D> bias) {
  const std::size_t n = x.size();
  double mean = 0, var = 0;
  for (D v : x) mean += v;
  mean /= static_cast<double>(n);
  for (D v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  std::vector<D> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = (x[i] - mean) / std::sqrt(var + 1e-5) * gain[i] + bias[i];
  return out;
}

D gelu_ref(D x) {
  const D c = std::sqrt(2.0 / std::numbers::pi);
  return 0.5 * x * (1 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

const TokenSequence kIds{2, 7, 9, 11, 4, 13, 3};

}  // namespace

TEST(ForwardLower, FirstLayerReturnsEmbeddings) {
  const auto cfg = tiny();
  const auto w = EncoderWeights<D>::initialize(cfg, 1);
  Tape<D> tape;
  const auto out = forward_lower(tape, w, cfg, kIds, all_valid(kIds.size()), 1);
  ASSERT_EQ(out.shape(), (Shape{kIds.size(), cfg.d_model}));
  for (std::size_t i = 0; i < kIds.size(); ++i)
    for (std::size_t j = 0; j < cfg.d_model; ++j)
      EXPECT_EQ(out.at(i, j), w.token_embedding.at(kIds[i], j) + w.position_embedding.at(i, j));
}

TEST(ForwardLower, ShapeAndNoTapeNodes) {
  const auto cfg = tiny(3, 16);
  const auto w = EncoderWeights<D>::initialize(cfg, 1);
  Tape<D> tape;
  const auto out = forward_lower(tape, w, cfg, kIds, all_valid(7), 3);
  EXPECT_EQ(out.shape(), (Shape{7, 16}));
  EXPECT_FALSE(out.recorded());
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_TRUE(tape.recording());
}

TEST(ForwardLower, MatchesScriptedOneLayerOracle) {
  auto cfg = tiny(1, 8);
  cfg.n_heads = 2;
  auto w = EncoderWeights<D>::initialize(cfg, 5);
  auto& layer = w.layers[0];
  for (auto* t : {&layer.wq, &layer.wk, &layer.wv, &layer.wo})
    for (auto& v : t->mutable_values()) v = 0;
  std::mt19937_64 rng(3);
  for (auto* t : {&layer.bv, &layer.bo, &layer.ln1_gain, &layer.ln2_gain, &layer.ln2_bias, &layer.ff1_b, &layer.ff2_b})
    for (auto& v : t->mutable_values()) v = std::uniform_real_distribution<D>(-0.5, 0.5)(rng);

  const TokenSequence ids{6};
  Tape<D> tape;
  const auto out = forward_lower(tape, w, cfg, ids, all_valid(1), 2);

  const std::size_t d = cfg.d_model, f = cfg.d_ff;
  std::vector<D> x(d), h(d);
  for (std::size_t j = 0; j < d; ++j) x[j] = w.token_embedding.at(6, j) + w.position_embedding.at(0, j);
  // With zero projections a single token attends to itself and receives bv; wo = 0 leaves only bo.
  for (std::size_t j = 0; j < d; ++j) h[j] = x[j] + layer.bo[j];
  const auto g = layer_norm_ref(h, layer.ln2_gain.values(), layer.ln2_bias.values());
  std::vector<D> hidden(f);
  for (std::size_t u = 0; u < f; ++u) {
    D s = layer.ff1_b[u];
    for (std::size_t j = 0; j < d; ++j) s += g[j] * layer.ff1_w.at(j, u);
    hidden[u] = gelu_ref(s);
  }
  for (std::size_t j = 0; j < d; ++j) {
    D s = layer.ff2_b[j];
    for (std::size_t u = 0; u < f; ++u) s += hidden[u] * layer.ff2_w.at(u, j);
    EXPECT_NEAR(out[j], h[j] + s, 1e-6) << j;
  }
}

TEST(ForwardLower, RejectsBadLayerAndLongSequence) {
  const auto cfg = tiny(3);
  const auto w = EncoderWeights<D>::initialize(cfg, 1);
  Tape<D> tape;
  EXPECT_THROW(forward_lower(tape, w, cfg, kIds, all_valid(7), 0), ContractError);
  EXPECT_THROW(forward_lower(tape, w, cfg, kIds, all_valid(7), 5), ContractError);
  const TokenSequence long_ids(cfg.max_seq_len + 1, 7);
  EXPECT_THROW(forward_lower(tape, w, cfg, long_ids, all_valid(long_ids.size()), 1), DimensionError);
}

TEST(ForwardUpper, PastLastLayerAppliesOnlyFinalNorm) {
  const auto cfg = tiny(2);
  auto w = EncoderWeights<D>::initialize(cfg, 2);
  std::mt19937_64 rng(1);
  w.final_gain = random_tensor<D>({cfg.d_model}, rng);
  w.final_bias = random_tensor<D>({cfg.d_model}, rng);
  const auto x = random_tensor<D>({4, cfg.d_model}, rng);
  Tape<D> tape;
  const auto out = forward_upper(tape, w, cfg, x, all_valid(4), cfg.n_layers + 1);
  for (std::size_t r = 0; r < 4; ++r) {
    const auto ref = layer_norm_ref(x.values().subspan(r * cfg.d_model, cfg.d_model), w.final_gain.values(),
                                    w.final_bias.values());
    for (std::size_t j = 0; j < cfg.d_model; ++j) EXPECT_NEAR(out.at(r, j), ref[j], 1e-12);
  }
}

TEST(ForwardUpper, RecordedNodesGrowLinearlyInUpperDepth) {
  const auto cfg = tiny(4);
  const auto w = EncoderWeights<D>::initialize(cfg, 2);
  std::mt19937_64 rng(4);
  auto nodes_at = [&](std::size_t k) {
    Tape<D> tape;
    const auto p = tape.parameter("p", random_tensor<D>({2, cfg.d_model}, rng));
    const auto lower = forward_lower(tape, w, cfg, kIds, all_valid(7), k);
    const auto ins = insert_prompt(tape, p, lower, all_valid(7));
    forward_upper(tape, w, cfg, ins.states, ins.mask, k);
    return static_cast<long>(tape.size());
  };
  const long n2 = nodes_at(2), n3 = nodes_at(3), n4 = nodes_at(4), n5 = nodes_at(5);
  EXPECT_GT(n2 - n3, 0);
  EXPECT_EQ(n2 - n3, n3 - n4);
  EXPECT_EQ(n3 - n4, n4 - n5);
}

TEST(ForwardUpper, PromptChangesTextPositions) {
  const auto cfg = tiny(3);
  const auto w = EncoderWeights<D>::initialize(cfg, 3);
  std::mt19937_64 rng(9);
  Tape<D> tape;
  const auto lower = forward_lower(tape, w, cfg, kIds, all_valid(7), 2);
  const auto plain = forward_upper(tape, w, cfg, lower, all_valid(7), 2);
  const auto ins = insert_prompt(tape, random_tensor<D>({3, cfg.d_model}, rng), lower, all_valid(7));
  const auto prompted = forward_upper(tape, w, cfg, ins.states, ins.mask, 2);
  const auto text = tape.slice_rows(prompted, 3, 7);
  EXPECT_GT(max_abs_diff(text, plain), 1e-3);
}

TEST(SplitForward, MatchesMonolithicAtEveryLayer) {
  const auto cfg = tiny(4);
  const auto w = EncoderWeights<D>::initialize(cfg, 8);
  Tape<D> tape;
  const auto full = forward_full(tape, w, cfg, kIds, all_valid(7));
  for (std::size_t k = 1; k <= cfg.n_layers + 1; ++k) {
    const auto lower = forward_lower(tape, w, cfg, kIds, all_valid(7), k);
    const auto upper = forward_upper(tape, w, cfg, lower, all_valid(7), k);
    EXPECT_LT(max_abs_diff(upper, full), 1e-5) << "k=" << k;
  }
}

TEST(SplitForward, SinglePrecisionAlsoAgrees) {
  const auto cfg = tiny(3);
  const auto w = EncoderWeights<float>::initialize(cfg, 8);
  Tape<float> tape;
  const auto full = forward_full(tape, w, cfg, kIds, all_valid(7));
  for (std::size_t k = 1; k <= cfg.n_layers + 1; ++k) {
    const auto upper = forward_upper(tape, w, cfg, forward_lower(tape, w, cfg, kIds, all_valid(7), k), all_valid(7), k);
    for (std::size_t i = 0; i < full.numel(); ++i) EXPECT_NEAR(upper[i], full[i], 1e-5f);
  }
}

TEST(Attention, RowsAreDistributionsAndPadsGetNoWeight) {
  const auto cfg = tiny(1);
  const auto w = EncoderWeights<D>::initialize(cfg, 4);
  ValidMask mask = all_valid(7);
  mask[5] = mask[6] = 0;
  Tape<D> tape;
  forward_full(tape, w, cfg, kIds, mask);
  const auto& probs = tape.last_attention();
  ASSERT_EQ(probs.size(), cfg.n_heads * 7 * 7);
  for (std::size_t row = 0; row < cfg.n_heads * 7; ++row) {
    double s = 0;
    for (std::size_t j = 0; j < 7; ++j) s += probs[row * 7 + j];
    EXPECT_NEAR(s, 1.0, 1e-6);
    EXPECT_EQ(probs[row * 7 + 5], 0.0);
    EXPECT_EQ(probs[row * 7 + 6], 0.0);
  }
}

TEST(MlmLogits, IdenticalLabelEmbeddingsGiveEqualLogits) {
  const auto cfg = tiny(2);
  auto w = EncoderWeights<D>::initialize(cfg, 6);
  for (std::size_t j = 0; j < cfg.d_model; ++j)
    w.token_embedding.mutable_values()[21 * cfg.d_model + j] = w.token_embedding.at(20, j);
  w.mlm_bias.mutable_values()[21] = w.mlm_bias[20];
  Tape<D> tape;
  const auto states = forward_full(tape, w, cfg, kIds, all_valid(7));
  const TokenSequence verb{20, 21};
  const auto logits = mlm_logits_at(tape, w, states, 4, verb);
  EXPECT_EQ(logits.numel(), 2u);
  EXPECT_EQ(logits[0], logits[1]);
}

TEST(MlmLogits, RestrictedEqualsFullReadout) {
  const auto cfg = tiny(2);
  const auto w = EncoderWeights<D>::initialize(cfg, 6);
  Tape<D> tape;
  const auto states = forward_full(tape, w, cfg, kIds, all_valid(7));
  const TokenSequence verb{17, 5, 30};
  const auto restricted = mlm_logits_at(tape, w, states, 4, verb);
  const auto full = mlm_logits(tape, w, states);
  ASSERT_EQ(restricted.numel(), 3u);
  for (std::size_t i = 0; i < verb.size(); ++i) EXPECT_NEAR(restricted[i], full.at(4, verb[i]), 1e-12);
}

TEST(MlmLogits, RejectsBadArguments) {
  const auto cfg = tiny(1);
  const auto w = EncoderWeights<D>::initialize(cfg, 6);
  Tape<D> tape;
  const auto states = forward_full(tape, w, cfg, kIds, all_valid(7));
  EXPECT_THROW(mlm_logits_at(tape, w, states, 7, TokenSequence{5}), ContractError);
  EXPECT_THROW(mlm_logits_at(tape, w, states, 0, TokenSequence{}), ContractError);
}

TEST(ModelConfig, ValidateNamesField) {
  auto cfg = tiny();
  cfg.n_heads = 5;
  try {
    cfg.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("model.n_heads"), std::string::npos) << e.what();
  }
}

TEST(EncoderWeights, NamedRoundTripAndFingerprint) {
  const auto cfg = tiny(2);
  const auto w = EncoderWeights<D>::initialize(cfg, 1);
  const auto back = EncoderWeights<D>::from_named(cfg, w.named());
  EXPECT_EQ(back.fingerprint(), w.fingerprint());
  EXPECT_EQ(w.fingerprint(), EncoderWeights<D>::initialize(cfg, 1).fingerprint());
  auto changed = w.clone();
  changed.layers[1].ff2_b.mutable_values()[0] += 1e-12;
  EXPECT_NE(changed.fingerprint(), w.fingerprint());
  auto missing = w.named();
  missing.pop_back();
  EXPECT_THROW(EncoderWeights<D>::from_named(cfg, missing), DataError);
}

namespace {

std::vector<TokenSequence> pattern_corpus(std::size_t n, std::uint64_t seed) {
  // Token b follows token a deterministically, so masked tokens are recoverable.
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> tok(5, 24);
  std::vector<TokenSequence> out;
  for (std::size_t i = 0; i < n; ++i) {
    TokenSequence s{2};
    for (int j = 0; j < 5; ++j) {
      const std::size_t a = tok(rng);
      s.push_back(a);
      s.push_back(a + 15);
    }
    s.push_back(3);
    out.push_back(s);
  }
  return out;
}

}  // namespace

TEST(PretrainToy, LearnsAndIsDeterministic) {
  ModelConfig cfg = tiny(2, 32);
  cfg.vocab_size = 512;
  PretrainOptions opt;
  opt.steps = 150;
  opt.seed = 3;
  const auto corpus = pattern_corpus(600, 1);
  const auto a = pretrain_toy<float>(cfg, corpus, opt);
  EXPECT_LT(a.report.final_heldout_loss, a.report.initial_heldout_loss);
  EXPECT_GT(a.report.heldout_mask_accuracy, 5.0 / static_cast<double>(cfg.vocab_size));
  EXPECT_EQ(a.report.loss_curve.size(), opt.steps);
  const auto b = pretrain_toy<float>(cfg, corpus, opt);
  EXPECT_EQ(a.weights.fingerprint(), b.weights.fingerprint());
}

TEST(PretrainToy, RejectsTinyCorpus) {
  PretrainOptions opt;
  opt.batch_size = 16;
  EXPECT_THROW(pretrain_toy<float>(tiny(), pattern_corpus(10, 1), opt), DataError);
  EXPECT_THROW(pretrain_toy<float>(tiny(), {}, opt), DataError);
}
