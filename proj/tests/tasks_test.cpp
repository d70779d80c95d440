#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "lpt/errors.hpp"
#include "lpt/tasks.hpp"

namespace lpt {
namespace {

Vocabulary small_vocab() {
  return Vocabulary({"fun", "ride", "it", "was", ".", "great", "terrible", "movie", ":", "?", ",", "yes", "no", "maybe",
                     "expression", "entity", "description", "human", "location", "number", "what", "a", "is"});
}

std::vector<std::size_t> ids(const Vocabulary& v, std::initializer_list<const char*> words) {
  std::vector<std::size_t> out;
  for (const char* w : words) out.push_back(*v.find(w));
  return out;
}

TEST(Vocabulary, SpecialsComeFirst) {
  const Vocabulary v = small_vocab();
  EXPECT_EQ(*v.find("[PAD]"), SpecialTokens::pad);
  EXPECT_EQ(*v.find("[UNK]"), SpecialTokens::unk);
  EXPECT_EQ(*v.find("[CLS]"), SpecialTokens::cls);
  EXPECT_EQ(*v.find("[SEP]"), SpecialTokens::sep);
  EXPECT_EQ(*v.find("[MASK]"), SpecialTokens::mask);
  EXPECT_EQ(*v.find("fun"), 5u);
}

TEST(Vocabulary, DuplicatesIgnored) {
  const Vocabulary v({"a", "b", "a"});
  EXPECT_EQ(v.size(), 7u);
  EXPECT_EQ(v.token(6), "b");
}

TEST(Tokenize, EmptyTextGivesNoTokens) { EXPECT_TRUE(tokenize(small_vocab(), "").empty()); }

TEST(Tokenize, KnownWordsMapDeterministically) {
  const Vocabulary v = small_vocab();
  const auto a = tokenize(v, "Great movie .");
  EXPECT_EQ(a, ids(v, {"great", "movie", "."}));
  EXPECT_EQ(tokenize(v, "Great movie ."), a);
  for (std::size_t id : a) EXPECT_NE(id, SpecialTokens::unk);
}

TEST(Tokenize, UnknownWordMapsToUnk) {
  EXPECT_EQ(tokenize(small_vocab(), "zebra"), TokenIds{SpecialTokens::unk});
}

TEST(Tokenize, PunctuationSplitsAndCaseFolds) {
  EXPECT_EQ(split_words("It WAS great,fun?"), (std::vector<std::string>{"it", "was", "great", ",", "fun", "?"}));
  EXPECT_EQ(split_words("  \t "), std::vector<std::string>{});
}

TEST(Tokenize, NonAsciiBytesAreKeptAndNeverFail) {
  const auto words = split_words("caf\xc3\xa9 ok");
  ASSERT_EQ(words.size(), 2u);
  EXPECT_EQ(words[0], "caf\xc3\xa9");
  EXPECT_EQ(tokenize(small_vocab(), "caf\xc3\xa9"), TokenIds{SpecialTokens::unk});
}

TEST(ApplyTemplate, SentimentMaskIndex) {
  const Vocabulary v = small_vocab();
  const auto enc = apply_template(sst2_style_task(), Example{"fun ride", std::nullopt, 0}, v);
  TokenIds expected{SpecialTokens::cls};
  for (auto id : ids(v, {"fun", "ride", "it", "was"})) expected.push_back(id);
  expected.push_back(SpecialTokens::mask);
  expected.push_back(*v.find("."));
  expected.push_back(SpecialTokens::sep);
  EXPECT_EQ(enc.ids, expected);
  EXPECT_EQ(enc.mask_position, 5u);
  EXPECT_EQ(enc.ids[enc.mask_position], SpecialTokens::mask);
}

TEST(ApplyTemplate, QuestionClassificationMaskAfterCls) {
  const auto enc = apply_template(trec_style_task(), Example{"what is a movie ?", std::nullopt, 0}, small_vocab());
  EXPECT_EQ(enc.mask_position, 1u);
  EXPECT_EQ(enc.ids[0], SpecialTokens::cls);
  EXPECT_EQ(enc.ids[2], *small_vocab().find(":"));
}

TEST(ApplyTemplate, PairTaskHasOneMaskBetweenSentences) {
  const Vocabulary v = small_vocab();
  const auto enc = apply_template(nli_style_task(), Example{"fun ride", std::string("great movie"), 0}, v);
  EXPECT_EQ(std::count(enc.ids.begin(), enc.ids.end(), SpecialTokens::mask), 1);
  // [CLS] fun ride ? [MASK] , great movie [SEP]
  EXPECT_EQ(enc.mask_position, 4u);
  EXPECT_EQ(enc.ids[3], *v.find("?"));
  EXPECT_EQ(enc.ids[5], *v.find(","));
  EXPECT_EQ(enc.ids.back(), SpecialTokens::sep);
}

TEST(ApplyTemplate, PairTaskWithoutSecondTextFails) {
  EXPECT_THROW(apply_template(nli_style_task(), Example{"fun", std::nullopt, 0}, small_vocab()), DataError);
}

TEST(ApplyTemplate, TruncatesFromRightKeepingMask) {
  const auto enc = apply_template(trec_style_task(), Example{"fun ride fun ride fun ride", std::nullopt, 0},
                                  small_vocab(), 5);
  ASSERT_EQ(enc.ids.size(), 5u);
  EXPECT_EQ(enc.ids[enc.mask_position], SpecialTokens::mask);
  EXPECT_EQ(enc.ids.back(), SpecialTokens::sep);
}

TEST(ApplyTemplate, TruncationThatDropsMaskFails) {
  EXPECT_THROW(apply_template(sst2_style_task(), Example{"fun ride fun ride", std::nullopt, 0}, small_vocab(), 4),
               DataError);
}

TEST(Verbalize, BinarySentimentOrder) {
  const Vocabulary v = small_vocab();
  EXPECT_EQ(verbalize(sst2_style_task(), v), ids(v, {"great", "terrible"}));
}

TEST(Verbalize, SixWayQuestionClassification) {
  const auto out = verbalize(trec_style_task(), small_vocab());
  EXPECT_EQ(out.size(), 6u);
  EXPECT_EQ(std::set<std::size_t>(out.begin(), out.end()).size(), 6u);
}

TEST(Verbalize, DuplicateLabelWordsRejected) {
  TaskSpec spec = sst2_style_task();
  spec.verbalizer[1].second = "great";
  EXPECT_THROW(verbalize(spec, small_vocab()), ConfigError);
  EXPECT_THROW(spec.validate(), ConfigError);
}

TEST(Verbalize, OutOfVocabularyWordRejected) {
  TaskSpec spec = sst2_style_task();
  spec.verbalizer[0].second = "splendid";
  EXPECT_THROW(verbalize(spec, small_vocab()), ConfigError);
}

TEST(TaskSpec, ValidateRejectsMalformedTemplates) {
  TaskSpec spec = sst2_style_task();
  spec.template_text = "<S1> it was .";
  EXPECT_THROW(spec.validate(), ConfigError);
  spec.template_text = "[MASK] <S1> [MASK]";
  EXPECT_THROW(spec.validate(), ConfigError);
  spec.template_text = "<S1> [MASK] <S2>";
  EXPECT_THROW(spec.validate(), ConfigError);
  for (auto make : {toy_sentiment_task, toy_entailment_task, sst2_style_task, trec_style_task, nli_style_task})
    EXPECT_NO_THROW(make().validate());
}

TEST(TaskSpec, PresetsByName) {
  EXPECT_TRUE(preset_task("toy_sentiment"));
  EXPECT_TRUE(preset_task("trec"));
  EXPECT_FALSE(preset_task("nope"));
}

std::vector<Example> numbered(std::size_t n) {
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back({std::to_string(i), std::nullopt, i % 2});
  return out;
}

std::set<std::string> texts(const std::vector<Example>& xs) {
  std::set<std::string> out;
  for (const auto& x : xs) out.insert(x.text_a);
  return out;
}

TEST(FewShotSplit, SizesAndDisjointness) {
  const auto split = few_shot_split(numbered(5000), 100, 1);
  EXPECT_EQ(split.train.size(), 100u);
  EXPECT_EQ(split.dev.size(), 1000u);
  const auto a = texts(split.train), b = texts(split.dev);
  EXPECT_EQ(a.size(), 100u);
  EXPECT_EQ(b.size(), 1000u);
  for (const auto& t : a) EXPECT_FALSE(b.contains(t));
}

TEST(FewShotSplit, DisjointForFiftySeeds) {
  const auto pool = numbered(1600);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto split = few_shot_split(pool, 500, seed);
    const auto a = texts(split.train), b = texts(split.dev);
    ASSERT_EQ(a.size() + b.size(), 1500u) << "seed " << seed;
    for (const auto& t : a) ASSERT_FALSE(b.contains(t)) << "seed " << seed;
  }
}

TEST(FewShotSplit, SameSeedSameSplit) {
  const auto pool = numbered(2000);
  EXPECT_EQ(texts(few_shot_split(pool, 100, 9).train), texts(few_shot_split(pool, 100, 9).train));
  EXPECT_EQ(texts(few_shot_split(pool, 100, 9).dev), texts(few_shot_split(pool, 100, 9).dev));
}

TEST(FewShotSplit, FourSeedsFourDistinctSplits) {
  const auto pool = numbered(2000);
  std::set<std::set<std::string>> seen;
  for (std::uint64_t seed = 1; seed <= 4; ++seed) seen.insert(texts(few_shot_split(pool, 100, seed).train));
  EXPECT_EQ(seen.size(), 4u);
}

TEST(FewShotSplit, TooSmallSuggestsDevSizeOverride) {
  try {
    few_shot_split(numbered(500), 100, 1);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("train.dev_size"), std::string::npos);
  }
  EXPECT_EQ(few_shot_split(numbered(500), 100, 1, 300).dev.size(), 300u);
}

class TsvTest : public ::testing::Test {
 protected:
  std::filesystem::path path_ = std::filesystem::temp_directory_path() / "lpt_tasks_test.tsv";
  void write(const std::string& content) { std::ofstream(path_) << content; }
  void TearDown() override { std::filesystem::remove(path_); }
};

TEST_F(TsvTest, SingleSentenceFileParses) {
  write("text_a\tlabel\nfun ride\tpositive\nboring\tnegative\n");
  const auto xs = load_tsv(path_, sst2_style_task());
  ASSERT_EQ(xs.size(), 2u);
  EXPECT_EQ(xs[0].text_a, "fun ride");
  EXPECT_EQ(xs[0].label, 0u);
  EXPECT_EQ(xs[1].label, 1u);
  EXPECT_FALSE(xs[1].text_b);
}

TEST_F(TsvTest, PairFileParses) {
  write("text_a\ttext_b\tlabel\na b\tc\tneutral\n");
  const auto xs = load_tsv(path_, nli_style_task());
  ASSERT_EQ(xs.size(), 1u);
  EXPECT_EQ(*xs[0].text_b, "c");
  EXPECT_EQ(xs[0].label, 1u);
}

TEST_F(TsvTest, WrongColumnCountNamesLine) {
  write("text_a\tlabel\nok\tpositive\nbad row\n");
  try {
    load_tsv(path_, sst2_style_task());
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
  }
}

TEST_F(TsvTest, UnknownLabelNamed) {
  write("text_a\tlabel\nok\tmeh\n");
  try {
    load_tsv(path_, sst2_style_task());
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("'meh'"), std::string::npos) << e.what();
  }
}

TEST_F(TsvTest, RoundTripThroughSave) {
  const std::vector<Example> xs{{"a b", std::string("c"), 2}, {"d", std::string("e f"), 0}};
  save_tsv(path_, nli_style_task(), xs);
  const auto back = load_tsv(path_, nli_style_task());
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].text_a, "a b");
  EXPECT_EQ(*back[1].text_b, "e f");
  EXPECT_EQ(back[0].label, 2u);
}

TEST(ToyGrammar, VocabularyHasFixedSize) {
  const ToyGrammar g;
  EXPECT_EQ(g.vocabulary().size(), ToyGrammar::kVocabSize);
  EXPECT_NO_THROW(verbalize(toy_sentiment_task(), g.vocabulary()));
  EXPECT_NO_THROW(verbalize(toy_entailment_task(), g.vocabulary()));
  EXPECT_NO_THROW(verbalize(trec_style_task(), g.vocabulary()));
}

TEST(ToyGrammar, SentimentPolarityWordsShareTheLabel) {
  const ToyGrammar g;
  const std::set<std::string> pos(g.positive_words().begin(), g.positive_words().end());
  const std::set<std::string> neg(g.negative_words().begin(), g.negative_words().end());
  std::size_t positives = 0;
  for (const auto& ex : g.sentiment_examples(500, 3)) {
    int n_pos = 0, n_neg = 0;
    for (const auto& w : split_words(ex.text_a)) {
      n_pos += pos.contains(w);
      n_neg += neg.contains(w);
    }
    EXPECT_EQ(std::min(n_pos, n_neg), 0) << ex.text_a;
    EXPECT_GE(n_pos + n_neg, 2) << ex.text_a;
    EXPECT_LE(n_pos + n_neg, 4) << ex.text_a;
    EXPECT_EQ(ex.label, n_pos > 0 ? 0u : 1u) << ex.text_a;
    positives += ex.label == 0;
    for (std::size_t id : tokenize(g.vocabulary(), ex.text_a)) EXPECT_NE(id, SpecialTokens::unk);
  }
  EXPECT_GT(positives, 200u);
  EXPECT_LT(positives, 300u);
}

TEST(ToyGrammar, CorpusRatingsAgreeWithPolarity) {
  const ToyGrammar g;
  const auto& v = g.vocabulary();
  std::set<std::size_t> pos, neg;
  for (const auto& w : g.positive_words()) pos.insert(v.id_or_unk(w));
  for (const auto& w : g.negative_words()) neg.insert(v.id_or_unk(w));
  const std::size_t great = v.id_or_unk("great"), terrible = v.id_or_unk("terrible");
  std::size_t rated = 0;
  for (const auto& seq : g.pretraining_corpus(1000, 8)) {
    const auto n_great = std::count(seq.begin(), seq.end(), great);
    const auto n_terrible = std::count(seq.begin(), seq.end(), terrible);
    if (n_great + n_terrible == 0) continue;
    ++rated;
    ASSERT_EQ(n_great + n_terrible, 1);
    for (std::size_t id : seq) {
      if (pos.contains(id)) EXPECT_EQ(n_great, 1);
      if (neg.contains(id)) EXPECT_EQ(n_terrible, 1);
    }
  }
  EXPECT_GT(rated, 700u);
  EXPECT_LT(rated, 900u);
}

TEST(ToyGrammar, SeededAndDeterministic) {
  const ToyGrammar a, b;
  EXPECT_EQ(a.vocabulary().tokens(), b.vocabulary().tokens());
  EXPECT_EQ(a.pretraining_corpus(50, 4), b.pretraining_corpus(50, 4));
  EXPECT_NE(a.pretraining_corpus(50, 4), a.pretraining_corpus(50, 5));
  const auto corpus = a.pretraining_corpus(50, 4);
  for (const auto& seq : corpus) {
    EXPECT_EQ(seq.front(), SpecialTokens::cls);
    EXPECT_EQ(seq.back(), SpecialTokens::sep);
  }
}

TEST(ToyGrammar, EntailmentExamplesArePairs) {
  const ToyGrammar g;
  for (const auto& ex : g.entailment_examples(50, 2)) {
    ASSERT_TRUE(ex.text_b);
    EXPECT_LT(ex.label, 2u);
  }
}

}  // namespace
}  // namespace lpt
