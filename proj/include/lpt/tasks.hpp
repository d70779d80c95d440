#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace lpt {

using TokenIds = std::vector<std::size_t>;

struct SpecialTokens {
  static constexpr std::size_t pad = 0;
  static constexpr std::size_t unk = 1;
  static constexpr std::size_t cls = 2;
  static constexpr std::size_t sep = 3;
  static constexpr std::size_t mask = 4;
  static constexpr std::size_t count = 5;
};

class Vocabulary {
 public:
  // Specials occupy ids 0..4 in the order [PAD] [UNK] [CLS] [SEP] [MASK];
  // `words` follow in order. Duplicates are ignored.
  explicit Vocabulary(const std::vector<std::string>& words);

  std::size_t size() const noexcept { return tokens_.size(); }
  std::optional<std::size_t> find(std::string_view token) const;
  std::size_t id_or_unk(std::string_view token) const;
  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Lowercases and splits on whitespace; every ASCII punctuation character is
// its own token.
std::vector<std::string> split_words(std::string_view text);
TokenIds tokenize(const Vocabulary& vocab, std::string_view text);

enum class Metric { Accuracy, AccuracyAndF1 };

struct TaskSpec {
  std::string name;
  bool is_pair = false;
  // Whitespace-separated; "<S1>", "<S2>" are slots and "[MASK]" marks the
  // prediction position.
  std::string template_text;
  // Label name → label word, in label order.
  std::vector<std::pair<std::string, std::string>> verbalizer;
  Metric metric = Metric::Accuracy;

  std::size_t num_labels() const noexcept { return verbalizer.size(); }
  std::optional<std::size_t> label_index(std::string_view label) const;
  // Throws ConfigError if the template or verbalizer is malformed.
  void validate() const;
};

struct Example {
  std::string text_a;
  std::optional<std::string> text_b;
  std::size_t label = 0;
};

struct Split {
  std::vector<Example> train;
  std::vector<Example> dev;
  std::vector<Example> test;
};

struct EncodedExample {
  TokenIds ids;
  std::size_t mask_position = 0;
  std::size_t label = 0;
};

// [CLS] template-with-slots-filled [SEP]. Sequences longer than `max_len` are
// cut from the right (the final [SEP] is kept); cutting the [MASK] is an error.
EncodedExample apply_template(const TaskSpec& spec, const Example& example, const Vocabulary& vocab,
                              std::size_t max_len = std::size_t(-1));

// Label-order token ids of the label words.
TokenIds verbalize(const TaskSpec& spec, const Vocabulary& vocab);

// Uniform sample without replacement of n train and dev_size dev examples,
// disjoint. The caller supplies the original dev set as the test split.
Split few_shot_split(const std::vector<Example>& full_train, std::size_t n, std::uint64_t seed,
                     std::size_t dev_size = 1000);

// UTF-8 TSV with header text_a[\ttext_b]\tlabel; labels are label names.
std::vector<Example> load_tsv(const std::filesystem::path& path, const TaskSpec& spec);
void save_tsv(const std::filesystem::path& path, const TaskSpec& spec, const std::vector<Example>& examples);

// Task presets. The natural-language presets use the common manual templates
// and label words for their task family; the toy tasks run on the in-repo grammar.
TaskSpec toy_sentiment_task();
TaskSpec toy_entailment_task();
TaskSpec sst2_style_task();
TaskSpec trec_style_task();
TaskSpec nli_style_task();
std::optional<TaskSpec> preset_task(std::string_view name);

// ---------------------------------------------------------------------------
// Seeded toy grammar over a fixed 512-token vocabulary.
//
// Sentiment sentences carry two to four polarity words of one class, so a
// bag-of-words linear model separates them. The pretraining corpus attaches
// the rating word to sentiment sentences, either after them ("... it was
// great .") or before them ("great : ..."), and mixes in entailment pairs and
// filler sentences, which gives the MLM backbone label-informative features.
class ToyGrammar {
 public:
  static constexpr std::size_t kVocabSize = 512;

  explicit ToyGrammar(std::uint64_t seed = 7);

  const Vocabulary& vocabulary() const noexcept { return vocab_; }

  std::vector<TokenIds> pretraining_corpus(std::size_t sentences, std::uint64_t seed) const;
  std::vector<Example> sentiment_examples(std::size_t count, std::uint64_t seed) const;
  std::vector<Example> entailment_examples(std::size_t count, std::uint64_t seed) const;

  const std::vector<std::string>& positive_words() const noexcept { return positive_; }
  const std::vector<std::string>& negative_words() const noexcept { return negative_; }

 private:
  Vocabulary vocab_;
  std::vector<std::string> positive_, negative_, nouns_, verbs_, adjectives_, fillers_;
};

}  // namespace lpt
