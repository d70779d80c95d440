#include "lpt/tasks.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "lpt/errors.hpp"

namespace lpt {

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
  for (const char* s : {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"}) {
    index_.emplace(s, tokens_.size());
    tokens_.emplace_back(s);
  }
  for (const auto& w : words) {
    if (index_.emplace(w, tokens_.size()).second) tokens_.push_back(w);
  }
}

std::optional<std::size_t> Vocabulary::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t Vocabulary::id_or_unk(std::string_view token) const { return find(token).value_or(SpecialTokens::unk); }

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) out.push_back(std::move(current));
    current.clear();
  };
  for (char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      flush();
    } else if (c < 128 && std::ispunct(c)) {
      flush();
      out.emplace_back(1, raw);
    } else {
      current.push_back(c < 128 ? static_cast<char>(std::tolower(c)) : raw);
    }
  }
  flush();
  return out;
}

TokenIds tokenize(const Vocabulary& vocab, std::string_view text) {
  TokenIds ids;
  for (const auto& w : split_words(text)) ids.push_back(vocab.id_or_unk(w));
  return ids;
}

// ---------------------------------------------------------------------------
// Task specs

std::optional<std::size_t> TaskSpec::label_index(std::string_view label) const {
  for (std::size_t i = 0; i < verbalizer.size(); ++i)
    if (verbalizer[i].first == label) return i;
  return std::nullopt;
}

namespace {

std::vector<std::string> template_pieces(const std::string& text) {
  std::vector<std::string> pieces;
  std::istringstream in(text);
  for (std::string p; in >> p;) pieces.push_back(p);
  return pieces;
}

}  // namespace

void TaskSpec::validate() const {
  const auto pieces = template_pieces(template_text);
  const auto masks = std::count(pieces.begin(), pieces.end(), "[MASK]");
  if (masks != 1) {
    throw ConfigError("task '" + name + "': template must contain exactly one [MASK], found " + std::to_string(masks));
  }
  if (std::find(pieces.begin(), pieces.end(), "<S1>") == pieces.end()) {
    throw ConfigError("task '" + name + "': template has no <S1> slot");
  }
  const bool has_s2 = std::find(pieces.begin(), pieces.end(), "<S2>") != pieces.end();
  if (has_s2 != is_pair) {
    throw ConfigError("task '" + name + "': <S2> slot must appear exactly when the task is a pair task");
  }
  if (verbalizer.size() < 2) throw ConfigError("task '" + name + "': verbalizer needs at least two labels");
  std::set<std::string> labels, words;
  for (const auto& [label, word] : verbalizer) {
    if (!labels.insert(label).second) throw ConfigError("task '" + name + "': duplicate label '" + label + "'");
    const auto split = split_words(word);
    const std::string normalized = split.size() == 1 ? split[0] : word;
    if (!words.insert(normalized).second) {
      throw ConfigError("task '" + name + "': label word '" + word + "' is used by more than one label");
    }
  }
}

EncodedExample apply_template(const TaskSpec& spec, const Example& example, const Vocabulary& vocab,
                              std::size_t max_len) {
  if (spec.is_pair && !example.text_b) {
    throw DataError("task '" + spec.name + "' is a sentence-pair task but the example has no text_b");
  }
  EncodedExample out;
  out.label = example.label;
  out.ids.push_back(SpecialTokens::cls);
  bool seen_mask = false;
  for (const auto& piece : template_pieces(spec.template_text)) {
    if (piece == "<S1>") {
      const auto ids = tokenize(vocab, example.text_a);
      out.ids.insert(out.ids.end(), ids.begin(), ids.end());
    } else if (piece == "<S2>") {
      const auto ids = tokenize(vocab, example.text_b.value_or(""));
      out.ids.insert(out.ids.end(), ids.begin(), ids.end());
    } else if (piece == "[MASK]") {
      if (seen_mask) throw ConfigError("task '" + spec.name + "': template contains more than one [MASK]");
      seen_mask = true;
      out.mask_position = out.ids.size();
      out.ids.push_back(SpecialTokens::mask);
    } else {
      const auto ids = tokenize(vocab, piece);
      out.ids.insert(out.ids.end(), ids.begin(), ids.end());
    }
  }
  if (!seen_mask) throw ConfigError("task '" + spec.name + "': template has no [MASK]");
  out.ids.push_back(SpecialTokens::sep);
  if (out.ids.size() > max_len) {
    if (max_len < 2 || out.mask_position >= max_len - 1) {
      throw DataError("task '" + spec.name + "': truncating to " + std::to_string(max_len) +
                      " tokens would remove the [MASK] token at position " + std::to_string(out.mask_position));
    }
    out.ids.resize(max_len - 1);
    out.ids.push_back(SpecialTokens::sep);
  }
  return out;
}

TokenIds verbalize(const TaskSpec& spec, const Vocabulary& vocab) {
  TokenIds ids;
  std::set<std::size_t> seen;
  for (const auto& [label, word] : spec.verbalizer) {
    const auto pieces = split_words(word);
    if (pieces.size() != 1 || !vocab.find(pieces[0])) {
      throw ConfigError("task '" + spec.name + "': label word '" + word + "' for label '" + label +
                        "' is not a single in-vocabulary token");
    }
    const std::size_t id = *vocab.find(pieces[0]);
    if (!seen.insert(id).second) {
      throw ConfigError("task '" + spec.name + "': label word '" + word + "' is used by more than one label");
    }
    ids.push_back(id);
  }
  return ids;
}

Split few_shot_split(const std::vector<Example>& full_train, std::size_t n, std::uint64_t seed, std::size_t dev_size) {
  if (full_train.size() < n + dev_size) {
    throw DataError("few-shot split needs " + std::to_string(n) + " train + " + std::to_string(dev_size) +
                    " dev examples but only " + std::to_string(full_train.size()) +
                    " are available; reduce the dev size with the train.dev_size config override");
  }
  std::vector<std::size_t> order(full_train.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  Split split;
  for (std::size_t i = 0; i < n; ++i) split.train.push_back(full_train[order[i]]);
  for (std::size_t i = n; i < n + dev_size; ++i) split.dev.push_back(full_train[order[i]]);
  return split;
}

std::vector<Example> load_tsv(const std::filesystem::path& path, const TaskSpec& spec) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open TSV file " + path.string());
  const std::size_t columns = spec.is_pair ? 3 : 2;
  auto split_tabs = [](const std::string& line) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t pos; (pos = line.find('\t', start)) != std::string::npos; start = pos + 1)
      fields.push_back(line.substr(start, pos - start));
    fields.push_back(line.substr(start));
    return fields;
  };

  std::vector<Example> examples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1) {
      const auto header = split_tabs(line);
      if (header.size() != columns || header.front() != "text_a" || header.back() != "label" ||
          (spec.is_pair && header[1] != "text_b")) {
        throw DataError(path.string() + ":1: expected header '" +
                        std::string(spec.is_pair ? "text_a\\ttext_b\\tlabel" : "text_a\\tlabel") + "'");
      }
      continue;
    }
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    if (fields.size() != columns) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected " + std::to_string(columns) +
                      " tab-separated columns, found " + std::to_string(fields.size()));
    }
    const auto label = spec.label_index(fields.back());
    if (!label) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": unknown label '" + fields.back() +
                      "' for task '" + spec.name + "'");
    }
    Example ex{fields[0], std::nullopt, *label};
    if (spec.is_pair) ex.text_b = fields[1];
    examples.push_back(std::move(ex));
  }
  if (line_no == 0) throw DataError(path.string() + ": empty file");
  return examples;
}

void save_tsv(const std::filesystem::path& path, const TaskSpec& spec, const std::vector<Example>& examples) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write TSV file " + path.string());
  out << (spec.is_pair ? "text_a\ttext_b\tlabel\n" : "text_a\tlabel\n");
  for (const auto& ex : examples) {
    out << ex.text_a << '\t';
    if (spec.is_pair) out << ex.text_b.value_or("") << '\t';
    out << spec.verbalizer.at(ex.label).first << '\n';
  }
}

TaskSpec toy_sentiment_task() {
  return {"toy_sentiment", false, "<S1> it was [MASK] .", {{"positive", "great"}, {"negative", "terrible"}},
          Metric::Accuracy};
}

TaskSpec toy_entailment_task() {
  return {"toy_entailment", true, "<S1> ? [MASK] , <S2>", {{"entailment", "yes"}, {"not_entailment", "no"}},
          Metric::AccuracyAndF1};
}

TaskSpec sst2_style_task() {
  return {"sst2", false, "<S1> It was [MASK] .", {{"positive", "great"}, {"negative", "terrible"}}, Metric::Accuracy};
}

TaskSpec trec_style_task() {
  return {"trec",
          false,
          "[MASK] : <S1>",
          {{"abbreviation", "Expression"},
           {"entity", "Entity"},
           {"description", "Description"},
           {"human", "Human"},
           {"location", "Location"},
           {"numeric", "Number"}},
          Metric::Accuracy};
}

TaskSpec nli_style_task() {
  return {"mnli", true, "<S1> ? [MASK] , <S2>",
          {{"entailment", "Yes"}, {"neutral", "Maybe"}, {"contradiction", "No"}}, Metric::Accuracy};
}

std::optional<TaskSpec> preset_task(std::string_view name) {
  for (auto make : {toy_sentiment_task, toy_entailment_task, sst2_style_task, trec_style_task, nli_style_task}) {
    TaskSpec spec = make();
    if (spec.name == name) return spec;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Toy grammar

namespace {

const std::vector<std::string>& base_words() {
  static const std::vector<std::string> words{
      ".",     ",",      "?",     ":",      "!",          "it",        "was",        "the",        "a",
      "and",   "but",    "this",  "that",   "is",         "are",       "they",       "very",       "really",
      "so",    "quite",  "of",    "to",     "in",         "with",      "great",      "terrible",   "yes",
      "no",    "maybe",  "movie", "film",   "fun",        "ride",      "story",      "what",       "who",
      "where", "when",   "how",   "many",   "subjective", "objective", "expression", "entity",     "description",
      "human", "location", "number"};
  return words;
}

std::vector<std::string> pseudo_words(std::size_t count, std::mt19937_64& rng, std::set<std::string>& taken) {
  static const std::string consonants = "bdfgklmnprstvzh";
  static const std::string vowels = "aeiou";
  std::uniform_int_distribution<std::size_t> c(0, consonants.size() - 1), v(0, vowels.size() - 1), syl(2, 3);
  std::vector<std::string> out;
  while (out.size() < count) {
    std::string w;
    for (std::size_t s = 0, n = syl(rng); s < n; ++s) {
      w += consonants[c(rng)];
      w += vowels[v(rng)];
    }
    if (taken.insert(w).second) out.push_back(w);
  }
  return out;
}

template <typename Rng>
const std::string& pick(const std::vector<std::string>& pool, Rng& rng) {
  std::uniform_int_distribution<std::size_t> d(0, pool.size() - 1);
  return pool[d(rng)];
}

std::string join(const std::vector<std::string>& words) {
  std::string s;
  for (const auto& w : words) {
    if (!s.empty()) s += ' ';
    s += w;
  }
  return s;
}

}  // namespace

ToyGrammar::ToyGrammar(std::uint64_t seed) : vocab_(std::vector<std::string>{}) {
  std::mt19937_64 rng(seed);
  std::set<std::string> taken(base_words().begin(), base_words().end());
  positive_ = pseudo_words(8, rng, taken);
  negative_ = pseudo_words(8, rng, taken);
  nouns_ = pseudo_words(80, rng, taken);
  verbs_ = pseudo_words(50, rng, taken);
  adjectives_ = pseudo_words(60, rng, taken);
  std::vector<std::string> words = base_words();
  for (const auto* pool : {&positive_, &negative_, &nouns_, &verbs_, &adjectives_})
    words.insert(words.end(), pool->begin(), pool->end());
  const std::size_t remaining = kVocabSize - SpecialTokens::count - words.size();
  fillers_ = pseudo_words(remaining, rng, taken);
  words.insert(words.end(), fillers_.begin(), fillers_.end());
  vocab_ = Vocabulary(words);
}

namespace {

struct SentimentDraw {
  std::string text;
  bool positive;
};

template <typename Rng>
SentimentDraw draw_sentiment(Rng& rng, const std::vector<std::string>& pos, const std::vector<std::string>& neg,
                             const std::vector<std::string>& nouns, const std::vector<std::string>& adjectives,
                             const std::vector<std::string>& fillers) {
  static const std::size_t kPolarCounts[] = {2, 3, 3, 4};
  std::bernoulli_distribution coin(0.5);
  std::uniform_int_distribution<std::size_t> count_pick(0, std::size(kPolarCounts) - 1), extras(0, 2);
  const bool positive = coin(rng);
  std::vector<std::string> polar;
  for (std::size_t i = 0, n = kPolarCounts[count_pick(rng)]; i < n; ++i) polar.push_back(pick(positive ? pos : neg, rng));

  std::vector<std::string> words{"the", pick(nouns, rng), "is"};
  words.insert(words.end(), polar.begin(), polar.end());
  static const std::vector<std::string> kAdverbs{"very", "really", "quite", "so"};
  for (std::size_t i = 0, n = extras(rng); i < n; ++i) {
    std::uniform_int_distribution<std::size_t> where(3, words.size()), kind(0, 2);
    const std::size_t k = kind(rng);
    const std::string w = k == 0 ? pick(adjectives, rng) : k == 1 ? pick(fillers, rng) : pick(kAdverbs, rng);
    words.insert(words.begin() + static_cast<std::ptrdiff_t>(where(rng)), w);
  }
  words.push_back(".");
  return {join(words), positive};
}

template <typename Rng>
Example draw_entailment(Rng& rng, const std::vector<std::string>& nouns, const std::vector<std::string>& adjectives) {
  std::bernoulli_distribution coin(0.5);
  const std::string n1 = pick(nouns, rng), a1 = pick(adjectives, rng);
  std::string n2 = pick(nouns, rng), a2 = pick(adjectives, rng);
  while (n2 == n1) n2 = pick(nouns, rng);
  while (a2 == a1) a2 = pick(adjectives, rng);
  const std::string premise = "the " + n1 + " is " + a1 + " and the " + n2 + " is " + a2 + " .";
  const bool entailed = coin(rng);
  const bool first = coin(rng);
  std::string hypothesis;
  if (entailed) {
    hypothesis = first ? "the " + n1 + " is " + a1 + " ." : "the " + n2 + " is " + a2 + " .";
  } else if (coin(rng)) {
    hypothesis = first ? "the " + n1 + " is " + a2 + " ." : "the " + n2 + " is " + a1 + " .";
  } else {
    std::string a3 = pick(adjectives, rng);
    while (a3 == a1 || a3 == a2) a3 = pick(adjectives, rng);
    hypothesis = "the " + (first ? n1 : n2) + " is " + a3 + " .";
  }
  return {premise, hypothesis, entailed ? 0u : 1u};
}

}  // namespace

std::vector<Example> ToyGrammar::sentiment_examples(std::size_t count, std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  std::vector<Example> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    auto d = draw_sentiment(rng, positive_, negative_, nouns_, adjectives_, fillers_);
    out.push_back({d.text, std::nullopt, d.positive ? 0u : 1u});
  }
  return out;
}

std::vector<Example> ToyGrammar::entailment_examples(std::size_t count, std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  std::vector<Example> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(draw_entailment(rng, nouns_, adjectives_));
  return out;
}

std::vector<TokenIds> ToyGrammar::pretraining_corpus(std::size_t sentences, std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<TokenIds> corpus;
  corpus.reserve(sentences);
  auto frame = [this](const std::string& text) {
    TokenIds ids{SpecialTokens::cls};
    const auto body = tokenize(vocab_, text);
    ids.insert(ids.end(), body.begin(), body.end());
    ids.push_back(SpecialTokens::sep);
    return ids;
  };
  for (std::size_t i = 0; i < sentences; ++i) {
    const double r = u(rng);
    if (r < 0.4) {
      auto d = draw_sentiment(rng, positive_, negative_, nouns_, adjectives_, fillers_);
      corpus.push_back(frame(d.text + " it was " + (d.positive ? "great" : "terrible") + " ."));
    } else if (r < 0.8) {
      auto d = draw_sentiment(rng, positive_, negative_, nouns_, adjectives_, fillers_);
      corpus.push_back(frame(std::string(d.positive ? "great" : "terrible") + " : " + d.text));
    } else if (r < 0.9) {
      const Example e = draw_entailment(rng, nouns_, adjectives_);
      corpus.push_back(frame(e.text_a + " ? " + (e.label == 0 ? "yes" : "no") + " , " + *e.text_b));
    } else {
      std::vector<std::string> words{"the", pick(nouns_, rng), pick(verbs_, rng)};
      for (int j = 0; j < 4; ++j) words.push_back(pick(fillers_, rng));
      words.push_back(".");
      corpus.push_back(frame(join(words)));
    }
  }
  return corpus;
}

}  // namespace lpt
