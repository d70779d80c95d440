#include "lpt/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace lpt {

namespace {

// Reads one JSON object, rejecting keys that no field claims.
class Section {
 public:
  Section(const Json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
    if (!doc_.is_object()) throw ConfigError(path_or_root() + " must be an object");
  }

  template <typename V>
  void read(const std::string& key, V& out) {
    claimed_.insert(key);
    if (!doc_.contains(key)) return;
    const Json& v = doc_.at(key);
    try {
      if constexpr (std::is_same_v<V, bool>) {
        if (!v.is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_unsigned_v<V>) {
        if (!v.is_number_unsigned()) throw ConfigError("");
      } else if constexpr (std::is_floating_point_v<V>) {
        if (!v.is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<V, std::string>) {
        if (!v.is_string()) throw ConfigError("");
      }
      out = v.get<V>();
    } catch (const std::exception&) {
      throw ConfigError(name(key) + " has the wrong type (" + v.dump() + ")");
    }
  }

  bool has(const std::string& key) const { return doc_.contains(key); }
  const Json& raw(const std::string& key) {
    claimed_.insert(key);
    return doc_.at(key);
  }
  std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  // Call after every read().
  void finish() const {
    for (const auto& [key, value] : doc_.items()) {
      if (!claimed_.count(key)) throw ConfigError("unknown key '" + name(key) + "'");
    }
  }

 private:
  std::string path_or_root() const { return path_.empty() ? "config" : path_; }

  const Json& doc_;
  std::string path_;
  std::set<std::string> claimed_;
};

const Json kEmpty = Json::object();

const Json& sub(Section& parent, const std::string& key) { return parent.has(key) ? parent.raw(key) : kEmpty; }

ModelConfig read_model(const Json& doc, const std::string& path) {
  ModelConfig c;
  Section s(doc, path);
  s.read("n_layers", c.n_layers);
  s.read("d_model", c.d_model);
  s.read("n_heads", c.n_heads);
  s.read("d_ff", c.d_ff);
  s.read("vocab_size", c.vocab_size);
  s.read("max_seq_len", c.max_seq_len);
  s.finish();
  return c;
}

PretrainSection read_pretrain(const Json& doc) {
  PretrainSection p;
  Section s(doc, "pretrain");
  auto& o = p.options;
  s.read("mlm_prob", o.mlm_prob);
  s.read("steps", o.steps);
  s.read("batch_size", o.batch_size);
  s.read("peak_lr", o.peak_lr);
  s.read("warmup_rate", o.warmup_rate);
  s.read("weight_decay", o.weight_decay);
  s.read("seed", o.seed);
  s.read("heldout_fraction", o.heldout_fraction);
  s.read("corpus_sentences", p.corpus_sentences);
  s.read("corpus_seed", p.corpus_seed);
  s.finish();
  return p;
}

Metric parse_metric(const std::string& text, const std::string& path) {
  if (text == "accuracy") return Metric::Accuracy;
  if (text == "accuracy_f1") return Metric::AccuracyAndF1;
  throw ConfigError(path + " must be \"accuracy\" or \"accuracy_f1\", got \"" + text + "\"");
}

std::string metric_name(Metric m) { return m == Metric::Accuracy ? "accuracy" : "accuracy_f1"; }

TaskSection read_task(const Json& doc) {
  TaskSection t;
  Section s(doc, "task");
  std::string preset;
  s.read("preset", preset);
  if (!preset.empty()) {
    auto spec = preset_task(preset);
    if (!spec) throw ConfigError("task.preset: unknown task '" + preset + "'");
    t.spec = *spec;
  }
  s.read("name", t.spec.name);
  s.read("is_pair", t.spec.is_pair);
  s.read("template", t.spec.template_text);
  if (s.has("verbalizer")) {
    const Json& v = s.raw("verbalizer");
    if (!v.is_array()) throw ConfigError("task.verbalizer must be an array of [label, word] pairs");
    t.spec.verbalizer.clear();
    for (const auto& pair : v) {
      if (!pair.is_array() || pair.size() != 2 || !pair[0].is_string() || !pair[1].is_string()) {
        throw ConfigError("task.verbalizer entries must be [label, word] string pairs");
      }
      t.spec.verbalizer.emplace_back(pair[0].get<std::string>(), pair[1].get<std::string>());
    }
  }
  std::string metric = metric_name(t.spec.metric);
  s.read("metric", metric);
  t.spec.metric = parse_metric(metric, "task.metric");
  s.read("grammar_seed", t.grammar_seed);
  s.read("shots", t.shots);
  s.read("pool_size", t.pool_size);
  s.read("test_size", t.test_size);
  s.read("data_seed", t.data_seed);
  std::string train_tsv, test_tsv;
  s.read("train_tsv", train_tsv);
  s.read("test_tsv", test_tsv);
  if (!train_tsv.empty()) t.train_tsv = train_tsv;
  if (!test_tsv.empty()) t.test_tsv = test_tsv;
  s.finish();
  return t;
}

TrainConfig read_train(const Json& doc, Precision& precision) {
  TrainConfig c;
  Section s(doc, "train");
  s.read("peak_lr", c.peak_lr);
  s.read("warmup_rate", c.warmup_rate);
  s.read("batch_size", c.batch_size);
  s.read("weight_decay", c.weight_decay);
  s.read("beta1", c.beta1);
  s.read("beta2", c.beta2);
  s.read("eps", c.eps);
  s.read("steps", c.steps);
  s.read("epochs", c.epochs);
  s.read("eval_every", c.eval_every);
  s.read("dev_size", c.dev_size);
  s.read("cache_lower_states", c.cache_lower_states);
  std::string p = precision == Precision::Float ? "float" : "double";
  s.read("precision", p);
  if (p == "float") {
    precision = Precision::Float;
  } else if (p == "double") {
    precision = Precision::Double;
  } else {
    throw ConfigError("train.precision must be \"float\" or \"double\", got \"" + p + "\"");
  }
  s.finish();
  return c;
}

template <typename V>
std::vector<V> read_list(const Json& v, const std::string& path) {
  if (!v.is_array()) throw ConfigError(path + " must be an array");
  std::vector<V> out;
  for (const auto& x : v) {
    if constexpr (std::is_unsigned_v<V>) {
      if (!x.is_number_unsigned()) throw ConfigError(path + " entries must be non-negative integers");
    } else {
      if (!x.is_string()) throw ConfigError(path + " entries must be strings");
    }
    out.push_back(x.get<V>());
  }
  return out;
}

AnalysisSection read_analysis(const Json& doc) {
  AnalysisSection a;
  Section s(doc, "analysis");
  {
    Section p(sub(s, "probe"), "analysis.probe");
    p.read("steps", a.probe.steps);
    p.read("batch_size", a.probe.batch_size);
    p.read("width_multiplier", a.probe.width_multiplier);
    p.read("peak_lr", a.probe.peak_lr);
    p.read("warmup_rate", a.probe.warmup_rate);
    p.read("weight_decay", a.probe.weight_decay);
    p.read("seed", a.probe.seed);
    p.read("examples", a.probe_examples);
    p.finish();
  }
  if (s.has("sweep_layers")) a.sweep_layers = read_list<std::size_t>(s.raw("sweep_layers"), "analysis.sweep_layers");
  {
    Section b(sub(s, "bench"), "analysis.bench");
    b.read("seq_len", a.bench.seq_len);
    b.read("batch_size", a.bench.batch_size);
    b.read("warmup_steps", a.bench.warmup_steps);
    b.read("timed_steps", a.bench.timed_steps);
    b.read("seed", a.bench.seed);
    if (b.has("methods")) a.bench_methods = read_list<std::string>(b.raw("methods"), "analysis.bench.methods");
    if (b.has("layers")) a.bench_layers = read_list<std::size_t>(b.raw("layers"), "analysis.bench.layers");
    b.finish();
  }
  s.finish();
  return a;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  if (pretrain.options.steps == 0) throw ConfigError("pretrain.steps must be positive");
  if (!(pretrain.options.mlm_prob > 0 && pretrain.options.mlm_prob < 1)) {
    throw ConfigError("pretrain.mlm_prob must lie in (0, 1)");
  }
  if (pretrain.corpus_sentences == 0) throw ConfigError("pretrain.corpus_sentences must be positive");
  prompt.validate(model);
  task.spec.validate();
  if (task.shots == 0) throw ConfigError("task.shots must be positive");
  if (task.train_tsv.has_value() != task.test_tsv.has_value()) {
    throw ConfigError("task.train_tsv and task.test_tsv must be given together");
  }
  train.validate();
  for (const auto& m : analysis.bench_methods) {
    if (!parse_method(m)) throw ConfigError("analysis.bench.methods: unknown method '" + m + "'");
  }
  for (std::size_t k : analysis.sweep_layers) {
    if (k < 1 || k > model.n_layers) throw ConfigError("analysis.sweep_layers: layer " + std::to_string(k) + " out of range");
  }
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
}

RunConfig parse_run_config(const Json& doc) {
  RunConfig c;
  Section root(doc, "");
  c.model = read_model(sub(root, "model"), "model");
  c.model.validate();
  c.pretrain = read_pretrain(sub(root, "pretrain"));
  {
    const Json& p = sub(root, "prompt");
    Section s(p, "prompt");
    std::string method = method_name(c.prompt.method);
    s.read("method", method);
    const auto parsed = parse_method(method);
    if (!parsed) throw ConfigError("prompt.method: unknown method '" + method + "'");
    c.prompt = PromptSpec::defaults(*parsed, c.model);
    s.read("l", c.prompt.l);
    s.read("k", c.prompt.k);
    s.read("m", c.prompt.m);
    s.finish();
  }
  c.task = read_task(sub(root, "task"));
  c.train = read_train(sub(root, "train"), c.precision);
  c.analysis = read_analysis(sub(root, "analysis"));
  std::string out = c.output_dir.string();
  root.read("output_dir", out);
  c.output_dir = out;
  if (root.has("seeds")) c.seeds = read_list<std::uint64_t>(root.raw("seeds"), "seeds");
  root.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  Json doc;
  try {
    doc = read_json(path);
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  return parse_run_config(doc);
}

Json to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers}, {"d_model", c.d_model},       {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},         {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}};
}

ModelConfig model_config_from_json(const Json& doc) {
  auto c = read_model(doc, "model");
  c.validate();
  return c;
}

Json to_json(const PromptSpec& s) {
  return {{"method", method_name(s.method)}, {"l", s.l}, {"k", s.k}, {"m", s.m}};
}

Json to_json(const RunConfig& c) {
  const auto& o = c.pretrain.options;
  Json verbalizer = Json::array();
  for (const auto& [label, word] : c.task.spec.verbalizer) verbalizer.push_back({label, word});
  Json task{{"name", c.task.spec.name},
            {"is_pair", c.task.spec.is_pair},
            {"template", c.task.spec.template_text},
            {"verbalizer", verbalizer},
            {"metric", metric_name(c.task.spec.metric)},
            {"grammar_seed", c.task.grammar_seed},
            {"shots", c.task.shots},
            {"pool_size", c.task.pool_size},
            {"test_size", c.task.test_size},
            {"data_seed", c.task.data_seed}};
  if (c.task.train_tsv) task["train_tsv"] = c.task.train_tsv->string();
  if (c.task.test_tsv) task["test_tsv"] = c.task.test_tsv->string();
  const auto& t = c.train;
  const auto& p = c.analysis.probe;
  const auto& b = c.analysis.bench;
  return {{"model", to_json(c.model)},
          {"pretrain",
           {{"mlm_prob", o.mlm_prob},
            {"steps", o.steps},
            {"batch_size", o.batch_size},
            {"peak_lr", o.peak_lr},
            {"warmup_rate", o.warmup_rate},
            {"weight_decay", o.weight_decay},
            {"seed", o.seed},
            {"heldout_fraction", o.heldout_fraction},
            {"corpus_sentences", c.pretrain.corpus_sentences},
            {"corpus_seed", c.pretrain.corpus_seed}}},
          {"prompt", to_json(c.prompt)},
          {"task", task},
          {"train",
           {{"peak_lr", t.peak_lr},
            {"warmup_rate", t.warmup_rate},
            {"batch_size", t.batch_size},
            {"weight_decay", t.weight_decay},
            {"beta1", t.beta1},
            {"beta2", t.beta2},
            {"eps", t.eps},
            {"steps", t.steps},
            {"epochs", t.epochs},
            {"eval_every", t.eval_every},
            {"dev_size", t.dev_size},
            {"cache_lower_states", t.cache_lower_states},
            {"precision", c.precision == Precision::Float ? "float" : "double"}}},
          {"analysis",
           {{"probe",
             {{"steps", p.steps},
              {"batch_size", p.batch_size},
              {"width_multiplier", p.width_multiplier},
              {"peak_lr", p.peak_lr},
              {"warmup_rate", p.warmup_rate},
              {"weight_decay", p.weight_decay},
              {"seed", p.seed},
              {"examples", c.analysis.probe_examples}}},
            {"sweep_layers", c.analysis.sweep_layers},
            {"bench",
             {{"seq_len", b.seq_len},
              {"batch_size", b.batch_size},
              {"warmup_steps", b.warmup_steps},
              {"timed_steps", b.timed_steps},
              {"seed", b.seed},
              {"methods", c.analysis.bench_methods},
              {"layers", c.analysis.bench_layers}}}}},
          {"output_dir", c.output_dir.string()},
          {"seeds", c.seeds}};
}

Json to_json(const Metrics& m) {
  Json j{{"count", m.count}, {"accuracy", m.accuracy}};
  j["f1"] = m.f1 ? Json(*m.f1) : Json(nullptr);
  j["primary"] = m.primary();
  return j;
}

Json to_json(const PretrainReport& r) {
  return {{"initial_heldout_loss", r.initial_heldout_loss},
          {"final_heldout_loss", r.final_heldout_loss},
          {"heldout_mask_accuracy", r.heldout_mask_accuracy},
          {"train_sequences", r.train_sequences},
          {"heldout_sequences", r.heldout_sequences},
          {"train_tokens", r.train_tokens},
          {"loss_curve", r.loss_curve}};
}

namespace {

std::string hex(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << v;
  return s.str();
}

}  // namespace

template <std::floating_point T>
Json to_json(const RunRecord<T>& r) {
  Json dev = Json::array();
  for (const auto& p : r.dev_curve) dev.push_back({{"step", p.step}, {"dev", to_json(p.dev)}});
  return {{"task", r.task},
          {"prompt", to_json(r.prompt)},
          {"seed", r.train.seed},
          {"train_examples", r.train_examples},
          {"tunable_params", r.tunable_params},
          {"optimizer_scalars", r.optimizer_scalars},
          {"gradient_leaves", r.gradient_leaves},
          {"layer_backward_per_example", r.layer_backward_per_example},
          {"frozen_fingerprint_before", hex(r.frozen_fingerprint_before)},
          {"frozen_fingerprint_after", hex(r.frozen_fingerprint_after)},
          {"best_step", r.best_step},
          {"best_dev", to_json(r.best_dev)},
          {"test", r.test ? to_json(*r.test) : Json(nullptr)},
          {"seconds", r.seconds},
          {"loss_curve", r.loss_curve},
          {"dev_curve", dev}};
}

template Json to_json(const RunRecord<float>&);
template Json to_json(const RunRecord<double>&);

std::pair<std::vector<Example>, std::vector<Example>> task_examples(const TaskSection& task) {
  if (task.train_tsv) return {load_tsv(*task.train_tsv, task.spec), load_tsv(*task.test_tsv, task.spec)};
  const ToyGrammar grammar(task.grammar_seed);
  auto make = [&](std::size_t n, std::uint64_t seed) {
    if (task.spec.name == "toy_sentiment") return grammar.sentiment_examples(n, seed);
    if (task.spec.name == "toy_entailment") return grammar.entailment_examples(n, seed);
    throw ConfigError("task '" + task.spec.name + "' has no toy generator; set task.train_tsv and task.test_tsv");
  };
  return {make(task.pool_size, task.data_seed), make(task.test_size, task.data_seed + 1)};
}

void write_json(const std::filesystem::path& path, const Json& doc) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << doc.dump(2) << '\n';
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

Json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw DataError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

}  // namespace lpt
