#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <ostream>
#include <thread>

#include <CLI11.hpp>

#include "lpt/checkpoint.hpp"
#include "lpt/cli.hpp"
#include "lpt/config.hpp"

namespace lpt {

namespace {

namespace fs = std::filesystem;

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error("usage", what) {}
};

constexpr const char* kPrecedence =
    "Settings are resolved in order: built-in defaults, then the --config file, then command-line flags. "
    "A flag always wins over the config file.";

// Flags shared by the commands that run on a backbone.
struct Common {
  std::string config_path;
  std::string backbone;
  std::string out_dir;
  std::vector<std::uint64_t> seeds;
  std::optional<std::size_t> steps;
  std::optional<double> lr;
  std::optional<std::string> precision;
};

RunConfig base_config(const Common& c) {
  RunConfig cfg = c.config_path.empty() ? parse_run_config(Json::object()) : load_run_config(c.config_path);
  if (!c.out_dir.empty()) cfg.output_dir = c.out_dir;
  if (!c.seeds.empty()) cfg.seeds = c.seeds;
  if (c.steps) cfg.train.steps = *c.steps;
  if (c.lr) cfg.train.peak_lr = *c.lr;
  if (c.precision) {
    if (*c.precision == "float") {
      cfg.precision = Precision::Float;
    } else if (*c.precision == "double") {
      cfg.precision = Precision::Double;
    } else {
      throw UsageError("--precision must be float or double");
    }
  }
  return cfg;
}

void add_common(CLI::App* cmd, Common& c, bool needs_backbone) {
  cmd->add_option("--config", c.config_path, "Run configuration JSON")->check(CLI::ExistingFile);
  auto* b = cmd->add_option("--backbone", c.backbone, "Pretrained backbone checkpoint");
  if (needs_backbone) b->required();
  cmd->add_option("--out", c.out_dir, "Output directory (overrides output_dir)");
  cmd->add_option("--seeds", c.seeds, "Seeds (overrides seeds)")->delimiter(',');
  cmd->add_option("--steps", c.steps, "Training steps (overrides train.steps)");
  cmd->add_option("--lr", c.lr, "Peak learning rate (overrides train.peak_lr)");
  cmd->add_option("--precision", c.precision, "float or double (overrides train.precision)");
}

fs::path sidecar_path(const fs::path& ckpt) { return fs::path(ckpt.string() + ".json"); }

// Loads the backbone, checking its recorded model shape against the config.
template <std::floating_point T>
EncoderWeights<T> load_backbone(const fs::path& path, const ModelConfig& model) {
  const auto side = sidecar_path(path);
  if (fs::exists(side)) {
    const Json doc = read_json(side);
    if (!doc.contains("model")) throw DataError("'" + side.string() + "' has no model section");
    const ModelConfig recorded = model_config_from_json(doc.at("model"));
    if (!(recorded == model)) {
      throw ConfigError("backbone '" + path.string() + "' was pretrained with model " + to_json(recorded).dump() +
                        " but the config has " + to_json(model).dump());
    }
  }
  return EncoderWeights<T>::from_named(model, load_checkpoint<T>(path));
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory '" + dir.string() + "'");
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  return out;
}

Json snapshot(const RunConfig& cfg, const std::string& command, const std::string& backbone) {
  Json j{{"command", command}};
  if (!backbone.empty()) j["backbone"] = backbone;
  j["config"] = to_json(cfg);
  return j;
}

std::size_t threads_from_env() {
  const char* v = std::getenv("LPT_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw ConfigError("LPT_THREADS must be a positive integer, got '" + std::string(v) + "'");
  return static_cast<std::size_t>(n);
}

// Runs jobs 0..n-1 on up to `threads` workers; the first exception is rethrown.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& job) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

// ---------------------------------------------------------------------------
// pretrain-toy

struct PretrainArgs {
  std::string config_path, out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
};

void cmd_pretrain(const PretrainArgs& a, std::ostream& out) {
  RunConfig cfg = a.config_path.empty() ? parse_run_config(Json::object()) : load_run_config(a.config_path);
  if (a.seed) cfg.pretrain.options.seed = *a.seed;
  if (a.steps) cfg.pretrain.options.steps = *a.steps;
  cfg.validate();
  const fs::path path(a.out);
  if (path.has_parent_path()) ensure_dir(path.parent_path());

  const ToyGrammar grammar(cfg.task.grammar_seed);
  const auto corpus = grammar.pretraining_corpus(cfg.pretrain.corpus_sentences, cfg.pretrain.corpus_seed);
  const auto result = pretrain_toy<float>(cfg.model, corpus, cfg.pretrain.options);
  save_checkpoint(path, result.weights.named());

  const auto& o = cfg.pretrain.options;
  Json side{{"model", to_json(cfg.model)},
            {"grammar_seed", cfg.task.grammar_seed},
            {"corpus", {{"sentences", cfg.pretrain.corpus_sentences}, {"seed", cfg.pretrain.corpus_seed}}},
            {"pretrain",
             {{"mlm_prob", o.mlm_prob},
              {"steps", o.steps},
              {"batch_size", o.batch_size},
              {"peak_lr", o.peak_lr},
              {"warmup_rate", o.warmup_rate},
              {"weight_decay", o.weight_decay},
              {"seed", o.seed},
              {"heldout_fraction", o.heldout_fraction}}},
            {"report", to_json(result.report)},
            {"parameters", result.weights.parameter_count()}};
  write_json(sidecar_path(path), side);
  out << "pretrained " << cfg.model.n_layers << "-layer backbone: held-out MLM loss " << result.report.initial_heldout_loss
      << " -> " << result.report.final_heldout_loss << ", masked-token accuracy "
      << result.report.heldout_mask_accuracy << "\nwrote " << path.string() << " and "
      << sidecar_path(path).string() << '\n';
}

// ---------------------------------------------------------------------------
// Prompt flags shared by train, sweep-layer and export-prompts

struct PromptFlags {
  std::optional<std::string> method;
  std::optional<std::size_t> layer, length, bottleneck;
};

void add_prompt_flags(CLI::App* cmd, PromptFlags& p) {
  cmd->add_option("--method", p.method, "PT | LATE | NPG | APPG | MPPG (resets l, k, m to that method's defaults)");
  cmd->add_option("--layer", p.layer, "Prompt layer k (PT allows only 1)");
  cmd->add_option("--length", p.length, "Prompt length l");
  cmd->add_option("--bottleneck", p.bottleneck, "Generator bottleneck m");
}

void apply_prompt_flags(RunConfig& cfg, const PromptFlags& p) {
  if (p.method) {
    const auto m = parse_method(*p.method);
    if (!m) throw UsageError("--method: unknown method '" + *p.method + "'");
    if (*m != cfg.prompt.method) cfg.prompt = PromptSpec::defaults(*m, cfg.model);
  }
  if (p.layer) {
    if (cfg.prompt.method == PromptMethod::PT && *p.layer != 1) {
      throw UsageError("--layer " + std::to_string(*p.layer) + " conflicts with --method PT, which always uses layer 1");
    }
    cfg.prompt.k = *p.layer;
  }
  if (p.length) cfg.prompt.l = *p.length;
  if (p.bottleneck) cfg.prompt.m = *p.bottleneck;
}

EncodedTask make_task(const RunConfig& cfg, const std::vector<Example>& pool, const std::vector<Example>& test,
                      std::uint64_t seed, const PromptSpec& prompt) {
  Split split = few_shot_split(pool, cfg.task.shots, seed, cfg.train.dev_size);
  split.test = test;
  const ToyGrammar grammar(cfg.task.grammar_seed);
  return encode_task(cfg.task.spec, grammar.vocabulary(), split, cfg.model, prompt);
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  Common common;
  PromptFlags prompt;
  std::optional<std::size_t> shots;
};

template <std::floating_point T>
void run_train(const RunConfig& cfg, const std::string& backbone, std::ostream& out) {
  const auto frozen = load_backbone<T>(backbone, cfg.model);
  const auto [pool, test] = task_examples(cfg.task);
  const fs::path dir = cfg.output_dir;
  ensure_dir(dir);
  write_json(dir / "run.json", snapshot(cfg, "train", backbone));

  Json records = Json::array();
  std::vector<double> devs, tests;
  std::optional<RunRecord<T>> best;
  for (std::uint64_t seed : cfg.seeds) {
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    auto rec = train(frozen, cfg.model, cfg.prompt, make_task(cfg, pool, test, seed, cfg.prompt), tc);
    devs.push_back(rec.best_dev.primary());
    if (rec.test) tests.push_back(rec.test->primary());
    out << method_name(cfg.prompt.method) << " k=" << cfg.prompt.k << " seed " << seed << ": best dev "
        << rec.best_dev.primary() << " at step " << rec.best_step;
    if (rec.test) out << ", test " << rec.test->primary();
    out << '\n';
    records.push_back(to_json(rec));
    if (!best || rec.best_dev.primary() > best->best_dev.primary()) best = std::move(rec);
  }
  save_checkpoint(dir / "best.ckpt", best->best.named());

  const auto [dev_mean, dev_std] = mean_std(devs);
  const auto [test_mean, test_std] = mean_std(tests);
  const std::size_t tunable = count_tunable(cfg.prompt, cfg.model);
  Json summary{{"method", method_name(cfg.prompt.method)}, {"layer", cfg.prompt.k},   {"tunable_params", tunable},
               {"seeds", cfg.seeds},                         {"dev_mean", dev_mean},  {"dev_std", dev_std},
               {"test_mean", test_mean},                     {"test_std", test_std},  {"best_seed", best->train.seed}};
  write_json(dir / "record.json", {{"summary", summary}, {"runs", records}});
  auto csv = open_out(dir / "summary.csv");
  csv << "method,layer,tunable_params,seeds,dev_mean,dev_std,test_mean,test_std\n"
      << method_name(cfg.prompt.method) << ',' << cfg.prompt.k << ',' << tunable << ',' << cfg.seeds.size() << ','
      << dev_mean << ',' << dev_std << ',' << test_mean << ',' << test_std << '\n';
  out << std::fixed << std::setprecision(3) << "summary: dev " << dev_mean << " ± " << dev_std << ", test "
      << test_mean << " ± " << test_std << " over " << cfg.seeds.size() << " seeds\nwrote " << dir.string() << '\n';
}

void cmd_train(const TrainArgs& a, std::ostream& out) {
  RunConfig cfg = base_config(a.common);
  apply_prompt_flags(cfg, a.prompt);
  if (a.shots) cfg.task.shots = *a.shots;
  cfg.validate();
  if (cfg.precision == Precision::Double) {
    run_train<double>(cfg, a.common.backbone, out);
  } else {
    run_train<float>(cfg, a.common.backbone, out);
  }
}

// ---------------------------------------------------------------------------
// sweep-layer

struct SweepArgs {
  Common common;
  PromptFlags prompt;
  std::vector<std::size_t> layers;
};

Json run_json(const SweepRun& r) {
  Json dev = Json::array();
  for (const auto& p : r.dev_curve) dev.push_back({{"step", p.step}, {"dev", to_json(p.dev)}});
  return {{"seed", r.seed},
          {"dev_metric", r.dev_metric},
          {"test_metric", r.test_metric ? Json(*r.test_metric) : Json(nullptr)},
          {"loss_curve", r.loss_curve},
          {"dev_curve", dev}};
}

template <std::floating_point T>
void run_sweep(const RunConfig& cfg, const std::vector<std::size_t>& layers, const std::string& backbone,
               std::ostream& out) {
  const auto frozen = load_backbone<T>(backbone, cfg.model);
  const auto [pool, test] = task_examples(cfg.task);
  const fs::path dir = cfg.output_dir;
  ensure_dir(dir);
  write_json(dir / "run.json", snapshot(cfg, "sweep-layer", backbone));

  const TaskForSeed task_for_seed = [&, &pool = pool, &test = test](std::uint64_t seed) {
    return make_task(cfg, pool, test, seed, cfg.prompt);
  };
  // Each layer is an independent job; rows are reassembled in layer order.
  std::vector<SweepTable> parts(layers.size());
  parallel_for(layers.size(), threads_from_env(), [&](std::size_t i) {
    parts[i] = layer_sweep(frozen, cfg.model, cfg.prompt, {layers[i]}, cfg.seeds, cfg.train, task_for_seed);
  });
  SweepTable table{method_name(cfg.prompt.method), {}};
  Json rows = Json::array();
  for (auto& p : parts) {
    auto& row = p.rows.front();
    Json runs = Json::array();
    for (const auto& r : row.runs) runs.push_back(run_json(r));
    rows.push_back({{"layer", row.layer}, {"mean", row.mean}, {"std", row.stddev}, {"runs", runs}});
    out << "layer " << row.layer << ": dev " << row.mean << " ± " << row.stddev << '\n';
    table.rows.push_back(std::move(row));
  }
  auto csv = open_out(dir / "sweep.csv");
  write_sweep_csv(csv, table);
  write_json(dir / "curves.json", {{"method", table.method}, {"rows", rows}});
  out << "wrote " << dir.string() << '\n';
}

void cmd_sweep(const SweepArgs& a, std::ostream& out) {
  RunConfig cfg = base_config(a.common);
  apply_prompt_flags(cfg, a.prompt);
  if (cfg.prompt.method == PromptMethod::PT) throw UsageError("sweep-layer needs a method with a movable layer, not PT");
  std::vector<std::size_t> layers = a.layers.empty() ? cfg.analysis.sweep_layers : a.layers;
  if (layers.empty()) {
    for (std::size_t k = 1; k <= cfg.model.n_layers; ++k) layers.push_back(k);
  }
  for (std::size_t k : layers) {
    if (k < 1 || k > cfg.model.n_layers) {
      throw UsageError("--layers: layer " + std::to_string(k) + " is outside 1.." + std::to_string(cfg.model.n_layers));
    }
  }
  cfg.analysis.sweep_layers = layers;
  cfg.validate();
  if (cfg.precision == Precision::Double) {
    run_sweep<double>(cfg, layers, a.common.backbone, out);
  } else {
    run_sweep<float>(cfg, layers, a.common.backbone, out);
  }
}

// ---------------------------------------------------------------------------
// mi-probe

template <std::floating_point T>
void run_mi(const RunConfig& cfg, const std::string& backbone, std::ostream& out) {
  const auto frozen = load_backbone<T>(backbone, cfg.model);
  auto [pool, test] = task_examples(cfg.task);
  const std::size_t n = cfg.analysis.probe_examples;
  if (pool.size() > n) pool.resize(n);
  if (test.size() > n) test.resize(n);
  Split split{pool, {}, test};
  const ToyGrammar grammar(cfg.task.grammar_seed);
  const auto task = encode_task(cfg.task.spec, grammar.vocabulary(), split, cfg.model, cfg.prompt);
  const auto profile = mi_probe(frozen, cfg.model, task.train, task.test, cfg.task.spec.num_labels(), cfg.analysis.probe);

  const fs::path dir = cfg.output_dir;
  ensure_dir(dir);
  write_json(dir / "run.json", snapshot(cfg, "mi-probe", backbone));
  auto csv = open_out(dir / "mi.csv");
  write_mi_csv(csv, profile);
  out << "H(y) = " << profile.label_entropy << " nats\n";
  for (const auto& l : profile.layers) {
    out << "layer " << l.layer << ": MI " << l.probe.mi << " nats, probe accuracy " << l.probe.accuracy << '\n';
  }
  out << "wrote " << (dir / "mi.csv").string() << '\n';
}

void cmd_mi(const Common& c, std::ostream& out) {
  RunConfig cfg = base_config(c);
  cfg.validate();
  if (cfg.precision == Precision::Double) {
    run_mi<double>(cfg, c.backbone, out);
  } else {
    run_mi<float>(cfg, c.backbone, out);
  }
}

// ---------------------------------------------------------------------------
// bench

struct BenchArgs {
  Common common;
  std::vector<std::string> methods;
  std::vector<std::size_t> layers;
  std::optional<std::size_t> timed, warmup, seq_len, batch;
};

Json to_json(const EfficiencyReport& r) {
  return {{"method", r.method},
          {"layer", r.layer},
          {"tunable_params", r.tunable_params},
          {"tokens_per_ms", r.tokens_per_ms},
          {"elapsed_ms", r.elapsed_ms},
          {"tokens", r.tokens},
          {"activation_bytes", r.activation_bytes},
          {"backward_layer_count", r.backward_layer_count}};
}

template <std::floating_point T>
void run_bench(const RunConfig& cfg, const std::string& backbone, std::ostream& out) {
  const auto frozen = load_backbone<T>(backbone, cfg.model);
  std::vector<std::size_t> layers = cfg.analysis.bench_layers;
  if (layers.empty()) layers.push_back(default_prompt_layer(cfg.model.n_layers));
  std::vector<EfficiencyReport> reports;
  for (const auto& name : cfg.analysis.bench_methods) {
    const PromptMethod method = *parse_method(name);
    for (std::size_t k : layers) {
      PromptSpec spec = PromptSpec::defaults(method, cfg.model);
      if (method != PromptMethod::PT) spec.k = k;
      spec.validate(cfg.model);
      reports.push_back(bench(frozen, cfg.model, spec, cfg.analysis.bench));
      const auto& r = reports.back();
      out << r.method << " k=" << r.layer << ": " << r.tokens_per_ms << " tokens/ms, " << r.activation_bytes
          << " activation bytes, " << r.backward_layer_count << " layers backpropagated\n";
      if (method == PromptMethod::PT) break;
    }
  }
  const fs::path dir = cfg.output_dir;
  ensure_dir(dir);
  write_json(dir / "run.json", snapshot(cfg, "bench", backbone));
  auto csv = open_out(dir / "bench.csv");
  write_bench_csv(csv, reports);
  Json list = Json::array();
  for (const auto& r : reports) list.push_back(to_json(r));
  write_json(dir / "bench.json", list);
  out << "wrote " << (dir / "bench.csv").string() << '\n';
}

void cmd_bench(const BenchArgs& a, std::ostream& out) {
  RunConfig cfg = base_config(a.common);
  if (!a.methods.empty()) cfg.analysis.bench_methods = a.methods;
  if (!a.layers.empty()) cfg.analysis.bench_layers = a.layers;
  if (a.timed) cfg.analysis.bench.timed_steps = *a.timed;
  if (a.warmup) cfg.analysis.bench.warmup_steps = *a.warmup;
  if (a.seq_len) cfg.analysis.bench.seq_len = *a.seq_len;
  if (a.batch) cfg.analysis.bench.batch_size = *a.batch;
  for (const auto& m : cfg.analysis.bench_methods) {
    if (!parse_method(m)) throw UsageError("--methods: unknown method '" + m + "'");
  }
  for (std::size_t k : cfg.analysis.bench_layers) {
    if (k < 1 || k > cfg.model.n_layers) throw UsageError("--layers: layer " + std::to_string(k) + " out of range");
  }
  cfg.validate();
  if (cfg.precision == Precision::Double) {
    run_bench<double>(cfg, a.common.backbone, out);
  } else {
    run_bench<float>(cfg, a.common.backbone, out);
  }
}

// ---------------------------------------------------------------------------
// report

struct ReportRow {
  std::string method;
  std::size_t layer = 0;
  std::size_t tunable_params = 0;
  std::optional<double> mean, stddev;
  std::optional<double> tokens_per_ms;
  std::optional<std::size_t> activation_bytes;
};

void cmd_report(const std::string& dir, const std::string& out_path, std::ostream& out) {
  if (!fs::is_directory(dir)) throw IoError("'" + dir + "' is not a directory");
  std::vector<ReportRow> rows;
  std::map<std::pair<std::string, std::size_t>, EfficiencyReport> benches;
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& path : files) {
    if (path.filename() == "record.json") {
      const Json doc = read_json(path);
      if (!doc.contains("summary") || !doc.contains("runs")) throw DataError("'" + path.string() + "' is not a run record");
      const Json& s = doc.at("summary");
      std::vector<double> metrics;
      for (const auto& run : doc.at("runs")) {
        const Json& m = run.at("test").is_null() ? run.at("best_dev") : run.at("test");
        metrics.push_back(m.at("primary").get<double>());
      }
      const auto [mean, sd] = mean_std(metrics);
      rows.push_back({s.at("method").get<std::string>(), s.at("layer").get<std::size_t>(),
                      s.at("tunable_params").get<std::size_t>(), mean, sd, std::nullopt, std::nullopt});
    } else if (path.filename() == "bench.json") {
      for (const auto& b : read_json(path)) {
        EfficiencyReport r;
        r.method = b.at("method").get<std::string>();
        r.layer = b.at("layer").get<std::size_t>();
        r.tunable_params = b.at("tunable_params").get<std::size_t>();
        r.tokens_per_ms = b.at("tokens_per_ms").get<double>();
        r.activation_bytes = b.at("activation_bytes").get<std::size_t>();
        benches[{r.method, r.layer}] = r;
      }
    }
  }
  if (rows.empty()) throw DataError("no run records (record.json) under '" + dir + "'");
  std::set<std::pair<std::string, std::size_t>> matched;
  for (auto& row : rows) {
    const auto it = benches.find({row.method, row.layer});
    if (it == benches.end()) continue;
    row.tokens_per_ms = it->second.tokens_per_ms;
    row.activation_bytes = it->second.activation_bytes;
    matched.insert(it->first);
  }
  for (const auto& [key, b] : benches) {
    if (!matched.count(key)) {
      rows.push_back({b.method, b.layer, b.tunable_params, std::nullopt, std::nullopt, b.tokens_per_ms,
                      b.activation_bytes});
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
    return std::tie(a.tunable_params, a.method, a.layer) < std::tie(b.tunable_params, b.method, b.layer);
  });

  std::ofstream file;
  std::ostream* sink = &out;
  if (!out_path.empty()) {
    file = open_out(out_path);
    sink = &file;
  }
  auto opt = [](const auto& v) {
    std::ostringstream s;
    if (v) s << *v;
    return s.str();
  };
  *sink << "method,layer,tunable_params,metric_mean,metric_std,tokens_per_ms,activation_bytes\n";
  for (const auto& r : rows) {
    *sink << r.method << ',' << r.layer << ',' << r.tunable_params << ',' << opt(r.mean) << ',' << opt(r.stddev) << ','
          << opt(r.tokens_per_ms) << ',' << opt(r.activation_bytes) << '\n';
  }
  if (!out_path.empty()) out << "wrote " << out_path << '\n';
}

// ---------------------------------------------------------------------------
// export-prompts

struct ExportArgs {
  std::string run_dir, out_path, split = "test";
  std::size_t limit = 100;
};

void cmd_export(const ExportArgs& a, std::ostream& out) {
  const fs::path dir(a.run_dir);
  const Json run = read_json(dir / "run.json");
  if (!run.contains("config") || !run.contains("backbone")) {
    throw DataError("'" + (dir / "run.json").string() + "' is not a train run snapshot");
  }
  const RunConfig cfg = parse_run_config(run.at("config"));
  const auto frozen = load_backbone<double>(run.at("backbone").get<std::string>(), cfg.model);
  const auto params = PromptParameters<double>::from_named(cfg.prompt, cfg.model, load_checkpoint<double>(dir / "best.ckpt"));
  if (a.split != "test" && a.split != "train") throw UsageError("--split must be train or test");
  auto [pool, test] = task_examples(cfg.task);
  auto& examples = a.split == "test" ? test : pool;
  if (examples.size() > a.limit) examples.resize(a.limit);
  const ToyGrammar grammar(cfg.task.grammar_seed);

  auto file = open_out(a.out_path);
  file << "example,label,row";
  for (std::size_t j = 0; j < cfg.model.d_model; ++j) file << ",v" << j;
  file << '\n';
  file << std::setprecision(9);
  auto emit = [&](const std::string& example, const std::string& label, const Tensor<double>& prompt) {
    for (std::size_t r = 0; r < prompt.shape()[0]; ++r) {
      file << example << ',' << label << ',' << r;
      for (std::size_t j = 0; j < prompt.shape()[1]; ++j) file << ',' << prompt.at(r, j);
      file << '\n';
    }
  };
  std::size_t written = 0;
  if (!uses_generator(cfg.prompt.method)) {
    emit("", "", *params.soft_prompt);
    written = 1;
  } else {
    for (std::size_t i = 0; i < examples.size(); ++i) {
      const auto enc = apply_template(cfg.task.spec, examples[i], grammar.vocabulary(), cfg.model.max_seq_len - cfg.prompt.l);
      Tape<double> tape;
      tape.set_recording(false);
      const auto mask = all_valid(enc.ids.size());
      const auto lower = forward_lower(tape, frozen, cfg.model, enc.ids, mask, cfg.prompt.k);
      emit(std::to_string(i), cfg.task.spec.verbalizer[enc.label].first, params.generate(tape, lower, mask));
      ++written;
    }
  }
  out << "wrote " << written << " prompt" << (written == 1 ? "" : "s") << " to " << a.out_path << '\n';
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{std::string("Prompt tuning at any layer of a frozen encoder.\n") + kPrecedence, "lpt"};
  app.require_subcommand(1);

  PretrainArgs pretrain;
  auto* pre = app.add_subcommand("pretrain-toy", "Pretrain the toy MLM backbone");
  pre->add_option("--config", pretrain.config_path, "Run configuration JSON")->check(CLI::ExistingFile);
  pre->add_option("--out", pretrain.out, "Checkpoint path; corpus stats go to <path>.json")->required();
  pre->add_option("--seed", pretrain.seed, "Pretraining seed (overrides pretrain.seed)");
  pre->add_option("--steps", pretrain.steps, "Pretraining steps (overrides pretrain.steps)");

  TrainArgs train_args;
  auto* tr = app.add_subcommand("train", "Tune a prompt on a frozen backbone, once per seed");
  add_common(tr, train_args.common, true);
  add_prompt_flags(tr, train_args.prompt);
  tr->add_option("--shots", train_args.shots, "Training examples per seed (overrides task.shots)");

  SweepArgs sweep;
  auto* sw = app.add_subcommand("sweep-layer", "Train at each prompt layer and tabulate mean ± std");
  add_common(sw, sweep.common, true);
  add_prompt_flags(sw, sweep.prompt);
  sw->add_option("--layers", sweep.layers, "Prompt layers (overrides analysis.sweep_layers)")->delimiter(',');

  Common mi;
  auto* mp = app.add_subcommand("mi-probe", "Estimate label information at the [MASK] position per layer");
  add_common(mp, mi, true);

  BenchArgs bench_args;
  auto* be = app.add_subcommand("bench", "Measure training throughput and activation memory");
  add_common(be, bench_args.common, true);
  be->add_option("--methods", bench_args.methods, "Methods (overrides analysis.bench.methods)")->delimiter(',');
  be->add_option("--layers", bench_args.layers, "Prompt layers (overrides analysis.bench.layers)")->delimiter(',');
  be->add_option("--timed-steps", bench_args.timed, "Timed steps");
  be->add_option("--warmup-steps", bench_args.warmup, "Untimed warmup steps");
  be->add_option("--seq-len", bench_args.seq_len, "Fixed sequence length");
  be->add_option("--batch", bench_args.batch, "Sequences per step");

  std::string report_dir, report_out;
  auto* re = app.add_subcommand("report", "Aggregate run records and benchmarks into one CSV table");
  re->add_option("--dir", report_dir, "Directory searched recursively")->required();
  re->add_option("--out", report_out, "CSV path (default: stdout)");

  ExportArgs exp;
  auto* ex = app.add_subcommand("export-prompts", "Write the prompt vectors of a train run as CSV");
  ex->add_option("--run", exp.run_dir, "Output directory of a train run")->required();
  ex->add_option("--out", exp.out_path, "CSV path")->required();
  ex->add_option("--split", exp.split, "train or test");
  ex->add_option("--limit", exp.limit, "Maximum number of examples");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error[usage]: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*pre) cmd_pretrain(pretrain, out);
    if (*tr) cmd_train(train_args, out);
    if (*sw) cmd_sweep(sweep, out);
    if (*mp) cmd_mi(mi, out);
    if (*be) cmd_bench(bench_args, out);
    if (*re) cmd_report(report_dir, report_out, out);
    if (*ex) cmd_export(exp, out);
  } catch (const UsageError& e) {
    err << "error[usage]: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    err << "error[" << e.category() << "]: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error[internal]: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace lpt
