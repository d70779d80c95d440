#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lpt/analysis.hpp"

namespace lpt {

using Json = nlohmann::ordered_json;

enum class Precision { Float, Double };

struct PretrainSection {
  PretrainOptions options;
  std::size_t corpus_sentences = 20000;
  std::uint64_t corpus_seed = 11;
};

// Where task examples come from: the toy grammar (default) or TSV files.
struct TaskSection {
  TaskSpec spec = toy_sentiment_task();
  std::uint64_t grammar_seed = 7;
  std::size_t shots = 100;
  // Toy tasks: size of the pool few-shot splits are drawn from, and of the
  // held-out test set.
  std::size_t pool_size = 4000;
  std::size_t test_size = 1000;
  std::uint64_t data_seed = 101;
  std::optional<std::filesystem::path> train_tsv, test_tsv;
};

struct AnalysisSection {
  ProbeConfig probe;
  std::size_t probe_examples = 1000;
  std::vector<std::size_t> sweep_layers;  // empty = all layers
  BenchConfig bench;
  std::vector<std::string> bench_methods{"PT", "NPG"};
  std::vector<std::size_t> bench_layers;  // empty = default layer
};

struct RunConfig {
  ModelConfig model;
  PretrainSection pretrain;
  PromptSpec prompt = PromptSpec::defaults(PromptMethod::NPG, ModelConfig{});
  TaskSection task;
  TrainConfig train;
  Precision precision = Precision::Float;
  AnalysisSection analysis;
  std::filesystem::path output_dir = "runs/default";
  std::vector<std::uint64_t> seeds{1, 2, 3};

  // Throws ConfigError naming the offending field.
  void validate() const;
};

// Missing keys take defaults; unknown keys and wrong types throw ConfigError
// naming the dotted path. Prompt l and k default per method.
RunConfig parse_run_config(const Json& doc);
RunConfig load_run_config(const std::filesystem::path& path);
// Every field, defaults included.
Json to_json(const RunConfig& config);

Json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const Json& doc);
Json to_json(const PromptSpec& spec);
Json to_json(const Metrics& metrics);
Json to_json(const PretrainReport& report);
template <std::floating_point T>
Json to_json(const RunRecord<T>& record);

// Examples for the configured task: (pool to draw few-shot splits from, test).
std::pair<std::vector<Example>, std::vector<Example>> task_examples(const TaskSection& task);

// Writes `doc` with two-space indentation; throws IoError.
void write_json(const std::filesystem::path& path, const Json& doc);
Json read_json(const std::filesystem::path& path);

}  // namespace lpt
