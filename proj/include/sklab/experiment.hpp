#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sklab/dataset.hpp"
#include "sklab/defenses.hpp"
#include "sklab/harness.hpp"
#include "sklab/poison.hpp"
#include "sklab/trigger.hpp"

namespace sk {

struct DatasetConfig {
  // "synthetic" generates train and test splits; "path" loads containers.
  std::string kind = "synthetic";
  SynthOptions synth{};
  std::size_t test_per_class = 200;
  std::uint64_t test_seed = 1;
  // Relative paths resolve against SK_DATA_DIR when it is set.
  std::string train_path;
  std::string test_path;
};

struct ModelConfig {
  std::string arch = "cnn-s";
  TrainParams train{};
  // Pre-trained checkpoint to load instead of training (surrogate only).
  std::string checkpoint;
};

struct TriggerConfig {
  TriggerMode mode = TriggerMode::kAdditive;
  double epsilon = 16.0 / 255.0;
  std::size_t patch_height = 8;
  std::size_t patch_width = 8;
  TriggerCraftParams craft{};
  // Bytes file for the predefined patch; empty means a generated patch.
  std::string predefined_path;
  std::uint64_t predefined_seed = 0;
};

struct SweepConfig {
  std::vector<std::size_t> budgets;
  std::vector<double> epsilons;  // sets epsilon_t and epsilon_p together
};

struct BaselineConfig {
  bool no_poison = true;
  bool predefined_patch = false;
};

struct ExperimentConfig {
  std::string name = "experiment";
  DatasetConfig dataset{};
  ModelConfig surrogate{};
  // Every victim trains on the same poisoned set; an architecture differing
  // from the surrogate's makes that victim black-box.
  std::vector<ModelConfig> victims{ModelConfig{}};
  // Empty means every ordered pair of distinct classes.
  std::vector<std::pair<int, int>> pairs;
  TriggerConfig trigger{};
  PoisonCraftParams poison{};
  std::vector<std::uint64_t> seeds{0};
  SweepConfig sweep{};
  std::optional<DefenseConfig> defense;
  BaselineConfig baselines{};
  bool save_artifacts = true;
  std::size_t jobs = 1;

  void validate(std::size_t num_classes) const;
};

ExperimentConfig config_from_json(const std::string& text);
std::string config_to_json(const ExperimentConfig& config);
ExperimentConfig load_config(const std::filesystem::path& path);
// Victim-style training parameters as a standalone JSON object.
TrainParams train_params_from_json(const std::string& text);

// The config's surrogate: its checkpoint when set, else a model cached in
// `cache_dir` under a hash of the dataset and surrogate settings, else a
// freshly trained one that is then cached.
Model obtain_surrogate(const ExperimentConfig& config, const Dataset& train, const std::filesystem::path& cache_dir);

// Loads or synthesises the train and test splits the config describes.
std::pair<Dataset, Dataset> materialize_datasets(const DatasetConfig& config);
std::filesystem::path resolve_data_path(const std::string& path);

// Ordered pairs the config targets, in report order.
std::vector<std::pair<int, int>> resolve_pairs(const ExperimentConfig& config, std::size_t num_classes);

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_file(const std::filesystem::path& path);

struct RunReport {
  std::string json;
  std::size_t runs = 0;
  std::size_t failed = 0;
};

// Runs the full pipeline. Artifacts go under `out_dir` when the config keeps
// them; a failing run is recorded in the report and the rest continue.
RunReport run_experiment(const ExperimentConfig& config, const std::filesystem::path& out_dir);

// Drops every "timing" member, recursively, for determinism comparisons.
std::string strip_timing(const std::string& report_json);

enum class ReportFormat { kJson, kMarkdown };
ReportFormat report_format_from_string(const std::string& name);
// Deterministic rendering; throws on a report without runs.
std::string report_render(const std::string& report_json, ReportFormat format);

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;  // population
  std::size_t count = 0;
};
Aggregate aggregate(std::span<const double> values);

}  // namespace sk
