#pragma once

#include <nlohmann/json_fwd.hpp>

#include <string>
#include <vector>

#include "epep/data.hpp"
#include "epep/training.hpp"

namespace epep {

enum class DataSource { Synthetic, Jsonl };

struct DataConfig {
  DataSource source = DataSource::Synthetic;
  std::string train_path;  // JSONL source only
  std::string test_path;
  std::size_t n_warmup = 1000;  // synthetic source only
  std::size_t n_train = 2000;
  std::size_t n_test = 500;
  MissingProtocol train_protocol{{0.7, 0.7}};
  MissingProtocol test_protocol{{0.7, 0.7}};
  // Task shape fields (num_classes, tokens, patch_dim) follow the model config.
  SyntheticTask task;

  bool operator==(const DataConfig&) const = default;
};

/// Everything a run needs. Seeds for data, init, shuffling and prompts are
/// derived from train.seed by stream name.
struct RunConfig {
  TrainConfig train;
  DataConfig data;
  std::string output_dir = "run";

  void validate() const;
  // The synthetic task with its shape fields synced to the model.
  SyntheticTask task() const;
  SampleShape sample_shape() const;
  bool operator==(const RunConfig&) const = default;
};

// Strict parse: unknown fields and wrong types raise ConfigError naming the
// dotted field path. Missing fields take their defaults. Value ranges and
// dataset paths are left to RunConfig::validate, so a checkpoint whose data
// has moved still loads.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

// Every field, defaults included.
nlohmann::json to_json(const RunConfig& config);

// Split name is "warmup", "train" or "test". Warm-up data is complete; the
// other splits carry patterns drawn from their protocol.
std::vector<Sample> make_synthetic_split(const RunConfig& config, const std::string& split);

struct Datasets {
  std::vector<Sample> warmup, train, test;
};

// Synthetic: generated per split. JSONL: loaded from the configured paths,
// with the complete training rows doubling as warm-up data.
Datasets load_datasets(const RunConfig& config);

}  // namespace epep
