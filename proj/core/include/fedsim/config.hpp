#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/fed.hpp"

namespace fedsim {

enum class ExperimentMode { FedAvg, FedDU, FedAP, FedDUAP, FixedRatePrune };

const char* mode_name(ExperimentMode mode);
ExperimentMode mode_from_name(const std::string& name);
bool mode_prunes(ExperimentMode mode);
bool mode_uses_server_update(ExperimentMode mode);

struct DataConfig {
  int classes = 4;
  int channels = 1;
  int height = 16;
  int width = 16;
  int train_per_class = 250;
  int test_per_class = 50;
  double noise_sigma = 1.0;
};

struct ModelConfig {
  std::vector<int> conv_channels = {4, 4};
  int kernel_size = 3;
  int stride = 2;
  int padding = 1;
};

struct PruneSettings {
  int prune_at_round = -1;  // -1 resolves to ceil(0.2 * rounds)
  std::size_t hessian_cap = 2000;
  double p_max = 0.9;
  int calibration_batch = 32;
  double fixed_rate = 0.4;  // rate applied by the fixed-rate baseline
  int lipschitz_samples = 16;
  double lipschitz_radius = 1.0;
  double lipschitz_safety = 2.0;
  double epsilon = 0.01;
};

// Full experiment description. `load_config` fills defaults, rejects unknown
// keys and validates ranges; `resolved()` returns the effective config with
// every default spelled out, which is what gets echoed next to the metrics.
struct ExperimentConfig {
  ExperimentMode mode = ExperimentMode::FedAvg;
  std::uint64_t seed = 0;
  std::string out_dir;  // empty: no files are written
  int workers = 1;
  double target_accuracy = 0.9;
  DataConfig data;
  PartitionSpec partition;
  FedConfig fed;
  ModelConfig model;
  PruneSettings prune;

  void validate() const;
  ExperimentConfig resolved() const;

  // Builds the (unparameterized) architecture this config describes.
  Model architecture() const;
};

std::string config_to_json(const ExperimentConfig& config);
ExperimentConfig config_from_json(const std::string& text);
ExperimentConfig load_config(const std::string& path);

}  // namespace fedsim
