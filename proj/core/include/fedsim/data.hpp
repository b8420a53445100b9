#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedsim/tensor.hpp"

namespace fedsim {

struct Sample {
  std::vector<double> x;  // flat [channels * height * width]
  int label = 0;
};

struct Dataset {
  std::array<int, 3> shape{0, 0, 0};  // [channels, height, width]
  int num_classes = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }

  // Stacks the given samples into a [n, c, h, w] tensor.
  Tensor batch_tensor(std::span<const std::size_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
  Tensor all_inputs() const;
  std::vector<int> all_labels() const;

  Dataset subset(std::span<const std::size_t> indices) const;
};

struct LabelDistribution {
  std::vector<double> probs;
};

struct PartitionSpec {
  enum class Scheme { Dirichlet, Shards };
  enum class ServerScheme { Iid, Dirichlet };

  Scheme scheme = Scheme::Dirichlet;
  double alpha = 0.5;         // Dirichlet concentration across devices
  int shards_per_device = 2;  // used by Scheme::Shards
  int num_devices = 1;
  double server_fraction = 0.0;  // in [0, 1)
  ServerScheme server_scheme = ServerScheme::Iid;
  double server_alpha = 100.0;  // used by ServerScheme::Dirichlet
  std::uint64_t seed = 0;

  void validate() const;
};

struct Partition {
  Dataset server;
  std::vector<Dataset> devices;
  // Original sample indices per shard; together with `server_indices` these
  // form a disjoint exact cover of the input dataset.
  std::vector<std::size_t> server_indices;
  std::vector<std::vector<std::size_t>> device_indices;
};

// Gaussian blob images: one fixed seed-derived template per class plus
// i.i.d. noise. Samples are ordered class-major; deterministic per seed.
Dataset generate_synthetic(int classes, std::array<int, 3> dim, int per_class,
                           double noise_sigma, std::uint64_t seed);

// Splits a dataset between a server shard and `num_devices` device shards
// according to the spec. Devices are guaranteed nonempty (the partition seed
// is re-derived a bounded number of times if needed).
Partition partition(const Dataset& dataset, const PartitionSpec& spec);

// Empirical label distribution; throws on an empty dataset.
LabelDistribution label_distribution(const Dataset& dataset);

// Sample-count-weighted mean of distributions; throws on zero total weight.
LabelDistribution global_distribution(const std::vector<LabelDistribution>& dists,
                                      const std::vector<double>& weights);

// JSON-lines I/O: one {"label": int, "data": [floats]} object per line.
void save_dataset_jsonl(const Dataset& dataset, const std::string& path);
Dataset load_dataset_jsonl(const std::string& path, std::array<int, 3> shape, int num_classes);

// JSON manifest listing the sample indices assigned to the server and to
// each device.
std::string partition_manifest_json(const Partition& part);

// Stable FNV-1a content digest (hex) over labels and raw sample bytes.
std::string dataset_digest(const Dataset& dataset);

}  // namespace fedsim
