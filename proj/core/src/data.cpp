#include "fedsim/data.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "fedsim/jsonfmt.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

Tensor Dataset::batch_tensor(std::span<const std::size_t> indices) const {
  const std::size_t sample_len =
      static_cast<std::size_t>(shape[0]) * shape[1] * shape[2];
  Tensor t = Tensor::zeros({indices.size(), static_cast<std::size_t>(shape[0]),
                            static_cast<std::size_t>(shape[1]),
                            static_cast<std::size_t>(shape[2])});
  for (std::size_t i = 0; i < indices.size(); ++i)
    std::copy(samples[indices[i]].x.begin(), samples[indices[i]].x.end(),
              t.data.begin() + i * sample_len);
  return t;
}

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) out[i] = samples[indices[i]].label;
  return out;
}

Tensor Dataset::all_inputs() const {
  std::vector<std::size_t> idx(size());
  std::iota(idx.begin(), idx.end(), 0);
  return batch_tensor(idx);
}

std::vector<int> Dataset::all_labels() const {
  std::vector<int> out(size());
  for (std::size_t i = 0; i < size(); ++i) out[i] = samples[i].label;
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.shape = shape;
  out.num_classes = num_classes;
  out.samples.reserve(indices.size());
  for (std::size_t i : indices) out.samples.push_back(samples[i]);
  return out;
}

void PartitionSpec::validate() const {
  if (num_devices < 1) throw std::invalid_argument("partition: num_devices must be >= 1");
  if (server_fraction < 0.0 || server_fraction >= 1.0)
    throw std::invalid_argument("partition: server_fraction must be in [0, 1)");
  if (scheme == Scheme::Dirichlet && alpha <= 0.0)
    throw std::invalid_argument("partition: alpha must be > 0");
  if (scheme == Scheme::Shards && shards_per_device < 1)
    throw std::invalid_argument("partition: shards_per_device must be >= 1");
  if (server_scheme == ServerScheme::Dirichlet && server_alpha <= 0.0)
    throw std::invalid_argument("partition: server_alpha must be > 0");
}

Dataset generate_synthetic(int classes, std::array<int, 3> dim, int per_class,
                           double noise_sigma, std::uint64_t seed) {
  if (classes < 2) throw std::invalid_argument("generate_synthetic: need at least 2 classes");
  if (per_class < 1) throw std::invalid_argument("generate_synthetic: per_class must be >= 1");
  if (dim[0] < 1 || dim[1] < 1 || dim[2] < 1)
    throw std::invalid_argument("generate_synthetic: invalid sample shape");
  if (noise_sigma < 0.0) throw std::invalid_argument("generate_synthetic: negative noise");

  const std::size_t sample_len = static_cast<std::size_t>(dim[0]) * dim[1] * dim[2];
  Dataset ds;
  ds.shape = dim;
  ds.num_classes = classes;
  ds.samples.reserve(static_cast<std::size_t>(classes) * per_class);

  for (int c = 0; c < classes; ++c) {
    Rng template_rng = Rng::stream(seed, "blob_template", static_cast<std::uint64_t>(c));
    std::vector<double> tmpl(sample_len);
    for (double& v : tmpl) v = template_rng.normal();
    for (int j = 0; j < per_class; ++j) {
      Rng noise_rng = Rng::stream(seed, "blob_noise", static_cast<std::uint64_t>(c),
                                  static_cast<std::uint64_t>(j));
      Sample s;
      s.label = c;
      s.x.resize(sample_len);
      for (std::size_t i = 0; i < sample_len; ++i)
        s.x[i] = tmpl[i] + noise_sigma * noise_rng.normal();
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

namespace {

// Largest-remainder apportionment of `total` into quotas proportional to
// `weights`; never exceeds `caps` (pass empty for uncapped). Deterministic:
// remainder ties break toward the lower index.
std::vector<std::size_t> apportion(std::size_t total, std::span<const double> weights,
                                   std::span<const std::size_t> caps) {
  const std::size_t n = weights.size();
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  std::vector<std::size_t> out(n, 0);
  if (total == 0 || wsum <= 0.0) return out;

  std::vector<double> quota(n);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    quota[i] = static_cast<double>(total) * (weights[i] / wsum);
    out[i] = static_cast<std::size_t>(quota[i]);
    if (!caps.empty()) out[i] = std::min(out[i], caps[i]);
    assigned += out[i];
  }
  // Distribute the remainder by descending fractional part.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    double fa = quota[a] - static_cast<double>(out[a]);
    double fb = quota[b] - static_cast<double>(out[b]);
    return fa > fb;
  });
  std::size_t guard = 0;
  while (assigned < total && guard < 2 * n + 2) {
    bool progress = false;
    for (std::size_t i : order) {
      if (assigned == total) break;
      if (!caps.empty() && out[i] >= caps[i]) continue;
      ++out[i];
      ++assigned;
      progress = true;
    }
    if (!progress) break;  // all capped
    ++guard;
  }
  return out;
}

struct IndexSplit {
  std::vector<std::size_t> server;
  std::vector<std::vector<std::size_t>> devices;
};

IndexSplit try_partition(const Dataset& dataset, const PartitionSpec& spec,
                         std::uint64_t attempt) {
  const int k = dataset.num_classes;
  const std::size_t n_total = dataset.size();
  IndexSplit split;
  split.devices.resize(static_cast<std::size_t>(spec.num_devices));

  // Per-class index pools, shuffled once.
  std::vector<std::vector<std::size_t>> pool(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < n_total; ++i)
    pool[static_cast<std::size_t>(dataset.samples[i].label)].push_back(i);
  for (int c = 0; c < k; ++c) {
    Rng rng = Rng::stream(spec.seed, "partition_pool", attempt, static_cast<std::uint64_t>(c));
    rng.shuffle(pool[static_cast<std::size_t>(c)]);
  }

  // Server share first.
  const std::size_t n_server =
      static_cast<std::size_t>(spec.server_fraction * static_cast<double>(n_total));
  if (n_server > 0) {
    std::vector<double> weights(static_cast<std::size_t>(k));
    if (spec.server_scheme == PartitionSpec::ServerScheme::Iid) {
      for (int c = 0; c < k; ++c) weights[c] = static_cast<double>(pool[c].size());
    } else {
      Rng rng = Rng::stream(spec.seed, "partition_server", attempt);
      std::vector<double> alpha(static_cast<std::size_t>(k), spec.server_alpha);
      weights = rng.dirichlet(alpha);
    }
    std::vector<std::size_t> caps(static_cast<std::size_t>(k));
    for (int c = 0; c < k; ++c) caps[c] = pool[c].size();
    std::vector<std::size_t> take = apportion(n_server, weights, caps);
    for (int c = 0; c < k; ++c) {
      auto& p = pool[static_cast<std::size_t>(c)];
      split.server.insert(split.server.end(), p.end() - take[c], p.end());
      p.resize(p.size() - take[c]);
    }
  }

  // Remaining samples go to devices.
  if (spec.scheme == PartitionSpec::Scheme::Dirichlet) {
    for (int c = 0; c < k; ++c) {
      auto& p = pool[static_cast<std::size_t>(c)];
      if (p.empty()) continue;
      Rng rng = Rng::stream(spec.seed, "partition_class", attempt, static_cast<std::uint64_t>(c));
      std::vector<double> alpha(static_cast<std::size_t>(spec.num_devices), spec.alpha);
      std::vector<double> proportions = rng.dirichlet(alpha);
      std::vector<std::size_t> counts = apportion(p.size(), proportions, {});
      std::size_t pos = 0;
      for (int d = 0; d < spec.num_devices; ++d) {
        for (std::size_t j = 0; j < counts[d]; ++j)
          split.devices[d].push_back(p[pos++]);
      }
    }
  } else {
    // Sort remaining by (label, index), cut into contiguous shards, deal a
    // seeded permutation of shards, shards_per_device each.
    std::vector<std::size_t> rest;
    for (auto& p : pool) rest.insert(rest.end(), p.begin(), p.end());
    std::sort(rest.begin(), rest.end(), [&](std::size_t a, std::size_t b) {
      int la = dataset.samples[a].label, lb = dataset.samples[b].label;
      return la != lb ? la < lb : a < b;
    });
    const std::size_t n_shards =
        static_cast<std::size_t>(spec.num_devices) * spec.shards_per_device;
    if (rest.size() < n_shards)
      throw std::invalid_argument("partition: fewer samples than shards");
    std::vector<std::size_t> shard_order(n_shards);
    std::iota(shard_order.begin(), shard_order.end(), 0);
    Rng rng = Rng::stream(spec.seed, "partition_shards", attempt);
    rng.shuffle(shard_order);
    const std::size_t base = rest.size() / n_shards;
    const std::size_t extra = rest.size() % n_shards;
    // Shard s covers [start(s), start(s+1)) where the first `extra` shards
    // hold one extra sample.
    auto shard_start = [&](std::size_t s) { return s * base + std::min(s, extra); };
    for (std::size_t i = 0; i < n_shards; ++i) {
      std::size_t shard = shard_order[i];
      std::size_t device = i / static_cast<std::size_t>(spec.shards_per_device);
      for (std::size_t j = shard_start(shard); j < shard_start(shard + 1); ++j)
        split.devices[device].push_back(rest[j]);
    }
  }

  for (auto& idx : split.devices) std::sort(idx.begin(), idx.end());
  std::sort(split.server.begin(), split.server.end());
  return split;
}

}  // namespace

Partition partition(const Dataset& dataset, const PartitionSpec& spec) {
  spec.validate();
  if (dataset.empty()) throw std::invalid_argument("partition: empty dataset");
  const std::size_t n_server =
      static_cast<std::size_t>(spec.server_fraction * static_cast<double>(dataset.size()));
  if (dataset.size() - n_server < static_cast<std::size_t>(spec.num_devices))
    throw std::invalid_argument("partition: fewer device samples than devices");

  constexpr std::uint64_t kMaxAttempts = 100;
  for (std::uint64_t attempt = 0; attempt < kMaxAttempts; ++attempt) {
    IndexSplit split = try_partition(dataset, spec, attempt);
    bool ok = true;
    for (const auto& d : split.devices)
      if (d.empty()) ok = false;
    if (!ok) continue;
    Partition part;
    part.server = dataset.subset(split.server);
    part.server_indices = std::move(split.server);
    for (auto& idx : split.devices) {
      part.devices.push_back(dataset.subset(idx));
      part.device_indices.push_back(std::move(idx));
    }
    return part;
  }
  throw std::runtime_error("partition: could not produce nonempty devices after bounded retries");
}

LabelDistribution label_distribution(const Dataset& dataset) {
  if (dataset.empty()) throw std::invalid_argument("label_distribution: empty dataset");
  LabelDistribution dist;
  dist.probs.assign(static_cast<std::size_t>(dataset.num_classes), 0.0);
  for (const Sample& s : dataset.samples) dist.probs[static_cast<std::size_t>(s.label)] += 1.0;
  for (double& p : dist.probs) p /= static_cast<double>(dataset.size());
  return dist;
}

LabelDistribution global_distribution(const std::vector<LabelDistribution>& dists,
                                      const std::vector<double>& weights) {
  if (dists.size() != weights.size() || dists.empty())
    throw std::invalid_argument("global_distribution: distribution/weight lists misaligned");
  double total = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw std::invalid_argument("global_distribution: negative weight");
    total += w;
  }
  if (total <= 0.0) throw std::invalid_argument("global_distribution: zero total weight");
  LabelDistribution out;
  out.probs.assign(dists[0].probs.size(), 0.0);
  for (std::size_t k = 0; k < dists.size(); ++k) {
    if (dists[k].probs.size() != out.probs.size())
      throw std::invalid_argument("global_distribution: distribution lengths differ");
    for (std::size_t y = 0; y < out.probs.size(); ++y)
      out.probs[y] += weights[k] * dists[k].probs[y];
  }
  for (double& p : out.probs) p /= total;
  return out;
}

void save_dataset_jsonl(const Dataset& dataset, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_dataset_jsonl: cannot open " + path);
  std::string line;
  for (const Sample& s : dataset.samples) {
    line.clear();
    line += "{\"label\":" + std::to_string(s.label) + ",\"data\":";
    json_append_double_array(line, s.x);
    line += "}\n";
    f << line;
  }
}

Dataset load_dataset_jsonl(const std::string& path, std::array<int, 3> shape, int num_classes) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_dataset_jsonl: cannot open " + path);
  Dataset ds;
  ds.shape = shape;
  ds.num_classes = num_classes;
  const std::size_t sample_len = static_cast<std::size_t>(shape[0]) * shape[1] * shape[2];
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json doc = nlohmann::json::parse(line);
    Sample s;
    s.label = doc.at("label").get<int>();
    s.x = doc.at("data").get<std::vector<double>>();
    if (s.x.size() != sample_len)
      throw std::runtime_error("load_dataset_jsonl: line " + std::to_string(line_no) +
                               " has wrong sample length");
    if (s.label < 0 || s.label >= num_classes)
      throw std::runtime_error("load_dataset_jsonl: line " + std::to_string(line_no) +
                               " label out of range");
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

std::string partition_manifest_json(const Partition& part) {
  std::string out = "{\"server\":[";
  for (std::size_t i = 0; i < part.server_indices.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(part.server_indices[i]);
  }
  out += "],\"devices\":[";
  for (std::size_t d = 0; d < part.device_indices.size(); ++d) {
    if (d) out += ',';
    out += '[';
    for (std::size_t i = 0; i < part.device_indices[d].size(); ++i) {
      if (i) out += ',';
      out += std::to_string(part.device_indices[d][i]);
    }
    out += ']';
  }
  out += "]}";
  return out;
}

std::string dataset_digest(const Dataset& dataset) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  h = fnv1a_u64(static_cast<std::uint64_t>(dataset.size()), h);
  for (const Sample& s : dataset.samples) {
    h = fnv1a_u64(static_cast<std::uint64_t>(s.label), h);
    for (double v : s.x) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      h = fnv1a_u64(bits, h);
    }
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace fedsim
