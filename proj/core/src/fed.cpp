#include "fedsim/fed.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "fedsim/divergence.hpp"
#include "fedsim/nn.hpp"
#include "fedsim/parallel.hpp"
#include "fedsim/prune.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

void FedConfig::validate() const {
  if (num_devices < 1) throw std::invalid_argument("fed: num_devices must be >= 1");
  if (devices_per_round < 1 || devices_per_round > num_devices)
    throw std::invalid_argument("fed: devices_per_round must be in [1, num_devices]");
  if (local_epochs < 1) throw std::invalid_argument("fed: local_epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("fed: batch_size must be >= 1");
  if (learning_rate <= 0.0) throw std::invalid_argument("fed: learning_rate must be > 0");
  if (decay <= 0.0 || decay >= 1.0) throw std::invalid_argument("fed: decay must be in (0, 1)");
  if (server_c < 0.0) throw std::invalid_argument("fed: server_c must be >= 0");
  if (total_rounds < 0) throw std::invalid_argument("fed: total_rounds must be >= 0");
  if (device_gflops <= 0.0) throw std::invalid_argument("fed: device_gflops must be > 0");
  if (workers < 1) throw std::invalid_argument("fed: workers must be >= 1");
  if (!f_prime_registry().count(f_prime))
    throw std::invalid_argument("fed: unknown f_prime '" + f_prime + "'");
}

const std::map<std::string, std::function<double(double)>>& f_prime_registry() {
  static const std::map<std::string, std::function<double(double)>> registry = {
      {"one_minus_acc", [](double acc) { return std::clamp(1.0 - acc, 0.0, 1.0); }},
  };
  return registry;
}

std::vector<int> select_devices(int round, const FedConfig& config) {
  const int n = config.num_devices;
  const int m = config.devices_per_round;
  if (m > n) throw std::invalid_argument("select_devices: m > N");
  std::vector<int> ids(static_cast<std::size_t>(n));
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng = Rng::stream(config.seed, "select", static_cast<std::uint64_t>(round));
  // Partial Fisher-Yates: the first m entries become the sample.
  for (int i = 0; i < m; ++i) {
    std::size_t j = i + static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(n - i)));
    std::swap(ids[static_cast<std::size_t>(i)], ids[j]);
  }
  ids.resize(static_cast<std::size_t>(m));
  std::sort(ids.begin(), ids.end());
  return ids;
}

namespace {

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch_size, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t pos = 0; pos < n; pos += static_cast<std::size_t>(batch_size)) {
    std::size_t end = std::min(n, pos + static_cast<std::size_t>(batch_size));
    batches.emplace_back(order.begin() + pos, order.begin() + end);
  }
  return batches;
}

}  // namespace

LocalUpdateResult local_update(const Model& global, const DeviceState& device, int epochs,
                               int batch_size, double lr, std::uint64_t seed, int round) {
  if (device.data.empty()) throw std::invalid_argument("local_update: device dataset is empty");
  Rng rng = Rng::stream(seed, "local_update", static_cast<std::uint64_t>(round),
                        static_cast<std::uint64_t>(device.id));
  Model model = global;
  for (int e = 0; e < epochs; ++e) {
    for (const auto& batch : epoch_batches(device.data.size(), batch_size, rng)) {
      Tensor x = device.data.batch_tensor(batch);
      std::vector<int> y = device.data.batch_labels(batch);
      FlatParams grad = backward(model, x, y);
      model = sgd_step(model, grad, lr);
    }
  }
  LocalUpdateResult result;
  result.gradient.values.resize(global.parameter_count());
  FlatParams before = flatten_params(global);
  FlatParams after = flatten_params(model);
  for (std::size_t i = 0; i < before.size(); ++i)
    result.gradient.values[i] = (before.values[i] - after.values[i]) / lr;
  result.model = std::move(model);
  return result;
}

Model aggregate(const std::vector<Model>& models, const std::vector<double>& sample_counts) {
  if (models.empty()) throw std::invalid_argument("aggregate: empty model list");
  if (models.size() != sample_counts.size())
    throw std::invalid_argument("aggregate: model/count lists misaligned");
  double total = 0.0;
  for (double n : sample_counts) {
    if (n <= 0.0) throw std::invalid_argument("aggregate: sample counts must be positive");
    total += n;
  }

  const Model& ref = models[0];
  std::vector<FlatParams> flats;
  flats.reserve(models.size());
  for (const Model& m : models) {
    if (m.parameter_count() != ref.parameter_count())
      throw std::invalid_argument("aggregate: parameter counts differ");
    flats.push_back(flatten_params(m));
  }

  // Weighted mean written relative to the first model: coordinates on which
  // every model agrees accumulate an exactly-zero correction.
  FlatParams out = flats[0];
  for (std::size_t i = 0; i < out.size(); ++i) {
    double correction = 0.0;
    for (std::size_t k = 1; k < flats.size(); ++k)
      correction += (sample_counts[k] / total) * (flats[k].values[i] - out.values[i]);
    if (correction != 0.0) out.values[i] += correction;
  }
  return unflatten_params(ref, out);
}

FlatParams normalized_server_gradient(const Model& aggregated, const Dataset& server_data,
                                      int epochs, int batch_size, double lr, std::uint64_t seed,
                                      int round, int* tau_out) {
  if (server_data.empty())
    throw std::invalid_argument("normalized_server_gradient: server dataset is empty");
  const std::size_t n0 = server_data.size();
  const int tau = static_cast<int>(
      (n0 * static_cast<std::size_t>(epochs) + static_cast<std::size_t>(batch_size) - 1) /
      static_cast<std::size_t>(batch_size));
  if (tau_out) *tau_out = tau;

  Rng rng = Rng::stream(seed, "server_probe", static_cast<std::uint64_t>(round));
  Model probe = aggregated;
  std::vector<double> mean(aggregated.parameter_count(), 0.0);
  int taken = 0;
  while (taken < tau) {
    for (const auto& batch : epoch_batches(n0, batch_size, rng)) {
      if (taken == tau) break;
      Tensor x = server_data.batch_tensor(batch);
      std::vector<int> y = server_data.batch_labels(batch);
      FlatParams g = backward(probe, x, y);
      for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += g.values[i];
      probe = sgd_step(probe, g, lr);
      ++taken;
    }
  }
  FlatParams out;
  out.values.resize(mean.size());
  for (std::size_t i = 0; i < mean.size(); ++i)
    out.values[i] = mean[i] / static_cast<double>(tau);
  return out;
}

double effective_step(double acc, double div_selected, double div_server, double n0,
                      double n_prime, double c, double decay, int round, int tau,
                      const std::function<double(double)>& f_prime) {
  if (div_selected < 0.0 || div_server < 0.0)
    throw std::invalid_argument("effective_step: divergences must be >= 0");
  double numerator = n0 * div_selected;
  double denominator = numerator + n_prime * div_server;
  double fraction;
  if (denominator == 0.0)
    fraction = (n0 + n_prime) == 0.0 ? 0.0 : n0 / (n0 + n_prime);
  else
    fraction = numerator / denominator;
  double v = f_prime(acc) * fraction;
  v *= c;
  v *= static_cast<double>(tau);
  // decay^round by repeated multiplication: consecutive rounds then differ by
  // exactly one multiply, which keeps the per-round ratio exact.
  for (int i = 0; i < round; ++i) v *= decay;
  return v;
}

Model server_update(const Model& aggregated, const FlatParams& g0, double tau_eff, double lr) {
  if (g0.size() != aggregated.parameter_count())
    throw std::invalid_argument("server_update: gradient length mismatch");
  if (tau_eff == 0.0) return aggregated;
  FlatParams w = flatten_params(aggregated);
  for (std::size_t i = 0; i < w.size(); ++i) {
    double step = tau_eff * lr * g0.values[i];
    if (step != 0.0) w.values[i] -= step;
  }
  return unflatten_params(aggregated, w);
}

EvalResult evaluate(const Model& model, const Dataset& dataset) {
  if (dataset.empty()) throw std::invalid_argument("evaluate: empty dataset");
  const int classes = model.num_classes();
  constexpr std::size_t kChunk = 256;
  std::size_t correct = 0;
  double loss_sum = 0.0;
  std::vector<std::size_t> indices(kChunk);
  for (std::size_t start = 0; start < dataset.size(); start += kChunk) {
    std::size_t end = std::min(dataset.size(), start + kChunk);
    indices.resize(end - start);
    std::iota(indices.begin(), indices.end(), start);
    Tensor x = dataset.batch_tensor(indices);
    std::vector<int> y = dataset.batch_labels(indices);
    ForwardResult fr = forward(model, x, y);
    for (std::size_t b = 0; b < indices.size(); ++b) {
      std::span<const double> row(&fr.logits.data[b * static_cast<std::size_t>(classes)],
                                  static_cast<std::size_t>(classes));
      if (argmax_lowest(row) == y[b]) ++correct;
      loss_sum += fr.per_sample_loss[b];
    }
  }
  EvalResult result;
  result.accuracy = static_cast<double>(correct) / static_cast<double>(dataset.size());
  result.mean_loss = loss_sum / static_cast<double>(dataset.size());
  return result;
}

RoundRecord run_round(ServerState& state, const std::vector<DeviceState>& devices,
                      const FedConfig& config, UpdateMode mode, const Dataset* test_data,
                      const LabelDistribution& global_dist) {
  const auto wall_start = std::chrono::steady_clock::now();
  const int t = state.round;
  RoundRecord record;
  record.round = t;
  record.selected = select_devices(t, config);

  // Local updates are independent given the immutable global snapshot; each
  // device derives its own rng stream, so any worker count gives identical
  // results.
  std::vector<LocalUpdateResult> results(record.selected.size());
  parallel_for(record.selected.size(), config.workers, [&](std::size_t i) {
    const DeviceState& dev = devices[static_cast<std::size_t>(record.selected[i])];
    results[i] = local_update(state.global, dev, config.local_epochs, config.batch_size,
                              config.learning_rate, config.seed, t);
  });

  std::vector<Model> local_models;
  std::vector<double> counts;
  local_models.reserve(results.size());
  for (std::size_t i = 0; i < results.size(); ++i) {
    local_models.push_back(std::move(results[i].model));
    counts.push_back(
        static_cast<double>(devices[static_cast<std::size_t>(record.selected[i])].sample_count()));
  }
  Model aggregated = aggregate(local_models, counts);

  const double fwd_flops = forward_flops(state.global);
  double n_prime = 0.0;
  double max_device_flops = 0.0;
  double total_device_flops = 0.0;
  for (std::size_t i = 0; i < record.selected.size(); ++i) {
    double n_k = counts[i];
    n_prime += n_k;
    // Cost model: backward counted as twice the forward pass.
    double flops_k = 3.0 * fwd_flops * n_k * static_cast<double>(config.local_epochs);
    total_device_flops += flops_k;
    max_device_flops = std::max(max_device_flops, flops_k);
  }
  record.device_mflops = total_device_flops / 1e6;
  record.sim_seconds = max_device_flops / (config.device_gflops * 1e9);

  record.tau_eff = 0.0;
  record.server_accuracy = std::numeric_limits<double>::quiet_NaN();
  if (mode == UpdateMode::FedDU && !state.server_data.empty()) {
    record.server_accuracy = evaluate(aggregated, state.server_data).accuracy;
    int tau = 0;
    FlatParams g0 =
        normalized_server_gradient(aggregated, state.server_data, config.local_epochs,
                                   config.batch_size, config.learning_rate, config.seed, t, &tau);
    // Mix of the selected devices' label distributions, then its divergence
    // and the server's, both against the global device distribution.
    std::vector<LabelDistribution> dists;
    std::vector<double> weights;
    for (int id : record.selected) {
      dists.push_back(devices[static_cast<std::size_t>(id)].dist);
      weights.push_back(static_cast<double>(devices[static_cast<std::size_t>(id)].sample_count()));
    }
    LabelDistribution selected_dist = global_distribution(dists, weights);
    double div_selected = noniid_degree(selected_dist, global_dist);
    double div_server = noniid_degree(state.server_dist, global_dist);
    record.tau_eff = effective_step(record.server_accuracy, div_selected, div_server,
                                    static_cast<double>(state.server_data.size()), n_prime,
                                    config.server_c, config.decay, t, tau,
                                    f_prime_registry().at(config.f_prime));
    state.global = server_update(aggregated, g0, record.tau_eff, config.learning_rate);
  } else {
    state.global = std::move(aggregated);
  }
  state.round = t + 1;

  if (test_data && !test_data->empty()) {
    EvalResult ev = evaluate(state.global, *test_data);
    record.test_accuracy = ev.accuracy;
    record.test_loss = ev.mean_loss;
  } else {
    record.test_accuracy = std::numeric_limits<double>::quiet_NaN();
    record.test_loss = std::numeric_limits<double>::quiet_NaN();
  }

  record.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
  return record;
}

}  // namespace fedsim
