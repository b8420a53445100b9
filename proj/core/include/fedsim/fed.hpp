#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/model.hpp"

namespace fedsim {

enum class UpdateMode { FedAvg, FedDU };

struct FedConfig {
  int num_devices = 20;       // N
  int devices_per_round = 5;  // m, sampled uniformly without replacement
  int local_epochs = 2;       // E
  int batch_size = 16;        // B
  double learning_rate = 0.05;
  double decay = 0.99;                       // per-round geometric decay of the server step
  double server_c = 1.0;                     // scale on the effective step size
  std::string f_prime = "one_minus_acc";     // accuracy weighting for the server step
  int total_rounds = 30;                     // T
  double device_gflops = 1.0;                // simulated device speed
  std::uint64_t seed = 0;
  int workers = 1;

  void validate() const;
};

// Registry of accuracy-weighting functions for the effective step size.
// "one_minus_acc" -> clamp(1 - acc, 0, 1) is the default and only built-in.
const std::map<std::string, std::function<double(double)>>& f_prime_registry();

struct DeviceState {
  int id = 0;
  Dataset data;
  LabelDistribution dist;

  std::size_t sample_count() const { return data.size(); }
};

struct ServerState {
  int round = 0;  // index of the next round to run, starting at 0
  Model global;
  Dataset server_data;
  LabelDistribution server_dist;  // empty probs when there is no server data

  std::size_t sample_count() const { return server_data.size(); }
};

struct RoundRecord {
  int round = 0;
  double server_accuracy = 0.0;  // accuracy of the aggregated model on server data; NaN in
                                 // fedavg mode or when there is no server data
  double test_accuracy = 0.0;
  double test_loss = 0.0;
  double tau_eff = 0.0;
  std::vector<int> selected;
  double device_mflops = 0.0;  // total training compute across selected devices
  double sim_seconds = 0.0;    // simulated wall time of the round: devices train in parallel,
                               // so this is the slowest selected device
  double wall_seconds = 0.0;   // measured host time; logged separately, never part of the
                               // deterministic metrics stream
};

// Uniform sample of `devices_per_round` ids without replacement, returned in
// ascending order; deterministic in (seed, round).
std::vector<int> select_devices(int round, const FedConfig& config);

struct LocalUpdateResult {
  Model model;          // w_k after E local epochs
  FlatParams gradient;  // g_k = (w^{t-1} - w_k) / lr
};

// E epochs of minibatch SGD with seed-derived shuffling; the last short batch
// of an epoch is kept.
LocalUpdateResult local_update(const Model& global, const DeviceState& device, int epochs,
                               int batch_size, double lr, std::uint64_t seed, int round);

// Sample-count-weighted parameter mean, reduced in list order (callers pass
// ascending device ids). Coordinates on which all models agree are preserved
// bit-for-bit.
Model aggregate(const std::vector<Model>& models, const std::vector<double>& sample_counts);

// Mean of the tau = ceil(n0 * E / B) per-iteration stochastic gradients along
// an SGD probe launched from `aggregated`; the probe trajectory itself is
// discarded. Throws when the server dataset is empty.
FlatParams normalized_server_gradient(const Model& aggregated, const Dataset& server_data,
                                      int epochs, int batch_size, double lr, std::uint64_t seed,
                                      int round, int* tau_out = nullptr);

// Dynamic effective step size: f'(acc) * n0*D(selected) / (n0*D(selected) +
// n'*D(server)) * c * decay^round * tau. When both divergence terms are zero
// the data fraction n0/(n0+n') is used. The decay factor is applied by
// repeated multiplication so consecutive rounds differ by exactly one
// multiply.
double effective_step(double acc, double div_selected, double div_server, double n0,
                      double n_prime, double c, double decay, int round, int tau,
                      const std::function<double(double)>& f_prime);

// w^t = aggregated - tau_eff * lr * g0; tau_eff == 0 returns the input
// unchanged at the bit level.
Model server_update(const Model& aggregated, const FlatParams& g0, double tau_eff, double lr);

struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;
};

// Fraction of argmax-correct predictions (ties to the lowest class index)
// and mean cross-entropy. Throws on an empty dataset.
EvalResult evaluate(const Model& model, const Dataset& dataset);

// One full round: select -> local updates (parallel over devices) ->
// aggregate -> (FedDU only, when server data exists) server evaluation,
// effective step, normalized gradient, server update. Advances state.round
// and replaces state.global. `test_data` may be null, in which case the test
// fields are NaN. `global_dist` is the sample-weighted label distribution
// over all devices.
RoundRecord run_round(ServerState& state, const std::vector<DeviceState>& devices,
                      const FedConfig& config, UpdateMode mode, const Dataset* test_data,
                      const LabelDistribution& global_dist);

}  // namespace fedsim
