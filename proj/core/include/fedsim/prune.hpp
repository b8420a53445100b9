#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/linalg.hpp"
#include "fedsim/model.hpp"
#include "fedsim/objective.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

struct PruneConfig {
  std::size_t hessian_cap = 2000;
  double p_max = 0.9;            // cap on per-client expected rates
  int lipschitz_samples = 16;    // perturbations drawn for the residual Lipschitz estimate
  double lipschitz_radius = 1.0; // sampling radius as a multiple of ||delta||
  double lipschitz_safety = 2.0;
  int calibration_batch = 32;    // samples used for feature-map ranks
  double epsilon = 0.01;         // division guard in the rate aggregation
  std::uint64_t seed = 0;
  int workers = 1;
};

struct RateEstimate {
  int client_id = 0;
  std::size_t hessian_dim = 0;  // d_k
  std::size_t gap_index = 0;    // m_k: eigenvalues below the first qualifying gap
  double rate = 0.0;            // p*_k = m_k / d_k, capped at p_max
  double lipschitz = 0.0;       // estimated Lipschitz constant of the Taylor residual
};

struct LayerPlan {
  std::size_t layer_index = 0;
  double rate = 0.0;
  std::vector<int> preserved;  // surviving filter indices, ascending
  std::vector<double> ranks;   // mean feature-map rank per filter
};

struct PruningPlan {
  double aggregated_rate = 0.0;
  // The global magnitude threshold; absent for the fixed-rate baseline,
  // which never computes one.
  std::optional<double> threshold;
  std::vector<LayerPlan> layers;
  std::vector<std::string> warnings;

  std::string to_json() const;
};

// Round-0 global model versus the current one; delta = flatten(initial) -
// flatten(current) bounds the perturbation domain of the residual.
struct SnapshotPair {
  Model initial;
  Model current;

  std::vector<double> delta() const;
};

// First index m (1-based count of eigenvalues below the gap) with
// eigs[m] - eigs[m-1] > max(4 * lipschitz, noise floor), and the rate m/d
// capped at p_max. Returns {0, 0} when no gap qualifies or d < 2.
std::pair<std::size_t, double> gap_rate(std::span<const double> ascending_eigs, double lipschitz,
                                        double p_max);

// Lipschitz estimate of the second-order residual B(d) = grad(w + d) -
// grad(w) - H d over perturbations with ||d|| <= radius: safety * max over
// pairs of ||B(di) - B(dj)|| / ||di - dj||. radius == 0 gives 0.
double lipschitz_estimate_at(const Objective& objective, std::span<const double> w,
                             const Matrix& hess, double radius, int samples, double safety,
                             Rng rng);

// Full per-client pipeline at an arbitrary objective: finite-difference
// Hessian, eigenvalues, residual Lipschitz constant, gap rate.
RateEstimate expected_rate_at(const Objective& objective, std::span<const double> w_current,
                              std::span<const double> delta, const PruneConfig& config,
                              int client_id);

// Production surface: the model-loss objective over the client's dataset.
RateEstimate expected_rate_client(const SnapshotPair& snapshot, const Dataset& dataset,
                                  const PruneConfig& config, int client_id);

double lipschitz_estimate(const SnapshotPair& snapshot, const Dataset& dataset, int samples,
                          double radius, double safety, std::uint64_t seed);

// Divergence-weighted aggregation of per-client rates: weight_k proportional
// to n_k / (div_k + epsilon), normalized to sum to one.
double aggregate_rate(const std::vector<RateEstimate>& estimates,
                      const std::vector<double>& sample_counts,
                      const std::vector<double>& divergences, double epsilon);

// |v| at 1-based position floor(R * p_star) of the ascending magnitude sort
// (ties by original index); position 0 means prune nothing and yields 0.
double global_threshold(const FlatParams& params, double p_star);

// Conv2D layers eligible for pruning: those followed (through ReLU/Flatten)
// by another Conv2D or a Dense layer that surgery can rewire.
std::vector<std::size_t> prunable_conv_layers(const Model& model);

// Fraction of each prunable layer's parameters strictly below the threshold,
// aligned with prunable_conv_layers(model).
std::vector<double> layer_rates(const Model& model, double threshold);

// Mean over the calibration batch of the numerical rank of each filter's
// output map. `layer_index` must be a Conv2D layer.
std::vector<double> feature_map_ranks(const Model& model, const Tensor& calibration_batch,
                                      std::size_t layer_index);

// Same computation on a device-local calibration batch; used when no server
// data is available and only the ranks travel back to the server.
std::vector<double> decentralized_ranks(const Dataset& device_data, const Model& model,
                                        std::size_t layer_index, int calibration_batch,
                                        std::uint64_t seed);

// Structured surgery: per prunable layer, drop the floor(rate * d_l)
// lowest-ranked filters (at least one filter always survives), remove the
// matching input slices of the next Conv2D or Dense layer, and return the
// smaller standalone model with its plan.
std::pair<Model, PruningPlan> prune_model(const Model& model,
                                          const std::vector<double>& rates,
                                          const Tensor& calibration_batch, double p_star,
                                          std::optional<double> threshold);

// Per-sample forward cost: 2 k^2 Cin Cout Hout Wout per conv layer plus
// 2 in out per dense layer.
double forward_flops(const Model& model);
// Same, in MFLOPs.
double flops_count(const Model& model);

// Seeded calibration draw without replacement (the whole dataset when it is
// smaller than `size`).
Tensor draw_calibration_batch(const Dataset& dataset, int size, Rng rng);

}  // namespace fedsim
