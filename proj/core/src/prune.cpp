#include "fedsim/prune.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "fedsim/jsonfmt.hpp"
#include "fedsim/nn.hpp"

namespace fedsim {

std::vector<double> SnapshotPair::delta() const {
  FlatParams a = flatten_params(initial);
  FlatParams b = flatten_params(current);
  if (a.size() != b.size())
    throw std::invalid_argument("SnapshotPair: architectures differ");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = a.values[i] - b.values[i];
  return d;
}

std::pair<std::size_t, double> gap_rate(std::span<const double> ascending_eigs, double lipschitz,
                                        double p_max) {
  const std::size_t d = ascending_eigs.size();
  if (d < 2) return {0, 0.0};
  double scale = 1.0;
  for (double v : ascending_eigs) scale = std::max(scale, std::abs(v));
  // The 1e-9-relative floor keeps finite-difference and eigensolver noise in
  // near-degenerate spectra from registering as a gap.
  const double threshold = std::max(4.0 * lipschitz, 1e-9 * scale);
  for (std::size_t i = 1; i < d; ++i) {
    if (ascending_eigs[i] - ascending_eigs[i - 1] > threshold) {
      double rate = static_cast<double>(i) / static_cast<double>(d);
      return {i, std::min(rate, p_max)};
    }
  }
  return {0, 0.0};
}

namespace {

double vec_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

std::vector<double> matvec(const Matrix& m, std::span<const double> v) {
  std::vector<double> out(m.rows, 0.0);
  for (std::size_t i = 0; i < m.rows; ++i) {
    const double* row = &m.a[i * m.cols];
    double acc = 0.0;
    for (std::size_t j = 0; j < m.cols; ++j) acc += row[j] * v[j];
    out[i] = acc;
  }
  return out;
}

}  // namespace

double lipschitz_estimate_at(const Objective& objective, std::span<const double> w,
                             const Matrix& hess, double radius, int samples, double safety,
                             Rng rng) {
  if (samples < 2) throw std::invalid_argument("lipschitz_estimate: need at least 2 samples");
  if (radius <= 0.0) return 0.0;
  const std::size_t dim = objective.dim();
  std::vector<double> g0 = objective.gradient(w);

  std::vector<std::vector<double>> deltas;
  std::vector<std::vector<double>> residuals;
  deltas.reserve(static_cast<std::size_t>(samples));
  for (int s = 0; s < samples; ++s) {
    std::vector<double> d(dim);
    for (double& x : d) x = rng.normal();
    double norm = vec_norm(d);
    if (norm == 0.0) continue;
    double target = radius * (1.0 - rng.uniform());  // norm in (0, radius]
    for (double& x : d) x *= target / norm;

    std::vector<double> point(w.begin(), w.end());
    for (std::size_t i = 0; i < dim; ++i) point[i] += d[i];
    std::vector<double> g = objective.gradient(point);
    std::vector<double> hd = matvec(hess, d);
    std::vector<double> b(dim);
    for (std::size_t i = 0; i < dim; ++i) b[i] = g[i] - g0[i] - hd[i];
    deltas.push_back(std::move(d));
    residuals.push_back(std::move(b));
  }

  double best = 0.0;
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    for (std::size_t j = i + 1; j < deltas.size(); ++j) {
      double dist = 0.0, diff = 0.0;
      for (std::size_t k = 0; k < dim; ++k) {
        double dd = deltas[i][k] - deltas[j][k];
        double db = residuals[i][k] - residuals[j][k];
        dist += dd * dd;
        diff += db * db;
      }
      if (dist == 0.0) continue;
      best = std::max(best, std::sqrt(diff) / std::sqrt(dist));
    }
  }
  return safety * best;
}

RateEstimate expected_rate_at(const Objective& objective, std::span<const double> w_current,
                              std::span<const double> delta, const PruneConfig& config,
                              int client_id) {
  Matrix h = hessian(objective, w_current, config.hessian_cap);
  std::vector<double> eigs = sym_eigenvalues(h);
  double radius = config.lipschitz_radius * vec_norm(delta);
  Rng rng = Rng::stream(config.seed, "lipschitz", static_cast<std::uint64_t>(client_id));
  double lip = lipschitz_estimate_at(objective, w_current, h, radius, config.lipschitz_samples,
                                     config.lipschitz_safety, std::move(rng));
  auto [m, rate] = gap_rate(eigs, lip, config.p_max);
  RateEstimate est;
  est.client_id = client_id;
  est.hessian_dim = eigs.size();
  est.gap_index = m;
  est.rate = rate;
  est.lipschitz = lip;
  return est;
}

RateEstimate expected_rate_client(const SnapshotPair& snapshot, const Dataset& dataset,
                                  const PruneConfig& config, int client_id) {
  if (dataset.empty()) throw std::invalid_argument("expected_rate_client: empty dataset");
  ModelLossObjective obj(snapshot.current, dataset);
  FlatParams w = flatten_params(snapshot.current);
  std::vector<double> delta = snapshot.delta();
  return expected_rate_at(obj, w.values, delta, config, client_id);
}

double lipschitz_estimate(const SnapshotPair& snapshot, const Dataset& dataset, int samples,
                          double radius, double safety, std::uint64_t seed) {
  if (dataset.empty()) throw std::invalid_argument("lipschitz_estimate: empty dataset");
  ModelLossObjective obj(snapshot.current, dataset);
  FlatParams w = flatten_params(snapshot.current);
  Matrix h = hessian(obj, w.values, std::max<std::size_t>(w.size(), 1));
  std::vector<double> delta = snapshot.delta();
  return lipschitz_estimate_at(obj, w.values, h, radius * vec_norm(delta), samples, safety,
                               Rng::stream(seed, "lipschitz", 0));
}

double aggregate_rate(const std::vector<RateEstimate>& estimates,
                      const std::vector<double>& sample_counts,
                      const std::vector<double>& divergences, double epsilon) {
  if (estimates.empty()) throw std::invalid_argument("aggregate_rate: empty estimate list");
  if (estimates.size() != sample_counts.size() || estimates.size() != divergences.size())
    throw std::invalid_argument("aggregate_rate: list lengths differ");
  double total = 0.0;
  for (std::size_t k = 0; k < estimates.size(); ++k) {
    if (divergences[k] < 0.0) throw std::invalid_argument("aggregate_rate: negative divergence");
    total += sample_counts[k] / (divergences[k] + epsilon);
  }
  if (total <= 0.0) throw std::invalid_argument("aggregate_rate: zero total weight");
  double p = 0.0;
  for (std::size_t k = 0; k < estimates.size(); ++k)
    p += (sample_counts[k] / (divergences[k] + epsilon)) / total * estimates[k].rate;
  return p;
}

double global_threshold(const FlatParams& params, double p_star) {
  if (params.values.empty()) throw std::invalid_argument("global_threshold: empty parameters");
  if (p_star < 0.0 || p_star > 1.0)
    throw std::invalid_argument("global_threshold: rate outside [0, 1]");
  const std::size_t r = params.size();
  std::size_t pos = static_cast<std::size_t>(static_cast<double>(r) * p_star);
  if (pos == 0) return 0.0;
  if (pos > r) pos = r;
  std::vector<std::size_t> order(r);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    double ma = std::abs(params.values[a]);
    double mb = std::abs(params.values[b]);
    return ma != mb ? ma < mb : a < b;
  });
  return std::abs(params.values[order[pos - 1]]);
}

std::vector<std::size_t> prunable_conv_layers(const Model& model) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    if (model.layers[i].kind != LayerKind::Conv2D) continue;
    for (std::size_t j = i + 1; j < model.layers.size(); ++j) {
      LayerKind k = model.layers[j].kind;
      if (k == LayerKind::ReLU || k == LayerKind::Flatten) continue;
      if (k == LayerKind::Conv2D || k == LayerKind::Dense) out.push_back(i);
      break;
    }
  }
  return out;
}

std::vector<double> layer_rates(const Model& model, double threshold) {
  if (threshold < 0.0) throw std::invalid_argument("layer_rates: negative threshold");
  std::vector<double> rates;
  for (std::size_t l : prunable_conv_layers(model)) {
    const Layer& layer = model.layers[l];
    std::size_t below = 0;
    for (double v : layer.weights.data)
      if (std::abs(v) < threshold) ++below;
    for (double v : layer.bias.data)
      if (std::abs(v) < threshold) ++below;
    rates.push_back(static_cast<double>(below) /
                    static_cast<double>(layer.parameter_count()));
  }
  return rates;
}

std::vector<double> feature_map_ranks(const Model& model, const Tensor& calibration_batch,
                                      std::size_t layer_index) {
  if (layer_index >= model.layers.size() ||
      model.layers[layer_index].kind != LayerKind::Conv2D)
    throw std::invalid_argument("feature_map_ranks: layer " + std::to_string(layer_index) +
                                " is not a Conv2D layer");
  ActivationTrace trace = forward_activations(model, calibration_batch);
  const Tensor& maps = trace.activations[layer_index + 1];  // [n, filters, h, w]
  const std::size_t n = maps.shape[0];
  const std::size_t filters = maps.shape[1];
  const std::size_t h = maps.shape[2];
  const std::size_t w = maps.shape[3];

  std::vector<double> ranks(filters, 0.0);
  Matrix slice(h, w);
  for (std::size_t j = 0; j < filters; ++j) {
    double sum = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) slice.at(y, x) = maps.at4(b, j, y, x);
      sum += static_cast<double>(matrix_rank(slice));
    }
    ranks[j] = sum / static_cast<double>(n);
  }
  return ranks;
}

Tensor draw_calibration_batch(const Dataset& dataset, int size, Rng rng) {
  if (dataset.empty()) throw std::invalid_argument("draw_calibration_batch: empty dataset");
  std::vector<std::size_t> idx(dataset.size());
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(idx);
  if (idx.size() > static_cast<std::size_t>(size)) idx.resize(static_cast<std::size_t>(size));
  std::sort(idx.begin(), idx.end());
  return dataset.batch_tensor(idx);
}

std::vector<double> decentralized_ranks(const Dataset& device_data, const Model& model,
                                        std::size_t layer_index, int calibration_batch,
                                        std::uint64_t seed) {
  Tensor batch =
      draw_calibration_batch(device_data, calibration_batch, Rng::stream(seed, "calibration"));
  return feature_map_ranks(model, batch, layer_index);
}

namespace {

// Removes the input slices matching pruned channels of layer `conv_index`
// from the next parameterized layer. `spatial` is the conv layer's output
// [h, w], which fixes the flatten layout for a following dense layer.
void rewire_consumer(Model& model, std::size_t conv_index, const std::vector<int>& preserved,
                     std::array<int, 3> out_shape) {
  for (std::size_t j = conv_index + 1; j < model.layers.size(); ++j) {
    Layer& next = model.layers[j];
    if (next.kind == LayerKind::ReLU || next.kind == LayerKind::Flatten) continue;
    if (next.kind == LayerKind::Conv2D) {
      const int keep = static_cast<int>(preserved.size());
      Tensor w = Tensor::zeros({static_cast<std::size_t>(next.out_channels),
                                static_cast<std::size_t>(keep),
                                static_cast<std::size_t>(next.kernel_size),
                                static_cast<std::size_t>(next.kernel_size)});
      for (int oc = 0; oc < next.out_channels; ++oc)
        for (int ic = 0; ic < keep; ++ic)
          for (int kh = 0; kh < next.kernel_size; ++kh)
            for (int kw = 0; kw < next.kernel_size; ++kw)
              w.at4(oc, ic, kh, kw) = next.weights.at4(oc, preserved[ic], kh, kw);
      next.weights = std::move(w);
      next.in_channels = keep;
    } else {
      // Dense after flatten: one contiguous column block of h*w per channel.
      const int hw = out_shape[1] * out_shape[2];
      if (next.in_dim != out_shape[0] * hw)
        throw std::runtime_error("prune_model: dense layer " + std::to_string(j) +
                                 " does not consume the flattened conv output");
      const int keep = static_cast<int>(preserved.size());
      const int new_in = keep * hw;
      Tensor w = Tensor::zeros({static_cast<std::size_t>(next.out_dim),
                                static_cast<std::size_t>(new_in)});
      for (int o = 0; o < next.out_dim; ++o)
        for (int c = 0; c < keep; ++c)
          for (int s = 0; s < hw; ++s)
            w.at2(o, c * hw + s) = next.weights.at2(o, preserved[c] * hw + s);
      next.weights = std::move(w);
      next.in_dim = new_in;
    }
    return;
  }
  throw std::runtime_error("prune_model: no consumer layer to rewire");
}

}  // namespace

std::pair<Model, PruningPlan> prune_model(const Model& model, const std::vector<double>& rates,
                                          const Tensor& calibration_batch, double p_star,
                                          std::optional<double> threshold) {
  std::vector<std::size_t> prune_list = prunable_conv_layers(model);
  if (rates.size() != prune_list.size())
    throw std::invalid_argument("prune_model: expected one rate per prunable layer");

  PruningPlan plan;
  plan.aggregated_rate = p_star;
  plan.threshold = threshold;
  for (std::size_t i = 0; i < model.layers.size(); ++i)
    if (model.layers[i].kind == LayerKind::Conv2D &&
        std::find(prune_list.begin(), prune_list.end(), i) == prune_list.end())
      plan.warnings.push_back("layer " + std::to_string(i) +
                              " (conv2d): no consumer to rewire, excluded from pruning");

  Model pruned = model;
  for (std::size_t li = 0; li < prune_list.size(); ++li) {
    const std::size_t l = prune_list[li];
    double rate = rates[li];
    if (rate < 0.0 || rate > 1.0)
      throw std::invalid_argument("prune_model: rate outside [0, 1] for layer " +
                                  std::to_string(l));
    const int d = model.layers[l].out_channels;
    int keep_count = d - static_cast<int>(static_cast<double>(d) * rate);
    if (keep_count < 1) keep_count = 1;

    // Ranks come from the unpruned model so every layer sees its original
    // inputs; ties break toward the lower filter index.
    std::vector<double> ranks = feature_map_ranks(model, calibration_batch, l);
    std::vector<int> order(static_cast<std::size_t>(d));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      return ranks[static_cast<std::size_t>(a)] != ranks[static_cast<std::size_t>(b)]
                 ? ranks[static_cast<std::size_t>(a)] < ranks[static_cast<std::size_t>(b)]
                 : a < b;
    });
    std::vector<int> preserved(order.end() - keep_count, order.end());
    std::sort(preserved.begin(), preserved.end());

    // Surgery on the working model: keep the preserved output channels, then
    // rewire the consumer's input side.
    Layer& layer = pruned.layers[l];
    Tensor w = Tensor::zeros({static_cast<std::size_t>(keep_count),
                              static_cast<std::size_t>(layer.in_channels),
                              static_cast<std::size_t>(layer.kernel_size),
                              static_cast<std::size_t>(layer.kernel_size)});
    Tensor b = Tensor::zeros({static_cast<std::size_t>(keep_count)});
    for (int oc = 0; oc < keep_count; ++oc) {
      b.data[oc] = layer.bias.data[preserved[oc]];
      for (int ic = 0; ic < layer.in_channels; ++ic)
        for (int kh = 0; kh < layer.kernel_size; ++kh)
          for (int kw = 0; kw < layer.kernel_size; ++kw)
            w.at4(oc, ic, kh, kw) = layer.weights.at4(preserved[oc], ic, kh, kw);
    }
    layer.weights = std::move(w);
    layer.bias = std::move(b);
    layer.out_channels = keep_count;
    rewire_consumer(pruned, l, preserved, model.output_shape_after(l));

    LayerPlan lp;
    lp.layer_index = l;
    lp.rate = rate;
    lp.preserved = std::move(preserved);
    lp.ranks = std::move(ranks);
    plan.layers.push_back(std::move(lp));
  }
  pruned.validate();
  return {std::move(pruned), std::move(plan)};
}

double forward_flops(const Model& model) {
  double total = 0.0;
  std::array<int, 3> shape = model.input_shape;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const Layer& l = model.layers[i];
    if (l.kind == LayerKind::Conv2D) {
      std::array<int, 3> out = model.output_shape_after(i);
      total += 2.0 * l.kernel_size * l.kernel_size * l.in_channels * l.out_channels * out[1] *
               out[2];
      shape = out;
    } else if (l.kind == LayerKind::Dense) {
      total += 2.0 * l.in_dim * l.out_dim;
    }
  }
  (void)shape;
  return total;
}

double flops_count(const Model& model) { return forward_flops(model) / 1e6; }

std::string PruningPlan::to_json() const {
  std::string out = "{\"p_star\":" + format_double(aggregated_rate);
  out += ",\"threshold\":";
  out += threshold.has_value() ? format_double(*threshold) : "null";
  out += ",\"layers\":[";
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerPlan& lp = layers[i];
    if (i) out += ',';
    out += "{\"layer_index\":" + std::to_string(lp.layer_index);
    out += ",\"rate\":" + format_double(lp.rate);
    out += ",\"preserved\":";
    json_append_int_array(out, lp.preserved);
    out += ",\"ranks\":";
    json_append_double_array(out, lp.ranks);
    out += '}';
  }
  out += "],\"warnings\":[";
  for (std::size_t i = 0; i < warnings.size(); ++i) {
    if (i) out += ',';
    json_append_string(out, warnings[i]);
  }
  out += "]}";
  return out;
}

}  // namespace fedsim
