#include "fedsim/experiment.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "fedsim/divergence.hpp"
#include "fedsim/jsonfmt.hpp"
#include "fedsim/parallel.hpp"

namespace fedsim {

namespace {

std::string opt_double_json(double v) {
  return std::isnan(v) ? std::string("null") : format_double(v);
}

std::string selected_csv(const std::vector<int>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ';';
    out += std::to_string(ids[i]);
  }
  return out;
}

std::uint64_t string_digest(const std::string& s) { return fnv1a(s); }

std::string digest_hex(std::uint64_t h) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

// Stratified train/test split: the first train_per_class samples of each
// class (generation order is class-major, so this is deterministic).
void split_train_test(const Dataset& full, int train_per_class, Dataset& train, Dataset& test) {
  std::vector<std::size_t> train_idx, test_idx;
  std::vector<int> seen(static_cast<std::size_t>(full.num_classes), 0);
  for (std::size_t i = 0; i < full.size(); ++i) {
    int c = full.samples[i].label;
    if (seen[static_cast<std::size_t>(c)]++ < train_per_class)
      train_idx.push_back(i);
    else
      test_idx.push_back(i);
  }
  train = full.subset(train_idx);
  test = full.subset(test_idx);
}

struct PruneOutcome {
  PruningPlan plan;
  Model model;
  double mflops_before = 0.0;
  double mflops_after = 0.0;
};

PruneOutcome run_pruning(const ExperimentConfig& config, const Model& initial_model,
                         const Model& current, const Dataset& server_data,
                         const LabelDistribution& server_dist,
                         const std::vector<DeviceState>& devices,
                         const LabelDistribution& global_dist, int round, std::ostream& log) {
  PruneConfig pc;
  pc.hessian_cap = config.prune.hessian_cap;
  pc.p_max = config.prune.p_max;
  pc.lipschitz_samples = config.prune.lipschitz_samples;
  pc.lipschitz_radius = config.prune.lipschitz_radius;
  pc.lipschitz_safety = config.prune.lipschitz_safety;
  pc.calibration_batch = config.prune.calibration_batch;
  pc.epsilon = config.prune.epsilon;
  pc.seed = config.seed;
  pc.workers = config.workers;

  double p_star;
  std::optional<double> threshold;
  std::vector<double> rates;

  if (config.mode == ExperimentMode::FixedRatePrune) {
    p_star = config.prune.fixed_rate;
    rates.assign(prunable_conv_layers(current).size(), config.prune.fixed_rate);
  } else {
    SnapshotPair snapshot{initial_model, current};
    const bool with_server = !server_data.empty();
    // Client 0 is the server when it holds data; devices follow in id order.
    std::size_t n_clients = devices.size() + (with_server ? 1 : 0);
    std::vector<RateEstimate> estimates(n_clients);
    std::vector<double> counts(n_clients);
    std::vector<double> divergences(n_clients);
    parallel_for(n_clients, config.workers, [&](std::size_t i) {
      if (with_server && i == 0) {
        estimates[i] = expected_rate_client(snapshot, server_data, pc, 0);
        counts[i] = static_cast<double>(server_data.size());
        divergences[i] = noniid_degree(server_dist, global_dist);
      } else {
        const DeviceState& dev = devices[i - (with_server ? 1 : 0)];
        estimates[i] = expected_rate_client(snapshot, dev.data, pc, dev.id + 1);
        counts[i] = static_cast<double>(dev.sample_count());
        divergences[i] = noniid_degree(dev.dist, global_dist);
      }
    });
    for (const RateEstimate& est : estimates)
      log << "rate estimate client " << est.client_id << ": dim " << est.hessian_dim << " gap "
          << est.gap_index << " rate " << est.rate << " lipschitz " << est.lipschitz << "\n";
    p_star = aggregate_rate(estimates, counts, divergences, pc.epsilon);
    threshold = global_threshold(flatten_params(current), p_star);
    rates = layer_rates(current, *threshold);
  }

  // Feature-map ranks come from server data when available; otherwise the
  // lowest-id device computes them locally and only ranks travel.
  const Dataset& rank_source = server_data.empty() ? devices.front().data : server_data;
  Tensor calibration =
      draw_calibration_batch(rank_source, config.prune.calibration_batch,
                             Rng::stream(config.seed, "calibration", static_cast<std::uint64_t>(round)));

  PruneOutcome outcome;
  outcome.mflops_before = flops_count(current);
  auto [pruned, plan] = prune_model(current, rates, calibration, p_star, threshold);
  outcome.mflops_after = flops_count(pruned);
  outcome.model = std::move(pruned);
  outcome.plan = std::move(plan);
  return outcome;
}

}  // namespace

std::string round_record_json(const RoundRecord& record, double cum_sim_seconds) {
  std::string out = "{\"round\":" + std::to_string(record.round);
  out += ",\"server_accuracy\":" + opt_double_json(record.server_accuracy);
  out += ",\"test_accuracy\":" + opt_double_json(record.test_accuracy);
  out += ",\"test_loss\":" + opt_double_json(record.test_loss);
  out += ",\"tau_eff\":" + format_double(record.tau_eff);
  out += ",\"selected\":";
  json_append_int_array(out, record.selected);
  out += ",\"device_mflops\":" + format_double(record.device_mflops);
  out += ",\"sim_seconds\":" + format_double(record.sim_seconds);
  out += ",\"cum_sim_seconds\":" + format_double(cum_sim_seconds);
  out += "}";
  return out;
}

std::string round_record_csv(const RoundRecord& record, double cum_sim_seconds) {
  auto num = [](double v) { return std::isnan(v) ? std::string("NaN") : format_double(v); };
  std::string out = std::to_string(record.round);
  out += ',' + num(record.server_accuracy);
  out += ',' + num(record.test_accuracy);
  out += ',' + num(record.test_loss);
  out += ',' + num(record.tau_eff);
  out += ',' + selected_csv(record.selected);
  out += ',' + num(record.device_mflops);
  out += ',' + num(record.sim_seconds);
  out += ',' + num(cum_sim_seconds);
  return out;
}

std::string SummaryReport::to_json() const {
  std::string out = "{\"mode\":";
  json_append_string(out, mode);
  out += ",\"seed\":" + std::to_string(seed);
  out += ",\"rounds\":" + std::to_string(rounds);
  out += ",\"final_test_accuracy\":" + opt_double_json(final_test_accuracy);
  out += ",\"final_test_loss\":" + opt_double_json(final_test_loss);
  out += ",\"target_accuracy\":" + format_double(target_accuracy);
  out += ",\"rounds_to_target\":" +
         (rounds_to_target < 0 ? std::string("null") : std::to_string(rounds_to_target));
  out += ",\"sim_seconds_to_target\":" +
         (std::isnan(sim_seconds_to_target) ? std::string("\"NaN\"")
                                            : format_double(sim_seconds_to_target));
  out += ",\"total_sim_seconds\":" + format_double(total_sim_seconds);
  out += ",\"total_device_mflops\":" + format_double(total_device_mflops);
  out += ",\"mflops_per_sample_initial\":" + format_double(mflops_per_sample_initial);
  out += ",\"mflops_per_sample_final\":" + format_double(mflops_per_sample_final);
  out += ",\"p_star\":" + (p_star.has_value() ? format_double(*p_star) : std::string("null"));
  out += ",\"plan_digest\":";
  json_append_string(out, plan_digest);
  out += ",\"dataset_digest\":";
  json_append_string(out, dataset_digest);
  out += "}";
  return out;
}

SummaryReport SummaryReport::from_json(const std::string& text) {
  nlohmann::json doc = nlohmann::json::parse(text);
  SummaryReport s;
  s.mode = doc.at("mode").get<std::string>();
  s.seed = doc.at("seed").get<std::uint64_t>();
  s.rounds = doc.at("rounds").get<int>();
  s.final_test_accuracy = doc.at("final_test_accuracy").is_null()
                              ? std::numeric_limits<double>::quiet_NaN()
                              : doc.at("final_test_accuracy").get<double>();
  s.final_test_loss = doc.at("final_test_loss").is_null()
                          ? std::numeric_limits<double>::quiet_NaN()
                          : doc.at("final_test_loss").get<double>();
  s.target_accuracy = doc.at("target_accuracy").get<double>();
  s.rounds_to_target =
      doc.at("rounds_to_target").is_null() ? -1 : doc.at("rounds_to_target").get<int>();
  const auto& t = doc.at("sim_seconds_to_target");
  s.sim_seconds_to_target =
      t.is_string() ? std::numeric_limits<double>::quiet_NaN() : t.get<double>();
  s.total_sim_seconds = doc.at("total_sim_seconds").get<double>();
  s.total_device_mflops = doc.at("total_device_mflops").get<double>();
  s.mflops_per_sample_initial = doc.at("mflops_per_sample_initial").get<double>();
  s.mflops_per_sample_final = doc.at("mflops_per_sample_final").get<double>();
  if (!doc.at("p_star").is_null()) s.p_star = doc.at("p_star").get<double>();
  s.plan_digest = doc.at("plan_digest").get<std::string>();
  s.dataset_digest = doc.at("dataset_digest").get<std::string>();
  return s;
}

ExperimentResult run_experiment(const ExperimentConfig& raw_config) {
  const ExperimentConfig config = raw_config.resolved();
  config.validate();

  const bool write_files = !config.out_dir.empty();
  std::filesystem::path out_dir(config.out_dir);
  if (write_files) std::filesystem::create_directories(out_dir);
  std::ostringstream log;
  const auto wall_start = std::chrono::steady_clock::now();

  // Data: one pool, stratified into train/test, then train split across the
  // server and the devices.
  Dataset full = generate_synthetic(
      config.data.classes, {config.data.channels, config.data.height, config.data.width},
      config.data.train_per_class + config.data.test_per_class, config.data.noise_sigma,
      config.seed);
  Dataset train, test;
  split_train_test(full, config.data.train_per_class, train, test);
  Partition part = partition(train, config.partition);

  std::vector<DeviceState> devices;
  devices.reserve(part.devices.size());
  std::vector<LabelDistribution> device_dists;
  std::vector<double> device_counts;
  for (std::size_t i = 0; i < part.devices.size(); ++i) {
    DeviceState dev;
    dev.id = static_cast<int>(i);
    dev.data = std::move(part.devices[i]);
    dev.dist = label_distribution(dev.data);
    device_dists.push_back(dev.dist);
    device_counts.push_back(static_cast<double>(dev.data.size()));
    devices.push_back(std::move(dev));
  }
  LabelDistribution global_dist = global_distribution(device_dists, device_counts);

  ServerState state;
  state.global = init_model_params(config.architecture(), config.seed);
  state.server_data = part.server;
  if (!state.server_data.empty()) state.server_dist = label_distribution(state.server_data);

  const Model initial_model = state.global;
  const UpdateMode update_mode =
      mode_uses_server_update(config.mode) ? UpdateMode::FedDU : UpdateMode::FedAvg;

  ExperimentResult result;
  result.summary.mode = mode_name(config.mode);
  result.summary.seed = config.seed;
  result.summary.rounds = config.fed.total_rounds;
  result.summary.target_accuracy = config.target_accuracy;
  result.summary.mflops_per_sample_initial = flops_count(state.global);
  result.summary.dataset_digest = dataset_digest(train);
  result.summary.final_test_accuracy = evaluate(state.global, test).accuracy;
  result.summary.final_test_loss = evaluate(state.global, test).mean_loss;
  result.summary.sim_seconds_to_target = std::numeric_limits<double>::quiet_NaN();

  std::string jsonl;
  std::string csv =
      "round,server_accuracy,test_accuracy,test_loss,tau_eff,selected,device_mflops,"
      "sim_seconds,cum_sim_seconds\n";

  double cum_sim = 0.0;
  double total_mflops = 0.0;
  for (int t = 0; t < config.fed.total_rounds; ++t) {
    RoundRecord rec = run_round(state, devices, config.fed, update_mode, &test, global_dist);
    cum_sim += rec.sim_seconds;
    total_mflops += rec.device_mflops;
    jsonl += round_record_json(rec, cum_sim) + "\n";
    csv += round_record_csv(rec, cum_sim) + "\n";
    log << "round " << rec.round << " wall_seconds " << rec.wall_seconds << "\n";

    if (result.summary.rounds_to_target < 0 && !std::isnan(rec.test_accuracy) &&
        rec.test_accuracy >= config.target_accuracy) {
      result.summary.rounds_to_target = t + 1;
      result.summary.sim_seconds_to_target = cum_sim;
    }

    if (mode_prunes(config.mode) && t == config.prune.prune_at_round) {
      const auto prune_start = std::chrono::steady_clock::now();
      PruneOutcome outcome =
          run_pruning(config, initial_model, state.global, state.server_data, state.server_dist,
                      devices, global_dist, t, log);
      state.global = std::move(outcome.model);
      result.plan = std::move(outcome.plan);
      result.summary.p_star = result.plan->aggregated_rate;
      result.summary.plan_digest = digest_hex(string_digest(result.plan->to_json()));

      std::string event = "{\"event\":\"prune\",\"round\":" + std::to_string(t);
      event += ",\"p_star\":" + format_double(result.plan->aggregated_rate);
      event += ",\"threshold\":" + (result.plan->threshold.has_value()
                                        ? format_double(*result.plan->threshold)
                                        : std::string("null"));
      event += ",\"layer_rates\":[";
      for (std::size_t i = 0; i < result.plan->layers.size(); ++i) {
        if (i) event += ',';
        event += format_double(result.plan->layers[i].rate);
      }
      event += "],\"preserved_counts\":[";
      for (std::size_t i = 0; i < result.plan->layers.size(); ++i) {
        if (i) event += ',';
        event += std::to_string(result.plan->layers[i].preserved.size());
      }
      event += "],\"mflops_before\":" + format_double(outcome.mflops_before);
      event += ",\"mflops_after\":" + format_double(outcome.mflops_after);
      event += "}";
      jsonl += event + "\n";
      log << "prune at round " << t << " wall_seconds "
          << std::chrono::duration<double>(std::chrono::steady_clock::now() - prune_start).count()
          << "\n";
      for (const std::string& w : result.plan->warnings) log << "warning: " << w << "\n";
    }

    result.summary.final_test_accuracy = rec.test_accuracy;
    result.summary.final_test_loss = rec.test_loss;
    result.records.push_back(std::move(rec));
  }

  result.summary.total_sim_seconds = cum_sim;
  result.summary.total_device_mflops = total_mflops;
  result.summary.mflops_per_sample_final = flops_count(state.global);
  result.final_model = state.global;
  jsonl += result.summary.to_json() + "\n";
  result.metrics_jsonl = std::move(jsonl);
  result.metrics_csv = std::move(csv);

  if (write_files) {
    auto write = [&](const char* name, const std::string& content) {
      std::ofstream f(out_dir / name, std::ios::binary);
      if (!f) throw std::runtime_error("run_experiment: cannot write " + std::string(name));
      f << content;
    };
    write("effective_config.json", config_to_json(config));
    write("partition.json", partition_manifest_json(part));
    write("metrics.jsonl", result.metrics_jsonl);
    write("metrics.csv", result.metrics_csv);
    write("summary.json", result.summary.to_json() + "\n");
    save_model(result.final_model, (out_dir / "model_final.json").string());
    if (result.plan) write("plan.json", result.plan->to_json() + "\n");
    log << "total wall_seconds "
        << std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count()
        << "\n";
    write("run.log", log.str());
  }
  return result;
}

}  // namespace fedsim
