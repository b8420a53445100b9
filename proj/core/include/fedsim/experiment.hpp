#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fedsim/config.hpp"
#include "fedsim/fed.hpp"
#include "fedsim/prune.hpp"

namespace fedsim {

struct SummaryReport {
  std::string mode;
  std::uint64_t seed = 0;
  int rounds = 0;
  double final_test_accuracy = 0.0;
  double final_test_loss = 0.0;
  double target_accuracy = 0.9;
  int rounds_to_target = -1;              // -1: target never reached
  double sim_seconds_to_target = 0.0;     // NaN when never reached (serialized "NaN")
  double total_sim_seconds = 0.0;
  double total_device_mflops = 0.0;
  double mflops_per_sample_initial = 0.0;
  double mflops_per_sample_final = 0.0;
  std::optional<double> p_star;           // set when the run pruned
  std::string plan_digest;                // empty when the run did not prune
  std::string dataset_digest;

  std::string to_json() const;
  static SummaryReport from_json(const std::string& text);
};

struct ExperimentResult {
  SummaryReport summary;
  std::vector<RoundRecord> records;
  std::optional<PruningPlan> plan;
  Model final_model;
  std::string metrics_jsonl;  // exact bytes written to metrics.jsonl
  std::string metrics_csv;
};

// Runs the configured experiment end to end: synthesize data, partition,
// train for T rounds (pruning once at prune_at_round in pruning modes), and
// collect metrics. When config.out_dir is nonempty the effective config,
// partrition manifest, metrics (JSONL + CSV), summary, pruning plan and final
// model are written there; wall-clock timings go to run.log only, so the
// metrics files are byte-identical across reruns and worker counts.
ExperimentResult run_experiment(const ExperimentConfig& config);

// Serialization for one round record, shared by the JSONL writer and tests.
std::string round_record_json(const RoundRecord& record, double cum_sim_seconds);
std::string round_record_csv(const RoundRecord& record, double cum_sim_seconds);

}  // namespace fedsim
