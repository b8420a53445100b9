#include <cstdio>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fedsim/config.hpp"
#include "fedsim/experiment.hpp"
#include "fedsim/prune.hpp"
#include "fedsim/report.hpp"

namespace {

int cmd_run(const std::string& config_path, const std::string& seed_override,
            const std::string& mode_override, const std::string& out_override, int workers) {
  fedsim::ExperimentConfig config = fedsim::load_config(config_path);
  if (!seed_override.empty()) config.seed = std::stoull(seed_override);
  if (!mode_override.empty()) config.mode = fedsim::mode_from_name(mode_override);
  if (!out_override.empty()) config.out_dir = out_override;
  if (workers > 0) config.workers = workers;
  if (config.out_dir.empty())
    config.out_dir = std::string("runs/") + fedsim::mode_name(config.mode) + "_seed" +
                     std::to_string(config.seed);
  config = config.resolved();
  config.validate();

  fedsim::ExperimentResult result = fedsim::run_experiment(config);
  std::cout << "run complete: mode=" << result.summary.mode << " seed=" << result.summary.seed
            << " rounds=" << result.summary.rounds
            << " final_accuracy=" << result.summary.final_test_accuracy << "\n"
            << "metrics written to " << config.out_dir << "\n";
  return 0;
}

int cmd_compare(const std::vector<std::string>& paths, const std::string& csv_out) {
  fedsim::ComparisonReport report = fedsim::compare_report_files(paths);
  for (const std::string& w : report.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << report.text;
  if (!csv_out.empty()) {
    std::FILE* f = std::fopen(csv_out.c_str(), "wb");
    if (!f) throw std::runtime_error("compare: cannot write " + csv_out);
    std::fwrite(report.csv.data(), 1, report.csv.size(), f);
    std::fclose(f);
    std::cout << "csv written to " << csv_out << "\n";
  }
  return 0;
}

int cmd_inspect(const std::string& model_path) {
  fedsim::Model model = fedsim::load_model(model_path);
  std::cout << "input shape: [" << model.input_shape[0] << ", " << model.input_shape[1] << ", "
            << model.input_shape[2] << "]\n";
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const fedsim::Layer& l = model.layers[i];
    std::cout << "layer " << i << ": " << fedsim::layer_kind_name(l.kind);
    if (l.kind == fedsim::LayerKind::Conv2D)
      std::cout << " in=" << l.in_channels << " out=" << l.out_channels << " k=" << l.kernel_size
                << " stride=" << l.stride << " pad=" << l.padding;
    else if (l.kind == fedsim::LayerKind::Dense)
      std::cout << " in=" << l.in_dim << " out=" << l.out_dim;
    if (l.has_params()) std::cout << " params=" << l.parameter_count();
    std::cout << "\n";
  }
  std::cout << "total parameters: " << model.parameter_count() << "\n";
  std::cout << "forward cost: " << fedsim::flops_count(model) << " MFLOPs/sample\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fedsim: single-process federated learning simulator with server-side data"};
  app.require_subcommand(1);

  std::string config_path, seed_override, mode_override, out_override;
  int workers = 0;
  CLI::App* run = app.add_subcommand("run", "Run one experiment from a config file");
  run->add_option("--config", config_path, "Experiment config (JSON)")->required();
  run->add_option("--seed", seed_override, "Override the config seed");
  run->add_option("--mode", mode_override,
                  "Override the mode (fedavg|feddu|fedap|fedduap|fixed-rate-prune)");
  run->add_option("--out", out_override, "Output directory");
  run->add_option("--workers", workers, "Worker threads (results are identical for any count)");

  std::vector<std::string> summary_paths;
  std::string csv_out;
  CLI::App* compare = app.add_subcommand("compare", "Tabulate two or more run summaries");
  compare->add_option("summaries", summary_paths, "summary.json files")
      ->required()
      ->expected(2, -1);
  compare->add_option("--csv", csv_out, "Also write the table as CSV");

  std::string model_path;
  CLI::App* inspect = app.add_subcommand("inspect-model", "Describe a serialized model");
  inspect->add_option("model", model_path, "model JSON document")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed())
      return cmd_run(config_path, seed_override, mode_override, out_override, workers);
    if (compare->parsed()) return cmd_compare(summary_paths, csv_out);
    if (inspect->parsed()) return cmd_inspect(model_path);
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::string escaped;
    for (char c : msg) {
      if (c == '"' || c == '\\') escaped += '\\';
      escaped += c;
    }
    std::cerr << "{\"error\":\"" << escaped << "\"}\n";
    return 1;
  }
  return 0;
}
