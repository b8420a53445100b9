#include "fedsim/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "fedsim/jsonfmt.hpp"

namespace fedsim {

const char* mode_name(ExperimentMode mode) {
  switch (mode) {
    case ExperimentMode::FedAvg: return "fedavg";
    case ExperimentMode::FedDU: return "feddu";
    case ExperimentMode::FedAP: return "fedap";
    case ExperimentMode::FedDUAP: return "fedduap";
    case ExperimentMode::FixedRatePrune: return "fixed-rate-prune";
  }
  return "?";
}

ExperimentMode mode_from_name(const std::string& name) {
  if (name == "fedavg") return ExperimentMode::FedAvg;
  if (name == "feddu") return ExperimentMode::FedDU;
  if (name == "fedap") return ExperimentMode::FedAP;
  if (name == "fedduap") return ExperimentMode::FedDUAP;
  if (name == "fixed-rate-prune") return ExperimentMode::FixedRatePrune;
  throw std::invalid_argument("config: unknown mode '" + name + "'");
}

bool mode_prunes(ExperimentMode mode) {
  return mode == ExperimentMode::FedAP || mode == ExperimentMode::FedDUAP ||
         mode == ExperimentMode::FixedRatePrune;
}

bool mode_uses_server_update(ExperimentMode mode) {
  return mode == ExperimentMode::FedDU || mode == ExperimentMode::FedDUAP;
}

namespace {

void check_keys(const nlohmann::json& obj, const std::set<std::string>& allowed,
                const std::string& scope) {
  for (const auto& [key, value] : obj.items())
    if (!allowed.count(key))
      throw std::invalid_argument("config: unknown key '" + key + "' in " + scope);
}

template <typename T>
void read_if(const nlohmann::json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

}  // namespace

void ExperimentConfig::validate() const {
  if (workers < 1) throw std::invalid_argument("config: workers must be >= 1");
  if (target_accuracy <= 0.0 || target_accuracy > 1.0)
    throw std::invalid_argument("config: target_accuracy must be in (0, 1]");
  if (data.classes < 2) throw std::invalid_argument("config: data.classes must be >= 2");
  if (data.train_per_class < 1)
    throw std::invalid_argument("config: data.train_per_class must be >= 1");
  if (data.test_per_class < 1)
    throw std::invalid_argument("config: data.test_per_class must be >= 1");
  if (data.noise_sigma < 0.0)
    throw std::invalid_argument("config: data.noise_sigma must be >= 0");
  if (data.channels < 1 || data.height < 1 || data.width < 1)
    throw std::invalid_argument("config: invalid data dimensions");
  partition.validate();
  FedConfig f = fed;
  f.num_devices = partition.num_devices;
  f.seed = seed;
  f.workers = workers;
  f.validate();
  if (model.conv_channels.empty())
    throw std::invalid_argument("config: model.conv_channels must not be empty");
  for (int c : model.conv_channels)
    if (c < 1) throw std::invalid_argument("config: model.conv_channels entries must be >= 1");
  if (model.kernel_size < 1 || model.stride < 1 || model.padding < 0)
    throw std::invalid_argument("config: invalid model geometry");
  architecture().validate();

  if (prune.p_max < 0.0 || prune.p_max > 1.0)
    throw std::invalid_argument("config: prune.p_max must be in [0, 1]");
  if (prune.calibration_batch < 1)
    throw std::invalid_argument("config: prune.calibration_batch must be >= 1");
  if (prune.fixed_rate < 0.0 || prune.fixed_rate > 1.0)
    throw std::invalid_argument("config: prune.fixed_rate must be in [0, 1]");
  if (prune.lipschitz_samples < 2)
    throw std::invalid_argument("config: prune.lipschitz_samples must be >= 2");
  if (prune.lipschitz_radius < 0.0 || prune.lipschitz_safety <= 0.0)
    throw std::invalid_argument("config: invalid prune.lipschitz settings");
  if (prune.epsilon <= 0.0) throw std::invalid_argument("config: prune.epsilon must be > 0");
  if (mode_prunes(mode)) {
    int at = prune.prune_at_round;
    if (at < 0) at = static_cast<int>(std::ceil(0.2 * fed.total_rounds));
    if (at >= fed.total_rounds)
      throw std::invalid_argument("config: prune.prune_at_round must be < fed.rounds for mode " +
                                  std::string(mode_name(mode)));
  }
}

ExperimentConfig ExperimentConfig::resolved() const {
  ExperimentConfig out = *this;
  if (out.prune.prune_at_round < 0)
    out.prune.prune_at_round = static_cast<int>(std::ceil(0.2 * out.fed.total_rounds));
  out.partition.seed = out.seed;
  out.fed.seed = out.seed;
  out.fed.workers = out.workers;
  out.fed.num_devices = out.partition.num_devices;
  return out;
}

Model ExperimentConfig::architecture() const {
  Model m;
  m.input_shape = {data.channels, data.height, data.width};
  int in_ch = data.channels;
  for (int out_ch : model.conv_channels) {
    m.layers.push_back(
        Layer::conv2d(in_ch, out_ch, model.kernel_size, model.stride, model.padding));
    m.layers.push_back(Layer::relu());
    in_ch = out_ch;
  }
  m.layers.push_back(Layer::flatten());
  std::array<int, 3> conv_out = m.output_shape_after(m.layers.size() - 1);
  m.layers.push_back(Layer::dense(conv_out[0], data.classes));
  return m;
}

std::string config_to_json(const ExperimentConfig& c) {
  ExperimentConfig r = c.resolved();
  std::string out = "{\n";
  out += "  \"mode\": \"" + std::string(mode_name(r.mode)) + "\",\n";
  out += "  \"seed\": " + std::to_string(r.seed) + ",\n";
  out += "  \"workers\": " + std::to_string(r.workers) + ",\n";
  out += "  \"target_accuracy\": " + format_double(r.target_accuracy) + ",\n";
  out += "  \"data\": {\"classes\": " + std::to_string(r.data.classes) +
         ", \"channels\": " + std::to_string(r.data.channels) +
         ", \"height\": " + std::to_string(r.data.height) +
         ", \"width\": " + std::to_string(r.data.width) +
         ", \"train_per_class\": " + std::to_string(r.data.train_per_class) +
         ", \"test_per_class\": " + std::to_string(r.data.test_per_class) +
         ", \"noise_sigma\": " + format_double(r.data.noise_sigma) + "},\n";
  out += "  \"partition\": {\"scheme\": \"";
  out += r.partition.scheme == PartitionSpec::Scheme::Dirichlet ? "dirichlet" : "shards";
  out += "\", \"alpha\": " + format_double(r.partition.alpha) +
         ", \"shards_per_device\": " + std::to_string(r.partition.shards_per_device) +
         ", \"devices\": " + std::to_string(r.partition.num_devices) +
         ", \"server_fraction\": " + format_double(r.partition.server_fraction) +
         ", \"server_scheme\": \"";
  out += r.partition.server_scheme == PartitionSpec::ServerScheme::Iid ? "iid" : "dirichlet";
  out += "\", \"server_alpha\": " + format_double(r.partition.server_alpha) + "},\n";
  out += "  \"fed\": {\"devices_per_round\": " + std::to_string(r.fed.devices_per_round) +
         ", \"local_epochs\": " + std::to_string(r.fed.local_epochs) +
         ", \"batch_size\": " + std::to_string(r.fed.batch_size) +
         ", \"learning_rate\": " + format_double(r.fed.learning_rate) +
         ", \"decay\": " + format_double(r.fed.decay) +
         ", \"server_c\": " + format_double(r.fed.server_c) + ", \"f_prime\": \"" + r.fed.f_prime +
         "\", \"rounds\": " + std::to_string(r.fed.total_rounds) +
         ", \"device_gflops\": " + format_double(r.fed.device_gflops) + "},\n";
  out += "  \"model\": {\"conv_channels\": [";
  for (std::size_t i = 0; i < r.model.conv_channels.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(r.model.conv_channels[i]);
  }
  out += "], \"kernel_size\": " + std::to_string(r.model.kernel_size) +
         ", \"stride\": " + std::to_string(r.model.stride) +
         ", \"padding\": " + std::to_string(r.model.padding) + "},\n";
  out += "  \"prune\": {\"prune_at_round\": " + std::to_string(r.prune.prune_at_round) +
         ", \"hessian_cap\": " + std::to_string(r.prune.hessian_cap) +
         ", \"p_max\": " + format_double(r.prune.p_max) +
         ", \"calibration_batch\": " + std::to_string(r.prune.calibration_batch) +
         ", \"fixed_rate\": " + format_double(r.prune.fixed_rate) +
         ", \"lipschitz_samples\": " + std::to_string(r.prune.lipschitz_samples) +
         ", \"lipschitz_radius\": " + format_double(r.prune.lipschitz_radius) +
         ", \"lipschitz_safety\": " + format_double(r.prune.lipschitz_safety) +
         ", \"epsilon\": " + format_double(r.prune.epsilon) + "}\n";
  out += "}\n";
  return out;
}

ExperimentConfig config_from_json(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("config: parse error: ") + e.what());
  }
  ExperimentConfig c;
  check_keys(doc, {"mode", "seed", "workers", "target_accuracy", "data", "partition", "fed",
                   "model", "prune", "out_dir"},
             "the top level");
  if (!doc.contains("mode")) throw std::invalid_argument("config: missing required key 'mode'");
  if (!doc.contains("seed")) throw std::invalid_argument("config: missing required key 'seed'");
  c.mode = mode_from_name(doc.at("mode").get<std::string>());
  c.seed = doc.at("seed").get<std::uint64_t>();
  read_if(doc, "workers", c.workers);
  read_if(doc, "target_accuracy", c.target_accuracy);
  read_if(doc, "out_dir", c.out_dir);

  if (doc.contains("data")) {
    const auto& d = doc.at("data");
    check_keys(d, {"classes", "channels", "height", "width", "train_per_class", "test_per_class",
                   "noise_sigma"},
               "'data'");
    read_if(d, "classes", c.data.classes);
    read_if(d, "channels", c.data.channels);
    read_if(d, "height", c.data.height);
    read_if(d, "width", c.data.width);
    read_if(d, "train_per_class", c.data.train_per_class);
    read_if(d, "test_per_class", c.data.test_per_class);
    read_if(d, "noise_sigma", c.data.noise_sigma);
  }
  // Config-level partition defaults (the bare PartitionSpec defaults to a
  // single device with no server share).
  c.partition.num_devices = 20;
  c.partition.server_fraction = 0.05;
  if (doc.contains("partition")) {
    const auto& p = doc.at("partition");
    check_keys(p, {"scheme", "alpha", "shards_per_device", "devices", "server_fraction",
                   "server_scheme", "server_alpha"},
               "'partition'");
    if (p.contains("scheme")) {
      std::string s = p.at("scheme").get<std::string>();
      if (s == "dirichlet")
        c.partition.scheme = PartitionSpec::Scheme::Dirichlet;
      else if (s == "shards")
        c.partition.scheme = PartitionSpec::Scheme::Shards;
      else
        throw std::invalid_argument("config: unknown partition.scheme '" + s + "'");
    }
    read_if(p, "alpha", c.partition.alpha);
    read_if(p, "shards_per_device", c.partition.shards_per_device);
    read_if(p, "devices", c.partition.num_devices);
    read_if(p, "server_fraction", c.partition.server_fraction);
    if (p.contains("server_scheme")) {
      std::string s = p.at("server_scheme").get<std::string>();
      if (s == "iid")
        c.partition.server_scheme = PartitionSpec::ServerScheme::Iid;
      else if (s == "dirichlet")
        c.partition.server_scheme = PartitionSpec::ServerScheme::Dirichlet;
      else
        throw std::invalid_argument("config: unknown partition.server_scheme '" + s + "'");
    }
    read_if(p, "server_alpha", c.partition.server_alpha);
  }
  if (doc.contains("fed")) {
    const auto& f = doc.at("fed");
    check_keys(f, {"devices_per_round", "local_epochs", "batch_size", "learning_rate", "decay",
                   "server_c", "f_prime", "rounds", "device_gflops"},
               "'fed'");
    read_if(f, "devices_per_round", c.fed.devices_per_round);
    read_if(f, "local_epochs", c.fed.local_epochs);
    read_if(f, "batch_size", c.fed.batch_size);
    read_if(f, "learning_rate", c.fed.learning_rate);
    read_if(f, "decay", c.fed.decay);
    read_if(f, "server_c", c.fed.server_c);
    read_if(f, "f_prime", c.fed.f_prime);
    read_if(f, "rounds", c.fed.total_rounds);
    read_if(f, "device_gflops", c.fed.device_gflops);
  }
  if (doc.contains("model")) {
    const auto& m = doc.at("model");
    check_keys(m, {"conv_channels", "kernel_size", "stride", "padding"}, "'model'");
    read_if(m, "conv_channels", c.model.conv_channels);
    read_if(m, "kernel_size", c.model.kernel_size);
    read_if(m, "stride", c.model.stride);
    read_if(m, "padding", c.model.padding);
  }
  if (doc.contains("prune")) {
    const auto& p = doc.at("prune");
    check_keys(p, {"prune_at_round", "hessian_cap", "p_max", "calibration_batch", "fixed_rate",
                   "lipschitz_samples", "lipschitz_radius", "lipschitz_safety", "epsilon"},
               "'prune'");
    read_if(p, "prune_at_round", c.prune.prune_at_round);
    read_if(p, "hessian_cap", c.prune.hessian_cap);
    read_if(p, "p_max", c.prune.p_max);
    read_if(p, "calibration_batch", c.prune.calibration_batch);
    read_if(p, "fixed_rate", c.prune.fixed_rate);
    read_if(p, "lipschitz_samples", c.prune.lipschitz_samples);
    read_if(p, "lipschitz_radius", c.prune.lipschitz_radius);
    read_if(p, "lipschitz_safety", c.prune.lipschitz_safety);
    read_if(p, "epsilon", c.prune.epsilon);
  }
  ExperimentConfig resolved = c.resolved();
  resolved.validate();
  return resolved;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::invalid_argument("config: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return config_from_json(ss.str());
}

}  // namespace fedsim
