#include "fedsim/model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "fedsim/jsonfmt.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv2D: return "conv2d";
    case LayerKind::Dense: return "dense";
    case LayerKind::ReLU: return "relu";
    case LayerKind::Flatten: return "flatten";
  }
  return "?";
}

Layer Layer::conv2d(int in_ch, int out_ch, int kernel, int stride, int padding) {
  if (in_ch < 1 || out_ch < 1 || kernel < 1 || stride < 1 || padding < 0)
    throw std::invalid_argument("conv2d: invalid dimensions");
  Layer l;
  l.kind = LayerKind::Conv2D;
  l.in_channels = in_ch;
  l.out_channels = out_ch;
  l.kernel_size = kernel;
  l.stride = stride;
  l.padding = padding;
  l.weights = Tensor::zeros({static_cast<std::size_t>(out_ch), static_cast<std::size_t>(in_ch),
                             static_cast<std::size_t>(kernel), static_cast<std::size_t>(kernel)});
  l.bias = Tensor::zeros({static_cast<std::size_t>(out_ch)});
  return l;
}

Layer Layer::dense(int in_dim, int out_dim) {
  if (in_dim < 1 || out_dim < 1) throw std::invalid_argument("dense: invalid dimensions");
  Layer l;
  l.kind = LayerKind::Dense;
  l.in_dim = in_dim;
  l.out_dim = out_dim;
  l.weights = Tensor::zeros({static_cast<std::size_t>(out_dim), static_cast<std::size_t>(in_dim)});
  l.bias = Tensor::zeros({static_cast<std::size_t>(out_dim)});
  return l;
}

Layer Layer::relu() {
  Layer l;
  l.kind = LayerKind::ReLU;
  return l;
}

Layer Layer::flatten() {
  Layer l;
  l.kind = LayerKind::Flatten;
  return l;
}

std::size_t Layer::parameter_count() const {
  if (!has_params()) return 0;
  return weights.numel() + bias.numel();
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const Layer& l : layers) n += l.parameter_count();
  return n;
}

int Model::num_classes() const {
  for (auto it = layers.rbegin(); it != layers.rend(); ++it)
    if (it->kind == LayerKind::Dense) return it->out_dim;
  throw std::runtime_error("Model: no Dense layer, cannot determine class count");
}

std::array<int, 3> Model::output_shape_after(std::size_t index) const {
  std::array<int, 3> shape = input_shape;
  bool flat = false;
  for (std::size_t i = 0; i <= index && i < layers.size(); ++i) {
    const Layer& l = layers[i];
    switch (l.kind) {
      case LayerKind::Conv2D: {
        if (flat)
          throw std::runtime_error("layer " + std::to_string(i) + " (conv2d): input already flattened");
        if (shape[0] != l.in_channels)
          throw std::runtime_error("layer " + std::to_string(i) + " (conv2d): expected " +
                                   std::to_string(l.in_channels) + " input channels, got " +
                                   std::to_string(shape[0]));
        int h = (shape[1] + 2 * l.padding - l.kernel_size) / l.stride + 1;
        int w = (shape[2] + 2 * l.padding - l.kernel_size) / l.stride + 1;
        if (shape[1] + 2 * l.padding < l.kernel_size || h < 1 || w < 1)
          throw std::runtime_error("layer " + std::to_string(i) + " (conv2d): kernel larger than input");
        shape = {l.out_channels, h, w};
        break;
      }
      case LayerKind::Dense: {
        int in = flat ? shape[0] : shape[0] * shape[1] * shape[2];
        if (in != l.in_dim)
          throw std::runtime_error("layer " + std::to_string(i) + " (dense): expected in_dim " +
                                   std::to_string(l.in_dim) + ", got " + std::to_string(in));
        shape = {l.out_dim, 1, 1};
        flat = true;
        break;
      }
      case LayerKind::ReLU:
        break;
      case LayerKind::Flatten:
        shape = {shape[0] * shape[1] * shape[2], 1, 1};
        flat = true;
        break;
    }
  }
  return shape;
}

void Model::validate() const {
  if (input_shape[0] < 1 || input_shape[1] < 1 || input_shape[2] < 1)
    throw std::runtime_error("Model: invalid input shape");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    if (l.kind == LayerKind::Conv2D) {
      if (l.out_channels < 1)
        throw std::runtime_error("layer " + std::to_string(i) + " (conv2d): needs at least one filter");
      std::vector<std::size_t> want{static_cast<std::size_t>(l.out_channels),
                                    static_cast<std::size_t>(l.in_channels),
                                    static_cast<std::size_t>(l.kernel_size),
                                    static_cast<std::size_t>(l.kernel_size)};
      if (l.weights.shape != want || l.bias.numel() != static_cast<std::size_t>(l.out_channels))
        throw std::runtime_error("layer " + std::to_string(i) + " (conv2d): weight shape mismatch");
    } else if (l.kind == LayerKind::Dense) {
      std::vector<std::size_t> want{static_cast<std::size_t>(l.out_dim),
                                    static_cast<std::size_t>(l.in_dim)};
      if (l.weights.shape != want || l.bias.numel() != static_cast<std::size_t>(l.out_dim))
        throw std::runtime_error("layer " + std::to_string(i) + " (dense): weight shape mismatch");
    }
  }
  // Walking the shapes throws if consecutive layers do not compose.
  if (!layers.empty()) (void)output_shape_after(layers.size() - 1);
}

bool Model::same_bits(const Model& other) const {
  if (layers.size() != other.layers.size() || input_shape != other.input_shape) return false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& a = layers[i];
    const Layer& b = other.layers[i];
    if (a.kind != b.kind) return false;
    if (!a.weights.same_bits(b.weights) || !a.bias.same_bits(b.bias)) return false;
  }
  return true;
}

double FlatParams::l2_norm() const {
  double sum = 0.0;
  for (double v : values) sum += v * v;
  return std::sqrt(sum);
}

FlatParams flatten_params(const Model& model) {
  FlatParams flat;
  flat.values.reserve(model.parameter_count());
  for (const Layer& l : model.layers) {
    if (!l.has_params()) continue;
    flat.values.insert(flat.values.end(), l.weights.data.begin(), l.weights.data.end());
    flat.values.insert(flat.values.end(), l.bias.data.begin(), l.bias.data.end());
  }
  return flat;
}

Model unflatten_params(const Model& model_template, const FlatParams& flat) {
  if (flat.size() != model_template.parameter_count())
    throw std::invalid_argument("unflatten_params: expected " +
                                std::to_string(model_template.parameter_count()) +
                                " values, got " + std::to_string(flat.size()));
  Model out = model_template;
  std::size_t pos = 0;
  for (Layer& l : out.layers) {
    if (!l.has_params()) continue;
    std::copy(flat.values.begin() + pos, flat.values.begin() + pos + l.weights.numel(),
              l.weights.data.begin());
    pos += l.weights.numel();
    std::copy(flat.values.begin() + pos, flat.values.begin() + pos + l.bias.numel(),
              l.bias.data.begin());
    pos += l.bias.numel();
  }
  return out;
}

std::string model_to_json(const Model& model) {
  std::string out = "{\"version\":1,\"input_shape\":[";
  out += std::to_string(model.input_shape[0]) + "," + std::to_string(model.input_shape[1]) + "," +
         std::to_string(model.input_shape[2]) + "],\"layers\":[";
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const Layer& l = model.layers[i];
    if (i) out += ',';
    out += "{\"kind\":";
    json_append_string(out, layer_kind_name(l.kind));
    if (l.kind == LayerKind::Conv2D) {
      out += ",\"in_channels\":" + std::to_string(l.in_channels);
      out += ",\"out_channels\":" + std::to_string(l.out_channels);
      out += ",\"kernel_size\":" + std::to_string(l.kernel_size);
      out += ",\"stride\":" + std::to_string(l.stride);
      out += ",\"padding\":" + std::to_string(l.padding);
    } else if (l.kind == LayerKind::Dense) {
      out += ",\"in_dim\":" + std::to_string(l.in_dim);
      out += ",\"out_dim\":" + std::to_string(l.out_dim);
    }
    if (l.has_params()) {
      out += ",\"weights\":";
      json_append_double_array(out, l.weights.data);
      out += ",\"bias\":";
      json_append_double_array(out, l.bias.data);
    }
    out += '}';
  }
  out += "]}";
  return out;
}

Model model_from_json(const std::string& text) {
  nlohmann::json doc = nlohmann::json::parse(text);
  if (!doc.contains("version") || doc["version"].get<int>() != 1)
    throw std::runtime_error("model document: unsupported version");
  Model model;
  auto shape = doc.at("input_shape");
  model.input_shape = {shape.at(0).get<int>(), shape.at(1).get<int>(), shape.at(2).get<int>()};
  for (const auto& jl : doc.at("layers")) {
    std::string kind = jl.at("kind").get<std::string>();
    Layer layer;
    if (kind == "conv2d") {
      layer = Layer::conv2d(jl.at("in_channels").get<int>(), jl.at("out_channels").get<int>(),
                            jl.at("kernel_size").get<int>(), jl.at("stride").get<int>(),
                            jl.at("padding").get<int>());
    } else if (kind == "dense") {
      layer = Layer::dense(jl.at("in_dim").get<int>(), jl.at("out_dim").get<int>());
    } else if (kind == "relu") {
      layer = Layer::relu();
    } else if (kind == "flatten") {
      layer = Layer::flatten();
    } else {
      throw std::runtime_error("model document: unknown layer kind '" + kind + "'");
    }
    if (layer.has_params()) {
      auto w = jl.at("weights").get<std::vector<double>>();
      auto b = jl.at("bias").get<std::vector<double>>();
      if (w.size() != layer.weights.numel() || b.size() != layer.bias.numel())
        throw std::runtime_error("model document: weight array length mismatch in " + kind);
      layer.weights.data = std::move(w);
      layer.bias.data = std::move(b);
    }
    model.layers.push_back(std::move(layer));
  }
  model.validate();
  return model;
}

void save_model(const Model& model, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_model: cannot open " + path);
  f << model_to_json(model) << '\n';
}

Model load_model(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_model: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return model_from_json(ss.str());
}

Model init_model_params(Model arch, std::uint64_t seed) {
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    Layer& l = arch.layers[i];
    if (!l.has_params()) continue;
    int fan_in = l.kind == LayerKind::Conv2D ? l.in_channels * l.kernel_size * l.kernel_size
                                             : l.in_dim;
    double scale = std::sqrt(2.0 / static_cast<double>(fan_in));
    Rng rng = Rng::stream(seed, "init", i);
    for (double& w : l.weights.data) w = scale * rng.normal();
    for (double& b : l.bias.data) b = 0.0;
  }
  arch.validate();
  return arch;
}

}  // namespace fedsim
