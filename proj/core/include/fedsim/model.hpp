#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "fedsim/tensor.hpp"

namespace fedsim {

enum class LayerKind { Conv2D, Dense, ReLU, Flatten };

const char* layer_kind_name(LayerKind kind);

// One model layer. Conv2D and Dense carry parameters; ReLU and Flatten are
// shape-only. A tagged struct keeps surgery (channel removal) simple.
struct Layer {
  LayerKind kind = LayerKind::ReLU;

  // Conv2D fields.
  int in_channels = 0;
  int out_channels = 0;
  int kernel_size = 0;
  int stride = 1;
  int padding = 0;

  // Dense fields.
  int in_dim = 0;
  int out_dim = 0;

  Tensor weights;  // Conv2D: [out_ch, in_ch, k, k]; Dense: [out_dim, in_dim]
  Tensor bias;     // [out_ch] / [out_dim]

  static Layer conv2d(int in_ch, int out_ch, int kernel, int stride, int padding);
  static Layer dense(int in_dim, int out_dim);
  static Layer relu();
  static Layer flatten();

  bool has_params() const { return kind == LayerKind::Conv2D || kind == LayerKind::Dense; }
  std::size_t parameter_count() const;
};

// Ordered layer list with an explicit input shape. Value semantics: a Model
// is a full parameter snapshot, copied freely between rounds.
struct Model {
  std::vector<Layer> layers;
  std::array<int, 3> input_shape{0, 0, 0};  // [channels, height, width]

  std::size_t parameter_count() const;

  // Number of classes = out_dim of the last Dense layer.
  int num_classes() const;

  // Shape of the data flowing out of layer `index` given this model's input
  // shape, as [channels, height, width] (or [dim, 1, 1] after Flatten/Dense).
  // Throws with the offending layer named if shapes do not compose.
  std::array<int, 3> output_shape_after(std::size_t index) const;

  // Validates that consecutive layers compose and weight tensors match the
  // declared dimensions. Throws on the first violation.
  void validate() const;

  bool same_bits(const Model& other) const;
};

// Flat view of all trainable parameters, layer order then row-major within a
// layer, weights before bias.
struct FlatParams {
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  double l2_norm() const;
};

FlatParams flatten_params(const Model& model);
// Rebuilds a model with `model_template`'s architecture and `flat`'s values.
// Throws on length mismatch.
Model unflatten_params(const Model& model_template, const FlatParams& flat);

// Versioned JSON document with 17-significant-digit floats for exact
// round-trips.
std::string model_to_json(const Model& model);
Model model_from_json(const std::string& text);
void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);

// Seeded He-style initialization for conv/dense weights; biases start at 0.
Model init_model_params(Model arch, std::uint64_t seed);

}  // namespace fedsim
