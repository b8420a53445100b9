#pragma once

#include <span>
#include <vector>

#include "fedsim/model.hpp"
#include "fedsim/tensor.hpp"

namespace fedsim {

struct ForwardResult {
  double loss = 0.0;                      // mean softmax cross-entropy over the batch
  std::vector<double> per_sample_loss;    // length = batch size
  Tensor logits;                          // [batch, classes]
  std::vector<Tensor> conv_feature_maps;  // per Conv2D layer: [batch, out_ch, h, w]
};

// All layer outputs for one batch; activations[0] is the input, and
// activations[i + 1] is the output of layers[i].
struct ActivationTrace {
  std::vector<Tensor> activations;
};

// Runs the model on a batch without computing a loss. Shape mismatches throw
// with the offending layer named.
ActivationTrace forward_activations(const Model& model, const Tensor& batch);

// Full forward pass: loss, logits and the per-Conv2D feature maps (the raw
// filter outputs, before any activation) used for rank computation.
ForwardResult forward(const Model& model, const Tensor& batch, const std::vector<int>& labels);

// Gradient of the batch-mean loss with respect to all parameters, in
// flatten_params order.
FlatParams backward(const Model& model, const Tensor& batch, const std::vector<int>& labels);

// w' = w - lr * grad with value semantics. Coordinates whose gradient is
// exactly zero are copied bit-for-bit, and lr == 0 returns the input
// unchanged, so no-op steps are no-ops at the bit level too.
Model sgd_step(const Model& model, const FlatParams& grad, double lr);

// Mean softmax cross-entropy (max-subtracted) of one logit row against an
// integer label; exposed for the evaluator.
double cross_entropy(std::span<const double> logits, int label);

// argmax with ties broken toward the lowest index.
int argmax_lowest(std::span<const double> row);

}  // namespace fedsim
