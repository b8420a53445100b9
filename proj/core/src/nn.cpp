#include "fedsim/nn.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace fedsim {

namespace {

std::runtime_error layer_error(std::size_t index, const Layer& l, const std::string& what) {
  return std::runtime_error("layer " + std::to_string(index) + " (" +
                            layer_kind_name(l.kind) + "): " + what);
}

void check_batch_shape(const Model& model, const Tensor& batch) {
  if (batch.rank() != 4)
    throw std::runtime_error("forward: batch must be [n, channels, height, width]");
  if (static_cast<int>(batch.shape[1]) != model.input_shape[0] ||
      static_cast<int>(batch.shape[2]) != model.input_shape[1] ||
      static_cast<int>(batch.shape[3]) != model.input_shape[2])
    throw std::runtime_error("forward: batch shape does not match model input shape");
  if (batch.shape[0] == 0) throw std::runtime_error("forward: empty batch");
}

Tensor conv2d_forward(const Layer& l, const Tensor& x, std::size_t layer_index) {
  const std::size_t n = x.shape[0];
  if (x.shape[1] != static_cast<std::size_t>(l.in_channels))
    throw layer_error(layer_index, l,
                      "expected " + std::to_string(l.in_channels) + " input channels, got " +
                          std::to_string(x.shape[1]));
  const int h_in = static_cast<int>(x.shape[2]);
  const int w_in = static_cast<int>(x.shape[3]);
  const int h_out = (h_in + 2 * l.padding - l.kernel_size) / l.stride + 1;
  const int w_out = (w_in + 2 * l.padding - l.kernel_size) / l.stride + 1;
  if (h_out < 1 || w_out < 1) throw layer_error(layer_index, l, "kernel larger than input");

  Tensor out = Tensor::zeros({n, static_cast<std::size_t>(l.out_channels),
                              static_cast<std::size_t>(h_out), static_cast<std::size_t>(w_out)});
  const int k = l.kernel_size;
  for (std::size_t b = 0; b < n; ++b) {
    for (int oc = 0; oc < l.out_channels; ++oc) {
      for (int oh = 0; oh < h_out; ++oh) {
        for (int ow = 0; ow < w_out; ++ow) {
          double acc = l.bias.data[oc];
          for (int ic = 0; ic < l.in_channels; ++ic) {
            const double* wrow = &l.weights.data[((oc * l.in_channels + ic) * k) * k];
            for (int kh = 0; kh < k; ++kh) {
              const int ih = oh * l.stride - l.padding + kh;
              if (ih < 0 || ih >= h_in) continue;
              const double* xrow = &x.data[((b * x.shape[1] + ic) * x.shape[2] + ih) * x.shape[3]];
              for (int kw = 0; kw < k; ++kw) {
                const int iw = ow * l.stride - l.padding + kw;
                if (iw < 0 || iw >= w_in) continue;
                acc += wrow[kh * k + kw] * xrow[iw];
              }
            }
          }
          out.at4(b, oc, oh, ow) = acc;
        }
      }
    }
  }
  return out;
}

Tensor dense_forward(const Layer& l, const Tensor& x, std::size_t layer_index) {
  if (x.rank() != 2 || x.shape[1] != static_cast<std::size_t>(l.in_dim))
    throw layer_error(layer_index, l,
                      "expected flat input of dim " + std::to_string(l.in_dim));
  const std::size_t n = x.shape[0];
  Tensor out = Tensor::zeros({n, static_cast<std::size_t>(l.out_dim)});
  for (std::size_t b = 0; b < n; ++b) {
    const double* xi = &x.data[b * l.in_dim];
    for (int o = 0; o < l.out_dim; ++o) {
      const double* wr = &l.weights.data[static_cast<std::size_t>(o) * l.in_dim];
      double acc = l.bias.data[o];
      for (int i = 0; i < l.in_dim; ++i) acc += wr[i] * xi[i];
      out.at2(b, o) = acc;
    }
  }
  return out;
}

}  // namespace

ActivationTrace forward_activations(const Model& model, const Tensor& batch) {
  check_batch_shape(model, batch);
  ActivationTrace trace;
  trace.activations.reserve(model.layers.size() + 1);
  trace.activations.push_back(batch);
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const Layer& l = model.layers[i];
    const Tensor& x = trace.activations.back();
    switch (l.kind) {
      case LayerKind::Conv2D:
        trace.activations.push_back(conv2d_forward(l, x, i));
        break;
      case LayerKind::Dense:
        trace.activations.push_back(dense_forward(l, x, i));
        break;
      case LayerKind::ReLU: {
        Tensor out = x;
        for (double& v : out.data) v = v > 0.0 ? v : 0.0;
        trace.activations.push_back(std::move(out));
        break;
      }
      case LayerKind::Flatten: {
        const Tensor& in = x;
        std::size_t n = in.shape[0];
        Tensor out(std::vector<std::size_t>{n, in.numel() / n}, in.data);
        trace.activations.push_back(std::move(out));
        break;
      }
    }
  }
  return trace;
}

double cross_entropy(std::span<const double> logits, int label) {
  double m = logits[0];
  for (double v : logits) m = std::max(m, v);
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - m);
  return std::log(sum) - (logits[label] - m);
}

int argmax_lowest(std::span<const double> row) {
  int best = 0;
  for (std::size_t i = 1; i < row.size(); ++i)
    if (row[i] > row[best]) best = static_cast<int>(i);
  return best;
}

ForwardResult forward(const Model& model, const Tensor& batch, const std::vector<int>& labels) {
  if (labels.size() != batch.shape[0])
    throw std::runtime_error("forward: label count does not match batch size");
  const int classes = model.num_classes();
  for (int y : labels)
    if (y < 0 || y >= classes)
      throw std::runtime_error("forward: label " + std::to_string(y) + " outside 0.." +
                               std::to_string(classes - 1));

  ActivationTrace trace = forward_activations(model, batch);
  const Tensor& logits = trace.activations.back();
  if (logits.rank() != 2 || logits.shape[1] != static_cast<std::size_t>(classes))
    throw std::runtime_error("forward: model does not end in logits over the label set");

  ForwardResult result;
  const std::size_t n = batch.shape[0];
  result.per_sample_loss.resize(n);
  double total = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    std::span<const double> row(&logits.data[b * classes], static_cast<std::size_t>(classes));
    result.per_sample_loss[b] = cross_entropy(row, labels[b]);
    total += result.per_sample_loss[b];
  }
  result.loss = total / static_cast<double>(n);
  result.logits = logits;
  for (std::size_t i = 0; i < model.layers.size(); ++i)
    if (model.layers[i].kind == LayerKind::Conv2D)
      result.conv_feature_maps.push_back(trace.activations[i + 1]);
  return result;
}

FlatParams backward(const Model& model, const Tensor& batch, const std::vector<int>& labels) {
  if (labels.size() != batch.shape[0])
    throw std::runtime_error("backward: label count does not match batch size");
  const int classes = model.num_classes();
  ActivationTrace trace = forward_activations(model, batch);
  const Tensor& logits = trace.activations.back();
  const std::size_t n = batch.shape[0];

  // d(mean loss)/d(logits): (softmax - onehot) / n.
  Tensor delta = Tensor::zeros(logits.shape);
  for (std::size_t b = 0; b < n; ++b) {
    const double* row = &logits.data[b * classes];
    double m = row[0];
    for (int k = 1; k < classes; ++k) m = std::max(m, row[k]);
    double sum = 0.0;
    for (int k = 0; k < classes; ++k) sum += std::exp(row[k] - m);
    for (int k = 0; k < classes; ++k) {
      double p = std::exp(row[k] - m) / sum;
      delta.at2(b, k) = (p - (labels[b] == k ? 1.0 : 0.0)) / static_cast<double>(n);
    }
  }

  // Per-layer parameter gradients, assembled in flatten order at the end.
  std::vector<Tensor> weight_grads(model.layers.size());
  std::vector<Tensor> bias_grads(model.layers.size());

  for (std::size_t idx = model.layers.size(); idx-- > 0;) {
    const Layer& l = model.layers[idx];
    const Tensor& x = trace.activations[idx];
    switch (l.kind) {
      case LayerKind::Dense: {
        Tensor dW = Tensor::zeros(l.weights.shape);
        Tensor dB = Tensor::zeros(l.bias.shape);
        Tensor dX = Tensor::zeros(x.shape);
        for (std::size_t b = 0; b < n; ++b) {
          const double* xi = &x.data[b * l.in_dim];
          double* dxi = &dX.data[b * l.in_dim];
          for (int o = 0; o < l.out_dim; ++o) {
            double d = delta.at2(b, o);
            double* dwr = &dW.data[static_cast<std::size_t>(o) * l.in_dim];
            const double* wr = &l.weights.data[static_cast<std::size_t>(o) * l.in_dim];
            dB.data[o] += d;
            for (int i = 0; i < l.in_dim; ++i) {
              dwr[i] += d * xi[i];
              dxi[i] += d * wr[i];
            }
          }
        }
        weight_grads[idx] = std::move(dW);
        bias_grads[idx] = std::move(dB);
        delta = std::move(dX);
        break;
      }
      case LayerKind::Conv2D: {
        Tensor dW = Tensor::zeros(l.weights.shape);
        Tensor dB = Tensor::zeros(l.bias.shape);
        Tensor dX = Tensor::zeros(x.shape);
        const int k = l.kernel_size;
        const int h_in = static_cast<int>(x.shape[2]);
        const int w_in = static_cast<int>(x.shape[3]);
        const int h_out = static_cast<int>(delta.shape[2]);
        const int w_out = static_cast<int>(delta.shape[3]);
        for (std::size_t b = 0; b < n; ++b) {
          for (int oc = 0; oc < l.out_channels; ++oc) {
            for (int oh = 0; oh < h_out; ++oh) {
              for (int ow = 0; ow < w_out; ++ow) {
                double d = delta.at4(b, oc, oh, ow);
                if (d == 0.0) continue;
                dB.data[oc] += d;
                for (int ic = 0; ic < l.in_channels; ++ic) {
                  double* dwrow = &dW.data[((oc * l.in_channels + ic) * k) * k];
                  const double* wrow = &l.weights.data[((oc * l.in_channels + ic) * k) * k];
                  for (int kh = 0; kh < k; ++kh) {
                    const int ih = oh * l.stride - l.padding + kh;
                    if (ih < 0 || ih >= h_in) continue;
                    const double* xrow =
                        &x.data[((b * x.shape[1] + ic) * x.shape[2] + ih) * x.shape[3]];
                    double* dxrow =
                        &dX.data[((b * x.shape[1] + ic) * x.shape[2] + ih) * x.shape[3]];
                    for (int kw = 0; kw < k; ++kw) {
                      const int iw = ow * l.stride - l.padding + kw;
                      if (iw < 0 || iw >= w_in) continue;
                      dwrow[kh * k + kw] += d * xrow[iw];
                      dxrow[iw] += d * wrow[kh * k + kw];
                    }
                  }
                }
              }
            }
          }
        }
        weight_grads[idx] = std::move(dW);
        bias_grads[idx] = std::move(dB);
        delta = std::move(dX);
        break;
      }
      case LayerKind::ReLU: {
        // Subgradient 0 at exactly 0.
        Tensor dX = delta;
        for (std::size_t i = 0; i < dX.data.size(); ++i)
          if (x.data[i] <= 0.0) dX.data[i] = 0.0;
        delta = std::move(dX);
        break;
      }
      case LayerKind::Flatten: {
        Tensor dX(x.shape, delta.data);
        delta = std::move(dX);
        break;
      }
    }
  }

  FlatParams grad;
  grad.values.reserve(model.parameter_count());
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    if (!model.layers[i].has_params()) continue;
    grad.values.insert(grad.values.end(), weight_grads[i].data.begin(), weight_grads[i].data.end());
    grad.values.insert(grad.values.end(), bias_grads[i].data.begin(), bias_grads[i].data.end());
  }
  return grad;
}

Model sgd_step(const Model& model, const FlatParams& grad, double lr) {
  if (grad.size() != model.parameter_count())
    throw std::invalid_argument("sgd_step: gradient length " + std::to_string(grad.size()) +
                                " does not match parameter count " +
                                std::to_string(model.parameter_count()));
  if (lr < 0.0) throw std::invalid_argument("sgd_step: negative learning rate");
  if (lr == 0.0) return model;
  Model out = model;
  std::size_t pos = 0;
  for (Layer& l : out.layers) {
    if (!l.has_params()) continue;
    for (double& w : l.weights.data) {
      double g = grad.values[pos++];
      if (g != 0.0) w -= lr * g;
    }
    for (double& b : l.bias.data) {
      double g = grad.values[pos++];
      if (g != 0.0) b -= lr * g;
    }
  }
  return out;
}

}  // namespace fedsim
