#pragma once

// Independent reference implementations used to cross-check the library.
// Everything here is deliberately written as plain scalar loops, separate
// from the code paths under test.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/linalg.hpp"
#include "fedsim/model.hpp"
#include "fedsim/objective.hpp"
#include "fedsim/rng.hpp"

namespace oracles {

// ---------------------------------------------------------------------------
// Scalar-loop forward pass: convolution, relu, flatten, dense and softmax
// cross-entropy re-implemented directly from the arithmetic definitions.
// ---------------------------------------------------------------------------

struct Image {
  int channels = 0, height = 0, width = 0;
  std::vector<double> v;  // [c][h][w]
  double at(int c, int h, int w) const { return v[(c * height + h) * width + w]; }
  double& at(int c, int h, int w) { return v[(c * height + h) * width + w]; }
};

inline Image conv_image(const fedsim::Layer& l, const Image& in) {
  int h_out = (in.height + 2 * l.padding - l.kernel_size) / l.stride + 1;
  int w_out = (in.width + 2 * l.padding - l.kernel_size) / l.stride + 1;
  Image out;
  out.channels = l.out_channels;
  out.height = h_out;
  out.width = w_out;
  out.v.assign(static_cast<std::size_t>(l.out_channels) * h_out * w_out, 0.0);
  for (int oc = 0; oc < l.out_channels; ++oc)
    for (int oh = 0; oh < h_out; ++oh)
      for (int ow = 0; ow < w_out; ++ow) {
        double s = l.bias.data[oc];
        for (int ic = 0; ic < l.in_channels; ++ic)
          for (int kh = 0; kh < l.kernel_size; ++kh)
            for (int kw = 0; kw < l.kernel_size; ++kw) {
              int ih = oh * l.stride - l.padding + kh;
              int iw = ow * l.stride - l.padding + kw;
              if (ih < 0 || ih >= in.height || iw < 0 || iw >= in.width) continue;
              s += l.weights.data[((oc * l.in_channels + ic) * l.kernel_size + kh) *
                                      l.kernel_size +
                                  kw] *
                   in.at(ic, ih, iw);
            }
        out.at(oc, oh, ow) = s;
      }
  return out;
}

inline std::vector<double> model_logits_scalar(const fedsim::Model& model,
                                               std::span<const double> sample) {
  Image img;
  img.channels = model.input_shape[0];
  img.height = model.input_shape[1];
  img.width = model.input_shape[2];
  img.v.assign(sample.begin(), sample.end());
  std::vector<double> flat;
  bool is_flat = false;
  for (const fedsim::Layer& l : model.layers) {
    switch (l.kind) {
      case fedsim::LayerKind::Conv2D:
        img = conv_image(l, img);
        break;
      case fedsim::LayerKind::ReLU:
        if (is_flat)
          for (double& x : flat) x = x > 0 ? x : 0;
        else
          for (double& x : img.v) x = x > 0 ? x : 0;
        break;
      case fedsim::LayerKind::Flatten:
        flat = img.v;
        is_flat = true;
        break;
      case fedsim::LayerKind::Dense: {
        std::vector<double> in = is_flat ? flat : img.v;
        std::vector<double> out(static_cast<std::size_t>(l.out_dim), 0.0);
        for (int o = 0; o < l.out_dim; ++o) {
          double s = l.bias.data[o];
          for (int i = 0; i < l.in_dim; ++i) s += l.weights.data[o * l.in_dim + i] * in[i];
          out[o] = s;
        }
        flat = out;
        is_flat = true;
        break;
      }
    }
  }
  return flat;
}

inline double softmax_ce_scalar(std::span<const double> logits, int label) {
  double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - m);
  return std::log(z) - (logits[label] - m);
}

inline double mean_loss_scalar(const fedsim::Model& model, const fedsim::Tensor& batch,
                               const std::vector<int>& labels) {
  const std::size_t n = batch.shape[0];
  const std::size_t len = batch.numel() / n;
  double total = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    std::span<const double> sample(&batch.data[b * len], len);
    std::vector<double> logits = model_logits_scalar(model, sample);
    total += softmax_ce_scalar(logits, labels[b]);
  }
  return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Central finite differences of the loss (gradient oracle).
// ---------------------------------------------------------------------------

inline std::vector<double> fd_gradient(const std::function<double(std::span<const double>)>& f,
                                       std::span<const double> at, double h = 1e-5) {
  std::vector<double> w(at.begin(), at.end());
  std::vector<double> g(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    double keep = w[i];
    w[i] = keep + h;
    double up = f(w);
    w[i] = keep - h;
    double down = f(w);
    w[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline double max_rel_error(std::span<const double> a, std::span<const double> b,
                            double floor = 1e-4) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double scale = std::max({floor, std::abs(a[i]), std::abs(b[i])});
    worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Eigenvalue oracle: characteristic polynomial sign changes + bisection.
// det(A - x I) is evaluated by fresh LU elimination at each probe point.
// ---------------------------------------------------------------------------

inline double det_shifted(const fedsim::Matrix& a, double x) {
  const std::size_t n = a.rows;
  std::vector<std::vector<double>> m(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) m[i][j] = a.at(i, j) - (i == j ? x : 0.0);
  double det = 1.0;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(m[r][col]) > std::abs(m[pivot][col])) pivot = r;
    if (m[pivot][col] == 0.0) return 0.0;
    if (pivot != col) {
      std::swap(m[pivot], m[col]);
      det = -det;
    }
    det *= m[col][col];
    for (std::size_t r = col + 1; r < n; ++r) {
      double factor = m[r][col] / m[col][col];
      for (std::size_t c = col; c < n; ++c) m[r][c] -= factor * m[col][c];
    }
  }
  return det;
}

inline std::vector<double> eig_bisect_oracle(const fedsim::Matrix& a) {
  const std::size_t n = a.rows;
  // Gershgorin bound.
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t i = 0; i < n; ++i) {
    double radius = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) radius += std::abs(a.at(i, j));
    lo = std::min(lo, a.at(i, i) - radius);
    hi = std::max(hi, a.at(i, i) + radius);
  }
  lo -= 1.0;
  hi += 1.0;
  // Scan for sign changes on a fine grid, then bisect each bracket. Assumes
  // distinct eigenvalues (the tests draw random matrices, where ties have
  // probability zero).
  const int grid = 200000;
  std::vector<double> roots;
  double prev_x = lo, prev_f = det_shifted(a, lo);
  for (int g = 1; g <= grid; ++g) {
    double x = lo + (hi - lo) * g / grid;
    double f = det_shifted(a, x);
    if ((prev_f < 0 && f > 0) || (prev_f > 0 && f < 0) || f == 0.0) {
      double l = prev_x, r = x;
      for (int it = 0; it < 200; ++it) {
        double mid = 0.5 * (l + r);
        double fm = det_shifted(a, mid);
        if ((fm < 0) == (prev_f < 0))
          l = mid;
        else
          r = mid;
      }
      roots.push_back(0.5 * (l + r));
    }
    prev_x = x;
    prev_f = f;
  }
  std::sort(roots.begin(), roots.end());
  return roots;
}

// ---------------------------------------------------------------------------
// Rank oracle: row-echelon elimination with partial pivoting.
// ---------------------------------------------------------------------------

inline std::size_t rank_elimination_oracle(const fedsim::Matrix& m, double rel_tol = 1e-6) {
  std::vector<std::vector<double>> a(m.rows, std::vector<double>(m.cols));
  double max_abs = 0.0;
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) {
      a[i][j] = m.at(i, j);
      max_abs = std::max(max_abs, std::abs(a[i][j]));
    }
  if (max_abs == 0.0) return 0;
  const double tol = rel_tol * max_abs * static_cast<double>(std::max(m.rows, m.cols));
  std::size_t rank = 0;
  std::size_t row = 0;
  for (std::size_t col = 0; col < m.cols && row < m.rows; ++col) {
    std::size_t pivot = row;
    for (std::size_t r = row + 1; r < m.rows; ++r)
      if (std::abs(a[r][col]) > std::abs(a[pivot][col])) pivot = r;
    if (std::abs(a[pivot][col]) <= tol) continue;
    std::swap(a[pivot], a[row]);
    for (std::size_t r = row + 1; r < m.rows; ++r) {
      double factor = a[r][col] / a[row][col];
      for (std::size_t c = col; c < m.cols; ++c) a[r][c] -= factor * a[row][c];
    }
    ++row;
    ++rank;
  }
  return rank;
}

// ---------------------------------------------------------------------------
// Divergence oracles: direct transcriptions of the defining formulas.
// ---------------------------------------------------------------------------

inline double kl_oracle(std::span<const double> p, std::span<const double> q) {
  double s = 0.0;
  for (std::size_t y = 0; y < p.size(); ++y) {
    if (p[y] == 0.0) continue;
    if (q[y] == 0.0) return std::numeric_limits<double>::infinity();
    s += p[y] * std::log(p[y] / q[y]);
  }
  return s;
}

inline double js_oracle(std::span<const double> p, std::span<const double> pbar) {
  std::vector<double> mix(p.size());
  for (std::size_t y = 0; y < p.size(); ++y) mix[y] = 0.5 * (p[y] + pbar[y]);
  return 0.5 * kl_oracle(p, mix) + 0.5 * kl_oracle(pbar, mix);
}

// ---------------------------------------------------------------------------
// Threshold / layer-rate brute force (sort-and-count).
// ---------------------------------------------------------------------------

inline double threshold_bruteforce(std::span<const double> values, double p_star) {
  std::vector<std::pair<double, std::size_t>> mags;
  for (std::size_t i = 0; i < values.size(); ++i) mags.emplace_back(std::abs(values[i]), i);
  std::sort(mags.begin(), mags.end());
  std::size_t pos = static_cast<std::size_t>(static_cast<double>(values.size()) * p_star);
  if (pos == 0) return 0.0;
  if (pos > values.size()) pos = values.size();
  return mags[pos - 1].first;
}

inline double layer_rate_bruteforce(std::span<const double> layer_values, double threshold) {
  std::size_t below = 0;
  for (double v : layer_values)
    if (std::abs(v) < threshold) ++below;
  return static_cast<double>(below) / static_cast<double>(layer_values.size());
}

// ---------------------------------------------------------------------------
// Analytic objectives for the Hessian / eigen / Lipschitz pipeline.
// ---------------------------------------------------------------------------

// L(w) = 0.5 w^T A w (+ optional linear term b^T w): gradient A w + b,
// Hessian exactly A, second-order residual exactly zero.
class QuadraticObjective final : public fedsim::Objective {
 public:
  explicit QuadraticObjective(fedsim::Matrix a, std::vector<double> b = {})
      : a_(std::move(a)), b_(std::move(b)) {
    if (b_.empty()) b_.assign(a_.rows, 0.0);
  }

  std::size_t dim() const override { return a_.rows; }

  double value(std::span<const double> w) const override {
    double s = 0.0;
    for (std::size_t i = 0; i < a_.rows; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < a_.cols; ++j) row += a_.at(i, j) * w[j];
      s += 0.5 * w[i] * row + b_[i] * w[i];
    }
    return s;
  }

  std::vector<double> gradient(std::span<const double> w) const override {
    std::vector<double> g(a_.rows, 0.0);
    for (std::size_t i = 0; i < a_.rows; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < a_.cols; ++j) row += a_.at(i, j) * w[j];
      g[i] = row + b_[i];
    }
    return g;
  }

 private:
  fedsim::Matrix a_;
  std::vector<double> b_;
};

// One-parameter L(w) = c w^3: residual B(d) = 3 c d^2, whose Lipschitz
// constant on [-r, r] is 6 c r.
class CubicObjective final : public fedsim::Objective {
 public:
  explicit CubicObjective(double c) : c_(c) {}
  std::size_t dim() const override { return 1; }
  double value(std::span<const double> w) const override { return c_ * w[0] * w[0] * w[0]; }
  std::vector<double> gradient(std::span<const double> w) const override {
    return {3.0 * c_ * w[0] * w[0]};
  }

 private:
  double c_;
};

// Orthogonal similarity transform Q diag(d) Q^T with Q from a product of
// seeded plane rotations; eigenvalues are exactly `d` up to roundoff.
inline fedsim::Matrix rotated_diagonal(std::vector<double> diag, std::uint64_t seed) {
  const std::size_t n = diag.size();
  fedsim::Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m.at(i, i) = diag[i];
  fedsim::Rng rng(seed);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t q = p + 1; q < n; ++q) {
      double angle = rng.uniform() * 3.14159265358979323846;
      double c = std::cos(angle), s = std::sin(angle);
      // m <- G^T m G for the rotation G in the (p, q) plane.
      for (std::size_t k = 0; k < n; ++k) {
        double mp = m.at(p, k), mq = m.at(q, k);
        m.at(p, k) = c * mp - s * mq;
        m.at(q, k) = s * mp + c * mq;
      }
      for (std::size_t k = 0; k < n; ++k) {
        double mp = m.at(k, p), mq = m.at(k, q);
        m.at(k, p) = c * mp - s * mq;
        m.at(k, q) = s * mp + c * mq;
      }
    }
  // Clean up asymmetry from roundoff.
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double v = 0.5 * (m.at(i, j) + m.at(j, i));
      m.at(i, j) = v;
      m.at(j, i) = v;
    }
  return m;
}

}  // namespace oracles
