#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fedsim/data.hpp"
#include "fedsim/linalg.hpp"
#include "fedsim/model.hpp"

namespace fedsim {

// A differentiable scalar objective over a flat parameter vector. The
// production instance is the model loss over a dataset; tests wire analytic
// objectives (quadratics, cubics) through the same interface.
class Objective {
 public:
  virtual ~Objective() = default;
  virtual std::size_t dim() const = 0;
  virtual double value(std::span<const double> w) const = 0;
  virtual std::vector<double> gradient(std::span<const double> w) const = 0;
};

// Mean softmax cross-entropy of a model architecture over a fixed dataset,
// as a function of the flat parameters.
class ModelLossObjective final : public Objective {
 public:
  ModelLossObjective(Model architecture, const Dataset& data);

  std::size_t dim() const override { return dim_; }
  double value(std::span<const double> w) const override;
  std::vector<double> gradient(std::span<const double> w) const override;

 private:
  Model template_;
  Tensor inputs_;
  std::vector<int> labels_;
  std::size_t dim_;
};

// Dense Hessian at `at` by central finite differences of the analytic
// gradient, column step h_i = 1e-4 * max(1, |w_i|), then symmetrized as
// (H + H^T)/2. Throws when dim exceeds `cap`. Columns are independent, so
// they may be computed on `workers` threads with identical results.
Matrix hessian(const Objective& objective, std::span<const double> at,
               std::size_t cap = 2000, int workers = 1);

// Convenience wrapper: Hessian of the model loss over a dataset.
Matrix hessian(const Model& model, const Dataset& data, std::size_t cap = 2000,
               int workers = 1);

}  // namespace fedsim
