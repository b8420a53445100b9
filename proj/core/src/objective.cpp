#include "fedsim/objective.hpp"

#include <cmath>
#include <stdexcept>

#include "fedsim/nn.hpp"
#include "fedsim/parallel.hpp"

namespace fedsim {

ModelLossObjective::ModelLossObjective(Model architecture, const Dataset& data)
    : template_(std::move(architecture)) {
  if (data.empty()) throw std::invalid_argument("ModelLossObjective: empty dataset");
  template_.validate();
  dim_ = template_.parameter_count();
  inputs_ = data.all_inputs();
  labels_ = data.all_labels();
}

double ModelLossObjective::value(std::span<const double> w) const {
  FlatParams flat;
  flat.values.assign(w.begin(), w.end());
  Model m = unflatten_params(template_, flat);
  return forward(m, inputs_, labels_).loss;
}

std::vector<double> ModelLossObjective::gradient(std::span<const double> w) const {
  FlatParams flat;
  flat.values.assign(w.begin(), w.end());
  Model m = unflatten_params(template_, flat);
  return backward(m, inputs_, labels_).values;
}

Matrix hessian(const Objective& objective, std::span<const double> at, std::size_t cap,
               int workers) {
  const std::size_t m = objective.dim();
  if (at.size() != m) throw std::invalid_argument("hessian: point has wrong dimension");
  if (m > cap)
    throw std::invalid_argument(
        "hessian: " + std::to_string(m) + " parameters exceed the cap of " + std::to_string(cap) +
        "; use a smaller rate-estimation model");

  Matrix h(m, m);
  std::vector<double> base(at.begin(), at.end());
  parallel_for(m, workers, [&](std::size_t j) {
    double step = 1e-4 * std::max(1.0, std::abs(base[j]));
    std::vector<double> point = base;
    point[j] = base[j] + step;
    std::vector<double> g_plus = objective.gradient(point);
    point[j] = base[j] - step;
    std::vector<double> g_minus = objective.gradient(point);
    for (std::size_t i = 0; i < m; ++i) h.at(i, j) = (g_plus[i] - g_minus[i]) / (2.0 * step);
  });

  // Exact symmetrization; 0.5*(a+b) is commutative so h is symmetric bit-for-bit.
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) {
      double v = 0.5 * (h.at(i, j) + h.at(j, i));
      h.at(i, j) = v;
      h.at(j, i) = v;
    }
  return h;
}

Matrix hessian(const Model& model, const Dataset& data, std::size_t cap, int workers) {
  ModelLossObjective obj(model, data);
  FlatParams flat = flatten_params(model);
  return hessian(obj, flat.values, cap, workers);
}

}  // namespace fedsim
