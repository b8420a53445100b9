#pragma once

#include <cstddef>
#include <vector>

namespace fedsim {

// Dense row-major n-dimensional array of doubles. Carrier of activations,
// parameters and gradients throughout the simulator.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<double> d);

  static Tensor zeros(std::vector<std::size_t> shape);

  std::size_t numel() const;
  std::size_t rank() const { return shape.size(); }

  double& at4(std::size_t i, std::size_t j, std::size_t k, std::size_t l);
  double at4(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const;
  double& at2(std::size_t i, std::size_t j);
  double at2(std::size_t i, std::size_t j) const;

  bool all_finite() const;
  bool same_bits(const Tensor& other) const;
};

std::size_t shape_numel(const std::vector<std::size_t>& shape);

}  // namespace fedsim
