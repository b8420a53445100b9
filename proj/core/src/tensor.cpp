#include "fedsim/tensor.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace fedsim {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

Tensor::Tensor(std::vector<std::size_t> s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
  if (shape_numel(shape) != data.size())
    throw std::invalid_argument("Tensor: shape does not match data length");
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
  std::size_t n = shape_numel(shape);
  Tensor t;
  t.shape = std::move(shape);
  t.data.assign(n, 0.0);
  return t;
}

std::size_t Tensor::numel() const { return data.size(); }

double& Tensor::at4(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
  return data[((i * shape[1] + j) * shape[2] + k) * shape[3] + l];
}
double Tensor::at4(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
  return data[((i * shape[1] + j) * shape[2] + k) * shape[3] + l];
}
double& Tensor::at2(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
double Tensor::at2(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

bool Tensor::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

bool Tensor::same_bits(const Tensor& other) const {
  if (shape != other.shape) return false;
  return data.empty() ||
         std::memcmp(data.data(), other.data.data(), data.size() * sizeof(double)) == 0;
}

}  // namespace fedsim
