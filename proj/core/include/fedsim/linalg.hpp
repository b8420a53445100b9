#pragma once

#include <cstddef>
#include <vector>

namespace fedsim {

// Row-major dense matrix. Small helper type for Hessians, feature maps and
// the eigen/rank routines; not a general linear-algebra library.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> a;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), a(r * c, 0.0) {}

  double& at(std::size_t i, std::size_t j) { return a[i * cols + j]; }
  double at(std::size_t i, std::size_t j) const { return a[i * cols + j]; }
};

// Eigenvalues of a symmetric matrix in ascending order, via cyclic Jacobi
// rotations iterated until the off-diagonal Frobenius norm drops below 1e-10.
// Throws if the input is not square or not symmetric within sym_tol.
std::vector<double> sym_eigenvalues(const Matrix& h, double sym_tol = 1e-8);

// Numerical rank: the number of singular values above rel_tol * sigma_max,
// computed with one-sided Jacobi orthogonalization. Rank of an all-zero
// matrix is 0. Throws on non-finite input.
std::size_t matrix_rank(const Matrix& m, double rel_tol = 1e-6);

}  // namespace fedsim
