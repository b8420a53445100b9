#include "fedsim/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace fedsim {

namespace {

double off_diagonal_norm(const Matrix& m) {
  double sum = 0.0;
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j)
      if (i != j) sum += m.at(i, j) * m.at(i, j);
  return std::sqrt(sum);
}

}  // namespace

std::vector<double> sym_eigenvalues(const Matrix& h, double sym_tol) {
  if (h.rows != h.cols) throw std::invalid_argument("sym_eigenvalues: matrix not square");
  const std::size_t n = h.rows;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(h.at(i, j) - h.at(j, i)) > sym_tol)
        throw std::invalid_argument("sym_eigenvalues: matrix not symmetric within tolerance at (" +
                                    std::to_string(i) + "," + std::to_string(j) + ")");

  Matrix a = h;
  // Work on the exactly symmetric average so rotations stay consistent.
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double v = 0.5 * (a.at(i, j) + a.at(j, i));
      a.at(i, j) = v;
      a.at(j, i) = v;
    }

  constexpr double kOffTol = 1e-10;
  constexpr int kMaxSweeps = 100;

  bool converged = n < 2;
  double prev_off = off_diagonal_norm(a);
  for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double apq = a.at(p, q);
        if (apq == 0.0) continue;
        double app = a.at(p, p);
        double aqq = a.at(q, q);
        // Rotation angle that annihilates a[p][q] (Golub & Van Loan sym. Schur).
        double theta = (aqq - app) / (2.0 * apq);
        double t = (theta >= 0.0 ? 1.0 : -1.0) /
                   (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0);
        double s = t * c;

        double* row_p = &a.a[p * n];
        double* row_q = &a.a[q * n];
        for (std::size_t k = 0; k < n; ++k) {
          double akp = row_p[k];
          double akq = row_q[k];
          row_p[k] = c * akp - s * akq;
          row_q[k] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          a.at(k, p) = row_p[k];
          a.at(k, q) = row_q[k];
        }
        // Recompute the 2x2 block directly; keeps the pivot exactly zero.
        double new_pp = c * c * app - 2.0 * s * c * apq + s * s * aqq;
        double new_qq = s * s * app + 2.0 * s * c * apq + c * c * aqq;
        a.at(p, p) = new_pp;
        a.at(q, q) = new_qq;
        a.at(p, q) = 0.0;
        a.at(q, p) = 0.0;
      }
    }
    double off = off_diagonal_norm(a);
    // Quadratic convergence once small; a non-decreasing off-norm means we
    // hit the rounding noise floor and further sweeps cannot help.
    if (off < kOffTol || (sweep >= 3 && off >= prev_off)) converged = true;
    prev_off = off;
  }
  if (!converged)
    throw std::runtime_error("sym_eigenvalues: Jacobi iteration did not converge");

  std::vector<double> eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = a.at(i, i);
  std::sort(eig.begin(), eig.end());
  return eig;
}

std::size_t matrix_rank(const Matrix& m, double rel_tol) {
  for (double v : m.a)
    if (!std::isfinite(v)) throw std::invalid_argument("matrix_rank: non-finite entry");
  if (m.rows == 0 || m.cols == 0) return 0;

  // One-sided Jacobi works on columns; transpose when that gives fewer of them.
  std::size_t rows = m.rows, cols = m.cols;
  bool transpose = cols > rows;
  if (transpose) std::swap(rows, cols);
  // Column-major working copy: u[j] is a column vector of length `rows`.
  std::vector<std::vector<double>> u(cols, std::vector<double>(rows));
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) {
      if (transpose)
        u[i][j] = m.at(i, j);
      else
        u[j][i] = m.at(i, j);
    }

  constexpr int kMaxSweeps = 60;
  constexpr double kOrthTol = 1e-14;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool converged = true;
    for (std::size_t p = 0; p + 1 < cols; ++p) {
      for (std::size_t q = p + 1; q < cols; ++q) {
        double alpha = 0.0, beta = 0.0, gam = 0.0;
        for (std::size_t k = 0; k < rows; ++k) {
          alpha += u[p][k] * u[p][k];
          beta += u[q][k] * u[q][k];
          gam += u[p][k] * u[q][k];
        }
        if (std::abs(gam) <= kOrthTol * std::sqrt(alpha * beta)) continue;
        converged = false;
        double zeta = (beta - alpha) / (2.0 * gam);
        double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                   (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        double c = 1.0 / std::sqrt(1.0 + t * t);
        double s = c * t;
        for (std::size_t k = 0; k < rows; ++k) {
          double up = u[p][k];
          double uq = u[q][k];
          u[p][k] = c * up - s * uq;
          u[q][k] = s * up + c * uq;
        }
      }
    }
    if (converged) break;
  }

  std::vector<double> sigma(cols, 0.0);
  double sigma_max = 0.0;
  for (std::size_t j = 0; j < cols; ++j) {
    double sum = 0.0;
    for (std::size_t k = 0; k < rows; ++k) sum += u[j][k] * u[j][k];
    sigma[j] = std::sqrt(sum);
    sigma_max = std::max(sigma_max, sigma[j]);
  }
  if (sigma_max == 0.0) return 0;
  std::size_t rank = 0;
  for (double s : sigma)
    if (s > rel_tol * sigma_max) ++rank;
  return rank;
}

}  // namespace fedsim
