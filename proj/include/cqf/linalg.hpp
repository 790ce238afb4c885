#pragma once

// Small dense kernels used by the leave-out machinery. The guarded solve is
// the single code path for every M-block inverse in the library, so the
// triple loop and the public block_solve_guarded agree bit-for-bit.

#include "cqf/core.hpp"

#include <Eigen/Eigenvalues>

namespace cqf {

namespace detail {

// In-place lower Cholesky of a column-major n x n matrix with leading
// dimension n, factoring (a + shift*I). Only the lower triangle is read.
// Returns false when a pivot is not strictly positive.
inline bool cholesky_lower(double* a, Index n, double shift = 0.0) noexcept {
  for (Index j = 0; j < n; ++j) {
    double* colj = a + j * n;
    double diag = colj[j] + shift;
    for (Index k = 0; k < j; ++k) diag -= a[k * n + j] * a[k * n + j];
    if (!(diag > 0.0)) return false;
    const double ljj = std::sqrt(diag);
    colj[j] = ljj;
    const double inv = 1.0 / ljj;
    for (Index i = j + 1; i < n; ++i) {
      double s = colj[i];
      for (Index k = 0; k < j; ++k) s -= a[k * n + i] * a[k * n + j];
      colj[i] = s * inv;
    }
  }
  return true;
}

// Solves (L L') x = b in place for nrhs column-major right-hand sides.
inline void cholesky_solve(const double* l, Index n, double* b, Index nrhs) noexcept {
  for (Index r = 0; r < nrhs; ++r) {
    double* x = b + r * n;
    for (Index i = 0; i < n; ++i) {
      double s = x[i];
      for (Index k = 0; k < i; ++k) s -= l[k * n + i] * x[k];
      x[i] = s / l[i * n + i];
    }
    for (Index i = n - 1; i >= 0; --i) {
      double s = x[i];
      for (Index k = i + 1; k < n; ++k) s -= l[i * n + k] * x[k];
      x[i] = s / l[i * n + i];
    }
  }
}

// Reusable scratch for guarded factorizations.
struct GuardScratch {
  std::vector<double> factor;
};

// Factors `block` (n x n, column-major) into scratch.factor, checking whether
// lambda_min(block) >= t via a Cholesky of block - t I. Returns true when the
// ridge was applied. If even block + t I is not positive definite the block
// is shifted further until it is.
inline bool guarded_factor(const double* block, Index n, double t, GuardScratch& scratch) {
  auto& f = scratch.factor;
  f.assign(block, block + n * n);
  if (cholesky_lower(f.data(), n, -t)) {
    f.assign(block, block + n * n);
    if (cholesky_lower(f.data(), n, 0.0)) return false;
  }
  double shift = t;
  for (int attempt = 0; attempt < 60; ++attempt) {
    f.assign(block, block + n * n);
    if (cholesky_lower(f.data(), n, shift)) return true;
    shift *= 2.0;
  }
  throw NumericalError("guarded_factor: block is not symmetric positive semidefinite");
}

}  // namespace detail

// ---------------------------------------------------------------------------

struct GuardedSolution {
  Matrix x;
  bool regularized = false;
};

// Solves block * x = rhs. When lambda_min(block) < t_n the system
// (block + t_n I) x = rhs is solved instead and `regularized` is set.
inline GuardedSolution block_solve_guarded(const Matrix& block, const Matrix& rhs, double t_n,
                                           const RidgeCounter* counter = nullptr) {
  if (block.rows() != block.cols() || block.rows() != rhs.rows())
    throw ValidationError("block_solve_guarded: dimension mismatch");
  if (!(t_n > 0.0)) throw ValidationError("block_solve_guarded: ridge threshold must be positive");
  const Index n = block.rows();
  GuardedSolution out;
  out.x = rhs;
  if (n == 0) return out;
  detail::GuardScratch scratch;
  const Matrix sym = block;  // column-major contiguous copy
  out.regularized = detail::guarded_factor(sym.data(), n, t_n, scratch);
  detail::cholesky_solve(scratch.factor.data(), n, out.x.data(), out.x.cols());
  if (out.regularized && counter) counter->add();
  return out;
}

// Smallest and largest eigenvalue of a symmetric matrix.
inline std::pair<double, double> symmetric_extreme_eigenvalues(const Matrix& s) {
  if (s.rows() == 0) return {0.0, 0.0};
  Eigen::SelfAdjointEigenSolver<Matrix> es(s, Eigen::EigenvaluesOnly);
  return {es.eigenvalues()(0), es.eigenvalues()(s.rows() - 1)};
}

inline double min_eigenvalue(const Matrix& s) { return symmetric_extreme_eigenvalues(s).first; }

// Spectral norm. Blocks here are small, so an exact symmetric eigensolve of
// the smaller Gram product is used.
inline double operator_norm(const Matrix& a) {
  if (a.size() == 0) return 0.0;
  const Matrix g = a.rows() <= a.cols() ? Matrix(a * a.transpose()) : Matrix(a.transpose() * a);
  const double lmax = symmetric_extreme_eigenvalues(g).second;
  return std::sqrt(std::max(lmax, 0.0));
}

}  // namespace cqf
