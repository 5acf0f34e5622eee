#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "smtgp/types.hpp"

namespace smtgp {

/**
 * Kronecker-product algebra and symmetric eigendecomposition.
 *
 * Conventions used throughout the library:
 *   - vec() stacks columns (column-major), so for the response matrix Y
 *     (samples x tasks) the joint covariance of vec(Y) factors as
 *     task_cov (x) sample_cov.
 *   - Eigendecompositions are returned with eigenvalues sorted descending.
 */

struct EigenDecomposition {
  Matrix vectors;  // orthogonal U, columns are eigenvectors
  Vector values;   // sorted descending
};

// Floor for shifted Kronecker eigenvalues before taking reciprocals.
inline constexpr double kKronDiagFloor = 1e-12;

inline Matrix kron_product(const Matrix& a, const Matrix& b) {
  if (a.size() == 0 || b.size() == 0)
    throw std::invalid_argument("kron_product: empty input");
  constexpr Index kMax = std::numeric_limits<Index>::max();
  if (a.rows() > kMax / b.rows() || a.cols() > kMax / b.cols() ||
      a.rows() * b.rows() > kMax / (a.cols() * b.cols()))
    throw std::invalid_argument("kron_product: product dimensions overflow");
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

// Column-major stacking of a matrix into a vector.
inline Vector vec(const Matrix& a) {
  if (a.size() == 0) throw std::invalid_argument("vec: empty input");
  return Eigen::Map<const Vector>(a.data(), a.size());
}

inline Matrix unvec(const Vector& v, Index rows, Index cols) {
  if (v.size() != rows * cols)
    throw std::invalid_argument("unvec: size mismatch");
  return Eigen::Map<const Matrix>(v.data(), rows, cols);
}

/**
 * Eigendecomposition of a symmetric matrix, eigenvalues descending.
 *
 * The input is symmetrized as (A + A^T)/2 before decomposing; asymmetry
 * beyond the tolerance (relative to the largest entry) is an error rather
 * than silently averaged away.
 */
inline EigenDecomposition sym_eig(const Matrix& a, double symmetry_tol = 1e-10) {
  if (a.rows() != a.cols())
    throw std::invalid_argument("sym_eig: input must be square");
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  const double asym = (a - a.transpose()).cwiseAbs().maxCoeff();
  if (asym > symmetry_tol * scale)
    throw std::invalid_argument("sym_eig: input asymmetric beyond tolerance (" +
                                std::to_string(asym) + ")");
  const Matrix sym = 0.5 * (a + a.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> solver(sym);
  if (solver.info() != Eigen::Success)
    throw std::runtime_error("sym_eig: eigensolver failed to converge");
  EigenDecomposition out;
  out.values = solver.eigenvalues().reverse();
  out.vectors = solver.eigenvectors().rowwise().reverse();
  return out;
}

// Clamp eigenvalues below rel_tol * max(S) to zero for rank decisions.
inline Vector clamp_eigenvalues(const Vector& values, double rel_tol = 1e-12) {
  if (values.size() == 0) return values;
  const double floor = rel_tol * values.cwiseAbs().maxCoeff();
  return (values.array().abs() <= floor).select(Vector::Zero(values.size()), values);
}

/**
 * Elementwise reciprocals of (s_c (x) s_r + sigma2): the diagonal of the
 * inverse of the shifted Kronecker eigenvalue matrix. Entry j*|s_r|+i holds
 * 1/(s_c[j]*s_r[i] + sigma2), matching the column-major vec convention.
 */
inline Vector kron_shift_inverse_diag(const Vector& s_c, const Vector& s_r,
                                      double sigma2,
                                      double singular_floor = kKronDiagFloor) {
  if (s_c.size() == 0 || s_r.size() == 0)
    throw std::invalid_argument("kron_shift_inverse_diag: empty eigenvalue vector");
  Vector out(s_c.size() * s_r.size());
  for (Index j = 0; j < s_c.size(); ++j)
    for (Index i = 0; i < s_r.size(); ++i) {
      const double denom = s_c(j) * s_r(i) + sigma2;
      if (!(denom > singular_floor))
        throw std::runtime_error(
            "kron_shift_inverse_diag: singular shifted eigenvalue " +
            std::to_string(denom));
      out(j * s_r.size() + i) = 1.0 / denom;
    }
  return out;
}

// log|A (x) B + shift I| from the eigenvalues of A and B.
inline double log_det_kron_shift(const Vector& s_a, const Vector& s_b,
                                 double shift) {
  double acc = 0.0;
  for (Index j = 0; j < s_a.size(); ++j)
    for (Index i = 0; i < s_b.size(); ++i)
      acc += std::log(s_a(j) * s_b(i) + shift);
  return acc;
}

}  // namespace smtgp
