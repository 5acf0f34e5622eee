#pragma once

#include <stdexcept>

#include "smtgp/types.hpp"

namespace smtgp {

/**
 * Column-orthonormal task basis obtained by PCA on the training responses.
 *
 * The basis is fit on column-centered data, but project() applies B to the
 * raw responses without re-centering: the zero-mean prior of the downstream
 * model absorbs means. Callers that want fully centered modeling subtract
 * column_means from the responses before training and prediction alike.
 */
struct OrthogonalBasis {
  Matrix b;                   // tasks x components, B^T B = I
  Vector explained_variance;  // descending, per component
  Vector column_means;        // centering used during fitting
};

/**
 * PCA basis from responses y (samples x tasks): the leading p right singular
 * directions of the column-centered data. Each basis column is sign-fixed so
 * its largest-magnitude entry is positive, making the fit deterministic.
 */
inline OrthogonalBasis fit_basis(const Matrix& y, Index p) {
  const Index n = y.rows(), t = y.cols();
  if (p < 1 || p > std::min(n, t))
    throw std::invalid_argument("fit_basis: p out of range");
  if (!y.allFinite())
    throw std::invalid_argument("fit_basis: responses contain non-finite values");

  OrthogonalBasis basis;
  basis.column_means = y.colwise().mean();
  Matrix centered = y.rowwise() - basis.column_means.transpose();
  if (centered.cwiseAbs().maxCoeff() == 0.0)
    throw std::invalid_argument("fit_basis: responses have zero variance");

  Eigen::BDCSVD<Matrix> svd(centered, Eigen::ComputeThinV);
  basis.b = svd.matrixV().leftCols(p);
  const Vector sv = svd.singularValues().head(p);
  basis.explained_variance =
      sv.array().square() / static_cast<double>(std::max<Index>(n - 1, 1));

  for (Index j = 0; j < p; ++j) {
    Index imax = 0;
    basis.b.col(j).cwiseAbs().maxCoeff(&imax);
    if (basis.b(imax, j) < 0.0) basis.b.col(j) = -basis.b.col(j);
  }
  return basis;
}

// Latent responses Z = Y B (no re-centering).
inline Matrix project(const OrthogonalBasis& basis, const Matrix& y) {
  if (y.cols() != basis.b.rows())
    throw std::invalid_argument("project: task dimension mismatch");
  return y * basis.b;
}

}  // namespace smtgp
