#pragma once

#include <cmath>
#include <stdexcept>

#include "smtgp/kronecker.hpp"
#include "smtgp/types.hpp"

namespace smtgp {

/**
 * Dense reference implementations for verification at small sizes.
 *
 * These materialize the full joint covariance over all (sample, task) pairs
 * and evaluate the Gaussian log-density and predictive moments with generic
 * dense factorizations. They are the slow, obviously-correct route the
 * efficient eigendecomposition paths are tested against, and are guarded
 * against accidental use at scale.
 */

namespace detail {

inline void check_dense_guard(Index cells, Index max_cells) {
  if (cells > max_cells)
    throw std::invalid_argument("dense reference: joint size " +
                                std::to_string(cells) +
                                " exceeds the guard of " +
                                std::to_string(max_cells));
}

inline Eigen::LLT<Matrix> checked_llt(const Matrix& k) {
  Eigen::LLT<Matrix> llt(k);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("dense reference: covariance not positive definite");
  return llt;
}

}  // namespace detail

// Log-density of vec(y) under N(0, b c b^T (x) r + sigma2 I).
inline double dense_kron_gp_lml(const Matrix& b, const Matrix& c,
                                const Matrix& r, double sigma2, const Matrix& y,
                                Index max_cells = 2000) {
  detail::check_dense_guard(y.size(), max_cells);
  const Index nt = y.size();
  Matrix k = kron_product(b * c * b.transpose(), r);
  k.diagonal().array() += sigma2;
  const auto llt = detail::checked_llt(k);
  const double log_det =
      2.0 * llt.matrixLLT().diagonal().array().log().sum();
  const Vector v = vec(y);
  const double quad = v.dot(llt.solve(v));
  return -0.5 * static_cast<double>(nt) * std::log(2.0 * M_PI) -
         0.5 * log_det - 0.5 * quad;
}

struct DensePrediction {
  Matrix mean;             // n_star x tasks
  Matrix covariance_full;  // n_star*tasks square, vec-ordered
  Matrix variance_diag;    // n_star x tasks
};

// Predictive mean and covariance from the joint Gaussian, computed densely.
// r_star is the test-train sample covariance, r_star_star the test-test one.
inline DensePrediction dense_kron_gp_predict(const Matrix& b, const Matrix& c,
                                             const Matrix& r,
                                             const Matrix& r_star,
                                             const Matrix& r_star_star,
                                             double sigma2, const Matrix& y,
                                             Index max_cells = 2000) {
  detail::check_dense_guard(y.size(), max_cells);
  detail::check_dense_guard(r_star.rows() * b.rows(), max_cells);
  const Index n_star = r_star.rows();
  const Index t = b.rows();
  const Matrix d_task = b * c * b.transpose();
  Matrix k = kron_product(d_task, r);
  k.diagonal().array() += sigma2;
  const Matrix k_star = kron_product(d_task, r_star);
  const Matrix k_ss = kron_product(d_task, r_star_star);
  const auto llt = detail::checked_llt(k);

  DensePrediction out;
  const Vector mean_vec = k_star * llt.solve(vec(y));
  out.mean = unvec(mean_vec, n_star, t);
  out.covariance_full = k_ss - k_star * llt.solve(k_star.transpose());
  out.variance_diag = unvec(out.covariance_full.diagonal(), n_star, t);
  return out;
}

// Standard single-output GP quantities, used as the per-task oracle.
inline double dense_gp_lml(const Matrix& k_with_noise, const Vector& y) {
  const auto llt = detail::checked_llt(k_with_noise);
  const double log_det =
      2.0 * llt.matrixLLT().diagonal().array().log().sum();
  return -0.5 * static_cast<double>(y.size()) * std::log(2.0 * M_PI) -
         0.5 * log_det - 0.5 * y.dot(llt.solve(y));
}

struct DenseGpPrediction {
  Vector mean;
  Vector variance;  // latent, no observation noise
};

inline DenseGpPrediction dense_gp_predict(const Matrix& k_with_noise,
                                          const Matrix& k_star,
                                          const Vector& k_ss_diag,
                                          const Vector& y) {
  const auto llt = detail::checked_llt(k_with_noise);
  DenseGpPrediction out;
  out.mean = k_star * llt.solve(y);
  const Matrix solved = llt.solve(k_star.transpose());
  out.variance =
      k_ss_diag - (k_star.transpose().cwiseProduct(solved)).colwise().sum().transpose();
  return out;
}

}  // namespace smtgp
