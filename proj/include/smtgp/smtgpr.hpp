#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>

#include "smtgp/kernels.hpp"
#include "smtgp/kronecker.hpp"
#include "smtgp/model_common.hpp"
#include "smtgp/optim.hpp"
#include "smtgp/pca_basis.hpp"

namespace smtgp {

/**
 * Scalable multi-task Gaussian process regression.
 *
 * Responses Y (n samples x t tasks) are modeled as
 *
 *     vec(Y) ~ N(0,  B C B^T (x) R  +  sigma^2 I)
 *
 * where B is a column-orthonormal t x p task basis (PCA of the training
 * responses), C is a p x p latent-task covariance built from a kernel over
 * task features, and R is the n x n sample covariance from a kernel over the
 * inputs. Orthonormality of B lets every expensive operation run in the
 * joint eigenbasis of C and R, so the inverse of the full nt x nt covariance
 * reduces to the reciprocal of a diagonal:
 *
 *     diag_inv(i,j) = 1 / (s_c[j] * s_r[i] + sigma^2).
 *
 * B C B^T is rank-deficient in the full task space: the covariance has
 * n*(t-p) eigendirections whose eigenvalue is exactly sigma^2. The marginal
 * likelihood and the sigma^2 gradient include those noise-only terms (a
 * determinant contribution n*(t-p)*ln sigma^2 and a data contribution
 * (||Y||_F^2 - ||Y B||_F^2) / sigma^2), which makes this evaluation equal to
 * the dense Gaussian log-density, not just proportional to it.
 */

struct SmtgprConfig {
  KernelSpec sample_kernel;  // covariance over inputs (R)
  KernelSpec task_kernel;    // covariance over latent task features (C)
  Index p = 1;               // number of basis components
  Matrix task_features;      // p rows; empty selects one-hot coordinates I_p
  OptimizerSettings optimizer;
  Index variance_batch_size = 256;  // tasks per block in variance extraction
};

struct SmtgprParams {
  KernelParams theta_c;      // latent-task kernel, log space
  KernelParams theta_r;      // sample kernel, log space
  double theta_sigma2 = 0.0; // log noise variance

  double sigma2() const { return std::exp(theta_sigma2); }
};

struct SmtgprModel {
  SmtgprConfig config;
  OrthogonalBasis basis;
  SmtgprParams params;
  Matrix train_x;
  EigenDecomposition eig_c;  // of C, eigenvalues clamped at 0
  EigenDecomposition eig_r;  // of R, eigenvalues clamped at 0
  Vector kron_inv_diag;      // n*p reciprocals of (s_c (x) s_r + sigma^2)
  Matrix alpha;              // n x p precision-scaled responses in the eigenbasis
  double final_lml = 0.0;
  int floor_warnings = 0;    // inverse-diagonal entries hit the numerical floor
  int optimizer_iterations = 0;
  int optimizer_evaluations = 0;
};

namespace detail {

inline Matrix smtgpr_task_features(const SmtgprConfig& config) {
  if (config.task_features.size() == 0)
    return Matrix::Identity(config.p, config.p);
  if (config.task_features.rows() != config.p)
    throw std::invalid_argument("task_features must have p rows");
  return config.task_features;
}

// Shared factorization behind likelihood, gradient, fit, and predict.
struct SmtgprFactorization {
  EigenDecomposition eig_c, eig_r;
  Matrix rotated;        // U_R^T Y B U_C, n x p
  Matrix inv_diag;       // n x p reciprocals of shifted Kronecker eigenvalues
  Matrix alpha;          // inv_diag .* rotated
  double null_energy;    // ||Y||_F^2 - ||Y B||_F^2
  double sigma2;
  Index n, t, p;
  int floor_warnings = 0;
  double lml;
};

inline SmtgprFactorization smtgpr_factorize(const Matrix& c, const Matrix& r,
                                            double sigma2, const Matrix& b,
                                            const Matrix& y) {
  SmtgprFactorization f;
  f.n = y.rows();
  f.t = y.cols();
  f.p = b.cols();
  f.sigma2 = sigma2;
  f.eig_c = sym_eig(c);
  f.eig_r = sym_eig(r);
  f.eig_c.values = f.eig_c.values.cwiseMax(0.0);
  f.eig_r.values = f.eig_r.values.cwiseMax(0.0);

  const Matrix yb = y * b;
  f.rotated.noalias() = f.eig_r.vectors.transpose() * yb * f.eig_c.vectors;
  f.null_energy = y.squaredNorm() - yb.squaredNorm();

  f.inv_diag.resize(f.n, f.p);
  double log_det = 0.0;
  for (Index j = 0; j < f.p; ++j)
    for (Index i = 0; i < f.n; ++i) {
      double denom = f.eig_c.values(j) * f.eig_r.values(i) + sigma2;
      if (denom <= kKronDiagFloor) {
        denom = kKronDiagFloor;
        ++f.floor_warnings;
      }
      f.inv_diag(i, j) = 1.0 / denom;
      log_det += std::log(denom);
    }
  log_det += static_cast<double>(f.n) * static_cast<double>(f.t - f.p) *
             std::log(sigma2);
  f.alpha = f.inv_diag.cwiseProduct(f.rotated);

  const double quad =
      f.rotated.cwiseProduct(f.alpha).sum() + f.null_energy / sigma2;
  f.lml = -0.5 * static_cast<double>(f.n) * static_cast<double>(f.t) *
              std::log(2.0 * M_PI) -
          0.5 * log_det - 0.5 * quad;
  return f;
}

struct SmtgprEvalInputs {
  Matrix task_features;
  Matrix c, r;
};

inline SmtgprEvalInputs smtgpr_eval_kernels(const SmtgprConfig& config,
                                            const SmtgprParams& params,
                                            const Matrix& x) {
  SmtgprEvalInputs in;
  in.task_features = smtgpr_task_features(config);
  in.c = eval_kernel(config.task_kernel, params.theta_c, in.task_features);
  in.r = eval_kernel(config.sample_kernel, params.theta_r, x);
  return in;
}

inline void check_smtgpr_data(const SmtgprConfig& config,
                              const OrthogonalBasis& basis, const Matrix& x,
                              const Matrix& y) {
  if (y.rows() != x.rows())
    throw std::invalid_argument("x and y must have the same number of rows");
  if (y.cols() != basis.b.rows())
    throw std::invalid_argument("y columns must match the basis task count");
  if (basis.b.cols() != config.p)
    throw std::invalid_argument("basis component count must equal config.p");
  if (!y.allFinite())
    throw std::invalid_argument("responses contain non-finite values");
}

}  // namespace detail

inline Index smtgpr_raw_param_count(const SmtgprConfig& config) {
  return param_count(config.task_kernel) + param_count(config.sample_kernel) + 1;
}

// Optimizable raw parameters plus the basis-size hyperparameter p.
inline Index smtgpr_total_param_count(const SmtgprConfig& config) {
  return smtgpr_raw_param_count(config) + 1;
}

inline Vector smtgpr_pack(const SmtgprConfig& config, const SmtgprParams& params) {
  Vector out(smtgpr_raw_param_count(config));
  out << params.theta_c.raw, params.theta_r.raw, params.theta_sigma2;
  return out;
}

inline SmtgprParams smtgpr_unpack(const SmtgprConfig& config, const Vector& raw) {
  if (raw.size() != smtgpr_raw_param_count(config))
    throw std::invalid_argument("smtgpr_unpack: raw parameter length mismatch");
  const Index nc = param_count(config.task_kernel);
  const Index nr = param_count(config.sample_kernel);
  SmtgprParams p;
  p.theta_c.raw = raw.head(nc);
  p.theta_r.raw = raw.segment(nc, nr);
  p.theta_sigma2 = raw(nc + nr);
  return p;
}

namespace detail {

inline Vector smtgpr_gradient_from_factorization(
    const SmtgprConfig& config, const SmtgprParams& params,
    const SmtgprEvalInputs& in, const Matrix& x, const SmtgprFactorization& f) {
  const Index nc = param_count(config.task_kernel);
  const Index nr = param_count(config.sample_kernel);
  Vector grad(nc + nr + 1);
  const Vector& s_c = f.eig_c.values;
  const Vector& s_r = f.eig_r.values;

  for (Index k = 0; k < nc; ++k) {
    const Matrix dc = kernel_grad(config.task_kernel, params.theta_c,
                                  in.task_features, k);
    const Matrix m = f.eig_c.vectors.transpose() * dc * f.eig_c.vectors;
    const double det_term = m.diagonal().dot(f.inv_diag.transpose() * s_r);
    const double data_term =
        f.alpha.cwiseProduct(s_r.asDiagonal() * f.alpha * m).sum();
    grad(k) = -0.5 * det_term + 0.5 * data_term;
  }
  for (Index k = 0; k < nr; ++k) {
    const Matrix dr = kernel_grad(config.sample_kernel, params.theta_r, x, k);
    const Matrix m = f.eig_r.vectors.transpose() * dr * f.eig_r.vectors;
    const double det_term = m.diagonal().dot(f.inv_diag * s_c);
    const double data_term =
        f.alpha.cwiseProduct(m * f.alpha * s_c.asDiagonal()).sum();
    grad(nc + k) = -0.5 * det_term + 0.5 * data_term;
  }
  // Log-noise gradient, including the n*(t-p) noise-only eigendirections.
  const double sigma2 = f.sigma2;
  const double null_count =
      static_cast<double>(f.n) * static_cast<double>(f.t - f.p);
  grad(nc + nr) =
      -0.5 * sigma2 *
      (f.inv_diag.sum() + null_count / sigma2 - f.alpha.squaredNorm() -
       f.null_energy / (sigma2 * sigma2));
  return grad;
}

}  // namespace detail

/**
 * Log marginal likelihood of the responses under the current parameters,
 * evaluated without forming any nt x nt matrix. The optimizer minimizes the
 * negative of this value.
 */
inline double smtgpr_log_marginal(const SmtgprConfig& config,
                                  const OrthogonalBasis& basis,
                                  const SmtgprParams& params, const Matrix& x,
                                  const Matrix& y) {
  detail::check_smtgpr_data(config, basis, x, y);
  const auto in = detail::smtgpr_eval_kernels(config, params, x);
  return detail::smtgpr_factorize(in.c, in.r, params.sigma2(), basis.b, y).lml;
}

/**
 * Analytic gradient of the log marginal likelihood with respect to all raw
 * parameters, in pack order (task kernel, sample kernel, log noise).
 */
inline Vector smtgpr_gradient(const SmtgprConfig& config,
                              const OrthogonalBasis& basis,
                              const SmtgprParams& params, const Matrix& x,
                              const Matrix& y) {
  detail::check_smtgpr_data(config, basis, x, y);
  const auto in = detail::smtgpr_eval_kernels(config, params, x);
  const auto f = detail::smtgpr_factorize(in.c, in.r, params.sigma2(), basis.b, y);
  return detail::smtgpr_gradient_from_factorization(config, params, in, x, f);
}

/**
 * Fit by maximizing the log marginal likelihood from the configured
 * initialization. Caches the eigendecompositions and precision-scaled
 * responses at the optimum so prediction does no further factorization work.
 */
inline SmtgprModel smtgpr_fit(const SmtgprConfig& config, const Matrix& x,
                              const Matrix& y) {
  if (x.rows() < 2) throw std::invalid_argument("smtgpr_fit: need at least 2 samples");
  SmtgprModel model;
  model.config = config;
  model.basis = fit_basis(y, config.p);
  model.train_x = x;
  detail::check_smtgpr_data(config, model.basis, x, y);

  const Index n_raw = smtgpr_raw_param_count(config);
  Vector x0 = config.optimizer.initial_raw;
  if (x0.size() == 0) x0 = Vector::Zero(n_raw);
  if (x0.size() != n_raw)
    throw std::invalid_argument("initial_raw length mismatch");

  const auto objective = [&](const Vector& raw, Vector& grad) -> double {
    try {
      const SmtgprParams p = smtgpr_unpack(config, raw);
      const auto in = detail::smtgpr_eval_kernels(config, p, x);
      const auto f = detail::smtgpr_factorize(in.c, in.r, p.sigma2(),
                                              model.basis.b, y);
      grad = -detail::smtgpr_gradient_from_factorization(config, p, in, x, f);
      return -f.lml;
    } catch (const std::exception&) {
      grad.setZero();
      return std::numeric_limits<double>::infinity();
    }
  };

  LbfgsOptions opts;
  opts.max_iterations = config.optimizer.max_iterations;
  opts.gradient_tolerance = config.optimizer.gradient_tolerance;
  OptimResult res;
  try {
    res = minimize_lbfgs(objective, x0, opts);
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("smtgpr_fit: optimizer failed: ") +
                             e.what());
  }
  if (!std::isfinite(res.fx))
    throw std::runtime_error("smtgpr_fit: optimizer diverged (non-finite objective)");

  model.params = smtgpr_unpack(config, res.x);
  const auto in = detail::smtgpr_eval_kernels(config, model.params, x);
  auto f = detail::smtgpr_factorize(in.c, in.r, model.params.sigma2(),
                                    model.basis.b, y);
  model.eig_c = std::move(f.eig_c);
  model.eig_r = std::move(f.eig_r);
  model.kron_inv_diag = Eigen::Map<const Vector>(f.inv_diag.data(), f.inv_diag.size());
  model.alpha = std::move(f.alpha);
  model.final_lml = f.lml;
  model.floor_warnings = f.floor_warnings;
  model.optimizer_iterations = res.iterations;
  model.optimizer_evaluations = res.evaluations;
  return model;
}

// Build the cached model state at fixed parameters, without optimizing.
inline SmtgprModel smtgpr_model_at(const SmtgprConfig& config,
                                   const OrthogonalBasis& basis,
                                   const SmtgprParams& params, const Matrix& x,
                                   const Matrix& y) {
  detail::check_smtgpr_data(config, basis, x, y);
  SmtgprModel model;
  model.config = config;
  model.basis = basis;
  model.params = params;
  model.train_x = x;
  const auto in = detail::smtgpr_eval_kernels(config, params, x);
  auto f = detail::smtgpr_factorize(in.c, in.r, params.sigma2(), basis.b, y);
  model.eig_c = std::move(f.eig_c);
  model.eig_r = std::move(f.eig_r);
  model.kron_inv_diag =
      Eigen::Map<const Vector>(f.inv_diag.data(), f.inv_diag.size());
  model.alpha = std::move(f.alpha);
  model.final_lml = f.lml;
  model.floor_warnings = f.floor_warnings;
  return model;
}

namespace detail {

inline PredictiveDistribution smtgpr_predict_impl(const SmtgprModel& model,
                                                  const Matrix& x_star,
                                                  const Matrix& alpha) {
  if (x_star.cols() != model.train_x.cols())
    throw std::invalid_argument("smtgpr_predict: feature dimension mismatch");
  const Index n_star = x_star.rows();
  const Index t = model.basis.b.rows();
  const Index p = model.basis.b.cols();
  const Vector& s_c = model.eig_c.values;

  const Matrix r_star = eval_kernel(model.config.sample_kernel,
                                    model.params.theta_r, x_star, model.train_x);
  const Matrix h = r_star * model.eig_r.vectors;       // n_star x n
  const Matrix a = model.basis.b * model.eig_c.vectors;  // t x p

  PredictiveDistribution out;
  out.mean.noalias() = h * alpha * s_c.asDiagonal() * a.transpose();
  if (!out.mean.allFinite())
    throw std::runtime_error("smtgpr_predict: non-finite predictive mean");

  // Variance diagonal in task blocks; each entry is independent of the
  // block layout, so any batch size gives bitwise-identical results.
  const Vector r_ss_diag = eval_kernel_self_diag(
      model.config.sample_kernel, model.params.theta_r, x_star);
  const Matrix inv_diag =
      Eigen::Map<const Matrix>(model.kron_inv_diag.data(), model.train_x.rows(), p);
  const Matrix q = h.cwiseAbs2() * inv_diag;           // n_star x p
  const Matrix g = a * s_c.asDiagonal();               // t x p
  const Vector d_tt = a.cwiseAbs2() * s_c;             // diag of B C B^T

  out.variance_diag.resize(n_star, t);
  const Index batch = std::max<Index>(1, model.config.variance_batch_size);
  for (Index t0 = 0; t0 < t; t0 += batch) {
    const Index len = std::min(batch, t - t0);
    out.variance_diag.middleCols(t0, len).noalias() =
        r_ss_diag * d_tt.segment(t0, len).transpose() -
        q * g.middleRows(t0, len).cwiseAbs2().transpose();
  }
  const double min_var = out.variance_diag.minCoeff();
  if (min_var < -1e-8)
    throw std::runtime_error("smtgpr_predict: negative predictive variance " +
                             std::to_string(min_var));
  out.variance_diag = out.variance_diag.cwiseMax(0.0);
  out.noise_variance = Vector::Constant(t, model.params.sigma2());
  return out;
}

}  // namespace detail

// Predict using the residuals cached at fit time.
inline PredictiveDistribution smtgpr_predict(const SmtgprModel& model,
                                             const Matrix& x_star) {
  return detail::smtgpr_predict_impl(model, x_star, model.alpha);
}

// Predict against freshly supplied training responses (same training inputs).
inline PredictiveDistribution smtgpr_predict(const SmtgprModel& model,
                                             const Matrix& x_star,
                                             const Matrix& y_train) {
  if (y_train.rows() != model.train_x.rows() ||
      y_train.cols() != model.basis.b.rows())
    throw std::invalid_argument("smtgpr_predict: y_train shape mismatch");
  const Index p = model.basis.b.cols();
  Matrix rotated = model.eig_r.vectors.transpose() * (y_train * model.basis.b) *
                   model.eig_c.vectors;
  const Matrix inv_diag =
      Eigen::Map<const Matrix>(model.kron_inv_diag.data(), model.train_x.rows(), p);
  return detail::smtgpr_predict_impl(model, x_star,
                                     inv_diag.cwiseProduct(rotated));
}

/**
 * Full predictive covariance over (sample, task) pairs, vec-ordered to match
 * the column-major convention. Intended for verification at small sizes; the
 * guard mirrors the dense reference path.
 */
inline Matrix smtgpr_predict_full_covariance(const SmtgprModel& model,
                                             const Matrix& x_star,
                                             Index max_cells = 2000) {
  const Index t = model.basis.b.rows();
  if (x_star.rows() * t > max_cells)
    throw std::invalid_argument("smtgpr_predict_full_covariance: size guard");
  const Vector& s_c = model.eig_c.values;
  const Matrix r_star = eval_kernel(model.config.sample_kernel,
                                    model.params.theta_r, x_star, model.train_x);
  const Matrix r_ss = eval_kernel(model.config.sample_kernel,
                                  model.params.theta_r, x_star);
  const Matrix h = r_star * model.eig_r.vectors;
  const Matrix a = model.basis.b * model.eig_c.vectors;
  const Matrix g = a * s_c.asDiagonal();
  const Matrix d_task = a * s_c.asDiagonal() * a.transpose();
  const Matrix gh = kron_product(g, h);
  return kron_product(d_task, r_ss) -
         gh * model.kron_inv_diag.asDiagonal() * gh.transpose();
}

}  // namespace smtgp
