#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>

#include "smtgp/kernels.hpp"
#include "smtgp/kronecker.hpp"
#include "smtgp/model_common.hpp"
#include "smtgp/optim.hpp"

namespace smtgp {

/**
 * Full-rank multi-task Kronecker GP baseline:
 *
 *     vec(Y) ~ N(0,  D (x) R  +  sigma^2 I)
 *
 * with a t x t task covariance D from a kernel over task features (one-hot
 * coordinates by default) and an n x n sample covariance R. Inference uses
 * the joint eigendecomposition of D and R, which costs O(t^3) per likelihood
 * evaluation; the guard below keeps that from being invoked accidentally at
 * sizes where it stops being a baseline and starts being a mistake.
 */

struct MtKronprodConfig {
  KernelSpec task_kernel;    // covariance over task features (D)
  KernelSpec sample_kernel;  // covariance over inputs (R)
  Matrix task_features;      // t rows; empty selects one-hot coordinates I_t
  OptimizerSettings optimizer;
  Index variance_batch_size = 256;
  Index max_tasks_guard = 4096;
};

struct MtKronprodParams {
  KernelParams theta_d;
  KernelParams theta_r;
  double theta_sigma2 = 0.0;

  double sigma2() const { return std::exp(theta_sigma2); }
};

struct MtKronprodModel {
  MtKronprodConfig config;
  MtKronprodParams params;
  Matrix train_x;
  Index n_tasks = 0;
  EigenDecomposition eig_d;
  EigenDecomposition eig_r;
  Vector kron_inv_diag;  // n*t reciprocals of (s_d (x) s_r + sigma^2)
  Matrix alpha;          // n x t precision-scaled responses in the eigenbasis
  double final_lml = 0.0;
  int floor_warnings = 0;
  int optimizer_iterations = 0;
  int optimizer_evaluations = 0;
};

inline Index mtkronprod_raw_param_count(const MtKronprodConfig& config) {
  return param_count(config.task_kernel) + param_count(config.sample_kernel) + 1;
}

inline Vector mtkronprod_pack(const MtKronprodConfig& config,
                              const MtKronprodParams& params) {
  Vector out(mtkronprod_raw_param_count(config));
  out << params.theta_d.raw, params.theta_r.raw, params.theta_sigma2;
  return out;
}

inline MtKronprodParams mtkronprod_unpack(const MtKronprodConfig& config,
                                          const Vector& raw) {
  if (raw.size() != mtkronprod_raw_param_count(config))
    throw std::invalid_argument("mtkronprod_unpack: raw length mismatch");
  const Index nd = param_count(config.task_kernel);
  const Index nr = param_count(config.sample_kernel);
  MtKronprodParams p;
  p.theta_d.raw = raw.head(nd);
  p.theta_r.raw = raw.segment(nd, nr);
  p.theta_sigma2 = raw(nd + nr);
  return p;
}

namespace detail {

inline Matrix mtkronprod_task_features(const MtKronprodConfig& config, Index t) {
  if (config.task_features.size() == 0) return Matrix::Identity(t, t);
  if (config.task_features.rows() != t)
    throw std::invalid_argument("task_features must have one row per task");
  return config.task_features;
}

struct MtKronprodFactorization {
  EigenDecomposition eig_d, eig_r;
  Matrix rotated;   // U_R^T Y U_D
  Matrix inv_diag;  // n x t
  Matrix alpha;
  double sigma2;
  Index n, t;
  int floor_warnings = 0;
  double lml;
};

inline MtKronprodFactorization mtkronprod_factorize(const Matrix& d,
                                                    const Matrix& r,
                                                    double sigma2,
                                                    const Matrix& y) {
  MtKronprodFactorization f;
  f.n = y.rows();
  f.t = y.cols();
  f.sigma2 = sigma2;
  f.eig_d = sym_eig(d);
  f.eig_r = sym_eig(r);
  f.eig_d.values = f.eig_d.values.cwiseMax(0.0);
  f.eig_r.values = f.eig_r.values.cwiseMax(0.0);
  f.rotated.noalias() = f.eig_r.vectors.transpose() * y * f.eig_d.vectors;

  f.inv_diag.resize(f.n, f.t);
  double log_det = 0.0;
  for (Index j = 0; j < f.t; ++j)
    for (Index i = 0; i < f.n; ++i) {
      double denom = f.eig_d.values(j) * f.eig_r.values(i) + sigma2;
      if (denom <= kKronDiagFloor) {
        denom = kKronDiagFloor;
        ++f.floor_warnings;
      }
      f.inv_diag(i, j) = 1.0 / denom;
      log_det += std::log(denom);
    }
  f.alpha = f.inv_diag.cwiseProduct(f.rotated);
  const double quad = f.rotated.cwiseProduct(f.alpha).sum();
  f.lml = -0.5 * static_cast<double>(f.n) * static_cast<double>(f.t) *
              std::log(2.0 * M_PI) -
          0.5 * log_det - 0.5 * quad;
  return f;
}

inline Vector mtkronprod_gradient_from_factorization(
    const MtKronprodConfig& config, const MtKronprodParams& params,
    const Matrix& task_features, const Matrix& x,
    const MtKronprodFactorization& f) {
  const Index nd = param_count(config.task_kernel);
  const Index nr = param_count(config.sample_kernel);
  Vector grad(nd + nr + 1);
  const Vector& s_d = f.eig_d.values;
  const Vector& s_r = f.eig_r.values;

  for (Index k = 0; k < nd; ++k) {
    const Matrix dd = kernel_grad(config.task_kernel, params.theta_d,
                                  task_features, k);
    const Matrix m = f.eig_d.vectors.transpose() * dd * f.eig_d.vectors;
    const double det_term = m.diagonal().dot(f.inv_diag.transpose() * s_r);
    const double data_term =
        f.alpha.cwiseProduct(s_r.asDiagonal() * f.alpha * m).sum();
    grad(k) = -0.5 * det_term + 0.5 * data_term;
  }
  for (Index k = 0; k < nr; ++k) {
    const Matrix dr = kernel_grad(config.sample_kernel, params.theta_r, x, k);
    const Matrix m = f.eig_r.vectors.transpose() * dr * f.eig_r.vectors;
    const double det_term = m.diagonal().dot(f.inv_diag * s_d);
    const double data_term =
        f.alpha.cwiseProduct(m * f.alpha * s_d.asDiagonal()).sum();
    grad(nd + k) = -0.5 * det_term + 0.5 * data_term;
  }
  grad(nd + nr) =
      -0.5 * f.sigma2 * (f.inv_diag.sum() - f.alpha.squaredNorm());
  return grad;
}

}  // namespace detail

inline double mtkronprod_log_marginal(const MtKronprodConfig& config,
                                      const MtKronprodParams& params,
                                      const Matrix& x, const Matrix& y) {
  if (y.rows() != x.rows())
    throw std::invalid_argument("x and y must have the same number of rows");
  const Matrix features = detail::mtkronprod_task_features(config, y.cols());
  const Matrix d = eval_kernel(config.task_kernel, params.theta_d, features);
  const Matrix r = eval_kernel(config.sample_kernel, params.theta_r, x);
  return detail::mtkronprod_factorize(d, r, params.sigma2(), y).lml;
}

inline Vector mtkronprod_gradient(const MtKronprodConfig& config,
                                  const MtKronprodParams& params,
                                  const Matrix& x, const Matrix& y) {
  const Matrix features = detail::mtkronprod_task_features(config, y.cols());
  const Matrix d = eval_kernel(config.task_kernel, params.theta_d, features);
  const Matrix r = eval_kernel(config.sample_kernel, params.theta_r, x);
  const auto f = detail::mtkronprod_factorize(d, r, params.sigma2(), y);
  return detail::mtkronprod_gradient_from_factorization(config, params,
                                                        features, x, f);
}

inline MtKronprodModel mtkronprod_fit(const MtKronprodConfig& config,
                                      const Matrix& x, const Matrix& y) {
  if (x.rows() < 2)
    throw std::invalid_argument("mtkronprod_fit: need at least 2 samples");
  if (y.cols() > config.max_tasks_guard)
    throw std::invalid_argument(
        "mtkronprod_fit: task count exceeds the eigendecomposition guard (" +
        std::to_string(config.max_tasks_guard) + ")");
  MtKronprodModel model;
  model.config = config;
  model.train_x = x;
  model.n_tasks = y.cols();
  const Matrix features = detail::mtkronprod_task_features(config, y.cols());

  const Index n_raw = mtkronprod_raw_param_count(config);
  Vector x0 = config.optimizer.initial_raw;
  if (x0.size() == 0) x0 = Vector::Zero(n_raw);
  if (x0.size() != n_raw)
    throw std::invalid_argument("initial_raw length mismatch");

  const auto objective = [&](const Vector& raw, Vector& grad) -> double {
    try {
      const MtKronprodParams p = mtkronprod_unpack(config, raw);
      const Matrix d = eval_kernel(config.task_kernel, p.theta_d, features);
      const Matrix r = eval_kernel(config.sample_kernel, p.theta_r, x);
      const auto f = detail::mtkronprod_factorize(d, r, p.sigma2(), y);
      grad = -detail::mtkronprod_gradient_from_factorization(config, p,
                                                             features, x, f);
      return -f.lml;
    } catch (const std::exception&) {
      grad.setZero();
      return std::numeric_limits<double>::infinity();
    }
  };

  LbfgsOptions opts;
  opts.max_iterations = config.optimizer.max_iterations;
  opts.gradient_tolerance = config.optimizer.gradient_tolerance;
  const OptimResult res = minimize_lbfgs(objective, x0, opts);
  if (!std::isfinite(res.fx))
    throw std::runtime_error("mtkronprod_fit: optimizer diverged");

  model.params = mtkronprod_unpack(config, res.x);
  const Matrix d = eval_kernel(config.task_kernel, model.params.theta_d, features);
  const Matrix r = eval_kernel(config.sample_kernel, model.params.theta_r, x);
  auto f = detail::mtkronprod_factorize(d, r, model.params.sigma2(), y);
  model.eig_d = std::move(f.eig_d);
  model.eig_r = std::move(f.eig_r);
  model.kron_inv_diag =
      Eigen::Map<const Vector>(f.inv_diag.data(), f.inv_diag.size());
  model.alpha = std::move(f.alpha);
  model.final_lml = f.lml;
  model.floor_warnings = f.floor_warnings;
  model.optimizer_iterations = res.iterations;
  model.optimizer_evaluations = res.evaluations;
  return model;
}

// Build the cached model state at fixed parameters, without optimizing.
inline MtKronprodModel mtkronprod_model_at(const MtKronprodConfig& config,
                                           const MtKronprodParams& params,
                                           const Matrix& x, const Matrix& y) {
  MtKronprodModel model;
  model.config = config;
  model.params = params;
  model.train_x = x;
  model.n_tasks = y.cols();
  const Matrix features = detail::mtkronprod_task_features(config, y.cols());
  const Matrix d = eval_kernel(config.task_kernel, params.theta_d, features);
  const Matrix r = eval_kernel(config.sample_kernel, params.theta_r, x);
  auto f = detail::mtkronprod_factorize(d, r, params.sigma2(), y);
  model.eig_d = std::move(f.eig_d);
  model.eig_r = std::move(f.eig_r);
  model.kron_inv_diag =
      Eigen::Map<const Vector>(f.inv_diag.data(), f.inv_diag.size());
  model.alpha = std::move(f.alpha);
  model.final_lml = f.lml;
  model.floor_warnings = f.floor_warnings;
  return model;
}

inline PredictiveDistribution mtkronprod_predict(const MtKronprodModel& model,
                                                 const Matrix& x_star) {
  if (x_star.cols() != model.train_x.cols())
    throw std::invalid_argument("mtkronprod_predict: feature dimension mismatch");
  const Index n_star = x_star.rows();
  const Index t = model.n_tasks;
  const Vector& s_d = model.eig_d.values;

  const Matrix r_star = eval_kernel(model.config.sample_kernel,
                                    model.params.theta_r, x_star, model.train_x);
  const Matrix h = r_star * model.eig_r.vectors;

  PredictiveDistribution out;
  out.mean.noalias() =
      h * model.alpha * s_d.asDiagonal() * model.eig_d.vectors.transpose();
  if (!out.mean.allFinite())
    throw std::runtime_error("mtkronprod_predict: non-finite predictive mean");

  const Vector r_ss_diag = eval_kernel_self_diag(
      model.config.sample_kernel, model.params.theta_r, x_star);
  const Matrix inv_diag =
      Eigen::Map<const Matrix>(model.kron_inv_diag.data(), model.train_x.rows(), t);
  const Matrix q = h.cwiseAbs2() * inv_diag;
  const Matrix g = model.eig_d.vectors * s_d.asDiagonal();
  const Vector d_tt = model.eig_d.vectors.cwiseAbs2() * s_d;

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
    throw std::runtime_error("mtkronprod_predict: negative predictive variance");
  out.variance_diag = out.variance_diag.cwiseMax(0.0);
  out.noise_variance = Vector::Constant(t, model.params.sigma2());
  return out;
}

inline Matrix mtkronprod_predict_full_covariance(const MtKronprodModel& model,
                                                 const Matrix& x_star,
                                                 Index max_cells = 2000) {
  if (x_star.rows() * model.n_tasks > max_cells)
    throw std::invalid_argument("mtkronprod_predict_full_covariance: size guard");
  const Vector& s_d = model.eig_d.values;
  const Matrix r_star = eval_kernel(model.config.sample_kernel,
                                    model.params.theta_r, x_star, model.train_x);
  const Matrix r_ss = eval_kernel(model.config.sample_kernel,
                                  model.params.theta_r, x_star);
  const Matrix h = r_star * model.eig_r.vectors;
  const Matrix g = model.eig_d.vectors * s_d.asDiagonal();
  const Matrix d_task =
      model.eig_d.vectors * s_d.asDiagonal() * model.eig_d.vectors.transpose();
  const Matrix gh = kron_product(g, h);
  return kron_product(d_task, r_ss) -
         gh * model.kron_inv_diag.asDiagonal() * gh.transpose();
}

}  // namespace smtgp
