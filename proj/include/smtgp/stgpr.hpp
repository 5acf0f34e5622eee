#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "smtgp/kernels.hpp"
#include "smtgp/model_common.hpp"
#include "smtgp/optim.hpp"

namespace smtgp {

/**
 * Mass-univariate baseline: one independent single-output GP per task, each
 * with its own kernel parameters and its own noise variance (so the ensemble
 * handles per-task noise levels the multi-task models share).
 *
 * Task fits are independent; they run in parallel and a failed task is
 * recorded and skipped rather than aborting its siblings. Downstream
 * consumers see NaN columns for failed tasks.
 */

struct StgprConfig {
  KernelSpec kernel{{KernelTerm::Linear, KernelTerm::SquaredExponential}};
  OptimizerSettings optimizer;
  int n_threads = 0;  // 0: hardware concurrency
};

struct StgprTaskFit {
  KernelParams kernel_params;
  double theta_sigma2 = 0.0;  // log noise variance
  double final_lml = std::numeric_limits<double>::quiet_NaN();
  bool ok = false;
  std::string error;

  double sigma2() const { return std::exp(theta_sigma2); }
};

struct StgprModel {
  StgprConfig config;
  Matrix train_x;
  Matrix train_y;
  std::vector<StgprTaskFit> tasks;
  Index failed_tasks = 0;
};

// Raw parameters per task: kernel parameters plus one log noise variance.
inline Index stgpr_params_per_task(const StgprConfig& config) {
  return param_count(config.kernel) + 1;
}

inline Index stgpr_total_param_count(const StgprConfig& config, Index n_tasks) {
  return stgpr_params_per_task(config) * n_tasks;
}

namespace detail {

// Per-fit cache of the parameter-independent Gram pieces, shared across all
// task fits on the same inputs.
struct GramCache {
  std::vector<KernelTerm> terms;
  Matrix xxt;  // for linear terms
  Matrix d2;   // for squared-exponential terms
  Index n = 0;

  explicit GramCache(const KernelSpec& spec, const Matrix& x)
      : terms(spec.terms), n(x.rows()) {
    for (auto t : terms) {
      if (t == KernelTerm::Linear && xxt.size() == 0) xxt = x * x.transpose();
      if (t == KernelTerm::SquaredExponential && d2.size() == 0)
        d2 = squared_distances(x, x, true);
    }
  }

  // One pass for the kernel matrix and every per-parameter gradient matrix;
  // the squared-exponential exponential is computed once and shared.
  void eval_all(const Vector& raw, Matrix& k, std::vector<Matrix>& grads) const {
    k = Matrix::Zero(n, n);
    grads.assign(static_cast<std::size_t>(raw.size()), Matrix());
    Index off = 0;
    for (auto t : terms) {
      switch (t) {
        case KernelTerm::Linear:
          grads[off] = std::exp(raw(off)) * xxt;
          k += grads[off];
          break;
        case KernelTerm::SquaredExponential: {
          const double s = std::exp(raw(off));
          const double l = std::exp(raw(off + 1));
          Matrix e = s * (-d2 / (2.0 * l * l)).array().exp().matrix();
          k += e;
          grads[off + 1] = e.cwiseProduct(d2 / (l * l));
          grads[off] = std::move(e);
          break;
        }
        case KernelTerm::DiagonalIsotropic:
          grads[off] = std::exp(raw(off)) * Matrix::Identity(n, n);
          k.diagonal().array() += std::exp(raw(off));
          break;
      }
      off += term_param_count(t);
    }
  }
};

inline StgprTaskFit stgpr_fit_one(const StgprConfig& config,
                                  const GramCache& cache, const Vector& y) {
  const Index nk = param_count(config.kernel);
  const Index n = y.size();

  const auto objective = [&](const Vector& raw, Vector& grad) -> double {
    const double sigma2 = std::exp(raw(nk));
    if (!std::isfinite(sigma2)) {
      grad.setZero();
      return std::numeric_limits<double>::infinity();
    }
    Matrix k;
    std::vector<Matrix> dks;
    cache.eval_all(raw.head(nk), k, dks);
    k.diagonal().array() += sigma2;
    Eigen::LLT<Matrix> llt(k);
    if (llt.info() != Eigen::Success) {
      grad.setZero();
      return std::numeric_limits<double>::infinity();
    }
    const Vector alpha = llt.solve(y);
    const double log_det = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    const double lml = -0.5 * static_cast<double>(n) * std::log(2.0 * M_PI) -
                       0.5 * log_det - 0.5 * y.dot(alpha);
    const Matrix k_inv = llt.solve(Matrix::Identity(n, n));
    for (Index j = 0; j < nk; ++j)
      grad(j) = -(0.5 * alpha.dot(dks[static_cast<std::size_t>(j)] * alpha) -
                  0.5 * k_inv.cwiseProduct(dks[static_cast<std::size_t>(j)]).sum());
    grad(nk) = -(0.5 * sigma2 * (alpha.squaredNorm() - k_inv.trace()));
    return -lml;
  };

  StgprTaskFit fit;
  try {
    Vector x0 = config.optimizer.initial_raw;
    if (x0.size() == 0) x0 = Vector::Zero(nk + 1);
    if (x0.size() != nk + 1)
      throw std::invalid_argument("initial_raw length mismatch");
    LbfgsOptions opts;
    opts.max_iterations = config.optimizer.max_iterations;
    opts.gradient_tolerance = config.optimizer.gradient_tolerance;
    const OptimResult res = minimize_lbfgs(objective, x0, opts);
    if (!std::isfinite(res.fx))
      throw std::runtime_error("optimizer diverged");
    fit.kernel_params.raw = res.x.head(nk);
    fit.theta_sigma2 = res.x(nk);
    fit.final_lml = -res.fx;
    fit.ok = true;
  } catch (const std::exception& e) {
    fit.ok = false;
    fit.error = e.what();
  }
  return fit;
}

// Run fn(j) for j in [0, count) across threads; each index writes only its
// own output slot, so scheduling cannot change results.
template <typename Fn>
void parallel_tasks(Index count, int n_threads, Fn&& fn) {
  int hw = n_threads > 0 ? n_threads
                         : static_cast<int>(std::thread::hardware_concurrency());
  if (hw < 1) hw = 1;
  hw = std::min<int>(hw, static_cast<int>(count));
  if (hw <= 1) {
    for (Index j = 0; j < count; ++j) fn(j);
    return;
  }
  std::vector<std::thread> workers;
  workers.reserve(hw);
  for (int w = 0; w < hw; ++w)
    workers.emplace_back([&, w] {
      for (Index j = w; j < count; j += hw) fn(j);
    });
  for (auto& th : workers) th.join();
}

}  // namespace detail

inline StgprModel stgpr_fit(const StgprConfig& config, const Matrix& x,
                            const Matrix& y) {
  if (x.rows() < 2) throw std::invalid_argument("stgpr_fit: need at least 2 samples");
  if (y.rows() != x.rows())
    throw std::invalid_argument("x and y must have the same number of rows");
  StgprModel model;
  model.config = config;
  model.train_x = x;
  model.train_y = y;
  model.tasks.resize(y.cols());

  const detail::GramCache cache(config.kernel, x);
  detail::parallel_tasks(y.cols(), config.n_threads, [&](Index j) {
    model.tasks[j] = detail::stgpr_fit_one(config, cache, y.col(j));
  });
  for (const auto& t : model.tasks)
    if (!t.ok) ++model.failed_tasks;
  return model;
}

inline PredictiveDistribution stgpr_predict(const StgprModel& model,
                                            const Matrix& x_star) {
  if (x_star.cols() != model.train_x.cols())
    throw std::invalid_argument("stgpr_predict: feature dimension mismatch");
  const Index n_star = x_star.rows();
  const Index t = static_cast<Index>(model.tasks.size());
  const double nan = std::numeric_limits<double>::quiet_NaN();

  PredictiveDistribution out;
  out.mean = Matrix::Constant(n_star, t, nan);
  out.variance_diag = Matrix::Constant(n_star, t, nan);
  out.noise_variance = Vector::Constant(t, nan);

  detail::parallel_tasks(t, model.config.n_threads, [&](Index j) {
    const auto& fit = model.tasks[j];
    if (!fit.ok) return;
    Matrix k = eval_kernel(model.config.kernel, fit.kernel_params, model.train_x);
    k.diagonal().array() += fit.sigma2();
    Eigen::LLT<Matrix> llt(k);
    if (llt.info() != Eigen::Success) return;
    const Matrix k_star = eval_kernel(model.config.kernel, fit.kernel_params,
                                      x_star, model.train_x);
    const Vector k_ss = eval_kernel_self_diag(model.config.kernel,
                                              fit.kernel_params, x_star);
    out.mean.col(j) = k_star * llt.solve(model.train_y.col(j));
    const Matrix solved = llt.solve(k_star.transpose());
    out.variance_diag.col(j) =
        (k_ss -
         (k_star.transpose().cwiseProduct(solved)).colwise().sum().transpose())
            .cwiseMax(0.0);
    out.noise_variance(j) = fit.sigma2();
  });
  return out;
}

}  // namespace smtgp
