#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "smtgp/model_common.hpp"
#include "smtgp/optim.hpp"
#include "smtgp/types.hpp"

namespace smtgp {

/**
 * Deviation scoring and evaluation metrics for normative models.
 *
 * A fitted regression of measurements on covariates describes the reference
 * population; new samples are scored by how far each measurement falls from
 * its predictive distribution. The per-cell z-statistic is
 *
 *     npm(i,j) = (y(i,j) - mean(i,j)) / sqrt(variance(i,j) + noise(j)),
 *
 * per-sample scores aggregate the most deviating cells, and an extreme-value
 * distribution fitted over reference scores turns them into probabilities.
 */

// Per-cell z-statistics. Cells belonging to failed task fits are NaN.
inline Matrix compute_npm(const Matrix& y_true,
                          const PredictiveDistribution& pred) {
  if (y_true.rows() != pred.mean.rows() || y_true.cols() != pred.mean.cols() ||
      pred.variance_diag.rows() != pred.mean.rows() ||
      pred.variance_diag.cols() != pred.mean.cols() ||
      pred.noise_variance.size() != pred.mean.cols())
    throw std::invalid_argument("compute_npm: shape mismatch");
  const double nan = std::numeric_limits<double>::quiet_NaN();
  Matrix npm(y_true.rows(), y_true.cols());
  for (Index j = 0; j < y_true.cols(); ++j) {
    const double noise = pred.noise_variance(j);
    for (Index i = 0; i < y_true.rows(); ++i) {
      const double m = pred.mean(i, j);
      const double v = pred.variance_diag(i, j);
      if (!std::isfinite(m) || !std::isfinite(v) || !std::isfinite(noise)) {
        npm(i, j) = nan;
        continue;
      }
      const double total = v + noise;
      if (!(total > 0.0))
        throw std::runtime_error("compute_npm: zero total variance at cell");
      npm(i, j) = (y_true(i, j) - m) / std::sqrt(total);
    }
  }
  return npm;
}

enum class RobustMean { TrimmedMean, Mean, Median };

/**
 * Per-sample abnormality score: the robust mean of the largest-magnitude
 * fraction of that sample's z-statistics. The default robust mean trims 10%
 * from each tail of the selected values; plain mean and median are available.
 */
inline Vector abnormality_scores(const Matrix& npm, double top_fraction = 0.05,
                                 RobustMean mode = RobustMean::TrimmedMean) {
  if (!(top_fraction > 0.0 && top_fraction <= 1.0))
    throw std::invalid_argument("abnormality_scores: top_fraction out of (0, 1]");
  if (top_fraction * static_cast<double>(npm.cols()) < 1.0)
    throw std::invalid_argument(
        "abnormality_scores: top_fraction selects less than one task");

  Vector scores(npm.rows());
  std::vector<double> mags;
  for (Index i = 0; i < npm.rows(); ++i) {
    mags.clear();
    for (Index j = 0; j < npm.cols(); ++j)
      if (std::isfinite(npm(i, j))) mags.push_back(std::abs(npm(i, j)));
    if (mags.empty())
      throw std::runtime_error("abnormality_scores: all-NaN row " +
                               std::to_string(i));
    const auto k = static_cast<std::size_t>(std::min<double>(
        static_cast<double>(mags.size()),
        std::ceil(top_fraction * static_cast<double>(mags.size()))));
    std::partial_sort(mags.begin(), mags.begin() + k, mags.end(),
                      std::greater<double>());
    std::vector<double> selected(mags.begin(), mags.begin() + k);
    std::sort(selected.begin(), selected.end());
    switch (mode) {
      case RobustMean::TrimmedMean: {
        const auto trim = static_cast<std::size_t>(
            std::floor(0.1 * static_cast<double>(k)));
        double acc = 0.0;
        for (std::size_t q = trim; q < k - trim; ++q) acc += selected[q];
        scores(i) = acc / static_cast<double>(k - 2 * trim);
        break;
      }
      case RobustMean::Mean: {
        double acc = 0.0;
        for (double v : selected) acc += v;
        scores(i) = acc / static_cast<double>(k);
        break;
      }
      case RobustMean::Median:
        scores(i) = k % 2 == 1 ? selected[k / 2]
                               : 0.5 * (selected[k / 2 - 1] + selected[k / 2]);
        break;
    }
  }
  return scores;
}

/**
 * Generalized extreme value distribution: shape xi, location mu, scale
 * sigma. xi = 0 is the Gumbel limit.
 */
struct GevdFit {
  double shape = 0.0;
  double location = 0.0;
  double scale = 1.0;
  double log_likelihood = 0.0;
  Index sample_count = 0;
};

namespace detail {

// Negative log-likelihood; +inf outside the support.
inline double gev_nll(const Vector& data, double mu, double log_sigma,
                      double xi) {
  const double sigma = std::exp(log_sigma);
  if (!std::isfinite(sigma) || sigma <= 0.0)
    return std::numeric_limits<double>::infinity();
  double acc = static_cast<double>(data.size()) * log_sigma;
  if (std::abs(xi) < 1e-8) {
    for (Index i = 0; i < data.size(); ++i) {
      const double z = (data(i) - mu) / sigma;
      acc += z + std::exp(-z);
    }
    return acc;
  }
  const double inv_xi = 1.0 / xi;
  for (Index i = 0; i < data.size(); ++i) {
    const double u = 1.0 + xi * (data(i) - mu) / sigma;
    if (u <= 0.0) return std::numeric_limits<double>::infinity();
    acc += (1.0 + inv_xi) * std::log(u) + std::pow(u, -inv_xi);
  }
  return acc;
}

}  // namespace detail

// Maximum-likelihood fit via simplex search from Gumbel moment estimates.
inline GevdFit fit_gevd(const Vector& scores) {
  const Index n = scores.size();
  if (n < 20)
    throw std::invalid_argument("fit_gevd: need at least 20 samples");
  const double mean = scores.mean();
  const double var = (scores.array() - mean).square().sum() /
                     static_cast<double>(n - 1);
  if (!(var > 0.0))
    throw std::invalid_argument("fit_gevd: degenerate (constant) sample");

  constexpr double kEulerGamma = 0.5772156649015329;
  const double sigma0 = std::sqrt(6.0 * var) / M_PI;
  Vector x0(3);
  x0 << mean - kEulerGamma * sigma0, std::log(sigma0), 0.1;

  const auto objective = [&](const Vector& v) {
    return detail::gev_nll(scores, v(0), v(1), v(2));
  };
  NelderMeadOptions opts;
  opts.max_iterations = 5000;
  const OptimResult res = minimize_nelder_mead(objective, x0, opts);
  if (!std::isfinite(res.fx))
    throw std::runtime_error("fit_gevd: optimization failed");

  GevdFit fit;
  fit.location = res.x(0);
  fit.scale = std::exp(res.x(1));
  fit.shape = res.x(2);
  fit.log_likelihood = -res.fx;
  fit.sample_count = n;
  return fit;
}

// GEV cumulative distribution; support boundaries map to 0/1.
inline double gev_cdf(const GevdFit& fit, double x) {
  const double z = (x - fit.location) / fit.scale;
  if (std::abs(fit.shape) < 1e-12) return std::exp(-std::exp(-z));
  const double u = 1.0 + fit.shape * z;
  if (u <= 0.0) return fit.shape > 0.0 ? 0.0 : 1.0;
  return std::exp(-std::pow(u, -1.0 / fit.shape));
}

inline double gev_pdf(const GevdFit& fit, double x) {
  const double z = (x - fit.location) / fit.scale;
  if (std::abs(fit.shape) < 1e-12) {
    const double e = std::exp(-z);
    return e * std::exp(-e) / fit.scale;
  }
  const double u = 1.0 + fit.shape * z;
  if (u <= 0.0) return 0.0;
  const double t = std::pow(u, -1.0 / fit.shape);
  return t / u * std::exp(-t) / fit.scale;
}

// Probability that a sample with this score is abnormal under the fit.
inline double abnormality_probability(const GevdFit& fit, double score) {
  return gev_cdf(fit, score);
}

/**
 * Area under the ROC curve via the rank-sum statistic, ties counted half.
 * Equals the probability that a random abnormal score exceeds a random
 * normal one.
 */
inline double auc(const Vector& scores_normal, const Vector& scores_abnormal) {
  const Index n = scores_normal.size(), m = scores_abnormal.size();
  if (n == 0 || m == 0) throw std::invalid_argument("auc: empty input");
  struct Entry {
    double score;
    bool abnormal;
  };
  std::vector<Entry> all;
  all.reserve(n + m);
  for (Index i = 0; i < n; ++i) {
    if (!std::isfinite(scores_normal(i)))
      throw std::invalid_argument("auc: non-finite score");
    all.push_back({scores_normal(i), false});
  }
  for (Index i = 0; i < m; ++i) {
    if (!std::isfinite(scores_abnormal(i)))
      throw std::invalid_argument("auc: non-finite score");
    all.push_back({scores_abnormal(i), true});
  }
  std::sort(all.begin(), all.end(),
            [](const Entry& a, const Entry& b) { return a.score < b.score; });

  double rank_sum_abnormal = 0.0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based
    for (std::size_t q = i; q < j; ++q)
      if (all[q].abnormal) rank_sum_abnormal += avg_rank;
    i = j;
  }
  const double u_stat =
      rank_sum_abnormal - 0.5 * static_cast<double>(m) * static_cast<double>(m + 1);
  return u_stat / (static_cast<double>(n) * static_cast<double>(m));
}

struct RSquaredResult {
  Vector per_task;  // NaN for masked tasks
  double mean = std::numeric_limits<double>::quiet_NaN();
  Index valid_tasks = 0;
};

/**
 * Coefficient of determination per task, 1 - SSE/SST with SST about the true
 * test-column mean, and the average across valid tasks. Tasks with zero
 * variance or non-finite predictions are NaN-masked and excluded.
 */
inline RSquaredResult r_squared(const Matrix& y_true, const Matrix& y_pred) {
  if (y_true.rows() != y_pred.rows() || y_true.cols() != y_pred.cols())
    throw std::invalid_argument("r_squared: shape mismatch");
  RSquaredResult out;
  out.per_task = Vector::Constant(y_true.cols(),
                                  std::numeric_limits<double>::quiet_NaN());
  double acc = 0.0;
  for (Index j = 0; j < y_true.cols(); ++j) {
    if (!y_pred.col(j).allFinite() || !y_true.col(j).allFinite()) continue;
    const double mean_j = y_true.col(j).mean();
    const double sst = (y_true.col(j).array() - mean_j).square().sum();
    if (!(sst > 0.0)) continue;
    const double sse = (y_true.col(j) - y_pred.col(j)).squaredNorm();
    out.per_task(j) = 1.0 - sse / sst;
    acc += out.per_task(j);
    ++out.valid_tasks;
  }
  if (out.valid_tasks > 0) out.mean = acc / static_cast<double>(out.valid_tasks);
  return out;
}

}  // namespace smtgp
