#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

#include "smtgp/kernels.hpp"
#include "smtgp/types.hpp"

namespace smtgp {

/**
 * Synthetic data with the structure the multi-task models are built to
 * exploit: tasks live on a 1-D spatial grid with squared-exponential
 * correlation, samples are correlated through a kernel on the inputs, and
 * responses are drawn from the resulting Kronecker-structured Gaussian plus
 * isotropic noise. Abnormal test samples receive an additive shift on a
 * random contiguous spatial patch.
 *
 * sample_lengthscale <= 0 selects sqrt(n_features), the natural scale for
 * standard-normal inputs.
 */
struct SyntheticSpec {
  Index n_train = 150;
  Index n_test_normal = 100;
  Index n_test_abnormal = 100;
  Index n_tasks = 400;
  Index n_features = 20;
  double spatial_lengthscale = 0.05;  // on the unit task grid
  double sample_lengthscale = 0.0;    // <= 0: sqrt(n_features)
  double noise_std = 0.5;
  double abnormal_shift = 1.5;
  double abnormal_patch_fraction = 0.1;
};

struct SyntheticData {
  Matrix x_train, y_train;
  Matrix x_test, y_test;
  std::vector<int> labels;  // per test row, 0 normal / 1 abnormal
};

inline SyntheticData generate_synthetic(const SyntheticSpec& spec,
                                        std::uint64_t seed) {
  if (spec.n_train < 2 || spec.n_test_normal < 0 || spec.n_test_abnormal < 0 ||
      spec.n_tasks < 2 || spec.n_features < 1)
    throw std::invalid_argument("generate_synthetic: invalid dimensions");
  if (spec.spatial_lengthscale <= 0.0 || spec.noise_std < 0.0 ||
      spec.abnormal_patch_fraction <= 0.0 || spec.abnormal_patch_fraction > 1.0)
    throw std::invalid_argument("generate_synthetic: invalid generator settings");

  const Index n_total = spec.n_train + spec.n_test_normal + spec.n_test_abnormal;
  const Index t = spec.n_tasks;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  Matrix x(n_total, spec.n_features);
  for (Index i = 0; i < n_total; ++i)
    for (Index j = 0; j < spec.n_features; ++j) x(i, j) = gauss(rng);

  // Task covariance over the unit grid.
  Matrix d_cov(t, t);
  for (Index a = 0; a < t; ++a)
    for (Index b = 0; b < t; ++b) {
      const double g = (static_cast<double>(a) - static_cast<double>(b)) /
                       static_cast<double>(t - 1);
      d_cov(a, b) = std::exp(-g * g / (2.0 * spec.spatial_lengthscale *
                                       spec.spatial_lengthscale));
    }
  d_cov.diagonal().array() += 1e-8;

  // Sample covariance through a squared-exponential kernel on the inputs,
  // over training and test samples jointly so test points stay predictable.
  const double ls = spec.sample_lengthscale > 0.0
                        ? spec.sample_lengthscale
                        : std::sqrt(static_cast<double>(spec.n_features));
  const Matrix sq = detail::squared_distances(x, x, true);
  Matrix r_cov = (-sq / (2.0 * ls * ls)).array().exp().matrix();
  r_cov.diagonal().array() += 1e-8;

  const Eigen::LLT<Matrix> llt_r(r_cov);
  const Eigen::LLT<Matrix> llt_d(d_cov);
  if (llt_r.info() != Eigen::Success || llt_d.info() != Eigen::Success)
    throw std::runtime_error("generate_synthetic: covariance factorization failed");

  Matrix e(n_total, t);
  for (Index i = 0; i < n_total; ++i)
    for (Index j = 0; j < t; ++j) e(i, j) = gauss(rng);
  Matrix y = llt_r.matrixL() * e * llt_d.matrixL().transpose();
  for (Index i = 0; i < n_total; ++i)
    for (Index j = 0; j < t; ++j) y(i, j) += spec.noise_std * gauss(rng);

  SyntheticData data;
  data.x_train = x.topRows(spec.n_train);
  data.y_train = y.topRows(spec.n_train);
  data.x_test = x.bottomRows(n_total - spec.n_train);
  data.y_test = y.bottomRows(n_total - spec.n_train);
  data.labels.assign(static_cast<std::size_t>(n_total - spec.n_train), 0);

  const Index patch =
      std::max<Index>(1, static_cast<Index>(std::lround(
                             spec.abnormal_patch_fraction *
                             static_cast<double>(t))));
  std::uniform_int_distribution<Index> start_dist(0, t - patch);
  for (Index i = spec.n_test_normal; i < data.y_test.rows(); ++i) {
    const Index start = start_dist(rng);
    data.y_test.row(i).segment(start, patch).array() += spec.abnormal_shift;
    data.labels[static_cast<std::size_t>(i)] = 1;
  }
  return data;
}

}  // namespace smtgp
