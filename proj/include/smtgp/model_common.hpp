#pragma once

#include "smtgp/types.hpp"

namespace smtgp {

struct OptimizerSettings {
  int max_iterations = 500;
  double gradient_tolerance = 1e-5;
  Vector initial_raw;  // empty: all log-space parameters start at 0
};

/**
 * Gaussian predictive distribution over a grid of test samples and tasks.
 *
 * variance_diag holds the latent predictive variance (no observation noise);
 * noise_variance carries the fitted noise per task so downstream deviation
 * scoring can form (y - mean) / sqrt(variance_diag + noise). Multi-task
 * models share one noise level across tasks and repeat it here; the
 * single-task baseline fits one per task. Columns for tasks whose fit
 * failed are NaN.
 */
struct PredictiveDistribution {
  Matrix mean;            // n_test x tasks
  Matrix variance_diag;   // n_test x tasks, >= 0
  Vector noise_variance;  // length tasks
};

}  // namespace smtgp
