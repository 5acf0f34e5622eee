#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <stdexcept>

#include "smtgp/types.hpp"

namespace smtgp {

/**
 * Unconstrained minimizers used for hyperparameter optimization.
 *
 * minimize_lbfgs: limited-memory BFGS with a strong-Wolfe line search, for
 * objectives with analytic gradients. Deterministic: no randomized restarts,
 * no stochastic elements, so identical inputs give identical iterates.
 *
 * minimize_nelder_mead: derivative-free simplex search for small problems
 * whose objective may return +inf outside its support (e.g. likelihoods with
 * hard domain constraints).
 */

// Objective contract: fill `grad` and return f(x). May return +inf/NaN to
// signal an inadmissible point; the line search backs off.
using GradientObjective = std::function<double(const Vector&, Vector&)>;
using PlainObjective = std::function<double(const Vector&)>;

struct LbfgsOptions {
  int max_iterations = 500;
  double gradient_tolerance = 1e-5;  // Euclidean norm of the gradient
  int memory = 10;
  int max_line_search_steps = 40;
  double wolfe_c1 = 1e-4;
  double wolfe_c2 = 0.9;
};

struct OptimResult {
  Vector x;
  double fx = std::numeric_limits<double>::quiet_NaN();
  double gradient_norm = std::numeric_limits<double>::quiet_NaN();
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
};

namespace detail {

struct WolfeResult {
  double alpha = 0.0;
  double f = 0.0;
  Vector grad;
  bool ok = false;
};

// Strong-Wolfe line search (bracket + zoom with bisection safeguard).
inline WolfeResult wolfe_line_search(const GradientObjective& objective,
                                     const Vector& x, double f0,
                                     const Vector& g0, const Vector& d,
                                     const LbfgsOptions& opts, int& evals) {
  WolfeResult res;
  const double dg0 = g0.dot(d);
  if (!(dg0 < 0.0)) return res;  // not a descent direction

  Vector g(x.size());
  auto eval = [&](double a, double& f_out, double& dg_out) {
    f_out = objective(x + a * d, g);
    ++evals;
    dg_out = g.dot(d);
  };

  double a_prev = 0.0, f_prev = f0;
  double a = 1.0;
  double a_lo = 0.0, a_hi = 0.0, f_lo = f0;
  bool bracketed = false;

  int step = 0;
  for (; step < opts.max_line_search_steps; ++step) {
    double f_a, dg_a;
    eval(a, f_a, dg_a);
    if (!std::isfinite(f_a)) {  // overshot into an inadmissible region
      a = 0.5 * (a_prev + a);
      continue;
    }
    if (f_a > f0 + opts.wolfe_c1 * a * dg0 || (step > 0 && f_a >= f_prev)) {
      a_lo = a_prev; f_lo = f_prev;
      a_hi = a;
      bracketed = true;
      break;
    }
    if (std::abs(dg_a) <= -opts.wolfe_c2 * dg0) {
      res = {a, f_a, g, true};
      return res;
    }
    if (dg_a >= 0.0) {
      a_lo = a; f_lo = f_a;
      a_hi = a_prev;
      bracketed = true;
      break;
    }
    a_prev = a; f_prev = f_a;
    a *= 2.0;
  }
  if (!bracketed) return res;

  for (; step < opts.max_line_search_steps; ++step) {
    const double a_mid = 0.5 * (a_lo + a_hi);
    double f_mid, dg_mid;
    eval(a_mid, f_mid, dg_mid);
    if (!std::isfinite(f_mid) || f_mid > f0 + opts.wolfe_c1 * a_mid * dg0 ||
        f_mid >= f_lo) {
      a_hi = a_mid;
    } else {
      if (std::abs(dg_mid) <= -opts.wolfe_c2 * dg0) {
        res = {a_mid, f_mid, g, true};
        return res;
      }
      if (dg_mid * (a_hi - a_lo) >= 0.0) a_hi = a_lo;
      a_lo = a_mid; f_lo = f_mid;
    }
    if (std::abs(a_hi - a_lo) < 1e-16 * std::max(1.0, std::abs(a_lo))) break;
  }
  // Fall back to the best admissible decrease found, if any.
  if (a_lo > 0.0 && f_lo < f0) {
    double f_a, dg_a;
    eval(a_lo, f_a, dg_a);
    res = {a_lo, f_a, g, true};
  }
  return res;
}

}  // namespace detail

inline OptimResult minimize_lbfgs(const GradientObjective& objective,
                                  const Vector& x0,
                                  const LbfgsOptions& opts = {}) {
  OptimResult result;
  result.x = x0;
  Vector g(x0.size());
  result.fx = objective(result.x, g);
  result.evaluations = 1;
  if (!std::isfinite(result.fx))
    throw std::runtime_error("minimize_lbfgs: objective non-finite at start");
  result.gradient_norm = g.norm();

  std::deque<Vector> s_hist, y_hist;
  std::deque<double> rho_hist;

  for (int iter = 0; iter < opts.max_iterations; ++iter) {
    if (result.gradient_norm <= opts.gradient_tolerance) {
      result.converged = true;
      break;
    }
    result.iterations = iter + 1;

    // Two-loop recursion for the search direction.
    Vector q = -g;
    const int m = static_cast<int>(s_hist.size());
    std::vector<double> alpha(m);
    for (int i = m - 1; i >= 0; --i) {
      alpha[i] = rho_hist[i] * s_hist[i].dot(q);
      q -= alpha[i] * y_hist[i];
    }
    if (m > 0) {
      const double gamma =
          s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
      q *= gamma;
    }
    for (int i = 0; i < m; ++i) {
      const double beta = rho_hist[i] * y_hist[i].dot(q);
      q += (alpha[i] - beta) * s_hist[i];
    }
    if (!(q.dot(g) < 0.0)) q = -g;  // safeguard: reset to steepest descent

    const auto ls = detail::wolfe_line_search(objective, result.x, result.fx, g,
                                              q, opts, result.evaluations);
    if (!ls.ok) break;  // no admissible decrease; stop at the current point

    const Vector s = ls.alpha * q;
    const Vector y = ls.grad - g;
    result.x += s;
    result.fx = ls.f;
    g = ls.grad;
    result.gradient_norm = g.norm();

    const double sy = s.dot(y);
    if (sy > 1e-10 * s.norm() * y.norm()) {
      s_hist.push_back(s);
      y_hist.push_back(y);
      rho_hist.push_back(1.0 / sy);
      if (static_cast<int>(s_hist.size()) > opts.memory) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }
  }
  if (result.gradient_norm <= opts.gradient_tolerance) result.converged = true;
  return result;
}

struct NelderMeadOptions {
  int max_iterations = 2000;
  double f_tolerance = 1e-12;   // spread of simplex values
  double x_tolerance = 1e-10;   // spread of simplex vertices
  double initial_step = 0.05;   // relative perturbation for the start simplex
};

inline OptimResult minimize_nelder_mead(const PlainObjective& objective,
                                        const Vector& x0,
                                        const NelderMeadOptions& opts = {}) {
  const Index n = x0.size();
  std::vector<Vector> xs(n + 1, x0);
  std::vector<double> fs(n + 1);
  for (Index i = 0; i < n; ++i) {
    const double step = opts.initial_step * std::max(std::abs(x0(i)), 1.0);
    xs[i + 1](i) += step;
  }
  for (Index i = 0; i <= n; ++i) fs[i] = objective(xs[i]);

  OptimResult result;
  result.evaluations = static_cast<int>(n) + 1;

  auto order = [&] {
    std::vector<Index> idx(n + 1);
    for (Index i = 0; i <= n; ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(),
                     [&](Index a, Index b) { return fs[a] < fs[b]; });
    std::vector<Vector> xs2(n + 1);
    std::vector<double> fs2(n + 1);
    for (Index i = 0; i <= n; ++i) {
      xs2[i] = xs[idx[i]];
      fs2[i] = fs[idx[i]];
    }
    xs.swap(xs2);
    fs.swap(fs2);
  };

  for (int iter = 0; iter < opts.max_iterations; ++iter) {
    order();
    result.iterations = iter + 1;
    const double spread_f = std::abs(fs[n] - fs[0]);
    double spread_x = 0.0;
    for (Index i = 1; i <= n; ++i)
      spread_x = std::max(spread_x, (xs[i] - xs[0]).lpNorm<Eigen::Infinity>());
    if (std::isfinite(fs[n]) &&
        spread_f <= opts.f_tolerance * (1.0 + std::abs(fs[0])) &&
        spread_x <= opts.x_tolerance * (1.0 + xs[0].lpNorm<Eigen::Infinity>())) {
      result.converged = true;
      break;
    }

    Vector centroid = Vector::Zero(n);
    for (Index i = 0; i < n; ++i) centroid += xs[i];
    centroid /= static_cast<double>(n);

    auto eval = [&](const Vector& x) {
      ++result.evaluations;
      return objective(x);
    };

    const Vector xr = centroid + (centroid - xs[n]);  // reflection
    const double fr = eval(xr);
    if (fr < fs[0]) {
      const Vector xe = centroid + 2.0 * (centroid - xs[n]);  // expansion
      const double fe = eval(xe);
      if (fe < fr) { xs[n] = xe; fs[n] = fe; }
      else         { xs[n] = xr; fs[n] = fr; }
    } else if (fr < fs[n - 1]) {
      xs[n] = xr; fs[n] = fr;
    } else {
      const bool outside = fr < fs[n];
      Vector xc;
      if (outside)
        xc = centroid + 0.5 * (xr - centroid);
      else
        xc = centroid - 0.5 * (centroid - xs[n]);
      const double fc = eval(xc);
      if (fc < std::min(fr, fs[n])) {
        xs[n] = xc; fs[n] = fc;
      } else {  // shrink toward the best vertex
        for (Index i = 1; i <= n; ++i) {
          xs[i] = xs[0] + 0.5 * (xs[i] - xs[0]);
          fs[i] = eval(xs[i]);
        }
      }
    }
  }
  order();
  result.x = xs[0];
  result.fx = fs[0];
  return result;
}

}  // namespace smtgp
