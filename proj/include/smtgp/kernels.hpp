#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "smtgp/types.hpp"

namespace smtgp {

/**
 * Covariance functions and their analytic parameter gradients.
 *
 * A kernel is an ordered sum of terms; the term order fixes the layout of
 * the unconstrained parameter vector. Every positive quantity is stored in
 * log space, so optimizers work on all of R^n and gradients pick up the
 * usual q * dK/dq chain-rule factor.
 *
 * Parameter layout per term:
 *   Linear               1  (log weight a)        a * x1 * x2^T
 *   SquaredExponential   2  (log amplitude s,     s * exp(-||xi-xj||^2 / (2 l^2))
 *                            log lengthscale l)
 *   DiagonalIsotropic    1  (log level d)         d * I, self-covariance only
 *
 * The diagonal-isotropic term models per-point structure and is undefined
 * across two distinct point sets, so cross-covariance evaluation omits it.
 */

enum class KernelTerm { Linear, SquaredExponential, DiagonalIsotropic };

struct KernelSpec {
  std::vector<KernelTerm> terms;
};

struct KernelParams {
  Vector raw;  // log-space, length = param_count(spec)
};

inline Index term_param_count(KernelTerm term) {
  return term == KernelTerm::SquaredExponential ? 2 : 1;
}

inline Index param_count(const KernelSpec& spec) {
  Index n = 0;
  for (auto t : spec.terms) n += term_param_count(t);
  return n;
}

inline std::string term_name(KernelTerm term) {
  switch (term) {
    case KernelTerm::Linear: return "linear";
    case KernelTerm::SquaredExponential: return "squared_exponential";
    case KernelTerm::DiagonalIsotropic: return "diagonal_isotropic";
  }
  throw std::logic_error("term_name: unknown term");
}

inline KernelTerm term_from_name(const std::string& name) {
  if (name == "linear") return KernelTerm::Linear;
  if (name == "squared_exponential") return KernelTerm::SquaredExponential;
  if (name == "diagonal_isotropic") return KernelTerm::DiagonalIsotropic;
  throw std::invalid_argument("unknown kernel term name: " + name);
}

namespace detail {

inline void check_kernel_args(const KernelSpec& spec, const KernelParams& params) {
  if (spec.terms.empty())
    throw std::invalid_argument("kernel spec must have at least one term");
  if (params.raw.size() != param_count(spec))
    throw std::invalid_argument("kernel parameter vector length mismatch");
  for (Index i = 0; i < params.raw.size(); ++i)
    if (!std::isfinite(std::exp(params.raw(i))))
      throw std::invalid_argument("kernel parameter non-finite after exponentiation");
}

inline Matrix squared_distances(const Matrix& x1, const Matrix& x2, bool same_set) {
  const Vector n1 = x1.rowwise().squaredNorm();
  const Vector n2 = x2.rowwise().squaredNorm();
  Matrix d2 = (-2.0 * x1 * x2.transpose()).colwise() + n1;
  d2.rowwise() += n2.transpose();
  d2 = d2.cwiseMax(0.0);
  if (same_set) d2.diagonal().setZero();
  return d2;
}

}  // namespace detail

inline Matrix eval_kernel_impl(const KernelSpec& spec, const KernelParams& params,
                               const Matrix& x1, const Matrix& x2, bool same_set) {
  detail::check_kernel_args(spec, params);
  if (x1.cols() != x2.cols())
    throw std::invalid_argument("eval_kernel: feature dimension mismatch");
  Matrix k = Matrix::Zero(x1.rows(), x2.rows());
  Matrix d2;  // computed lazily, shared across SE terms
  Index off = 0;
  for (auto term : spec.terms) {
    switch (term) {
      case KernelTerm::Linear:
        k.noalias() += std::exp(params.raw(off)) * (x1 * x2.transpose());
        break;
      case KernelTerm::SquaredExponential: {
        const double s = std::exp(params.raw(off));
        const double l = std::exp(params.raw(off + 1));
        if (d2.size() == 0) d2 = detail::squared_distances(x1, x2, same_set);
        k += s * (-d2 / (2.0 * l * l)).array().exp().matrix();
        break;
      }
      case KernelTerm::DiagonalIsotropic:
        if (same_set)
          k.diagonal().array() += std::exp(params.raw(off));
        break;
    }
    off += term_param_count(term);
  }
  return k;
}

// Self-covariance K(X, X), including any diagonal-isotropic term.
inline Matrix eval_kernel(const KernelSpec& spec, const KernelParams& params,
                          const Matrix& x) {
  return eval_kernel_impl(spec, params, x, x, true);
}

// Cross-covariance K(X1, X2); the diagonal-isotropic term is omitted.
inline Matrix eval_kernel(const KernelSpec& spec, const KernelParams& params,
                          const Matrix& x1, const Matrix& x2) {
  return eval_kernel_impl(spec, params, x1, x2, false);
}

// diag(K(X, X)) without forming the full matrix.
inline Vector eval_kernel_self_diag(const KernelSpec& spec,
                                    const KernelParams& params, const Matrix& x) {
  detail::check_kernel_args(spec, params);
  Vector d = Vector::Zero(x.rows());
  Index off = 0;
  for (auto term : spec.terms) {
    switch (term) {
      case KernelTerm::Linear:
        d += std::exp(params.raw(off)) * x.rowwise().squaredNorm();
        break;
      case KernelTerm::SquaredExponential:
        d.array() += std::exp(params.raw(off));
        break;
      case KernelTerm::DiagonalIsotropic:
        d.array() += std::exp(params.raw(off));
        break;
    }
    off += term_param_count(term);
  }
  return d;
}

/**
 * dK(X, X)/d raw[param_index], a symmetric matrix. Gradients are taken with
 * respect to the log-space parameters.
 */
inline Matrix kernel_grad(const KernelSpec& spec, const KernelParams& params,
                          const Matrix& x, Index param_index) {
  detail::check_kernel_args(spec, params);
  if (param_index < 0 || param_index >= param_count(spec))
    throw std::out_of_range("kernel_grad: parameter index out of range");
  Index off = 0;
  for (auto term : spec.terms) {
    const Index n = term_param_count(term);
    if (param_index < off + n) {
      switch (term) {
        case KernelTerm::Linear:
          return std::exp(params.raw(off)) * (x * x.transpose());
        case KernelTerm::SquaredExponential: {
          const double s = std::exp(params.raw(off));
          const double l = std::exp(params.raw(off + 1));
          const Matrix d2 = detail::squared_distances(x, x, true);
          const Matrix e = s * (-d2 / (2.0 * l * l)).array().exp().matrix();
          if (param_index == off) return e;                       // d/d log s
          return e.cwiseProduct(d2 / (l * l));                    // d/d log l
        }
        case KernelTerm::DiagonalIsotropic:
          return std::exp(params.raw(off)) *
                 Matrix::Identity(x.rows(), x.rows());
      }
    }
    off += n;
  }
  throw std::logic_error("kernel_grad: unreachable");
}

}  // namespace smtgp
