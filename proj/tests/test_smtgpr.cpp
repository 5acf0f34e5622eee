#include <array>

#include <catch2/catch_amalgamated.hpp>

#include "smtgp/mtkronprod.hpp"
#include "smtgp/reference.hpp"
#include "smtgp/smtgpr.hpp"
#include "test_helpers.hpp"

using namespace smtgp;
using namespace smtgp::testing;

namespace {

KernelSpec full_spec() {
  return {{KernelTerm::Linear, KernelTerm::SquaredExponential,
           KernelTerm::DiagonalIsotropic}};
}

struct RandomInstance {
  SmtgprConfig config;
  OrthogonalBasis basis;
  SmtgprParams params;
  Matrix x, y;
};

RandomInstance random_instance(std::mt19937_64& rng, Index n, Index t, Index p,
                               double sigma2) {
  RandomInstance inst;
  inst.config.sample_kernel = full_spec();
  inst.config.task_kernel = full_spec();
  inst.config.p = p;
  inst.basis.b = random_orthonormal(rng, t, p);
  inst.basis.explained_variance = Vector::Ones(p);
  inst.basis.column_means = Vector::Zero(t);
  inst.params.theta_c.raw = uniform_vec(rng, 4, -1.0, 1.0);
  inst.params.theta_r.raw = uniform_vec(rng, 4, -1.0, 1.0);
  inst.params.theta_sigma2 = std::log(sigma2);
  inst.x = randn(rng, n, 1 + static_cast<Index>(rng() % 4));
  inst.y = randn(rng, n, t);
  return inst;
}

double dense_lml_of(const RandomInstance& inst) {
  const Matrix c = eval_kernel(inst.config.task_kernel, inst.params.theta_c,
                               Matrix::Identity(inst.config.p, inst.config.p));
  const Matrix r =
      eval_kernel(inst.config.sample_kernel, inst.params.theta_r, inst.x);
  return dense_kron_gp_lml(inst.basis.b, c, r, inst.params.sigma2(), inst.y);
}

}  // namespace

TEST_CASE("scalar instance matches the closed-form Gaussian") {
  SmtgprConfig config;
  config.sample_kernel = {{KernelTerm::Linear}};
  config.task_kernel = {{KernelTerm::Linear}};
  config.p = 1;
  OrthogonalBasis basis;
  basis.b = Matrix::Ones(1, 1);
  basis.explained_variance = Vector::Ones(1);
  basis.column_means = Vector::Zero(1);
  SmtgprParams params;
  params.theta_c.raw = Vector::Constant(1, std::log(1.7));  // c
  params.theta_r.raw = Vector::Constant(1, std::log(0.8));  // r on x = [1]
  params.theta_sigma2 = std::log(0.3);

  Matrix x = Matrix::Ones(1, 1), y = Matrix::Constant(1, 1, 0.9);
  const double total = 1.7 * 0.8 + 0.3;
  const double expected = -0.5 * std::log(2.0 * M_PI) - 0.5 * std::log(total) -
                          0.9 * 0.9 / (2.0 * total);
  const double got = smtgpr_log_marginal(config, basis, params, x, y);
  REQUIRE(got == Catch::Approx(expected).epsilon(1e-12));
}

TEST_CASE("zero responses reduce the likelihood to the determinant terms") {
  std::mt19937_64 rng(50);
  auto inst = random_instance(rng, 5, 4, 2, 1.0);
  inst.y.setZero();
  const Matrix c = eval_kernel(inst.config.task_kernel, inst.params.theta_c,
                               Matrix::Identity(2, 2));
  const Matrix r =
      eval_kernel(inst.config.sample_kernel, inst.params.theta_r, inst.x);
  const auto ec = sym_eig(c), er = sym_eig(r);
  const double log_det =
      log_det_kron_shift(ec.values, er.values, inst.params.sigma2()) +
      5.0 * (4.0 - 2.0) * std::log(inst.params.sigma2());
  const double expected =
      -0.5 * 20.0 * std::log(2.0 * M_PI) - 0.5 * log_det;
  const double got =
      smtgpr_log_marginal(inst.config, inst.basis, inst.params, inst.x, inst.y);
  REQUIRE(got == Catch::Approx(expected).epsilon(1e-12));
}

TEST_CASE("efficient likelihood equals the dense Gaussian density") {
  std::mt19937_64 rng(51);
  for (int trial = 0; trial < 12; ++trial) {
    const Index n = 3 + static_cast<Index>(rng() % 8);
    const Index t = 2 + static_cast<Index>(rng() % 7);
    const Index p = 1 + static_cast<Index>(rng() % t);
    const double sigma2 = std::array{1e-3, 1.0, 10.0}[trial % 3];
    const auto inst = random_instance(rng, n, t, p, sigma2);
    const double efficient =
        smtgpr_log_marginal(inst.config, inst.basis, inst.params, inst.x, inst.y);
    const double dense = dense_lml_of(inst);
    REQUIRE(rel_err(efficient, dense) < 1e-8);
  }
}

TEST_CASE("gradient entry is exactly zero when the term matrix vanishes") {
  std::mt19937_64 rng(52);
  auto inst = random_instance(rng, 5, 4, 2, 1.0);
  inst.x.setZero();  // linear term of R becomes the zero matrix
  const Vector grad =
      smtgpr_gradient(inst.config, inst.basis, inst.params, inst.x, inst.y);
  REQUIRE(grad(4) == 0.0);  // raw linear weight of the sample kernel
}

TEST_CASE("scalar noise gradient matches the analytic derivative") {
  SmtgprConfig config;
  config.sample_kernel = {{KernelTerm::Linear}};
  config.task_kernel = {{KernelTerm::Linear}};
  config.p = 1;
  OrthogonalBasis basis;
  basis.b = Matrix::Ones(1, 1);
  basis.explained_variance = Vector::Ones(1);
  basis.column_means = Vector::Zero(1);
  SmtgprParams params;
  params.theta_c.raw = Vector::Constant(1, std::log(1.7));
  params.theta_r.raw = Vector::Constant(1, std::log(0.8));
  params.theta_sigma2 = std::log(0.3);
  Matrix x = Matrix::Ones(1, 1), y = Matrix::Constant(1, 1, 0.9);

  const double cr = 1.7 * 0.8, s2 = 0.3, total = cr + s2;
  const double expected = -0.5 * s2 / total + 0.9 * 0.9 * s2 / (2.0 * total * total);
  const Vector grad = smtgpr_gradient(config, basis, params, x, y);
  REQUIRE(grad(2) == Catch::Approx(expected).epsilon(1e-12));
}

TEST_CASE("analytic gradient matches central finite differences") {
  std::mt19937_64 rng(53);
  for (int trial = 0; trial < 6; ++trial) {
    const Index n = 4 + static_cast<Index>(rng() % 5);
    const Index t = 2 + static_cast<Index>(rng() % 5);
    const Index p = 1 + static_cast<Index>(rng() % t);
    auto inst = random_instance(rng, n, t, p, std::exp(uniform_vec(rng, 1, -1, 1)(0)));
    const Vector grad =
        smtgpr_gradient(inst.config, inst.basis, inst.params, inst.x, inst.y);
    Vector packed = smtgpr_pack(inst.config, inst.params);
    const double h = 1e-6;
    for (Index k = 0; k < packed.size(); ++k) {
      Vector up = packed, dn = packed;
      up(k) += h;
      dn(k) -= h;
      const double f_up = smtgpr_log_marginal(
          inst.config, inst.basis, smtgpr_unpack(inst.config, up), inst.x, inst.y);
      const double f_dn = smtgpr_log_marginal(
          inst.config, inst.basis, smtgpr_unpack(inst.config, dn), inst.x, inst.y);
      const double fd = (f_up - f_dn) / (2.0 * h);
      REQUIRE(std::abs(fd - grad(k)) <
              std::max(1e-5 * std::abs(fd), 1e-8));
    }
  }
}

TEST_CASE("likelihood depends on the basis only through its outer map") {
  // Rotating the basis columns while conjugating the latent covariance
  // leaves B C B^T, and therefore the likelihood, unchanged.
  std::mt19937_64 rng(54);
  for (int trial = 0; trial < 5; ++trial) {
    const Index n = 5, t = 6, p = 3;
    const Matrix b = random_orthonormal(rng, t, p);
    const Matrix c = random_spd(rng, p);
    const Matrix r = random_spd(rng, n);
    const Matrix y = randn(rng, n, t);
    const double sigma2 = 0.4;
    const Matrix q = random_orthonormal(rng, p, p);
    const double base = detail::smtgpr_factorize(c, r, sigma2, b, y).lml;
    const double rotated = detail::smtgpr_factorize(
        (q.transpose() * c * q).eval(), r, sigma2, (b * q).eval(), y).lml;
    REQUIRE(rel_err(rotated, base) < 1e-8);
  }
}

TEST_CASE("fit improves the likelihood and is deterministic") {
  std::mt19937_64 rng(55);
  SmtgprConfig config;
  config.sample_kernel = full_spec();
  config.task_kernel = full_spec();
  config.p = 5;
  config.optimizer.max_iterations = 60;
  const Matrix x = randn(rng, 40, 3);

  // Draw responses from the model family itself: spatially smooth tasks.
  const Matrix b = random_orthonormal(rng, 20, 5);
  const Matrix z = randn(rng, 40, 5);
  const Matrix y = z * b.transpose() + 0.3 * randn(rng, 40, 20);

  const SmtgprModel model = smtgpr_fit(config, x, y);
  const double initial = smtgpr_log_marginal(
      config, model.basis, smtgpr_unpack(config, Vector::Zero(9)), x, y);
  REQUIRE(model.final_lml >= initial);

  const SmtgprModel again = smtgpr_fit(config, x, y);
  REQUIRE(smtgpr_pack(config, again.params) ==
          smtgpr_pack(config, model.params));
  REQUIRE(again.final_lml == model.final_lml);
}

TEST_CASE("pure-noise responses recover the generating variance") {
  SmtgprConfig config;
  config.sample_kernel = full_spec();
  config.task_kernel = full_spec();
  config.p = 3;
  config.optimizer.max_iterations = 120;
  // Signal amplitudes start tiny so the noise parameter carries the data.
  Vector init = Vector::Zero(9);
  init(0) = init(1) = std::log(1e-3);  // task kernel amplitudes
  init(4) = init(5) = std::log(1e-3);  // sample kernel amplitudes
  config.optimizer.initial_raw = init;

  std::vector<double> recovered;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(600 + seed);
    const Matrix x = randn(rng, 25, 3);
    const Matrix y = randn(rng, 25, 12);  // unit-variance noise
    const SmtgprModel model = smtgpr_fit(config, x, y);
    // Total per-cell prior variance at the optimum: diagonal of
    // B C B^T (x) R + sigma^2 I, averaged. With tiny signal this is ~sigma^2,
    // but allow the diagonal kernel terms to absorb part of it.
    recovered.push_back(model.params.sigma2());
  }
  std::sort(recovered.begin(), recovered.end());
  const double median = 0.5 * (recovered[4] + recovered[5]);
  REQUIRE(median > 0.5);
  REQUIRE(median < 2.0);
}

TEST_CASE("noise-free interpolation reproduces the training responses") {
  std::mt19937_64 rng(56);
  const Index n = 6, t = 4;
  SmtgprConfig config;
  config.sample_kernel = {{KernelTerm::Linear, KernelTerm::SquaredExponential}};
  config.task_kernel = {{KernelTerm::Linear, KernelTerm::SquaredExponential}};
  config.p = t;
  OrthogonalBasis basis;
  basis.b = Matrix::Identity(t, t);
  basis.explained_variance = Vector::Ones(t);
  basis.column_means = Vector::Zero(t);
  SmtgprParams params;
  params.theta_c.raw = Vector::Zero(3);
  params.theta_r.raw = Vector::Zero(3);
  params.theta_sigma2 = std::log(1e-10);

  const Matrix x = randn(rng, n, 2);
  const Matrix y = randn(rng, n, t);
  const SmtgprModel model = smtgpr_model_at(config, basis, params, x, y);
  const PredictiveDistribution pred = smtgpr_predict(model, x);
  REQUIRE((pred.mean - y).cwiseAbs().maxCoeff() < 1e-4);
  REQUIRE(pred.variance_diag.maxCoeff() <= 1e-6);
}

TEST_CASE("dominant noise shrinks predictions toward the prior mean") {
  std::mt19937_64 rng(57);
  auto inst = random_instance(rng, 6, 5, 3, 1e6);
  inst.params.theta_c.raw.setZero();
  inst.params.theta_r.raw.setZero();
  const SmtgprModel model = smtgpr_model_at(inst.config, inst.basis,
                                            inst.params, inst.x, inst.y);
  const PredictiveDistribution pred = smtgpr_predict(model, inst.x);
  REQUIRE(pred.mean.cwiseAbs().maxCoeff() <
          1e-2 * inst.y.cwiseAbs().maxCoeff());
}

TEST_CASE("efficient prediction equals the dense formulas") {
  std::mt19937_64 rng(58);
  for (int trial = 0; trial < 8; ++trial) {
    const Index n = 4 + static_cast<Index>(rng() % 5);
    const Index t = 2 + static_cast<Index>(rng() % 5);
    const Index p = 1 + static_cast<Index>(rng() % t);
    const Index n_star = 4;
    const auto inst = random_instance(rng, n, t, p,
                                      std::array{1e-2, 0.5, 3.0}[trial % 3]);
    const Matrix x_star = randn(rng, n_star, inst.x.cols());
    const SmtgprModel model = smtgpr_model_at(inst.config, inst.basis,
                                              inst.params, inst.x, inst.y);
    const PredictiveDistribution pred = smtgpr_predict(model, x_star);
    const Matrix full = smtgpr_predict_full_covariance(model, x_star);

    const Matrix c = eval_kernel(inst.config.task_kernel, inst.params.theta_c,
                                 Matrix::Identity(p, p));
    const Matrix r =
        eval_kernel(inst.config.sample_kernel, inst.params.theta_r, inst.x);
    const Matrix r_star = eval_kernel(inst.config.sample_kernel,
                                      inst.params.theta_r, x_star, inst.x);
    const Matrix r_ss =
        eval_kernel(inst.config.sample_kernel, inst.params.theta_r, x_star);
    const auto dense = dense_kron_gp_predict(inst.basis.b, c, r, r_star, r_ss,
                                             inst.params.sigma2(), inst.y);
    REQUIRE(max_rel_err(pred.mean, dense.mean) < 1e-8);
    REQUIRE(max_rel_err(full, dense.covariance_full) < 1e-8);
    const double scale = dense.variance_diag.cwiseAbs().maxCoeff();
    REQUIRE((pred.variance_diag - dense.variance_diag).cwiseAbs().maxCoeff() <
            1e-8 * std::max(scale, 1.0));
  }
}

TEST_CASE("variance extraction is independent of the batch size") {
  std::mt19937_64 rng(59);
  auto inst = random_instance(rng, 7, 6, 3, 0.5);
  const Matrix x_star = randn(rng, 5, inst.x.cols());
  Matrix reference;
  for (Index batch : {Index(1), Index(2), Index(5), Index(256)}) {
    inst.config.variance_batch_size = batch;
    const SmtgprModel model = smtgpr_model_at(inst.config, inst.basis,
                                              inst.params, inst.x, inst.y);
    const PredictiveDistribution pred = smtgpr_predict(model, x_star);
    if (reference.size() == 0)
      reference = pred.variance_diag;
    else
      REQUIRE(pred.variance_diag == reference);  // bitwise
  }
}

TEST_CASE("cached residuals satisfy their defining identity") {
  std::mt19937_64 rng(60);
  const auto inst = random_instance(rng, 6, 5, 3, 0.7);
  const SmtgprModel model = smtgpr_model_at(inst.config, inst.basis,
                                            inst.params, inst.x, inst.y);
  const Matrix rotated = model.eig_r.vectors.transpose() *
                         (inst.y * model.basis.b) * model.eig_c.vectors;
  const Vector expected =
      model.kron_inv_diag.cwiseProduct(vec(rotated));
  REQUIRE((vec(model.alpha) - expected).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("full-rank identity basis reduces to the full Kronecker model") {
  std::mt19937_64 rng(61);
  for (int trial = 0; trial < 5; ++trial) {
    const Index n = 5, t = 4;
    SmtgprConfig sc;
    sc.sample_kernel = full_spec();
    sc.task_kernel = full_spec();
    sc.p = t;
    OrthogonalBasis basis;
    basis.b = Matrix::Identity(t, t);
    basis.explained_variance = Vector::Ones(t);
    basis.column_means = Vector::Zero(t);
    SmtgprParams sp;
    sp.theta_c.raw = uniform_vec(rng, 4, -1, 1);
    sp.theta_r.raw = uniform_vec(rng, 4, -1, 1);
    sp.theta_sigma2 = uniform_vec(rng, 1, -1, 1)(0);
    const Matrix x = randn(rng, n, 3);
    const Matrix y = randn(rng, n, t);

    MtKronprodConfig mc;
    mc.task_kernel = sc.task_kernel;
    mc.sample_kernel = sc.sample_kernel;
    MtKronprodParams mp;
    mp.theta_d = sp.theta_c;
    mp.theta_r = sp.theta_r;
    mp.theta_sigma2 = sp.theta_sigma2;

    const double l_s = smtgpr_log_marginal(sc, basis, sp, x, y);
    const double l_m = mtkronprod_log_marginal(mc, mp, x, y);
    REQUIRE(rel_err(l_s, l_m) < 1e-8);

    const Vector g_s = smtgpr_gradient(sc, basis, sp, x, y);
    const Vector g_m = mtkronprod_gradient(mc, mp, x, y);
    REQUIRE((g_s - g_m).cwiseAbs().maxCoeff() <
            1e-8 * std::max(1.0, g_m.cwiseAbs().maxCoeff()));

    const Matrix x_star = randn(rng, 3, 3);
    const auto pred_s =
        smtgpr_predict(smtgpr_model_at(sc, basis, sp, x, y), x_star);
    const auto pred_m =
        mtkronprod_predict(mtkronprod_model_at(mc, mp, x, y), x_star);
    REQUIRE(max_rel_err(pred_s.mean, pred_m.mean) < 1e-8);
    REQUIRE(max_rel_err(pred_s.variance_diag, pred_m.variance_diag) < 1e-8);
  }
}

TEST_CASE("dense reference handles the scalar case and guards its size") {
  Matrix b = Matrix::Ones(1, 1), c = Matrix::Constant(1, 1, 1.7),
         r = Matrix::Constant(1, 1, 0.8), y = Matrix::Constant(1, 1, 0.9);
  const double total = 1.7 * 0.8 + 0.3;
  const double expected = -0.5 * std::log(2.0 * M_PI) - 0.5 * std::log(total) -
                          0.9 * 0.9 / (2.0 * total);
  REQUIRE(dense_kron_gp_lml(b, c, r, 0.3, y) ==
          Catch::Approx(expected).epsilon(1e-12));

  std::mt19937_64 rng(63);
  const Matrix big_y = randn(rng, 60, 40);  // 2400 cells > default guard
  REQUIRE_THROWS_AS(dense_kron_gp_lml(Matrix::Identity(40, 40),
                                      Matrix::Identity(40, 40),
                                      Matrix::Identity(60, 60), 1.0, big_y),
                    std::invalid_argument);
}

TEST_CASE("parameter counts expose the configured totals") {
  SmtgprConfig config;
  config.sample_kernel = full_spec();
  config.task_kernel = full_spec();
  REQUIRE(smtgpr_raw_param_count(config) == 9);
  REQUIRE(smtgpr_total_param_count(config) == 10);
}

TEST_CASE("input validation") {
  std::mt19937_64 rng(62);
  auto inst = random_instance(rng, 5, 4, 2, 1.0);
  REQUIRE_THROWS_AS(smtgpr_log_marginal(inst.config, inst.basis, inst.params,
                                        inst.x, randn(rng, 4, 4)),
                    std::invalid_argument);
  SmtgprConfig bad = inst.config;
  bad.task_features = randn(rng, 3, 2);  // wrong row count for p = 2
  REQUIRE_THROWS_AS(
      smtgpr_log_marginal(bad, inst.basis, inst.params, inst.x, inst.y),
      std::invalid_argument);
  const SmtgprModel model = smtgpr_model_at(inst.config, inst.basis,
                                            inst.params, inst.x, inst.y);
  REQUIRE_THROWS_AS(smtgpr_predict(model, randn(rng, 2, inst.x.cols() + 1)),
                    std::invalid_argument);
}
