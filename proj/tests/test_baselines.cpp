#include <array>

#include <catch2/catch_amalgamated.hpp>

#include "smtgp/mtkronprod.hpp"
#include "smtgp/reference.hpp"
#include "smtgp/stgpr.hpp"
#include "test_helpers.hpp"

using namespace smtgp;
using namespace smtgp::testing;

namespace {

KernelSpec full_spec() {
  return {{KernelTerm::Linear, KernelTerm::SquaredExponential,
           KernelTerm::DiagonalIsotropic}};
}

}  // namespace

TEST_CASE("single-task fit matches the dense single-output oracle") {
  std::mt19937_64 rng(70);
  const Matrix x = randn(rng, 12, 2);
  const Matrix y = randn(rng, 12, 1);
  StgprConfig config;
  config.optimizer.max_iterations = 80;
  const StgprModel model = stgpr_fit(config, x, y);
  REQUIRE(model.tasks[0].ok);

  Matrix k = eval_kernel(config.kernel, model.tasks[0].kernel_params, x);
  k.diagonal().array() += model.tasks[0].sigma2();
  const double oracle = dense_gp_lml(k, y.col(0));
  REQUIRE(rel_err(model.tasks[0].final_lml, oracle) < 1e-8);
}

TEST_CASE("duplicated task columns fit identical parameters") {
  std::mt19937_64 rng(71);
  const Matrix x = randn(rng, 10, 2);
  Matrix y(10, 2);
  y.col(0) = randn_vec(rng, 10);
  y.col(1) = y.col(0);
  const StgprModel model = stgpr_fit(StgprConfig{}, x, y);
  REQUIRE(model.tasks[0].kernel_params.raw == model.tasks[1].kernel_params.raw);
  REQUIRE(model.tasks[0].theta_sigma2 == model.tasks[1].theta_sigma2);
}

TEST_CASE("parameter count formula") {
  const StgprConfig config;
  REQUIRE(stgpr_params_per_task(config) == 4);
  REQUIRE(stgpr_total_param_count(config, 5438) == 21752);
}

TEST_CASE("stgpr noise-free interpolation and prediction oracle") {
  std::mt19937_64 rng(72);
  const Matrix x = randn(rng, 8, 2);
  const Matrix y = randn(rng, 8, 3);
  StgprModel model;
  model.config = StgprConfig{};
  model.train_x = x;
  model.train_y = y;
  model.tasks.resize(3);
  for (auto& t : model.tasks) {
    t.kernel_params.raw = Vector::Zero(3);
    t.theta_sigma2 = std::log(1e-10);
    t.ok = true;
  }
  const PredictiveDistribution pred = stgpr_predict(model, x);
  REQUIRE((pred.mean - y).cwiseAbs().maxCoeff() < 1e-4);
  REQUIRE(pred.variance_diag.minCoeff() >= 0.0);

  // Against the dense oracle at fresh test points and a positive noise level.
  for (auto& t : model.tasks) t.theta_sigma2 = std::log(0.2);
  const Matrix x_star = randn(rng, 5, 2);
  const PredictiveDistribution p2 = stgpr_predict(model, x_star);
  for (Index j = 0; j < 3; ++j) {
    Matrix k = eval_kernel(model.config.kernel, model.tasks[0].kernel_params, x);
    k.diagonal().array() += 0.2;
    const Matrix k_star = eval_kernel(model.config.kernel,
                                      model.tasks[0].kernel_params, x_star, x);
    const Vector k_ss = eval_kernel_self_diag(model.config.kernel,
                                              model.tasks[0].kernel_params, x_star);
    const auto oracle = dense_gp_predict(k, k_star, k_ss, y.col(j));
    REQUIRE((p2.mean.col(j) - oracle.mean).cwiseAbs().maxCoeff() < 1e-8);
    REQUIRE((p2.variance_diag.col(j) - oracle.variance.cwiseMax(0.0))
                .cwiseAbs()
                .maxCoeff() < 1e-8);
  }
}

TEST_CASE("per-task fits are independent of the thread count") {
  std::mt19937_64 rng(78);
  const Matrix x = randn(rng, 12, 2);
  const Matrix y = randn(rng, 12, 5);
  StgprConfig serial;
  serial.optimizer.max_iterations = 30;
  serial.n_threads = 1;
  StgprConfig parallel = serial;
  parallel.n_threads = 4;
  const StgprModel a = stgpr_fit(serial, x, y);
  const StgprModel b = stgpr_fit(parallel, x, y);
  for (std::size_t j = 0; j < a.tasks.size(); ++j) {
    REQUIRE(a.tasks[j].kernel_params.raw == b.tasks[j].kernel_params.raw);
    REQUIRE(a.tasks[j].theta_sigma2 == b.tasks[j].theta_sigma2);
    REQUIRE(a.tasks[j].final_lml == b.tasks[j].final_lml);
  }
}

TEST_CASE("a failing task does not abort its siblings") {
  std::mt19937_64 rng(73);
  const Matrix x = randn(rng, 10, 2);
  Matrix y = randn(rng, 10, 3);
  y(4, 1) = std::numeric_limits<double>::quiet_NaN();
  const StgprModel model = stgpr_fit(StgprConfig{}, x, y);
  REQUIRE(model.failed_tasks == 1);
  REQUIRE(model.tasks[0].ok);
  REQUIRE_FALSE(model.tasks[1].ok);
  REQUIRE(!model.tasks[1].error.empty());
  REQUIRE(model.tasks[2].ok);

  const PredictiveDistribution pred = stgpr_predict(model, x);
  REQUIRE(pred.mean.col(0).allFinite());
  REQUIRE(pred.mean.col(1).array().isNaN().all());
  REQUIRE(std::isnan(pred.noise_variance(1)));
}

TEST_CASE("mtkronprod scalar case matches the closed-form Gaussian") {
  MtKronprodConfig config;
  config.task_kernel = {{KernelTerm::Linear}};
  config.sample_kernel = {{KernelTerm::Linear}};
  MtKronprodParams params;
  params.theta_d.raw = Vector::Constant(1, std::log(1.7));
  params.theta_r.raw = Vector::Constant(1, std::log(0.8));
  params.theta_sigma2 = std::log(0.3);
  Matrix x = Matrix::Ones(1, 1), y = Matrix::Constant(1, 1, 0.9);
  const double total = 1.7 * 0.8 + 0.3;
  const double expected = -0.5 * std::log(2.0 * M_PI) - 0.5 * std::log(total) -
                          0.9 * 0.9 / (2.0 * total);
  REQUIRE(mtkronprod_log_marginal(config, params, x, y) ==
          Catch::Approx(expected).epsilon(1e-12));
}

TEST_CASE("mtkronprod parameter count is nine with the standard kernels") {
  MtKronprodConfig config;
  config.task_kernel = full_spec();
  config.sample_kernel = full_spec();
  REQUIRE(mtkronprod_raw_param_count(config) == 9);
}

TEST_CASE("mtkronprod likelihood and prediction match the dense oracle") {
  std::mt19937_64 rng(74);
  for (int trial = 0; trial < 6; ++trial) {
    const Index n = 4 + static_cast<Index>(rng() % 5);
    const Index t = 2 + static_cast<Index>(rng() % 5);
    MtKronprodConfig config;
    config.task_kernel = full_spec();
    config.sample_kernel = full_spec();
    MtKronprodParams params;
    params.theta_d.raw = uniform_vec(rng, 4, -1, 1);
    params.theta_r.raw = uniform_vec(rng, 4, -1, 1);
    params.theta_sigma2 =
        std::log(std::array{1e-2, 0.7, 5.0}[static_cast<std::size_t>(trial) % 3]);
    const Matrix x = randn(rng, n, 2);
    const Matrix y = randn(rng, n, t);

    const Matrix d = eval_kernel(config.task_kernel, params.theta_d,
                                 Matrix::Identity(t, t));
    const Matrix r = eval_kernel(config.sample_kernel, params.theta_r, x);
    const double dense =
        dense_kron_gp_lml(Matrix::Identity(t, t), d, r, params.sigma2(), y);
    REQUIRE(rel_err(mtkronprod_log_marginal(config, params, x, y), dense) < 1e-8);

    const Matrix x_star = randn(rng, 3, 2);
    const Matrix r_star =
        eval_kernel(config.sample_kernel, params.theta_r, x_star, x);
    const Matrix r_ss =
        eval_kernel(config.sample_kernel, params.theta_r, x_star);
    const auto oracle = dense_kron_gp_predict(Matrix::Identity(t, t), d, r,
                                              r_star, r_ss, params.sigma2(), y);
    const MtKronprodModel model = mtkronprod_model_at(config, params, x, y);
    const PredictiveDistribution pred = mtkronprod_predict(model, x_star);
    REQUIRE(max_rel_err(pred.mean, oracle.mean) < 1e-8);
    const double scale =
        std::max(oracle.variance_diag.cwiseAbs().maxCoeff(), 1.0);
    REQUIRE((pred.variance_diag - oracle.variance_diag).cwiseAbs().maxCoeff() <
            1e-8 * scale);
    REQUIRE(max_rel_err(mtkronprod_predict_full_covariance(model, x_star),
                        oracle.covariance_full) < 1e-8);
  }
}

TEST_CASE("mtkronprod gradient matches finite differences") {
  std::mt19937_64 rng(75);
  MtKronprodConfig config;
  config.task_kernel = full_spec();
  config.sample_kernel = full_spec();
  MtKronprodParams params;
  params.theta_d.raw = uniform_vec(rng, 4, -1, 1);
  params.theta_r.raw = uniform_vec(rng, 4, -1, 1);
  params.theta_sigma2 = 0.2;
  const Matrix x = randn(rng, 6, 2);
  const Matrix y = randn(rng, 6, 4);

  const Vector grad = mtkronprod_gradient(config, params, x, y);
  Vector packed = mtkronprod_pack(config, params);
  const double h = 1e-6;
  for (Index k = 0; k < packed.size(); ++k) {
    Vector up = packed, dn = packed;
    up(k) += h;
    dn(k) -= h;
    const double fd = (mtkronprod_log_marginal(
                           config, mtkronprod_unpack(config, up), x, y) -
                       mtkronprod_log_marginal(
                           config, mtkronprod_unpack(config, dn), x, y)) /
                      (2.0 * h);
    REQUIRE(std::abs(fd - grad(k)) < std::max(1e-5 * std::abs(fd), 1e-8));
  }
}

TEST_CASE("mtkronprod noise-free interpolation and shrinkage") {
  std::mt19937_64 rng(76);
  MtKronprodConfig config;
  config.task_kernel = {{KernelTerm::Linear, KernelTerm::SquaredExponential}};
  config.sample_kernel = {{KernelTerm::Linear, KernelTerm::SquaredExponential}};
  MtKronprodParams params;
  params.theta_d.raw = Vector::Zero(3);
  params.theta_r.raw = Vector::Zero(3);
  params.theta_sigma2 = std::log(1e-10);
  const Matrix x = randn(rng, 6, 2);
  const Matrix y = randn(rng, 6, 3);
  const auto interp = mtkronprod_predict(mtkronprod_model_at(config, params, x, y), x);
  REQUIRE((interp.mean - y).cwiseAbs().maxCoeff() < 1e-4);
  REQUIRE(interp.variance_diag.maxCoeff() <= 1e-6);

  params.theta_sigma2 = std::log(1e6);
  const auto shrunk = mtkronprod_predict(mtkronprod_model_at(config, params, x, y), x);
  REQUIRE(shrunk.mean.cwiseAbs().maxCoeff() < 1e-2 * y.cwiseAbs().maxCoeff());
}

TEST_CASE("mtkronprod fit converges and enforces the task guard") {
  std::mt19937_64 rng(77);
  const Matrix x = randn(rng, 12, 2);
  const Matrix y = randn(rng, 12, 4);
  MtKronprodConfig config;
  config.task_kernel = full_spec();
  config.sample_kernel = full_spec();
  config.optimizer.max_iterations = 50;
  const MtKronprodModel model = mtkronprod_fit(config, x, y);
  const double initial = mtkronprod_log_marginal(
      config, mtkronprod_unpack(config, Vector::Zero(9)), x, y);
  REQUIRE(model.final_lml >= initial);

  config.max_tasks_guard = 3;
  REQUIRE_THROWS_AS(mtkronprod_fit(config, x, y), std::invalid_argument);
}
