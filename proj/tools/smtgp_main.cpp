// Command-line harness for the multi-task GP library: synthetic data
// generation, model fitting and prediction, normative evaluation, and the
// benchmarking protocol with CSV/JSONL reports.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "smtgp/experiment.hpp"
#include "smtgp/model_io.hpp"
#include "smtgp/normative.hpp"

namespace {

using namespace smtgp;

ExperimentConfig config_from_flag(const std::string& path) {
  return path.empty() ? ExperimentConfig{} : load_experiment_config(path);
}

std::string matrix_extension(MatrixFormat format) {
  return format == MatrixFormat::Csv ? ".csv" : ".kgpm";
}

int run_gen_data(const std::string& config_path,
                 std::optional<std::uint64_t> seed, const std::string& out_dir,
                 const std::string& format_name) {
  ExperimentConfig config = config_from_flag(config_path);
  if (seed) config.seed = *seed;
  const MatrixFormat format = matrix_format_from_name(format_name);
  const SyntheticData data = generate_synthetic(config.synthetic, config.seed);

  std::filesystem::create_directories(out_dir);
  const auto path = [&](const std::string& name) {
    return (std::filesystem::path(out_dir) / (name + matrix_extension(format)))
        .string();
  };
  save_matrix(path("x_train"), data.x_train, format);
  save_matrix(path("y_train"), data.y_train, format);
  save_matrix(path("x_test"), data.x_test, format);
  save_matrix(path("y_test"), data.y_test, format);
  Matrix labels(static_cast<Index>(data.labels.size()), 1);
  for (Index i = 0; i < labels.rows(); ++i)
    labels(i, 0) = data.labels[static_cast<std::size_t>(i)];
  save_matrix(path("labels"), labels, format);
  std::cout << "wrote " << data.x_train.rows() << " train and "
            << data.x_test.rows() << " test samples over "
            << data.y_train.cols() << " tasks to " << out_dir << "\n";
  return 0;
}

int run_fit(const std::string& config_path, const std::string& method_name_arg,
            std::optional<Index> p, std::optional<std::uint64_t> seed,
            const std::string& out_path) {
  ExperimentConfig config = config_from_flag(config_path);
  if (seed) config.seed = *seed;
  std::string warnings;
  const auto data = detail::prepare_data(config, config.seed, warnings);
  const Method method = method_from_name(method_name_arg);

  if (method == Method::Smtgpr) {
    SmtgprConfig sc;
    sc.sample_kernel = config.sample_kernel;
    sc.task_kernel = config.task_kernel;
    sc.p = p.value_or(config.p_grid.empty() ? 10 : config.p_grid.front());
    sc.optimizer = config.optimizer;
    sc.variance_batch_size = config.variance_batch_size;
    const SmtgprModel model = smtgpr_fit(sc, data.x_train, data.y_train);
    save_model(out_path, model);
    std::cout << "S-MTGPR p=" << sc.p << " log marginal likelihood "
              << model.final_lml << " after " << model.optimizer_iterations
              << " iterations\n";
  } else if (method == Method::MtKronprod) {
    MtKronprodConfig mc;
    mc.task_kernel = config.task_kernel;
    mc.sample_kernel = config.sample_kernel;
    mc.optimizer = config.optimizer;
    mc.variance_batch_size = config.variance_batch_size;
    const MtKronprodModel model = mtkronprod_fit(mc, data.x_train, data.y_train);
    save_model(out_path, model);
    std::cout << "MT-Kronprod log marginal likelihood " << model.final_lml
              << " after " << model.optimizer_iterations << " iterations\n";
  } else {
    StgprConfig sc;
    sc.kernel = config.stgpr_kernel;
    sc.optimizer = config.optimizer;
    sc.n_threads = config.n_threads;
    const StgprModel model = stgpr_fit(sc, data.x_train, data.y_train);
    save_model(out_path, model);
    std::cout << "STGPR fitted " << model.tasks.size() << " tasks ("
              << model.failed_tasks << " failed)\n";
  }
  if (!warnings.empty()) std::cerr << "warnings: " << warnings << "\n";
  return 0;
}

PredictiveDistribution predict_with(const AnyModel& model, const Matrix& x) {
  if (const auto* m = std::get_if<SmtgprModel>(&model))
    return smtgpr_predict(*m, x);
  if (const auto* m = std::get_if<MtKronprodModel>(&model))
    return mtkronprod_predict(*m, x);
  return stgpr_predict(std::get<StgprModel>(model), x);
}

int run_predict(const std::string& model_path, const std::string& x_path,
                const std::string& out_dir, const std::string& format_name,
                bool csv_header) {
  const AnyModel model = load_model(model_path);
  const Matrix x = load_matrix(x_path, detect_matrix_format(x_path), csv_header);
  const PredictiveDistribution pred = predict_with(model, x);

  const MatrixFormat format = matrix_format_from_name(format_name);
  std::filesystem::create_directories(out_dir);
  const auto path = [&](const std::string& name) {
    return (std::filesystem::path(out_dir) / (name + matrix_extension(format)))
        .string();
  };
  save_matrix(path("mean"), pred.mean, format);
  save_matrix(path("variance_diag"), pred.variance_diag, format);
  save_matrix(path("noise_variance"),
              detail::MatrixSection::m_from(pred.noise_variance), format);
  std::cout << "wrote predictions for " << x.rows() << " samples to "
            << out_dir << "\n";
  return 0;
}

int run_eval(const std::string& config_path, const std::string& model_path,
             const std::string& out_path) {
  const ExperimentConfig config = config_from_flag(config_path);
  std::string warnings;
  const auto data = detail::prepare_data(config, config.seed, warnings);
  const AnyModel model = load_model(model_path);
  const PredictiveDistribution pred = predict_with(model, data.x_test);

  std::vector<Index> normal_rows, abnormal_rows;
  for (Index i = 0; i < data.x_test.rows(); ++i)
    (data.labels[static_cast<std::size_t>(i)] == 0 ? normal_rows : abnormal_rows)
        .push_back(i);

  const Matrix npm = compute_npm(data.y_test, pred);
  const Vector scores =
      abnormality_scores(npm, config.npm_top_fraction, config.robust_mean);

  Matrix y_normal(static_cast<Index>(normal_rows.size()), data.y_test.cols());
  Matrix m_normal(y_normal.rows(), y_normal.cols());
  Vector s_normal(y_normal.rows());
  for (Index k = 0; k < y_normal.rows(); ++k) {
    const Index row = normal_rows[static_cast<std::size_t>(k)];
    y_normal.row(k) = data.y_test.row(row);
    m_normal.row(k) = pred.mean.row(row);
    s_normal(k) = scores(row);
  }
  const RSquaredResult r2 = r_squared(y_normal, m_normal);

  nlohmann::json out{{"mean_r2", r2.mean},
                     {"valid_tasks", r2.valid_tasks},
                     {"n_test_normal", normal_rows.size()},
                     {"n_test_abnormal", abnormal_rows.size()}};

  // Extreme-value fit over the reference (normal-class) scores; the monotone
  // CDF means AUC is identical whether ranked by score or by probability.
  if (s_normal.size() >= 20) {
    const GevdFit fit = fit_gevd(s_normal);
    out["gevd"] = {{"shape", fit.shape},
                   {"location", fit.location},
                   {"scale", fit.scale},
                   {"log_likelihood", fit.log_likelihood}};
    nlohmann::json probs = nlohmann::json::array();
    for (Index i = 0; i < scores.size(); ++i)
      probs.push_back(abnormality_probability(fit, scores(i)));
    out["abnormality_probability"] = probs;
  } else {
    warnings += "too few normal-class samples for an extreme-value fit;";
  }
  nlohmann::json score_list = nlohmann::json::array();
  for (Index i = 0; i < scores.size(); ++i) score_list.push_back(scores(i));
  out["abnormality_score"] = score_list;
  out["labels"] = data.labels;

  if (!normal_rows.empty() && !abnormal_rows.empty()) {
    Vector s_abnormal(static_cast<Index>(abnormal_rows.size()));
    for (std::size_t k = 0; k < abnormal_rows.size(); ++k)
      s_abnormal(static_cast<Index>(k)) = scores(abnormal_rows[k]);
    out["auc"] = auc(s_normal, s_abnormal);
  }
  if (!warnings.empty()) out["warnings"] = warnings;

  if (out_path.empty()) {
    std::cout << out.dump(2) << "\n";
  } else {
    std::ofstream f(out_path);
    if (!f) throw std::runtime_error("cannot open " + out_path);
    f << out.dump(2) << "\n";
    std::cout << "wrote evaluation report to " << out_path << "\n";
  }
  return 0;
}

int run_bench(const std::string& config_path, std::optional<std::uint64_t> seed,
              const std::string& out_prefix) {
  ExperimentConfig config = config_from_flag(config_path);
  if (seed) config.seed = *seed;
  if (!out_prefix.empty()) config.output_prefix = out_prefix;

  const ExperimentReport report = run_experiment(config);
  write_report_csv(config.output_prefix + ".csv", report);
  write_report_jsonl(config.output_prefix + ".jsonl", report);

  for (const auto& a : report.aggregates) {
    if (a.stat != "mean") continue;
    std::cout << a.method;
    if (a.p) std::cout << " (p=" << *a.p << ")";
    std::cout << ": opt " << a.optimization_seconds << "s, predict "
              << a.prediction_seconds << "s, mean R2 " << a.mean_r2
              << ", AUC " << a.auc << "\n";
  }
  std::cout << "report written to " << config.output_prefix << ".csv and .jsonl\n";
  return 0;
}

int run_convert(const std::string& in_path, const std::string& out_path,
                const std::string& format_name, bool csv_header) {
  const Matrix m =
      load_matrix(in_path, detect_matrix_format(in_path), csv_header);
  save_matrix(out_path, m, matrix_format_from_name(format_name));
  std::cout << "converted " << m.rows() << "x" << m.cols() << " matrix to "
            << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Scalable multi-task Gaussian process regression harness"};
  app.require_subcommand(1);

  std::string config_path, out, method = "S-MTGPR", format = "binary-v1";
  std::string model_path, x_path, in_path, out_path;
  std::optional<std::uint64_t> seed;
  std::optional<smtgp::Index> p;
  bool csv_header = false;

  auto* gen = app.add_subcommand("gen-data", "Generate synthetic matrices");
  gen->add_option("--config", config_path, "Experiment config (JSON)");
  gen->add_option("--seed", seed, "Generator seed (overrides config)");
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--format", format, "Matrix format: csv or binary-v1");

  auto* fit = app.add_subcommand("fit", "Fit one model on the configured data");
  fit->add_option("--config", config_path, "Experiment config (JSON)");
  fit->add_option("--method", method, "STGPR, MT-Kronprod, or S-MTGPR");
  fit->add_option("--p", p, "Basis size for S-MTGPR");
  fit->add_option("--seed", seed, "Data seed (overrides config)");
  fit->add_option("--out", out, "Model output path")->required();

  auto* pred = app.add_subcommand("predict", "Predict with a saved model");
  pred->add_option("--model", model_path, "Model file")->required();
  pred->add_option("--x", x_path, "Inputs matrix file")->required();
  pred->add_option("--out", out, "Output directory")->required();
  pred->add_option("--format", format, "Matrix format: csv or binary-v1");
  pred->add_flag("--csv-header", csv_header, "Input CSV has a header row");

  auto* ev = app.add_subcommand("eval", "Evaluate a saved model on test data");
  ev->add_option("--config", config_path, "Experiment config (JSON)");
  ev->add_option("--model", model_path, "Model file")->required();
  ev->add_option("--out", out, "Report path (default: stdout)");

  auto* bench = app.add_subcommand("bench", "Run the benchmarking protocol");
  bench->add_option("--config", config_path, "Experiment config (JSON)");
  bench->add_option("--seed", seed, "Base seed (overrides config)");
  bench->add_option("--out", out, "Report path prefix");

  auto* conv = app.add_subcommand("convert", "Convert a matrix between formats");
  conv->add_option("input", in_path, "Input matrix file")->required();
  conv->add_option("output", out_path, "Output matrix file")->required();
  conv->add_option("--format", format, "Target format: csv or binary-v1")
      ->required();
  conv->add_flag("--csv-header", csv_header, "Input CSV has a header row");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return run_gen_data(config_path, seed, out, format);
    if (fit->parsed()) return run_fit(config_path, method, p, seed, out);
    if (pred->parsed())
      return run_predict(model_path, x_path, out, format, csv_header);
    if (ev->parsed()) return run_eval(config_path, model_path, out);
    if (bench->parsed()) return run_bench(config_path, seed, out);
    if (conv->parsed()) return run_convert(in_path, out_path, format, csv_header);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
