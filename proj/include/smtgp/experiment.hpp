#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "smtgp/matrix_io.hpp"
#include "smtgp/model_io.hpp"
#include "smtgp/mtkronprod.hpp"
#include "smtgp/normative.hpp"
#include "smtgp/smtgpr.hpp"
#include "smtgp/stgpr.hpp"
#include "smtgp/synthetic.hpp"

namespace smtgp {

/**
 * Experiment orchestration: repeated sample/fit/evaluate cycles over the
 * configured methods, timed with a monotonic clock, reported as CSV plus
 * line-delimited JSON records.
 */

enum class Method { Stgpr, MtKronprod, Smtgpr };

inline std::string method_name(Method m) {
  switch (m) {
    case Method::Stgpr: return "STGPR";
    case Method::MtKronprod: return "MT-Kronprod";
    case Method::Smtgpr: return "S-MTGPR";
  }
  throw std::logic_error("method_name: unknown method");
}

inline Method method_from_name(const std::string& name) {
  if (name == "STGPR") return Method::Stgpr;
  if (name == "MT-Kronprod") return Method::MtKronprod;
  if (name == "S-MTGPR") return Method::Smtgpr;
  throw std::invalid_argument("unknown method: " + name);
}

struct FileDataSpec {
  std::string x_train, y_train, x_test, y_test;
  std::string labels;  // optional
  bool csv_has_header = false;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  int repetitions = 1;
  std::vector<Method> methods{Method::Stgpr, Method::MtKronprod, Method::Smtgpr};
  std::vector<Index> p_grid{5, 10, 25, 50};
  SyntheticSpec synthetic;
  std::optional<FileDataSpec> files;  // overrides the synthetic generator
  KernelSpec sample_kernel{{KernelTerm::Linear, KernelTerm::SquaredExponential,
                            KernelTerm::DiagonalIsotropic}};
  KernelSpec task_kernel{{KernelTerm::Linear, KernelTerm::SquaredExponential,
                          KernelTerm::DiagonalIsotropic}};
  KernelSpec stgpr_kernel{{KernelTerm::Linear, KernelTerm::SquaredExponential}};
  OptimizerSettings optimizer;
  Index variance_batch_size = 256;
  bool center_responses = false;
  double npm_top_fraction = 0.05;
  RobustMean robust_mean = RobustMean::TrimmedMean;
  int n_threads = 0;
  std::string output_prefix = "report";
};

struct ReportRow {
  std::string method;
  std::optional<Index> p;
  int repetition = 0;
  double optimization_seconds = std::numeric_limits<double>::quiet_NaN();
  double prediction_seconds = std::numeric_limits<double>::quiet_NaN();
  double mean_r2 = std::numeric_limits<double>::quiet_NaN();
  double auc = std::numeric_limits<double>::quiet_NaN();
  double final_lml = std::numeric_limits<double>::quiet_NaN();
  Index parameter_count = 0;
  std::string warnings;
};

struct AggregateRow {
  std::string method;
  std::optional<Index> p;
  std::string stat;  // "mean" or "sd"
  double optimization_seconds = 0, prediction_seconds = 0, mean_r2 = 0,
         auc = 0, final_lml = 0;
};

struct ExperimentReport {
  std::vector<ReportRow> rows;
  std::vector<AggregateRow> aggregates;
};

// ---------------------------------------------------------------------------
// Config (de)serialization. Every key is optional; defaults above apply.

inline void from_json_config(const nlohmann::json& j, ExperimentConfig& c) {
  c.seed = j.value("seed", c.seed);
  c.repetitions = j.value("repetitions", c.repetitions);
  if (j.contains("methods")) {
    c.methods.clear();
    for (const auto& name : j.at("methods"))
      c.methods.push_back(method_from_name(name.get<std::string>()));
  }
  if (j.contains("p_grid")) c.p_grid = j.at("p_grid").get<std::vector<Index>>();
  if (j.contains("data")) {
    const auto& d = j.at("data");
    if (d.contains("synthetic")) {
      const auto& s = d.at("synthetic");
      auto& spec = c.synthetic;
      spec.n_train = s.value("n_train", spec.n_train);
      spec.n_test_normal = s.value("n_test_normal", spec.n_test_normal);
      spec.n_test_abnormal = s.value("n_test_abnormal", spec.n_test_abnormal);
      spec.n_tasks = s.value("n_tasks", spec.n_tasks);
      spec.n_features = s.value("n_features", spec.n_features);
      spec.spatial_lengthscale =
          s.value("spatial_lengthscale", spec.spatial_lengthscale);
      spec.sample_lengthscale =
          s.value("sample_lengthscale", spec.sample_lengthscale);
      spec.noise_std = s.value("noise_std", spec.noise_std);
      spec.abnormal_shift = s.value("abnormal_shift", spec.abnormal_shift);
      spec.abnormal_patch_fraction =
          s.value("abnormal_patch_fraction", spec.abnormal_patch_fraction);
    }
    if (d.contains("files")) {
      const auto& f = d.at("files");
      FileDataSpec files;
      files.x_train = f.at("x_train").get<std::string>();
      files.y_train = f.at("y_train").get<std::string>();
      files.x_test = f.at("x_test").get<std::string>();
      files.y_test = f.at("y_test").get<std::string>();
      files.labels = f.value("labels", std::string{});
      files.csv_has_header = f.value("csv_has_header", false);
      c.files = files;
    }
  }
  if (j.contains("sample_kernel"))
    c.sample_kernel = detail::kernel_spec_from_json(j.at("sample_kernel"));
  if (j.contains("task_kernel"))
    c.task_kernel = detail::kernel_spec_from_json(j.at("task_kernel"));
  if (j.contains("stgpr_kernel"))
    c.stgpr_kernel = detail::kernel_spec_from_json(j.at("stgpr_kernel"));
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    c.optimizer.max_iterations =
        o.value("max_iterations", c.optimizer.max_iterations);
    c.optimizer.gradient_tolerance =
        o.value("gradient_tolerance", c.optimizer.gradient_tolerance);
    if (o.contains("initial_raw")) {
      const auto vals = o.at("initial_raw").get<std::vector<double>>();
      c.optimizer.initial_raw =
          Eigen::Map<const Vector>(vals.data(), static_cast<Index>(vals.size()));
    }
  }
  c.variance_batch_size = j.value("variance_batch_size", c.variance_batch_size);
  c.center_responses = j.value("center_responses", c.center_responses);
  c.npm_top_fraction = j.value("npm_top_fraction", c.npm_top_fraction);
  if (j.contains("robust_mean")) {
    const auto name = j.at("robust_mean").get<std::string>();
    if (name == "trimmed") c.robust_mean = RobustMean::TrimmedMean;
    else if (name == "mean") c.robust_mean = RobustMean::Mean;
    else if (name == "median") c.robust_mean = RobustMean::Median;
    else throw std::invalid_argument("unknown robust_mean: " + name);
  }
  c.n_threads = j.value("n_threads", c.n_threads);
  c.output_prefix = j.value("output_prefix", c.output_prefix);
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  nlohmann::json j;
  in >> j;
  ExperimentConfig c;
  from_json_config(j, c);
  return c;
}

// ---------------------------------------------------------------------------

namespace detail {

struct ExperimentData {
  Matrix x_train, y_train, x_test, y_test;
  std::vector<int> labels;
};

inline ExperimentData prepare_data(const ExperimentConfig& config,
                                   std::uint64_t rep_seed,
                                   std::string& warnings) {
  ExperimentData data;
  if (config.files) {
    const auto& f = *config.files;
    const auto load = [&](const std::string& path) {
      return load_matrix(path, detect_matrix_format(path), f.csv_has_header);
    };
    data.x_train = load(f.x_train);
    data.y_train = load(f.y_train);
    data.x_test = load(f.x_test);
    data.y_test = load(f.y_test);
    if (!f.labels.empty()) {
      const Matrix lab = load(f.labels);
      for (Index i = 0; i < lab.rows(); ++i)
        data.labels.push_back(lab(i, 0) != 0.0 ? 1 : 0);
    } else {
      data.labels.assign(static_cast<std::size_t>(data.x_test.rows()), 0);
      warnings += "no labels supplied, AUC unavailable;";
    }
  } else {
    SyntheticData s = generate_synthetic(config.synthetic, rep_seed);
    data.x_train = std::move(s.x_train);
    data.y_train = std::move(s.y_train);
    data.x_test = std::move(s.x_test);
    data.y_test = std::move(s.y_test);
    data.labels = std::move(s.labels);
  }
  if (data.y_train.rows() != data.x_train.rows() ||
      data.y_test.rows() != data.x_test.rows() ||
      data.y_train.cols() != data.y_test.cols() ||
      static_cast<Index>(data.labels.size()) != data.x_test.rows())
    throw std::runtime_error("experiment data dimensions are inconsistent");
  if (config.center_responses) {
    const Vector means = data.y_train.colwise().mean();
    data.y_train.rowwise() -= means.transpose();
    data.y_test.rowwise() -= means.transpose();
  }
  return data;
}

struct MethodOutcome {
  double fit_seconds = 0, predict_seconds = 0;
  double final_lml = std::numeric_limits<double>::quiet_NaN();
  PredictiveDistribution pred;
  std::string warnings;
};

inline void score_row(const ExperimentConfig& config, const ExperimentData& data,
                      const MethodOutcome& outcome, ReportRow& row) {
  row.optimization_seconds = outcome.fit_seconds;
  row.prediction_seconds = outcome.predict_seconds;
  row.final_lml = outcome.final_lml;
  row.warnings += outcome.warnings;

  std::vector<Index> normal_rows, abnormal_rows;
  for (Index i = 0; i < data.x_test.rows(); ++i)
    (data.labels[static_cast<std::size_t>(i)] == 0 ? normal_rows : abnormal_rows)
        .push_back(i);

  Matrix y_normal(static_cast<Index>(normal_rows.size()), data.y_test.cols());
  Matrix m_normal(y_normal.rows(), y_normal.cols());
  for (Index k = 0; k < y_normal.rows(); ++k) {
    y_normal.row(k) = data.y_test.row(normal_rows[static_cast<std::size_t>(k)]);
    m_normal.row(k) = outcome.pred.mean.row(normal_rows[static_cast<std::size_t>(k)]);
  }
  row.mean_r2 = r_squared(y_normal, m_normal).mean;

  const Matrix npm = compute_npm(data.y_test, outcome.pred);
  const Vector scores =
      abnormality_scores(npm, config.npm_top_fraction, config.robust_mean);
  if (!abnormal_rows.empty() && !normal_rows.empty()) {
    Vector s_normal(static_cast<Index>(normal_rows.size()));
    Vector s_abnormal(static_cast<Index>(abnormal_rows.size()));
    for (std::size_t k = 0; k < normal_rows.size(); ++k)
      s_normal(static_cast<Index>(k)) = scores(normal_rows[k]);
    for (std::size_t k = 0; k < abnormal_rows.size(); ++k)
      s_abnormal(static_cast<Index>(k)) = scores(abnormal_rows[k]);
    row.auc = auc(s_normal, s_abnormal);
  }
}

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

}  // namespace detail

inline ExperimentReport run_experiment(const ExperimentConfig& config) {
  if (config.repetitions < 1)
    throw std::invalid_argument("run_experiment: repetitions must be >= 1");
  if (config.methods.empty())
    throw std::invalid_argument("run_experiment: no methods configured");

  ExperimentReport report;
  for (int rep = 0; rep < config.repetitions; ++rep) {
    const std::uint64_t rep_seed = config.seed + static_cast<std::uint64_t>(rep);
    std::string data_warnings;
    detail::ExperimentData data;
    try {
      data = detail::prepare_data(config, rep_seed, data_warnings);
    } catch (const std::exception& e) {
      for (Method m : config.methods) {
        ReportRow row;
        row.method = method_name(m);
        row.repetition = rep;
        row.warnings = std::string("data preparation failed: ") + e.what();
        report.rows.push_back(row);
      }
      continue;
    }

    for (Method m : config.methods) {
      if (m == Method::Stgpr) {
        ReportRow row;
        row.method = method_name(m);
        row.repetition = rep;
        row.warnings = data_warnings;
        StgprConfig sc;
        sc.kernel = config.stgpr_kernel;
        sc.optimizer = config.optimizer;
        sc.n_threads = config.n_threads;
        row.parameter_count = stgpr_total_param_count(sc, data.y_train.cols());
        try {
          detail::MethodOutcome out;
          auto t0 = detail::Clock::now();
          const StgprModel model = stgpr_fit(sc, data.x_train, data.y_train);
          out.fit_seconds = detail::seconds_since(t0);
          t0 = detail::Clock::now();
          out.pred = stgpr_predict(model, data.x_test);
          out.predict_seconds = detail::seconds_since(t0);
          double lml_sum = 0.0;
          for (const auto& task : model.tasks)
            if (task.ok) lml_sum += task.final_lml;
          out.final_lml = lml_sum;
          if (model.failed_tasks > 0)
            out.warnings += std::to_string(model.failed_tasks) +
                            " task fits failed;";
          detail::score_row(config, data, out, row);
        } catch (const std::exception& e) {
          row.warnings += std::string("failed: ") + e.what() + ";";
        }
        report.rows.push_back(std::move(row));
      } else if (m == Method::MtKronprod) {
        ReportRow row;
        row.method = method_name(m);
        row.repetition = rep;
        row.warnings = data_warnings;
        MtKronprodConfig mc;
        mc.task_kernel = config.task_kernel;
        mc.sample_kernel = config.sample_kernel;
        mc.optimizer = config.optimizer;
        mc.variance_batch_size = config.variance_batch_size;
        row.parameter_count = mtkronprod_raw_param_count(mc);
        try {
          detail::MethodOutcome out;
          auto t0 = detail::Clock::now();
          const MtKronprodModel model =
              mtkronprod_fit(mc, data.x_train, data.y_train);
          out.fit_seconds = detail::seconds_since(t0);
          t0 = detail::Clock::now();
          out.pred = mtkronprod_predict(model, data.x_test);
          out.predict_seconds = detail::seconds_since(t0);
          out.final_lml = model.final_lml;
          if (model.floor_warnings > 0)
            out.warnings += std::to_string(model.floor_warnings) +
                            " floored eigenvalues;";
          detail::score_row(config, data, out, row);
        } catch (const std::exception& e) {
          row.warnings += std::string("failed: ") + e.what() + ";";
        }
        report.rows.push_back(std::move(row));
      } else {
        for (Index p : config.p_grid) {
          ReportRow row;
          row.method = method_name(m);
          row.p = p;
          row.repetition = rep;
          row.warnings = data_warnings;
          SmtgprConfig sc;
          sc.sample_kernel = config.sample_kernel;
          sc.task_kernel = config.task_kernel;
          sc.p = p;
          sc.optimizer = config.optimizer;
          sc.variance_batch_size = config.variance_batch_size;
          row.parameter_count = smtgpr_total_param_count(sc);
          const Index p_max =
              std::min(data.y_train.rows(), data.y_train.cols());
          if (p > p_max) {
            row.warnings += "p skipped: exceeds min(n_train, n_tasks)=" +
                            std::to_string(p_max) + ";";
            report.rows.push_back(std::move(row));
            continue;
          }
          try {
            detail::MethodOutcome out;
            auto t0 = detail::Clock::now();
            const SmtgprModel model = smtgpr_fit(sc, data.x_train, data.y_train);
            out.fit_seconds = detail::seconds_since(t0);
            t0 = detail::Clock::now();
            out.pred = smtgpr_predict(model, data.x_test);
            out.predict_seconds = detail::seconds_since(t0);
            out.final_lml = model.final_lml;
            if (model.floor_warnings > 0)
              out.warnings += std::to_string(model.floor_warnings) +
                              " floored eigenvalues;";
            detail::score_row(config, data, out, row);
          } catch (const std::exception& e) {
            row.warnings += std::string("failed: ") + e.what() + ";";
          }
          report.rows.push_back(std::move(row));
        }
      }
    }
  }

  // Aggregates over repetitions, keyed by (method, p), finite entries only.
  std::vector<std::pair<std::string, std::optional<Index>>> keys;
  for (const auto& row : report.rows) {
    const auto key = std::make_pair(row.method, row.p);
    bool seen = false;
    for (const auto& k : keys) seen = seen || k == key;
    if (!seen) keys.push_back(key);
  }
  for (const auto& [method, p] : keys) {
    const auto stat_of = [&](auto accessor, bool want_sd) {
      double sum = 0.0, sum2 = 0.0;
      int count = 0;
      for (const auto& row : report.rows) {
        if (row.method != method || row.p != p) continue;
        const double v = accessor(row);
        if (!std::isfinite(v)) continue;
        sum += v;
        sum2 += v * v;
        ++count;
      }
      if (count == 0) return std::numeric_limits<double>::quiet_NaN();
      const double mean = sum / count;
      if (!want_sd) return mean;
      if (count < 2) return 0.0;
      const double var = std::max(0.0, (sum2 - count * mean * mean) / (count - 1));
      return std::sqrt(var);
    };
    for (const bool want_sd : {false, true}) {
      AggregateRow agg;
      agg.method = method;
      agg.p = p;
      agg.stat = want_sd ? "sd" : "mean";
      agg.optimization_seconds = stat_of(
          [](const ReportRow& r) { return r.optimization_seconds; }, want_sd);
      agg.prediction_seconds = stat_of(
          [](const ReportRow& r) { return r.prediction_seconds; }, want_sd);
      agg.mean_r2 =
          stat_of([](const ReportRow& r) { return r.mean_r2; }, want_sd);
      agg.auc = stat_of([](const ReportRow& r) { return r.auc; }, want_sd);
      agg.final_lml =
          stat_of([](const ReportRow& r) { return r.final_lml; }, want_sd);
      report.aggregates.push_back(std::move(agg));
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Report emission.

namespace detail {

inline std::string csv_number(double v) {
  if (std::isnan(v)) return "";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

}  // namespace detail

inline void write_report_csv(const std::string& path,
                             const ExperimentReport& report) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open report file: " + path);
  out << "method,p,repetition,optimization_seconds,prediction_seconds,"
         "mean_r2,auc,final_lml,parameter_count,warnings\n";
  for (const auto& r : report.rows) {
    out << r.method << ',' << (r.p ? std::to_string(*r.p) : "") << ','
        << r.repetition << ',' << detail::csv_number(r.optimization_seconds)
        << ',' << detail::csv_number(r.prediction_seconds) << ','
        << detail::csv_number(r.mean_r2) << ',' << detail::csv_number(r.auc)
        << ',' << detail::csv_number(r.final_lml) << ',' << r.parameter_count
        << ',' << detail::csv_quote(r.warnings) << '\n';
  }
  for (const auto& a : report.aggregates) {
    out << a.method << ',' << (a.p ? std::to_string(*a.p) : "") << ','
        << a.stat << ',' << detail::csv_number(a.optimization_seconds) << ','
        << detail::csv_number(a.prediction_seconds) << ','
        << detail::csv_number(a.mean_r2) << ',' << detail::csv_number(a.auc)
        << ',' << detail::csv_number(a.final_lml) << ",,\n";
  }
  if (!out) throw std::runtime_error("report write failed: " + path);
}

inline void write_report_jsonl(const std::string& path,
                               const ExperimentReport& report) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open report file: " + path);
  const auto number_or_null = [](double v) {
    return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
  };
  for (const auto& r : report.rows) {
    nlohmann::json j{{"record", "row"},
                     {"method", r.method},
                     {"p", r.p ? nlohmann::json(*r.p) : nlohmann::json(nullptr)},
                     {"repetition", r.repetition},
                     {"optimization_seconds", number_or_null(r.optimization_seconds)},
                     {"prediction_seconds", number_or_null(r.prediction_seconds)},
                     {"mean_r2", number_or_null(r.mean_r2)},
                     {"auc", number_or_null(r.auc)},
                     {"final_lml", number_or_null(r.final_lml)},
                     {"parameter_count", r.parameter_count},
                     {"warnings", r.warnings}};
    out << j.dump() << '\n';
  }
  for (const auto& a : report.aggregates) {
    nlohmann::json j{{"record", "aggregate"},
                     {"method", a.method},
                     {"p", a.p ? nlohmann::json(*a.p) : nlohmann::json(nullptr)},
                     {"stat", a.stat},
                     {"optimization_seconds", number_or_null(a.optimization_seconds)},
                     {"prediction_seconds", number_or_null(a.prediction_seconds)},
                     {"mean_r2", number_or_null(a.mean_r2)},
                     {"auc", number_or_null(a.auc)},
                     {"final_lml", number_or_null(a.final_lml)}};
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("report write failed: " + path);
}

}  // namespace smtgp
