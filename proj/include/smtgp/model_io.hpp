#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <variant>

#include <json.hpp>

#include "smtgp/matrix_io.hpp"
#include "smtgp/mtkronprod.hpp"
#include "smtgp/smtgpr.hpp"
#include "smtgp/stgpr.hpp"

namespace smtgp {

/**
 * Version-tagged binary container for trained models.
 *
 * Layout: magic "KGPMODEL", version byte, method byte, a length-prefixed
 * JSON blob for structure (kernel term names, counts, optimizer settings),
 * then named little-endian double matrices for everything numeric, so
 * parameters and cached factorizations round-trip bit-exactly.
 */

enum class ModelKind : std::uint8_t { Smtgpr = 1, MtKronprod = 2, Stgpr = 3 };

using AnyModel = std::variant<SmtgprModel, MtKronprodModel, StgprModel>;

namespace detail {

constexpr char kModelMagic[8] = {'K', 'G', 'P', 'M', 'O', 'D', 'E', 'L'};

struct MatrixSection {
  std::map<std::string, Matrix> entries;

  void add(const std::string& name, const Matrix& m) { entries[name] = m; }
  void add(const std::string& name, const Vector& v) { entries[name] = m_from(v); }
  void add(const std::string& name, double v) {
    entries[name] = Matrix::Constant(1, 1, v);
  }

  static Matrix m_from(const Vector& v) {
    return Eigen::Map<const Matrix>(v.data(), v.size(), 1);
  }

  const Matrix& matrix(const std::string& name) const {
    const auto it = entries.find(name);
    if (it == entries.end())
      throw std::runtime_error("model file missing section: " + name);
    return it->second;
  }
  Vector vector(const std::string& name) const {
    const Matrix& m = matrix(name);
    return Eigen::Map<const Vector>(m.data(), m.size());
  }
  double scalar(const std::string& name) const { return matrix(name)(0, 0); }
  bool has(const std::string& name) const { return entries.count(name) > 0; }
};

inline void write_model_file(const std::string& path, ModelKind kind,
                             const nlohmann::json& meta,
                             const MatrixSection& matrices) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_model: cannot open " + path);
  out.write(kModelMagic, 8);
  out.put(static_cast<char>(1));
  out.put(static_cast<char>(kind));
  const std::string blob = meta.dump();
  write_le<std::uint64_t>(out, blob.size());
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  write_le<std::uint64_t>(out, matrices.entries.size());
  for (const auto& [name, m] : matrices.entries) {
    write_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_le<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
    write_le<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
    for (Index j = 0; j < m.cols(); ++j)
      for (Index i = 0; i < m.rows(); ++i) write_le<double>(out, m(i, j));
  }
  if (!out) throw std::runtime_error("save_model: write failed for " + path);
}

inline ModelKind read_model_header(std::istream& in, const std::string& path) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kModelMagic, 8) != 0)
    throw std::runtime_error(path + ": not a model file");
  const int version = in.get();
  if (version != 1)
    throw std::runtime_error(path + ": unsupported model version " +
                             std::to_string(version));
  const int kind = in.get();
  if (kind < 1 || kind > 3)
    throw std::runtime_error(path + ": unknown model kind");
  return static_cast<ModelKind>(kind);
}

inline std::pair<nlohmann::json, MatrixSection> read_model_body(
    std::istream& in, const std::string& path) {
  const auto blob_len = read_le<std::uint64_t>(in);
  std::string blob(blob_len, '\0');
  in.read(blob.data(), static_cast<std::streamsize>(blob_len));
  if (!in) throw std::runtime_error(path + ": truncated model file");
  auto meta = nlohmann::json::parse(blob);
  MatrixSection matrices;
  const auto n = read_le<std::uint64_t>(in);
  for (std::uint64_t k = 0; k < n; ++k) {
    const auto name_len = read_le<std::uint16_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto rows = static_cast<Index>(read_le<std::uint64_t>(in));
    const auto cols = static_cast<Index>(read_le<std::uint64_t>(in));
    Matrix m(rows, cols);
    for (Index j = 0; j < cols; ++j)
      for (Index i = 0; i < rows; ++i) m(i, j) = read_le<double>(in);
    matrices.entries[name] = std::move(m);
  }
  return {std::move(meta), std::move(matrices)};
}

inline nlohmann::json kernel_spec_to_json(const KernelSpec& spec) {
  nlohmann::json terms = nlohmann::json::array();
  for (auto t : spec.terms) terms.push_back(term_name(t));
  return terms;
}

inline KernelSpec kernel_spec_from_json(const nlohmann::json& j) {
  KernelSpec spec;
  for (const auto& name : j) spec.terms.push_back(term_from_name(name));
  return spec;
}

inline nlohmann::json optimizer_to_json(const OptimizerSettings& s) {
  return {{"max_iterations", s.max_iterations},
          {"gradient_tolerance", s.gradient_tolerance}};
}

inline OptimizerSettings optimizer_from_json(const nlohmann::json& j,
                                             const MatrixSection& matrices,
                                             const std::string& initial_key) {
  OptimizerSettings s;
  s.max_iterations = j.at("max_iterations").get<int>();
  s.gradient_tolerance = j.at("gradient_tolerance").get<double>();
  if (matrices.has(initial_key)) s.initial_raw = matrices.vector(initial_key);
  return s;
}

}  // namespace detail

inline void save_model(const std::string& path, const SmtgprModel& model) {
  nlohmann::json meta{
      {"p", model.config.p},
      {"variance_batch_size", model.config.variance_batch_size},
      {"task_kernel", detail::kernel_spec_to_json(model.config.task_kernel)},
      {"sample_kernel", detail::kernel_spec_to_json(model.config.sample_kernel)},
      {"optimizer", detail::optimizer_to_json(model.config.optimizer)},
      {"floor_warnings", model.floor_warnings},
      {"optimizer_iterations", model.optimizer_iterations},
      {"optimizer_evaluations", model.optimizer_evaluations}};
  detail::MatrixSection m;
  if (model.config.task_features.size() > 0)
    m.add("task_features", model.config.task_features);
  if (model.config.optimizer.initial_raw.size() > 0)
    m.add("optimizer_initial_raw", model.config.optimizer.initial_raw);
  m.add("train_x", model.train_x);
  m.add("basis_b", model.basis.b);
  m.add("basis_explained_variance", model.basis.explained_variance);
  m.add("basis_column_means", model.basis.column_means);
  m.add("theta_c", model.params.theta_c.raw);
  m.add("theta_r", model.params.theta_r.raw);
  m.add("theta_sigma2", model.params.theta_sigma2);
  m.add("eig_c_vectors", model.eig_c.vectors);
  m.add("eig_c_values", model.eig_c.values);
  m.add("eig_r_vectors", model.eig_r.vectors);
  m.add("eig_r_values", model.eig_r.values);
  m.add("kron_inv_diag", model.kron_inv_diag);
  m.add("alpha", model.alpha);
  m.add("final_lml", model.final_lml);
  detail::write_model_file(path, ModelKind::Smtgpr, meta, m);
}

inline void save_model(const std::string& path, const MtKronprodModel& model) {
  nlohmann::json meta{
      {"n_tasks", model.n_tasks},
      {"variance_batch_size", model.config.variance_batch_size},
      {"max_tasks_guard", model.config.max_tasks_guard},
      {"task_kernel", detail::kernel_spec_to_json(model.config.task_kernel)},
      {"sample_kernel", detail::kernel_spec_to_json(model.config.sample_kernel)},
      {"optimizer", detail::optimizer_to_json(model.config.optimizer)},
      {"floor_warnings", model.floor_warnings},
      {"optimizer_iterations", model.optimizer_iterations},
      {"optimizer_evaluations", model.optimizer_evaluations}};
  detail::MatrixSection m;
  if (model.config.task_features.size() > 0)
    m.add("task_features", model.config.task_features);
  if (model.config.optimizer.initial_raw.size() > 0)
    m.add("optimizer_initial_raw", model.config.optimizer.initial_raw);
  m.add("train_x", model.train_x);
  m.add("theta_d", model.params.theta_d.raw);
  m.add("theta_r", model.params.theta_r.raw);
  m.add("theta_sigma2", model.params.theta_sigma2);
  m.add("eig_d_vectors", model.eig_d.vectors);
  m.add("eig_d_values", model.eig_d.values);
  m.add("eig_r_vectors", model.eig_r.vectors);
  m.add("eig_r_values", model.eig_r.values);
  m.add("kron_inv_diag", model.kron_inv_diag);
  m.add("alpha", model.alpha);
  m.add("final_lml", model.final_lml);
  detail::write_model_file(path, ModelKind::MtKronprod, meta, m);
}

inline void save_model(const std::string& path, const StgprModel& model) {
  nlohmann::json errors = nlohmann::json::array();
  for (std::size_t j = 0; j < model.tasks.size(); ++j)
    if (!model.tasks[j].ok)
      errors.push_back({{"task", j}, {"error", model.tasks[j].error}});
  nlohmann::json meta{
      {"kernel", detail::kernel_spec_to_json(model.config.kernel)},
      {"optimizer", detail::optimizer_to_json(model.config.optimizer)},
      {"n_threads", model.config.n_threads},
      {"task_errors", errors}};
  detail::MatrixSection m;
  if (model.config.optimizer.initial_raw.size() > 0)
    m.add("optimizer_initial_raw", model.config.optimizer.initial_raw);
  m.add("train_x", model.train_x);
  m.add("train_y", model.train_y);
  const Index nk = param_count(model.config.kernel);
  const Index t = static_cast<Index>(model.tasks.size());
  Matrix raw = Matrix::Constant(nk + 1, t,
                                std::numeric_limits<double>::quiet_NaN());
  Matrix lml(1, t);
  Matrix ok(1, t);
  for (Index j = 0; j < t; ++j) {
    const auto& task = model.tasks[static_cast<std::size_t>(j)];
    ok(0, j) = task.ok ? 1.0 : 0.0;
    lml(0, j) = task.final_lml;
    if (task.ok) {
      raw.col(j).head(nk) = task.kernel_params.raw;
      raw(nk, j) = task.theta_sigma2;
    }
  }
  m.add("task_raw_params", raw);
  m.add("task_final_lml", lml);
  m.add("task_ok", ok);
  detail::write_model_file(path, ModelKind::Stgpr, meta, m);
}

inline AnyModel load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_model: cannot open " + path);
  const ModelKind kind = detail::read_model_header(in, path);
  auto [meta, m] = detail::read_model_body(in, path);

  if (kind == ModelKind::Smtgpr) {
    SmtgprModel model;
    model.config.p = meta.at("p").get<Index>();
    model.config.variance_batch_size =
        meta.at("variance_batch_size").get<Index>();
    model.config.task_kernel =
        detail::kernel_spec_from_json(meta.at("task_kernel"));
    model.config.sample_kernel =
        detail::kernel_spec_from_json(meta.at("sample_kernel"));
    model.config.optimizer = detail::optimizer_from_json(
        meta.at("optimizer"), m, "optimizer_initial_raw");
    if (m.has("task_features")) model.config.task_features = m.matrix("task_features");
    model.floor_warnings = meta.at("floor_warnings").get<int>();
    model.optimizer_iterations = meta.at("optimizer_iterations").get<int>();
    model.optimizer_evaluations = meta.at("optimizer_evaluations").get<int>();
    model.train_x = m.matrix("train_x");
    model.basis.b = m.matrix("basis_b");
    model.basis.explained_variance = m.vector("basis_explained_variance");
    model.basis.column_means = m.vector("basis_column_means");
    model.params.theta_c.raw = m.vector("theta_c");
    model.params.theta_r.raw = m.vector("theta_r");
    model.params.theta_sigma2 = m.scalar("theta_sigma2");
    model.eig_c.vectors = m.matrix("eig_c_vectors");
    model.eig_c.values = m.vector("eig_c_values");
    model.eig_r.vectors = m.matrix("eig_r_vectors");
    model.eig_r.values = m.vector("eig_r_values");
    model.kron_inv_diag = m.vector("kron_inv_diag");
    model.alpha = m.matrix("alpha");
    model.final_lml = m.scalar("final_lml");
    return model;
  }
  if (kind == ModelKind::MtKronprod) {
    MtKronprodModel model;
    model.n_tasks = meta.at("n_tasks").get<Index>();
    model.config.variance_batch_size =
        meta.at("variance_batch_size").get<Index>();
    model.config.max_tasks_guard = meta.at("max_tasks_guard").get<Index>();
    model.config.task_kernel =
        detail::kernel_spec_from_json(meta.at("task_kernel"));
    model.config.sample_kernel =
        detail::kernel_spec_from_json(meta.at("sample_kernel"));
    model.config.optimizer = detail::optimizer_from_json(
        meta.at("optimizer"), m, "optimizer_initial_raw");
    if (m.has("task_features")) model.config.task_features = m.matrix("task_features");
    model.floor_warnings = meta.at("floor_warnings").get<int>();
    model.optimizer_iterations = meta.at("optimizer_iterations").get<int>();
    model.optimizer_evaluations = meta.at("optimizer_evaluations").get<int>();
    model.train_x = m.matrix("train_x");
    model.params.theta_d.raw = m.vector("theta_d");
    model.params.theta_r.raw = m.vector("theta_r");
    model.params.theta_sigma2 = m.scalar("theta_sigma2");
    model.eig_d.vectors = m.matrix("eig_d_vectors");
    model.eig_d.values = m.vector("eig_d_values");
    model.eig_r.vectors = m.matrix("eig_r_vectors");
    model.eig_r.values = m.vector("eig_r_values");
    model.kron_inv_diag = m.vector("kron_inv_diag");
    model.alpha = m.matrix("alpha");
    model.final_lml = m.scalar("final_lml");
    return model;
  }

  StgprModel model;
  model.config.kernel = detail::kernel_spec_from_json(meta.at("kernel"));
  model.config.optimizer = detail::optimizer_from_json(
      meta.at("optimizer"), m, "optimizer_initial_raw");
  model.config.n_threads = meta.at("n_threads").get<int>();
  model.train_x = m.matrix("train_x");
  model.train_y = m.matrix("train_y");
  const Matrix raw = m.matrix("task_raw_params");
  const Matrix lml = m.matrix("task_final_lml");
  const Matrix ok = m.matrix("task_ok");
  const Index nk = param_count(model.config.kernel);
  model.tasks.resize(static_cast<std::size_t>(raw.cols()));
  for (Index j = 0; j < raw.cols(); ++j) {
    auto& task = model.tasks[static_cast<std::size_t>(j)];
    task.ok = ok(0, j) != 0.0;
    task.final_lml = lml(0, j);
    if (task.ok) {
      task.kernel_params.raw = raw.col(j).head(nk);
      task.theta_sigma2 = raw(nk, j);
    }
  }
  for (const auto& err : meta.at("task_errors"))
    model.tasks[err.at("task").get<std::size_t>()].error =
        err.at("error").get<std::string>();
  for (const auto& t : model.tasks)
    if (!t.ok) ++model.failed_tasks;
  return model;
}

}  // namespace smtgp
