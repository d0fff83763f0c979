#pragma once

#include <Eigen/Dense>

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "csmtl/errors.hpp"
#include "csmtl/network.hpp"
#include "csmtl/quadratic.hpp"

namespace csmtl {

using Json = nlohmann::json;

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "mse") return LossKind::mse;
  if (s == "cross_entropy") return LossKind::cross_entropy;
  throw ConfigError("unknown loss kind '" + s + "'");
}

inline Json conv_spec_to_json(const ConvSpec& c) {
  return Json{{"in_channels", c.in_channels}, {"out_channels", c.out_channels}, {"kernel", c.kernel},
              {"stride", c.stride},           {"padding", c.padding},           {"bias", c.bias},
              {"batch_norm", c.batch_norm},   {"relu", c.relu}};
}

inline ConvSpec conv_spec_from_json(const Json& j) {
  ConvSpec c;
  c.in_channels = j.at("in_channels").get<std::size_t>();
  c.out_channels = j.at("out_channels").get<std::size_t>();
  c.kernel = j.at("kernel").get<std::size_t>();
  c.stride = j.at("stride").get<std::size_t>();
  c.padding = j.at("padding").get<std::size_t>();
  c.bias = j.at("bias").get<bool>();
  c.batch_norm = j.at("batch_norm").get<bool>();
  c.relu = j.at("relu").get<bool>();
  return c;
}

inline Json model_spec_to_json(const ModelSpec& spec) {
  Json trunk = Json::array(), heads = Json::array(), tasks = Json::array();
  for (const ConvSpec& c : spec.trunk) trunk.push_back(conv_spec_to_json(c));
  for (const auto& h : spec.heads) {
    Json layers = Json::array();
    for (const ConvSpec& c : h) layers.push_back(conv_spec_to_json(c));
    heads.push_back(layers);
  }
  for (const TaskSpec& t : spec.tasks) tasks.push_back({{"name", t.name}, {"loss", loss_kind_name(t.loss)}, {"weight", t.weight}});
  return Json{{"trunk", trunk}, {"heads", heads}, {"tasks", tasks}};
}

inline ModelSpec model_spec_from_json(const Json& j) {
  ModelSpec spec;
  for (const Json& c : j.at("trunk")) spec.trunk.push_back(conv_spec_from_json(c));
  for (const Json& h : j.at("heads")) {
    std::vector<ConvSpec> layers;
    for (const Json& c : h) layers.push_back(conv_spec_from_json(c));
    spec.heads.push_back(std::move(layers));
  }
  for (const Json& t : j.at("tasks")) {
    spec.tasks.push_back({t.at("name").get<std::string>(), parse_loss_kind(t.at("loss").get<std::string>()),
                          t.at("weight").get<double>()});
  }
  return spec;
}

namespace detail {

inline std::vector<std::pair<std::string, Tensor*>> checkpoint_entries(Model& model) {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (const NamedParam& p : model.parameters()) out.emplace_back(p.name, p.tensor);
  for (std::size_t l = 0; l < model.num_trunk_layers(); ++l) {
    if (!model.has_norm(l)) continue;
    for (std::size_t t = 0; t < model.num_tasks(); ++t) {
      BatchNormState& st = model.trunk_norm(l).state(t);
      const std::string base = "trunk." + std::to_string(l) + ".bn.task" + std::to_string(t);
      out.emplace_back(base + ".running_mean", &st.running_mean);
      out.emplace_back(base + ".running_var", &st.running_var);
    }
  }
  return out;
}

}  // namespace detail

/// {"format": "csmtl-checkpoint-1", "spec": ..., "tensors": {name: {shape,
/// values}}}. Parameters plus running statistics; the shortest round-trip
/// decimal form keeps every double exact.
inline Json model_to_json(Model& model) {
  Json tensors = Json::object();
  for (auto& [name, t] : detail::checkpoint_entries(model)) tensors[name] = {{"shape", t->shape()}, {"values", t->values()}};
  return Json{{"format", "csmtl-checkpoint-1"}, {"spec", model_spec_to_json(model.spec())}, {"tensors", tensors}};
}

inline Model model_from_json(const Json& j) {
  if (j.value("format", "") != "csmtl-checkpoint-1") throw DataError("not a csmtl checkpoint");
  Model model(model_spec_from_json(j.at("spec")), 0);
  const Json& tensors = j.at("tensors");
  auto entries = detail::checkpoint_entries(model);
  if (tensors.size() != entries.size()) {
    throw DataError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, model expects " +
                    std::to_string(entries.size()));
  }
  for (auto& [name, t] : entries) {
    if (!tensors.contains(name)) throw DataError("checkpoint is missing '" + name + "'");
    const Json& e = tensors.at(name);
    if (e.at("shape").get<Shape>() != t->shape()) throw DimensionError("checkpoint tensor '" + name + "' has the wrong shape");
    auto values = e.at("values").get<std::vector<double>>();
    if (values.size() != t->size()) throw DimensionError("checkpoint tensor '" + name + "' has the wrong size");
    t->values() = std::move(values);
  }
  return model;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw DataError("write to '" + path + "' failed");
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline Json read_json_file(const std::string& path) {
  const std::string text = read_text_file(path);
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw DataError(path + ": " + e.what());
  }
}

inline void save_checkpoint(Model& model, const std::string& path) { write_text_file(path, model_to_json(model).dump()); }

inline Model load_checkpoint(const std::string& path) { return model_from_json(read_json_file(path)); }

inline Json matrix_to_json(const Eigen::MatrixXd& m) {
  Json rows = Json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
    rows.push_back(row);
  }
  return rows;
}

inline Json vector_to_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

/// Problem dump: A_i, b_i, H and the per-task minimizers.
inline Json problem_to_json(const QuadraticProblem& p) {
  Json tasks = Json::array();
  for (std::size_t i = 0; i < p.num_tasks(); ++i) {
    tasks.push_back({{"A", matrix_to_json(p.a(i))}, {"b", vector_to_json(p.b(i))}, {"minimizer", vector_to_json(p.minimizer(i))}});
  }
  return Json{{"dim", p.dim()}, {"lipschitz", p.lipschitz()}, {"tasks", tasks}};
}

inline QuadraticProblem problem_from_json(const Json& j) {
  std::vector<Eigen::MatrixXd> a;
  std::vector<Eigen::VectorXd> b;
  for (const Json& t : j.at("tasks")) {
    const auto rows = t.at("A").get<std::vector<std::vector<double>>>();
    const auto bv = t.at("b").get<std::vector<double>>();
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != static_cast<std::size_t>(m.cols())) throw DimensionError("problem dump has a ragged matrix");
      for (std::size_t c = 0; c < rows[r].size(); ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    }
    a.push_back(std::move(m));
    b.push_back(Eigen::Map<const Eigen::VectorXd>(bv.data(), static_cast<Eigen::Index>(bv.size())));
  }
  return QuadraticProblem(std::move(a), std::move(b));
}

}  // namespace csmtl
