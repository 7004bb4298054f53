#include "gnewton/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>

namespace gnewton::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr int kManifestVersion = 1;

std::string hex(std::uint64_t h) { return fmt::format("{:016x}", h); }

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

json matrix_json(const Matrix& M) {
  json rows = json::array();
  for (Index i = 0; i < M.rows(); ++i) {
    json row = json::array();
    for (Index j = 0; j < M.cols(); ++j) row.push_back(M(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const json& j) {
  const Index r = static_cast<Index>(j.size());
  const Index c = r == 0 ? 0 : static_cast<Index>(j.at(0).size());
  Matrix M(r, c);
  for (Index i = 0; i < r; ++i) {
    if (static_cast<Index>(j.at(static_cast<std::size_t>(i)).size()) != c) throw std::invalid_argument("ragged matrix");
    for (Index k = 0; k < c; ++k) M(i, k) = j.at(static_cast<std::size_t>(i)).at(static_cast<std::size_t>(k)).get<double>();
  }
  return M;
}

void write_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
  out << content;
}

// Rejects keys of `given` that have no counterpart in `defaults`.
void check_keys(const json& given, const json& defaults, const std::string& where) {
  if (!given.is_object()) throw ConfigError(fmt::format("'{}' must be an object", where.empty() ? "config" : where));
  for (const auto& [key, value] : given.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!defaults.contains(key)) throw ConfigError(fmt::format("unknown config key '{}'", path));
    const json& def = defaults.at(key);
    if (def.is_object() && path != "check.tolerances") check_keys(value, def, path);
  }
}

// Recursive overlay; unlike a JSON merge patch, null is kept as a value.
void overlay(json& base, const json& patch) {
  for (const auto& [key, value] : patch.items()) {
    if (value.is_object() && base.contains(key) && base.at(key).is_object()) {
      overlay(base[key], value);
    } else {
      base[key] = value;
    }
  }
}

const std::map<std::string, double>& default_tolerances() {
  static const std::map<std::string, double> tol{
      {"fd_gradient", 1e-6},       {"fd_hessian", 1e-5}, {"pseudo_hessian_oracle", 1e-5},
      {"sum_collapse", 1e-10},     {"symmetry", 1e-10},  {"summary_identity", 1e-10},
      {"pass_count", 0.0},
  };
  return tol;
}

std::vector<double> vector_of(const Vector& v) { return {v.begin(), v.end()}; }

bool is_bias_label(const std::string& label) {
  return label.size() >= 4 && label.compare(label.size() - 4, 4, "bias") == 0;
}

}  // namespace

const std::vector<std::string>& check_names() {
  static const std::vector<std::string> names{"fd_gradient",      "fd_hessian", "pseudo_hessian_oracle",
                                              "sum_collapse",     "symmetry",   "summary_identity",
                                              "pass_count"};
  return names;
}

json ExperimentConfig::to_json() const {
  json j;
  j["problem"] = {{"kind", problem.kind},
                  {"dim", problem.dim},
                  {"eig_min", problem.eig_min},
                  {"eig_max", problem.eig_max},
                  {"center_scale", problem.center_scale},
                  {"start", problem.start ? json(*problem.start) : json(nullptr)},
                  {"widths", problem.widths},
                  {"activation", problem.activation},
                  {"loss", problem.loss},
                  {"init_scale", problem.init_scale},
                  {"dataset",
                   {{"kind", problem.dataset.kind},
                    {"n", problem.dataset.n},
                    {"noise", problem.dataset.noise},
                    {"path", problem.dataset.path},
                    {"label_column", problem.dataset.label_column},
                    {"features", problem.dataset.features}}}};
  j["method"] = gnewton::to_string(method);
  j["partition"] = partition;
  j["step"] = {{"damping", step.damping},
               {"epsilon", step.epsilon},
               {"ladder", step.ladder},
               {"cauchy_fallback", step.cauchy_fallback},
               {"max_iterations", step.max_iterations},
               {"grad_tolerance", step.grad_tolerance},
               {"loss_target", step.loss_target ? json(*step.loss_target) : json(nullptr)},
               {"line_search", step.line_search},
               {"dense_budget", step.dense_budget},
               {"regularization",
                {{"mode", step.regularization.mode == RegularizationMode::kExact ? "exact" : "sampled"},
                 {"max_exact_group", step.regularization.max_exact_group},
                 {"samples", step.regularization.samples}}}};
  j["seed"] = seed;
  j["out"] = out;
  j["inspect"] = {{"at", inspect.at}, {"steps", inspect.steps}};
  json tol = json::object();
  for (const auto& [k, v] : default_tolerances()) tol[k] = v;
  for (const auto& [k, v] : check.tolerances) tol[k] = v;
  j["check"] = {{"order", check.order}, {"directions", check.directions}, {"max_dense", check.max_dense},
                {"tolerance", nullptr}, {"tolerances", tol}};
  return j;
}

json default_config() { return ExperimentConfig{}.to_json(); }

ExperimentConfig ExperimentConfig::from_json(const json& input) {
  const json& given = input.is_object() && input.contains("manifest_version") && input.contains("config")
                          ? input.at("config")
                          : input;
  const json defaults = ExperimentConfig{}.to_json();
  check_keys(given, defaults, "");
  json j = defaults;
  overlay(j, given);
  const json given_tolerances = given.value("check", json::object()).value("tolerances", json::object());
  for (const auto& [key, value] : given_tolerances.items()) {
    if (!default_tolerances().contains(key)) throw ConfigError(fmt::format("unknown check '{}' in check.tolerances", key));
  }

  ExperimentConfig c;
  try {
    const json& p = j.at("problem");
    c.problem.kind = p.at("kind").get<std::string>();
    c.problem.dim = p.at("dim").get<Index>();
    c.problem.eig_min = p.at("eig_min").get<double>();
    c.problem.eig_max = p.at("eig_max").get<double>();
    c.problem.center_scale = p.at("center_scale").get<double>();
    if (!p.at("start").is_null()) c.problem.start = p.at("start").get<std::vector<double>>();
    c.problem.widths = p.at("widths").get<std::vector<Index>>();
    c.problem.activation = p.at("activation").get<std::string>();
    c.problem.loss = p.at("loss").get<std::string>();
    c.problem.init_scale = p.at("init_scale").get<double>();
    const json& d = p.at("dataset");
    c.problem.dataset.kind = d.at("kind").get<std::string>();
    c.problem.dataset.n = d.at("n").get<Index>();
    c.problem.dataset.noise = d.at("noise").get<double>();
    c.problem.dataset.path = d.at("path").get<std::string>();
    c.problem.dataset.label_column = d.at("label_column").get<std::string>();
    c.problem.dataset.features = d.at("features").get<std::vector<std::string>>();

    const std::string method = j.at("method").get<std::string>();
    try {
      c.method = method_from_string(method);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    c.partition = j.at("partition").get<std::string>();

    const json& s = j.at("step");
    c.step.damping = s.at("damping").get<double>();
    c.step.epsilon = s.at("epsilon").get<double>();
    c.step.ladder = s.at("ladder").get<std::vector<double>>();
    c.step.cauchy_fallback = s.at("cauchy_fallback").get<bool>();
    c.step.max_iterations = s.at("max_iterations").get<int>();
    c.step.grad_tolerance = s.at("grad_tolerance").get<double>();
    if (!s.at("loss_target").is_null()) c.step.loss_target = s.at("loss_target").get<double>();
    c.step.line_search = s.at("line_search").get<bool>();
    c.step.dense_budget = s.at("dense_budget").get<Index>();
    const json& r = s.at("regularization");
    const std::string mode = r.at("mode").get<std::string>();
    if (mode == "exact") {
      c.step.regularization.mode = RegularizationMode::kExact;
    } else if (mode == "sampled") {
      c.step.regularization.mode = RegularizationMode::kSampled;
    } else {
      throw ConfigError(fmt::format("step.regularization.mode must be 'exact' or 'sampled', got '{}'", mode));
    }
    c.step.regularization.max_exact_group = r.at("max_exact_group").get<Index>();
    c.step.regularization.samples = r.at("samples").get<Index>();

    c.seed = j.at("seed").get<std::uint64_t>();
    c.step.regularization.seed = c.seed;
    c.out = j.at("out").get<std::string>();
    c.inspect.at = j.at("inspect").at("at").get<std::string>();
    c.inspect.steps = j.at("inspect").at("steps").get<int>();
    const json& ch = j.at("check");
    c.check.order = ch.at("order").get<int>();
    c.check.directions = ch.at("directions").get<int>();
    c.check.max_dense = ch.at("max_dense").get<Index>();
    c.check.tolerances = default_tolerances();
    for (const auto& [k, v] : ch.at("tolerances").items()) c.check.tolerances[k] = v.get<double>();
    if (!ch.at("tolerance").is_null()) {
      const double all = ch.at("tolerance").get<double>();
      for (auto& [k, v] : c.check.tolerances) v = all;
    }
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("config type error: {}", e.what()));
  }

  static const std::set<std::string> kinds{"quadratic", "rosenbrock", "mlp"};
  if (!kinds.contains(c.problem.kind)) {
    throw ConfigError(fmt::format("problem.kind must be one of quadratic, rosenbrock, mlp; got '{}'", c.problem.kind));
  }
  if (c.problem.dim < 1) throw ConfigError("problem.dim must be at least 1");
  static const std::set<std::string> data_kinds{"moons", "blobs", "csv"};
  if (!data_kinds.contains(c.problem.dataset.kind)) {
    throw ConfigError(fmt::format("problem.dataset.kind must be moons, blobs or csv; got '{}'", c.problem.dataset.kind));
  }
  if (c.problem.kind == "mlp" && c.problem.dataset.kind == "csv" && !fs::exists(c.problem.dataset.path)) {
    throw ConfigError(fmt::format("dataset file '{}' does not exist", c.problem.dataset.path));
  }
  static const std::set<std::string> partitions{"trivial", "discrete", "canonical"};
  if (!partitions.contains(c.partition)) {
    if (c.partition.rfind("file:", 0) != 0) {
      throw ConfigError(
          fmt::format("partition must be trivial, discrete, canonical or file:PATH; got '{}'", c.partition));
    }
    if (!fs::exists(c.partition.substr(5))) {
      throw ConfigError(fmt::format("partition file '{}' does not exist", c.partition.substr(5)));
    }
  }
  try {
    c.step.validate(c.method == Method::kGd);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(fmt::format("step: {}", e.what()));
  }
  if (c.inspect.at != "init" && c.inspect.at != "checkpoint") {
    throw ConfigError(fmt::format("inspect.at must be init or checkpoint; got '{}'", c.inspect.at));
  }
  if (c.inspect.steps < 0) throw ConfigError("inspect.steps must be nonnegative");
  if (c.check.order < 1 || c.check.order > 3) throw ConfigError("check.order must be 1, 2 or 3");
  if (c.check.directions < 1) throw ConfigError("check.directions must be positive");
  for (const auto& [k, v] : c.check.tolerances) {
    if (!(v >= 0.0)) throw ConfigError(fmt::format("tolerance for {} must be nonnegative", k));
  }
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open config '{}'", path.string()));
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  }
  return ExperimentConfig::from_json(j);
}

Problem build_problem(const ExperimentConfig& cfg) {
  const ProblemConfig& pc = cfg.problem;
  Problem p;
  try {
    if (pc.kind == "quadratic") {
      QuadraticSpec spec;
      spec.eig_min = pc.eig_min;
      spec.eig_max = pc.eig_max;
      spec.seed = cfg.seed;
      spec.center_scale = pc.center_scale;
      const auto q = make_quadratic(pc.dim, spec);
      p.loss = q.loss;
      p.initial = ParamVector::flat(Vector::Zero(pc.dim));
    } else if (pc.kind == "rosenbrock") {
      p.loss = make_rosenbrock();
      p.initial = ParamVector::flat((Vector(2) << -1.2, 1.0).finished());
    } else {
      Dataset data;
      if (pc.dataset.kind == "csv") {
        CsvSchema schema;
        schema.label_column = pc.dataset.label_column;
        schema.feature_columns = pc.dataset.features;
        data = load_csv(pc.dataset.path, schema);
      } else {
        data = synth_dataset(synth_kind_from_string(pc.dataset.kind), pc.dataset.n, cfg.seed, pc.dataset.noise);
      }
      MlpSpec spec;
      spec.widths = pc.widths;
      spec.activation = activation_from_string(pc.activation);
      spec.loss = loss_from_string(pc.loss);
      spec.seed = cfg.seed + 1;
      spec.init_scale = pc.init_scale;
      const auto mlp = make_mlp(spec, data);
      p.loss = mlp.loss;
      p.initial = mlp.initial;
      p.dataset = std::move(data);
    }
    if (pc.start) {
      const Vector start = Eigen::Map<const Vector>(pc.start->data(), static_cast<Index>(pc.start->size()));
      if (start.size() != p.initial.size()) {
        throw ConfigError(fmt::format("problem.start has {} entries, the problem has {} parameters", start.size(),
                                      p.initial.size()));
      }
      p.initial = p.initial.with_values(start);
    }

    const Index P = p.initial.size();
    if (cfg.partition == "trivial") {
      p.partition = Partition::trivial(P);
    } else if (cfg.partition == "discrete") {
      p.partition = Partition::discrete(P);
    } else if (cfg.partition == "canonical") {
      p.partition = Partition::canonical(p.initial);
    } else {
      const std::string path = cfg.partition.substr(5);
      std::ifstream in(path);
      json j;
      try {
        j = json::parse(in);
      } catch (const json::parse_error& e) {
        throw ConfigError(fmt::format("partition file {}: {}", path, e.what()));
      }
      p.partition = Partition::from_json(j, P);
    }
  } catch (const DatasetError& e) {
    throw ConfigError(e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return p;
}

// ---------------------------------------------------------------------------
// Heatmaps

HeatmapExport make_heatmap(const PseudoSystem& sys, const std::vector<double>& ladder, const std::string& at,
                           int step) {
  HeatmapExport h;
  const Matrix& H = sys.hbar;
  const Index S = H.rows();
  h.hbar.labels = sys.labels;
  if (static_cast<Index>(h.hbar.labels.size()) != S) {
    h.hbar.labels.clear();
    for (Index s = 0; s < S; ++s) h.hbar.labels.push_back(fmt::format("group{}", s + 1));
  }
  h.hbar.values = H;
  h.hbar.color_scale = S == 0 ? 0.0 : H.cwiseAbs().maxCoeff();
  h.symmetry_error = S == 0 ? 0.0 : (H - H.transpose()).cwiseAbs().maxCoeff();
  h.at = at;
  h.step = step;
  for (Index s = 0; s < S; ++s) {
    (is_bias_label(h.hbar.labels[static_cast<std::size_t>(s)]) ? h.bias_groups : h.weight_groups).push_back(s);
  }

  const Matrix I = Matrix::Identity(S, S);
  auto invert = [&](const Matrix& M) -> std::optional<Matrix> {
    const Eigen::LDLT<Matrix> ldlt(M);
    if (!factorization_usable(ldlt)) return std::nullopt;
    Matrix inv = ldlt.solve(I);
    if (!inv.allFinite()) return std::nullopt;
    return Matrix(0.5 * (inv + inv.transpose()));
  };

  std::optional<Matrix> inv = H.allFinite() ? invert(H) : std::nullopt;
  for (std::size_t k = 0; !inv && H.allFinite() && k < ladder.size(); ++k) {
    inv = invert(H + ladder[k] * I);
    if (inv) h.levenberg_shift = ladder[k];
  }
  if (!inv && H.allFinite()) {
    const Eigen::SelfAdjointEigenSolver<Matrix> eig(H);
    if (eig.info() == Eigen::Success) {
      const Vector& lambda = eig.eigenvalues();
      const double cutoff = 1e-12 * lambda.cwiseAbs().maxCoeff();
      Vector inv_lambda(S);
      for (Index s = 0; s < S; ++s) inv_lambda[s] = std::abs(lambda[s]) > cutoff ? 1.0 / lambda[s] : 0.0;
      inv = eig.eigenvectors() * inv_lambda.asDiagonal() * eig.eigenvectors().transpose();
      h.pseudo_inverse = true;
    }
  }
  if (inv) {
    h.inverse = HeatmapMatrix{h.hbar.labels, *inv, S == 0 ? 0.0 : inv->cwiseAbs().maxCoeff()};
  } else {
    h.warning = "pseudo-Hessian could not be inverted; only H̄ is exported";
  }
  return h;
}

Matrix HeatmapExport::block(const std::string& name, bool inverse_block) const {
  const Matrix& M = inverse_block ? inverse.value().values : hbar.values;
  const std::vector<Index>* rows = nullptr;
  const std::vector<Index>* cols = nullptr;
  if (name == "ww") {
    rows = cols = &weight_groups;
  } else if (name == "bb") {
    rows = cols = &bias_groups;
  } else if (name == "wb") {
    rows = &weight_groups;
    cols = &bias_groups;
  } else {
    throw std::invalid_argument(fmt::format("unknown block '{}' (valid: ww, bb, wb)", name));
  }
  Matrix B(static_cast<Index>(rows->size()), static_cast<Index>(cols->size()));
  for (Index i = 0; i < B.rows(); ++i)
    for (Index j = 0; j < B.cols(); ++j) B(i, j) = M((*rows)[static_cast<std::size_t>(i)], (*cols)[static_cast<std::size_t>(j)]);
  return B;
}

namespace {

std::vector<std::string> labels_of(const std::vector<std::string>& labels, const std::vector<Index>& idx) {
  std::vector<std::string> out;
  for (Index i : idx) out.push_back(labels[static_cast<std::size_t>(i)]);
  return out;
}

json blocks_json(const HeatmapExport& h) {
  const auto w = labels_of(h.hbar.labels, h.weight_groups);
  const auto b = labels_of(h.hbar.labels, h.bias_groups);
  return {{"ww", {{"rows", w}, {"cols", w}}}, {"bb", {{"rows", b}, {"cols", b}}}, {"wb", {{"rows", w}, {"cols", b}}}};
}

std::string block_csv(const Matrix& B, const std::vector<std::string>& rows, const std::vector<std::string>& cols) {
  std::string out = "group";
  for (const auto& c : cols) out += "," + c;
  out += '\n';
  for (Index i = 0; i < B.rows(); ++i) {
    out += rows[static_cast<std::size_t>(i)];
    for (Index j = 0; j < B.cols(); ++j) out += fmt::format(",{}", B(i, j));
    out += '\n';
  }
  return out;
}

}  // namespace

json HeatmapExport::hbar_json() const {
  return {{"kind", "hbar"},
          {"labels", hbar.labels},
          {"matrix", matrix_json(hbar.values)},
          {"color_scale", hbar.color_scale},
          {"symmetry_error", symmetry_error},
          {"stamp", {{"at", at}, {"step", step}}},
          {"blocks", blocks_json(*this)}};
}

json HeatmapExport::inverse_json() const {
  json j = {{"kind", "hbar_inv"},
            {"labels", hbar.labels},
            {"available", inverse.has_value()},
            {"pseudo_inverse", pseudo_inverse},
            {"levenberg_shift", levenberg_shift},
            {"stamp", {{"at", at}, {"step", step}}},
            {"warning", warning}};
  if (inverse) {
    j["matrix"] = matrix_json(inverse->values);
    j["color_scale"] = inverse->color_scale;
  } else {
    j["matrix"] = nullptr;
    j["color_scale"] = nullptr;
  }
  return j;
}

HeatmapExport HeatmapExport::from_json(const json& hj, const json& ij) {
  HeatmapExport h;
  h.hbar.labels = hj.at("labels").get<std::vector<std::string>>();
  h.hbar.values = matrix_from_json(hj.at("matrix"));
  h.hbar.color_scale = hj.at("color_scale").get<double>();
  h.symmetry_error = hj.at("symmetry_error").get<double>();
  h.at = hj.at("stamp").at("at").get<std::string>();
  h.step = hj.at("stamp").at("step").get<int>();
  const auto index_of = [&](const std::string& label) {
    const auto it = std::find(h.hbar.labels.begin(), h.hbar.labels.end(), label);
    if (it == h.hbar.labels.end()) throw std::invalid_argument(fmt::format("unknown block label '{}'", label));
    return static_cast<Index>(it - h.hbar.labels.begin());
  };
  for (const auto& l : hj.at("blocks").at("ww").at("rows")) h.weight_groups.push_back(index_of(l.get<std::string>()));
  for (const auto& l : hj.at("blocks").at("bb").at("rows")) h.bias_groups.push_back(index_of(l.get<std::string>()));
  h.pseudo_inverse = ij.at("pseudo_inverse").get<bool>();
  h.levenberg_shift = ij.at("levenberg_shift").get<double>();
  h.warning = ij.at("warning").get<std::string>();
  if (ij.at("available").get<bool>()) {
    h.inverse = HeatmapMatrix{h.hbar.labels, matrix_from_json(ij.at("matrix")), ij.at("color_scale").get<double>()};
  }
  return h;
}

// ---------------------------------------------------------------------------
// Commands

int cmd_run(const ExperimentConfig& cfg, std::ostream& out, std::ostream& err) {
  const Problem p = build_problem(cfg);
  PassCounter counter;
  RunResult res;
  try {
    res = run(p.loss, p.initial, cfg.method, p.partition, cfg.step, &counter);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeAbort;
  }

  const fs::path dir(cfg.out);
  const std::string csv = trace_to_csv(res.trace);
  write_file(dir / "trace.csv", csv);
  const json trace = {{"method", gnewton::to_string(cfg.method)},
                      {"partition", p.partition.to_json()},
                      {"converged", res.converged},
                      {"aborted", res.aborted},
                      {"abort_reason", res.abort_reason},
                      {"steps", trace_to_json(res.trace)}};
  write_file(dir / "trace.json", trace.dump(2) + "\n");
  std::vector<std::vector<Index>> shapes;
  for (const auto& s : res.final.shapes()) shapes.emplace_back(s.begin(), s.end());
  const json params = {{"names", res.final.names()}, {"shapes", shapes}, {"values", vector_of(res.final.values())}};
  const std::string params_text = params.dump(2) + "\n";
  write_file(dir / "final_params.json", params_text);

  const double final_loss = evaluate(p.loss, res.final.values());
  json hashes = {{"trace_csv", hex(fnv1a(csv))}, {"final_params", hex(fnv1a(params_text))}};
  hashes["dataset"] = p.dataset ? json(hex(p.dataset->content_hash())) : json(nullptr);
  const json manifest = {{"manifest_version", kManifestVersion},
                         {"command", "run"},
                         {"config", cfg.to_json()},
                         {"content_hashes", hashes},
                         {"passes", {{"forward", res.passes.forward}, {"backward", res.passes.backward}}},
                         {"steps", res.trace.size()},
                         {"converged", res.converged},
                         {"aborted", res.aborted},
                         {"abort_reason", res.abort_reason},
                         {"final_loss", final_loss}};
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");

  out << fmt::format("{} steps, final loss {:.6g}, {}\n", res.trace.size(), final_loss,
                     res.converged ? "converged" : (res.aborted ? "aborted" : "iteration limit"));
  out << fmt::format("artifacts written to {}\n", dir.string());
  if (res.aborted) {
    err << "aborted: " << res.abort_reason << '\n';
    return kRuntimeAbort;
  }
  return kOk;
}

int cmd_inspect(const ExperimentConfig& cfg, std::ostream& out, std::ostream& err) {
  const Problem p = build_problem(cfg);
  Vector theta = p.initial.values();
  int step = 0;
  HeatmapExport h;
  try {
    if (cfg.inspect.at == "checkpoint") {
      StepConfig sc = cfg.step;
      sc.max_iterations = cfg.inspect.steps;
      const auto res = run(p.loss, p.initial, cfg.method, p.partition, sc);
      if (res.aborted) err << "warning: training to the checkpoint aborted: " << res.abort_reason << '\n';
      theta = res.final.values();
      step = static_cast<int>(res.trace.size());
    }
    PseudoSystem sys = pseudo_hessian(p.loss, theta, p.partition);
    sys.labels = p.partition.labels();
    h = make_heatmap(sys, cfg.step.ladder, cfg.inspect.at, step);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeAbort;
  }

  const fs::path dir(cfg.out);
  write_file(dir / "hbar.json", h.hbar_json().dump(2) + "\n");
  write_file(dir / "hbar_inv.json", h.inverse_json().dump(2) + "\n");
  const auto w = labels_of(h.hbar.labels, h.weight_groups);
  const auto b = labels_of(h.hbar.labels, h.bias_groups);
  const std::map<std::string, std::pair<std::vector<std::string>, std::vector<std::string>>> views{
      {"ww", {w, w}}, {"bb", {b, b}}, {"wb", {w, b}}};
  for (const auto& [name, rc] : views) {
    write_file(dir / "blocks" / (name + ".csv"), block_csv(h.block(name), rc.first, rc.second));
    if (h.inverse) write_file(dir / "blocks" / ("inv_" + name + ".csv"), block_csv(h.block(name, true), rc.first, rc.second));
  }

  const Index S = h.hbar.values.rows();
  out << fmt::format("H̄ is {}x{} at {} (step {}); blocks ww {}x{}, bb {}x{}, wb {}x{}\n", S, S, h.at, h.step, w.size(),
                     w.size(), b.size(), b.size(), w.size(), b.size());
  if (h.pseudo_inverse) out << "inverse: pseudo-inverse\n";
  if (h.levenberg_shift > 0) out << fmt::format("inverse: Levenberg shift {:g}\n", h.levenberg_shift);
  if (!h.warning.empty()) err << "warning: " << h.warning << '\n';
  out << fmt::format("artifacts written to {}\n", dir.string());
  return kOk;
}

namespace {

struct CheckResult {
  std::string name;
  bool passed = true;
  bool skipped = false;
  double error = 0.0;
  double tolerance = 0.0;
  std::string detail;
};

double rel(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

// d^k L[u_1, ..., u_k] by nesting directional derivatives in the given order.
double nested_entry(const Expr& f, const Vector& theta, const std::vector<Vector>& dirs) {
  Expr e = f;
  for (std::size_t k = 0; k + 1 < dirs.size(); ++k) e = directional_derivative(e, dirs[k]);
  return gradient(e, theta).dot(dirs.back());
}

Matrix hessian_by_columns(const Expr& f, const Vector& theta) {
  const Index P = theta.size();
  Matrix H(P, P);
  for (Index i = 0; i < P; ++i) {
    Vector e = Vector::Zero(P);
    e[i] = 1.0;
    H.col(i) = hessian_vector_product(f, theta, e);
  }
  return H;
}

Matrix fd_hessian(const Expr& f, const Vector& x, double h = 1e-4) {
  const Index n = x.size();
  auto F = [&](const Vector& v) { return evaluate(f, v); };
  Matrix H(n, n);
  const double f0 = F(x);
  for (Index i = 0; i < n; ++i) {
    Vector xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    H(i, i) = (F(xp) - 2 * f0 + F(xm)) / (h * h);
    for (Index j = i + 1; j < n; ++j) {
      Vector pp = x, pm = x, mp = x, mm = x;
      pp[i] += h, pp[j] += h;
      pm[i] += h, pm[j] -= h;
      mp[i] -= h, mp[j] += h;
      mm[i] -= h, mm[j] -= h;
      H(i, j) = H(j, i) = (F(pp) - F(pm) - F(mp) + F(mm)) / (4 * h * h);
    }
  }
  return H;
}

std::vector<CheckResult> check_battery(const ExperimentConfig& cfg, const Problem& p, json& extra) {
  const Expr& f = p.loss;
  const Vector theta = p.initial.values();
  const Partition& part = p.partition;
  const Index P = theta.size();
  const Index S = part.group_count();
  const auto tol = [&](const std::string& name) { return cfg.check.tolerances.at(name); };
  std::vector<CheckResult> results;
  auto record = [&](CheckResult r) {
    r.passed = r.skipped || r.error <= r.tolerance;
    results.push_back(std::move(r));
  };

  const Vector g = gradient(f, theta);
  {
    Vector fd(P);
    for (Index i = 0; i < P; ++i) {
      Vector xp = theta, xm = theta;
      xp[i] += 1e-5;
      xm[i] -= 1e-5;
      fd[i] = (evaluate(f, xp) - evaluate(f, xm)) / 2e-5;
    }
    record({"fd_gradient", true, false, (g - fd).cwiseAbs().maxCoeff() / std::max(1.0, fd.cwiseAbs().maxCoeff()),
            tol("fd_gradient"), "central differences, h = 1e-5"});
  }

  std::optional<Matrix> H_fd;
  if (P <= cfg.check.max_dense) {
    H_fd = fd_hessian(f, theta);
    const Matrix H = hessian_by_columns(f, theta);
    record({"fd_hessian", true, false, (H - *H_fd).cwiseAbs().maxCoeff() / std::max(1.0, H_fd->cwiseAbs().maxCoeff()),
            tol("fd_hessian"), "Hessian-vector products against second differences"});
  } else {
    record({"fd_hessian", true, true, 0.0, tol("fd_hessian"), fmt::format("skipped: P = {} > max_dense", P)});
  }

  const PseudoSystem sys = pseudo_hessian(f, theta, g, part);
  if (H_fd) {
    Matrix Ipart = Matrix::Zero(S, P);
    for (Index s = 0; s < S; ++s)
      for (Index q : part.group(s)) Ipart(s, q) = 1.0;
    const Matrix D = Ipart * g.asDiagonal() * *H_fd * g.asDiagonal() * Ipart.transpose();
    double worst = 0.0;
    for (Index i = 0; i < S; ++i)
      for (Index j = 0; j < S; ++j) worst = std::max(worst, std::abs(sys.hbar(i, j) - D(i, j)) / (1 + std::abs(D(i, j))));
    record({"pseudo_hessian_oracle", true, false, worst, tol("pseudo_hessian_oracle"),
            "H̄ against I G H_fd G I^T"});
  } else {
    record({"pseudo_hessian_oracle", true, true, 0.0, tol("pseudo_hessian_oracle"),
            fmt::format("skipped: P = {} > max_dense", P)});
  }

  std::mt19937_64 rng(cfg.seed + 3);
  std::normal_distribution<double> normal;
  std::vector<Vector> dirs;
  for (int k = 0; k < cfg.check.directions; ++k) {
    Vector u(P);
    for (Index i = 0; i < P; ++i) u[i] = normal(rng);
    dirs.push_back(u);
  }
  double collapse = 0.0;
  json max_abs = json::object();
  for (int d = 1; d <= cfg.check.order; ++d) {
    double biggest = 0.0;
    for (const Vector& u : dirs) {
      const SummaryTensor D = summary_tensor(f, theta, u, part, d);
      collapse = std::max(collapse, rel(D.total(), taylor_term(f, theta, u, d)));
      for (double v : D.entries()) biggest = std::max(biggest, std::abs(v));
    }
    max_abs[std::to_string(d)] = biggest;
  }
  extra["summary_max_abs"] = max_abs;
  record({"sum_collapse", true, false, collapse, tol("sum_collapse"),
          fmt::format("orders 1..{}, {} directions", cfg.check.order, dirs.size())});

  // Entries recomputed with the directional derivatives applied in every order.
  double asym = 0.0;
  int tuples = 0;
  for (int d = 2; d <= cfg.check.order; ++d) {
    std::vector<Vector> masks;
    for (Index s = 0; s < S; ++s) masks.push_back(part.mask(dirs.front(), s));
    std::vector<Index> idx(static_cast<std::size_t>(d), 0);
    for (int visited = 0; visited < 32; ++visited) {
      std::vector<Index> perm = idx;
      std::vector<Vector> ordered;
      for (Index s : perm) ordered.push_back(masks[static_cast<std::size_t>(s)]);
      const double base = nested_entry(f, theta, ordered);
      while (std::next_permutation(perm.begin(), perm.end())) {
        ordered.clear();
        for (Index s : perm) ordered.push_back(masks[static_cast<std::size_t>(s)]);
        asym = std::max(asym, rel(nested_entry(f, theta, ordered), base));
      }
      ++tuples;
      int k = d - 1;
      while (k >= 0 && idx[static_cast<std::size_t>(k)] == S - 1) --k;
      if (k < 0) break;
      const Index next = idx[static_cast<std::size_t>(k)] + 1;
      for (int j = k; j < d; ++j) idx[static_cast<std::size_t>(j)] = next;
    }
  }
  record({"symmetry", true, cfg.check.order < 2, asym, tol("symmetry"),
          fmt::format("{} index multisets, all orderings", tuples)});

  {
    const SummaryTensor D1 = summary_tensor(f, theta, g, part, 1);
    const Matrix D2 = summary_tensor(f, theta, g, part, 2).as_matrix();
    double worst = 0.0;
    for (Index i = 0; i < S; ++i) {
      worst = std::max(worst, std::abs(D1.entries()[static_cast<std::size_t>(i)] - sys.gbar[i]) / (1 + std::abs(sys.gbar[i])));
      for (Index j = 0; j < S; ++j)
        worst = std::max(worst, std::abs(D2(i, j) - sys.hbar(i, j)) / (1 + std::abs(sys.hbar(i, j))));
    }
    record({"summary_identity", true, false, worst, tol("summary_identity"),
            "H̄ = D2(g) and ḡ = D1(g)"});
  }

  {
    PassCounter c;
    pseudo_hessian(f, theta, part, &c);
    double excess = std::abs(static_cast<double>(c.backward.load()) - static_cast<double>(S + 1));
    std::string detail = fmt::format("pseudo_hessian used {} passes (S+1 = {})", c.backward.load(), S + 1);
    for (int d = 1; d <= cfg.check.order; ++d) {
      PassCounter cd;
      summary_tensor(f, theta, dirs.front(), part, d, {}, &cd);
      const double bound = std::pow(static_cast<double>(S), d - 1) + static_cast<double>(S) + 1;
      excess = std::max(excess, static_cast<double>(cd.backward.load()) - bound);
      detail += fmt::format("; order {} used {} (bound {})", d, cd.backward.load(), bound);
    }
    record({"pass_count", true, false, std::max(0.0, excess), tol("pass_count"), detail});
  }
  return results;
}

}  // namespace

int cmd_check(const ExperimentConfig& cfg, std::ostream& out, std::ostream& err) {
  const Problem p = build_problem(cfg);
  json extra = json::object();
  std::vector<CheckResult> results;
  try {
    results = check_battery(cfg, p, extra);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeAbort;
  }
  json checks = json::array();
  std::string first_failure;
  for (const auto& r : results) {
    out << fmt::format("{} {:<22} error {:.3e}  tolerance {:.1e}  {}\n",
                       r.skipped ? "SKIP" : (r.passed ? "PASS" : "FAIL"), r.name, r.error, r.tolerance, r.detail);
    checks.push_back({{"name", r.name},
                      {"passed", r.passed},
                      {"skipped", r.skipped},
                      {"error", r.error},
                      {"tolerance", r.tolerance},
                      {"detail", r.detail}});
    if (!r.passed && first_failure.empty()) first_failure = r.name;
  }
  const json report = {{"config", cfg.to_json()},
                       {"order", cfg.check.order},
                       {"checks", checks},
                       {"passed", first_failure.empty()},
                       {"first_failure", first_failure.empty() ? json(nullptr) : json(first_failure)},
                       {"summary_max_abs", extra.at("summary_max_abs")}};
  write_file(fs::path(cfg.out) / "check_report.json", report.dump(2) + "\n");
  if (!first_failure.empty()) {
    err << "check failed: " << first_failure << '\n';
    return kCheckFailure;
  }
  out << "all checks passed\n";
  return kOk;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Partitioned second-order optimization experiments.", "gnewton"};
  app.require_subcommand(1);
  app.footer("Configuration is a JSON file; omitted keys take these defaults:\n" + default_config().dump(2) +
             "\nExit codes: 0 ok, 2 config error, 3 runtime abort, 4 check failure.");

  struct Flags {
    std::string config;
    std::optional<std::string> out;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> method;
    std::optional<std::string> partition;
    std::optional<int> order;
    std::optional<std::string> at;
    bool print_defaults = false;
  } flags;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", flags.config, "JSON config or run manifest");
    sub->add_option("--out", flags.out, "output directory");
    sub->add_option("--seed", flags.seed, "seed for data, initialization and sampling");
    sub->add_option("--method", flags.method, "gd | cauchy | newton | partitioned");
    sub->add_option("--partition", flags.partition, "trivial | discrete | canonical | file:PATH");
  };
  CLI::App* run_cmd = app.add_subcommand("run", "optimize and write trace.csv, trace.json, final_params.json, manifest.json");
  common(run_cmd);
  CLI::App* inspect_cmd = app.add_subcommand("inspect", "export H̄ and its inverse for heatmaps");
  common(inspect_cmd);
  inspect_cmd->add_option("--at", flags.at, "init | checkpoint");
  CLI::App* check_cmd = app.add_subcommand("check", "run the derivative test battery");
  common(check_cmd);
  check_cmd->add_option("--order", flags.order, "highest summary order (1-3)");
  CLI::App* config_cmd = app.add_subcommand("config", "configuration utilities");
  config_cmd->add_flag("--print-defaults", flags.print_defaults, "print the default configuration");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << e.what() << '\n';
    return kConfigError;
  }

  if (config_cmd->parsed()) {
    if (!flags.print_defaults) {
      err << "config: nothing to do (try --print-defaults)\n";
      return kConfigError;
    }
    out << default_config().dump(2) << '\n';
    return kOk;
  }

  try {
    json j = json::object();
    if (!flags.config.empty()) {
      std::ifstream in(flags.config);
      if (!in) throw ConfigError(fmt::format("cannot open config '{}'", flags.config));
      try {
        j = json::parse(in);
      } catch (const json::parse_error& e) {
        throw ConfigError(fmt::format("{}: {}", flags.config, e.what()));
      }
      if (j.is_object() && j.contains("manifest_version") && j.contains("config")) j = j.at("config");
    }
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    if (flags.out) j["out"] = *flags.out;
    if (flags.seed) j["seed"] = *flags.seed;
    if (flags.method) j["method"] = *flags.method;
    if (flags.partition) j["partition"] = *flags.partition;
    if (flags.order) j["check"]["order"] = *flags.order;
    if (flags.at) j["inspect"]["at"] = *flags.at;
    const ExperimentConfig cfg = ExperimentConfig::from_json(j);
    if (run_cmd->parsed()) return cmd_run(cfg, out, err);
    if (inspect_cmd->parsed()) return cmd_inspect(cfg, out, err);
    return cmd_check(cfg, out, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeAbort;
  }
}

}  // namespace gnewton::cli
