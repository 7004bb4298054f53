#include "gnewton/problems.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include <fmt/format.h>

namespace gnewton {

namespace {

void hash_bytes(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
}

void hash_matrix(std::uint64_t& h, const Matrix& m) {
  const Index dims[2] = {m.rows(), m.cols()};
  hash_bytes(h, dims, sizeof(dims));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) {
      const double v = m(i, j);
      hash_bytes(h, &v, sizeof(v));
    }
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    cells.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace

// ---------------------------------------------------------------------------

QuadraticProblem make_quadratic(Index dim, const QuadraticSpec& spec) {
  if (dim < 1) throw std::invalid_argument("quadratic dimension must be positive");
  if (!(spec.eig_min <= spec.eig_max) || !std::isfinite(spec.eig_min) || !std::isfinite(spec.eig_max)) {
    throw std::invalid_argument(fmt::format("invalid eigenvalue range [{}, {}]", spec.eig_min, spec.eig_max));
  }
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> eig(spec.eig_min, spec.eig_max);

  Matrix M(dim, dim);
  for (Index i = 0; i < dim; ++i)
    for (Index j = 0; j < dim; ++j) M(i, j) = normal(rng);
  const Matrix Q = Eigen::HouseholderQR<Matrix>(M).householderQ();
  Vector lambda(dim);
  for (Index i = 0; i < dim; ++i) lambda[i] = spec.eig_min == spec.eig_max ? spec.eig_min : eig(rng);
  Matrix A = Q * lambda.asDiagonal() * Q.transpose();
  A = 0.5 * (A + A.transpose());

  Vector c(dim);
  for (Index i = 0; i < dim; ++i) c[i] = spec.center_scale * normal(rng);
  QuadraticProblem q = make_quadratic(A, c);
  q.spec = spec;
  return q;
}

QuadraticProblem make_quadratic(const Matrix& A, const Vector& center) {
  if (A.rows() != A.cols() || A.rows() != center.size()) throw ShapeError("quadratic: A and c sizes differ");
  const double asym = (A - A.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-12 * std::max(1.0, A.cwiseAbs().maxCoeff())) {
    throw std::invalid_argument("quadratic: A must be symmetric");
  }
  QuadraticProblem q;
  q.A = A;
  q.center = center;
  const Expr t = Expr::parameters(A.rows());
  const Expr d = center.isZero(0.0) ? t : t - Expr::constant(center);
  q.loss = 0.5 * dot(d, matmul(Expr::constant(A), d));
  return q;
}

Expr make_rosenbrock() {
  const Expr t = Expr::parameters(2);
  return square(1.0 - t[0]) + 100.0 * square(t[1] - square(t[0]));
}

// ---------------------------------------------------------------------------

std::uint64_t Dataset::content_hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  hash_matrix(h, features);
  hash_matrix(h, targets);
  return h;
}

Dataset Dataset::subset(const std::vector<Index>& rows) const {
  Dataset out;
  out.features.resize(static_cast<Index>(rows.size()), features.cols());
  out.targets.resize(static_cast<Index>(rows.size()), targets.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const Index r = rows[k];
    if (r < 0 || r >= size()) throw std::out_of_range("subset row out of range");
    out.features.row(static_cast<Index>(k)) = features.row(r);
    out.targets.row(static_cast<Index>(k)) = targets.row(r);
  }
  out.categorical = categorical;
  out.classes = classes;
  out.provenance = provenance + fmt::format(" [subset of {}]", rows.size());
  return out;
}

void Dataset::validate() const {
  if (features.rows() < 1) throw DatasetError("dataset has no rows");
  if (targets.rows() != features.rows()) throw DatasetError("features and targets differ in row count");
  for (Index i = 0; i < features.rows(); ++i) {
    for (Index j = 0; j < features.cols(); ++j) {
      if (!std::isfinite(features(i, j))) throw DatasetError(fmt::format("non-finite feature at row {}", i + 1));
    }
    for (Index j = 0; j < targets.cols(); ++j) {
      const double v = targets(i, j);
      if (!std::isfinite(v)) throw DatasetError(fmt::format("non-finite target at row {}", i + 1));
      if (categorical && (v < 0 || v >= static_cast<double>(classes) || v != std::floor(v))) {
        throw DatasetError(fmt::format("class index {} at row {} outside 0..{}", v, i + 1, classes - 1));
      }
    }
  }
}

SynthKind synth_kind_from_string(const std::string& name) {
  if (name == "blobs") return SynthKind::kBlobs;
  if (name == "moons") return SynthKind::kMoons;
  throw std::invalid_argument(fmt::format("unknown dataset kind '{}' (expected blobs or moons)", name));
}

Dataset synth_dataset(SynthKind kind, Index n, std::uint64_t seed, double noise) {
  if (n < 2) throw std::invalid_argument("synthetic datasets need n >= 2");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Dataset d;
  d.features.resize(n, 2);
  d.targets.resize(n, 1);
  d.categorical = true;
  d.classes = 2;
  const Index first = (n + 1) / 2;
  for (Index i = 0; i < n; ++i) {
    const int label = i < first ? 0 : 1;
    const Index within = label == 0 ? i : i - first;
    const Index count = label == 0 ? first : n - first;
    double x = 0, y = 0;
    if (kind == SynthKind::kMoons) {
      const double t = count > 1 ? std::numbers::pi * static_cast<double>(within) / static_cast<double>(count - 1) : 0;
      if (label == 0) {
        x = std::cos(t);
        y = std::sin(t);
      } else {
        x = 1.0 - std::cos(t);
        y = 0.5 - std::sin(t);
      }
    } else {
      x = label == 0 ? -1.5 : 1.5;
      y = 0.0;
    }
    d.features(i, 0) = x + noise * normal(rng);
    d.features(i, 1) = y + noise * normal(rng);
    d.targets(i, 0) = label;
  }
  d.provenance = fmt::format("synthetic:{}:n={}:seed={}:noise={}", kind == SynthKind::kMoons ? "moons" : "blobs", n,
                             seed, noise);
  return d;
}

Dataset load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw DatasetError(fmt::format("{}: cannot open file", path.string()));
  std::string line;
  if (!std::getline(in, line) || line.find_first_not_of(" \r\t") == std::string::npos) {
    throw DatasetError(fmt::format("{}: empty file", path.string()));
  }
  const auto header = split_csv_line(line);
  auto column_of = [&](const std::string& name) -> Index {
    for (std::size_t k = 0; k < header.size(); ++k)
      if (header[k] == name) return static_cast<Index>(k);
    throw DatasetError(fmt::format("{}: schema error: column '{}' not found", path.string(), name));
  };
  const Index label_col = column_of(schema.label_column);
  std::vector<Index> feature_cols;
  if (schema.feature_columns.empty()) {
    for (std::size_t k = 0; k < header.size(); ++k)
      if (static_cast<Index>(k) != label_col) feature_cols.push_back(static_cast<Index>(k));
  } else {
    for (const auto& name : schema.feature_columns) feature_cols.push_back(column_of(name));
  }

  std::vector<std::vector<double>> rows;
  std::size_t row_number = 1;
  while (std::getline(in, line)) {
    ++row_number;
    if (line.find_first_not_of(" \r\t") == std::string::npos) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw DatasetError(fmt::format("{}: row {} has {} cells, header has {}", path.string(), row_number,
                                     cells.size(), header.size()));
    }
    std::vector<double> values(cells.size());
    for (std::size_t k = 0; k < cells.size(); ++k) {
      const std::string& c = cells[k];
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(c, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (c.empty() || used != c.size()) {
        throw DatasetError(fmt::format("{}: row {}, column '{}': non-numeric cell '{}'", path.string(), row_number,
                                       header[k], c));
      }
      if (!std::isfinite(v)) {
        throw DatasetError(
            fmt::format("{}: row {}, column '{}': NaN or infinite value", path.string(), row_number, header[k]));
      }
      values[k] = v;
    }
    rows.push_back(std::move(values));
  }
  if (rows.empty()) throw DatasetError(fmt::format("{}: no data rows", path.string()));

  Dataset d;
  const Index N = static_cast<Index>(rows.size());
  d.features.resize(N, static_cast<Index>(feature_cols.size()));
  d.targets.resize(N, 1);
  d.categorical = schema.categorical;
  double max_label = 0;
  for (Index i = 0; i < N; ++i) {
    const auto& r = rows[static_cast<std::size_t>(i)];
    for (std::size_t k = 0; k < feature_cols.size(); ++k) {
      d.features(i, static_cast<Index>(k)) = r[static_cast<std::size_t>(feature_cols[k])];
    }
    d.targets(i, 0) = r[static_cast<std::size_t>(label_col)];
    max_label = std::max(max_label, d.targets(i, 0));
  }
  if (d.categorical) d.classes = static_cast<Index>(max_label) + 1;
  d.provenance = fmt::format("csv:{}", path.string());
  d.validate();
  return d;
}

void save_csv(const Dataset& data, const std::filesystem::path& path, const std::string& label_column) {
  std::ofstream out(path);
  if (!out) throw DatasetError(fmt::format("{}: cannot write file", path.string()));
  for (Index j = 0; j < data.features.cols(); ++j) out << 'x' << j + 1 << ',';
  if (data.targets.cols() == 1) {
    out << label_column << '\n';
  } else {
    for (Index j = 0; j < data.targets.cols(); ++j) out << label_column << j + 1 << (j + 1 < data.targets.cols() ? "," : "\n");
  }
  for (Index i = 0; i < data.size(); ++i) {
    for (Index j = 0; j < data.features.cols(); ++j) out << fmt::format("{:.17g},", data.features(i, j));
    for (Index j = 0; j < data.targets.cols(); ++j) {
      out << fmt::format("{:.17g}", data.targets(i, j)) << (j + 1 < data.targets.cols() ? "," : "\n");
    }
  }
}

// ---------------------------------------------------------------------------

Activation activation_from_string(const std::string& name) {
  if (name == "tanh") return Activation::kTanh;
  if (name == "softplus") return Activation::kSoftplus;
  throw std::invalid_argument(fmt::format("unknown activation '{}' (expected tanh or softplus)", name));
}

LossKind loss_from_string(const std::string& name) {
  if (name == "mse") return LossKind::kMse;
  if (name == "softmax_ce" || name == "softmax-cross-entropy") return LossKind::kSoftmaxCrossEntropy;
  throw std::invalid_argument(fmt::format("unknown loss '{}' (expected mse or softmax_ce)", name));
}

std::string to_string(Activation a) { return a == Activation::kTanh ? "tanh" : "softplus"; }
std::string to_string(LossKind l) { return l == LossKind::kMse ? "mse" : "softmax_ce"; }

Index MlpSpec::param_count() const {
  Index total = 0;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) total += widths[l] * widths[l + 1] + widths[l + 1];
  return total;
}

void MlpSpec::validate() const {
  if (widths.size() < 3) throw std::invalid_argument("an MLP needs at least one hidden layer");
  for (Index w : widths) {
    if (w < 1) throw std::invalid_argument("layer widths must be positive");
  }
}

namespace {

Matrix target_matrix(const MlpSpec& spec, const Dataset& data) {
  const Index out = spec.widths.back();
  if (!data.categorical) {
    if (data.targets.cols() != out) {
      throw ShapeError(fmt::format("targets have {} columns but the network outputs {}", data.targets.cols(), out));
    }
    if (spec.loss == LossKind::kSoftmaxCrossEntropy) {
      throw std::invalid_argument("softmax cross-entropy needs categorical targets");
    }
    return data.targets;
  }
  if (data.classes > out) {
    throw ShapeError(fmt::format("{} classes but the network outputs {}", data.classes, out));
  }
  Matrix onehot = Matrix::Zero(data.size(), out);
  for (Index i = 0; i < data.size(); ++i) onehot(i, static_cast<Index>(data.targets(i, 0))) = 1.0;
  return onehot;
}

}  // namespace

MlpProblem make_mlp(const MlpSpec& spec, const Dataset& data) {
  spec.validate();
  data.validate();
  if (data.features.cols() != spec.widths.front()) {
    throw ShapeError(
        fmt::format("dataset has {} features but the input width is {}", data.features.cols(), spec.widths.front()));
  }
  const Index N = data.size();
  const Index P = spec.param_count();
  const Expr theta = Expr::parameters(P);

  std::vector<TensorShape> shapes;
  std::vector<std::string> names;
  Vector init(P);
  std::mt19937_64 rng(spec.seed);

  Expr h = Expr::constant(data.features);
  Index offset = 0;
  const Index L = spec.layer_count();
  for (Index l = 0; l < L; ++l) {
    const Index fan_in = spec.widths[static_cast<std::size_t>(l)];
    const Index fan_out = spec.widths[static_cast<std::size_t>(l + 1)];
    const double a = spec.init_scale / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> uni(-a, a);
    const bool zero = spec.zero_init_output && l == L - 1;
    for (Index k = 0; k < fan_in * fan_out + fan_out; ++k) init[offset + k] = zero ? 0.0 : uni(rng);

    const Expr W = theta.slice(offset, fan_in, fan_out);
    const Expr b = theta.slice(offset + fan_in * fan_out, 1, fan_out);
    offset += fan_in * fan_out + fan_out;
    shapes.push_back({fan_in, fan_out});
    shapes.push_back({fan_out});
    names.push_back(fmt::format("layer{}/weight", l + 1));
    names.push_back(fmt::format("layer{}/bias", l + 1));

    const Expr z = matmul(h, W) + broadcast_rows(b, N);
    if (l + 1 < L) {
      h = spec.activation == Activation::kTanh ? tanh(z) : softplus(z);
    } else {
      h = z;
    }
  }

  const Matrix Y = target_matrix(spec, data);
  Expr loss;
  if (spec.loss == LossKind::kMse) {
    loss = sum(square(h - Expr::constant(Y))) / static_cast<double>(N);
  } else {
    loss = mean(log(sum_cols(exp(h)))) - sum(h * Expr::constant(Y)) / static_cast<double>(N);
  }
  return {loss, ParamVector(std::move(init), std::move(shapes), std::move(names))};
}

Matrix mlp_outputs(const MlpSpec& spec, const Dataset& data, const Vector& theta) {
  spec.validate();
  if (theta.size() != spec.param_count()) throw ShapeError("parameter vector does not match the network");
  Matrix h = data.features;
  Index offset = 0;
  const Index L = spec.layer_count();
  for (Index l = 0; l < L; ++l) {
    const Index fi = spec.widths[static_cast<std::size_t>(l)];
    const Index fo = spec.widths[static_cast<std::size_t>(l + 1)];
    Matrix W(fi, fo);
    for (Index i = 0; i < fi; ++i)
      for (Index j = 0; j < fo; ++j) W(i, j) = theta[offset + i * fo + j];
    const Vector b = theta.segment(offset + fi * fo, fo);
    offset += fi * fo + fo;
    Matrix z = h * W;
    z.rowwise() += b.transpose();
    if (l + 1 < L) {
      h = spec.activation == Activation::kTanh ? Matrix(z.array().tanh())
                                               : Matrix(z.unaryExpr([](double x) {
                                                   return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
                                                 }));
    } else {
      h = z;
    }
  }
  return h;
}

}  // namespace gnewton
