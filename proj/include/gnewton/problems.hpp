// Differentiable test problems: quadratics, Rosenbrock, and small smooth
// multilayer perceptrons over synthetic or CSV datasets.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gnewton/autodiff.hpp"

namespace gnewton {

// ---------------------------------------------------------------------------
// Quadratics

struct QuadraticSpec {
  double eig_min = 0.1;
  double eig_max = 10.0;
  std::uint64_t seed = 0;
  /// Minimizer drawn from N(0, center_scale^2); zero gives c = 0.
  double center_scale = 1.0;
};

struct QuadraticProblem {
  Matrix A;       // symmetric
  Vector center;  // the minimizer c when A is positive definite
  QuadraticSpec spec;
  Expr loss;      // 0.5 (theta - c)^T A (theta - c)
};

/// Random quadratic with eigenvalues drawn uniformly from [eig_min, eig_max]
/// and a random orthogonal basis.
QuadraticProblem make_quadratic(Index dim, const QuadraticSpec& spec);
/// Quadratic with an explicit matrix and center.
QuadraticProblem make_quadratic(const Matrix& A, const Vector& center);

// ---------------------------------------------------------------------------
// Rosenbrock

/// (1 - t1)^2 + 100 (t2 - t1^2)^2, minimized at (1, 1).
Expr make_rosenbrock();

// ---------------------------------------------------------------------------
// Datasets

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dataset {
  Matrix features;  // N x F
  /// N x 1 class indices when categorical, N x T real targets otherwise.
  Matrix targets;
  bool categorical = true;
  Index classes = 0;
  std::string provenance;

  Index size() const { return features.rows(); }
  /// FNV-1a over features and targets.
  std::uint64_t content_hash() const;
  Dataset subset(const std::vector<Index>& rows) const;
  /// Throws DatasetError on NaN/Inf, empty data or out-of-range classes.
  void validate() const;
};

enum class SynthKind { kBlobs, kMoons };
SynthKind synth_kind_from_string(const std::string& name);

/// Two balanced classes; identical output for identical arguments.
Dataset synth_dataset(SynthKind kind, Index n, std::uint64_t seed, double noise = 0.1);

struct CsvSchema {
  std::string label_column = "label";
  /// Empty means every column other than the label.
  std::vector<std::string> feature_columns;
  bool categorical = true;
};

Dataset load_csv(const std::filesystem::path& path, const CsvSchema& schema = {});
/// Writes the dataset with columns x1..xF followed by the label/targets.
void save_csv(const Dataset& data, const std::filesystem::path& path, const std::string& label_column = "label");

// ---------------------------------------------------------------------------
// Multilayer perceptrons

enum class Activation { kTanh, kSoftplus };
enum class LossKind { kMse, kSoftmaxCrossEntropy };

Activation activation_from_string(const std::string& name);
LossKind loss_from_string(const std::string& name);
std::string to_string(Activation a);
std::string to_string(LossKind l);

struct MlpSpec {
  /// Input width, hidden widths..., output width.
  std::vector<Index> widths;
  Activation activation = Activation::kTanh;
  LossKind loss = LossKind::kMse;
  std::uint64_t seed = 0;
  double init_scale = 1.0;
  bool zero_init_output = false;

  Index layer_count() const { return static_cast<Index>(widths.size()) - 1; }
  Index param_count() const;
  void validate() const;
};

struct MlpProblem {
  Expr loss;            // full-batch mean loss
  ParamVector initial;  // seeded initialization with the canonical shape list
};

/// Per layer: a weight tensor (fan_in x fan_out) then a bias vector (fan_out),
/// labeled "layer<k>/weight" and "layer<k>/bias". Initialization is uniform in
/// [-a, a] with a = init_scale / sqrt(fan_in).
MlpProblem make_mlp(const MlpSpec& spec, const Dataset& data);

/// Network outputs (N x out) at theta.
Matrix mlp_outputs(const MlpSpec& spec, const Dataset& data, const Vector& theta);

}  // namespace gnewton
