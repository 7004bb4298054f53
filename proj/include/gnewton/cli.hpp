// Experiment harness behind the gnewton command-line tool.
#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gnewton/optimizers.hpp"
#include "gnewton/partition.hpp"
#include "gnewton/problems.hpp"
#include "gnewton/summaries.hpp"

namespace gnewton::cli {

enum ExitCode : int { kOk = 0, kConfigError = 2, kRuntimeAbort = 3, kCheckFailure = 4 };

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetConfig {
  std::string kind = "moons";  // moons | blobs | csv
  Index n = 64;
  double noise = 0.1;
  std::string path;
  std::string label_column = "label";
  std::vector<std::string> features;
};

struct ProblemConfig {
  std::string kind = "quadratic";  // quadratic | rosenbrock | mlp
  Index dim = 5;
  double eig_min = 0.1;
  double eig_max = 10.0;
  double center_scale = 1.0;
  std::optional<std::vector<double>> start;
  std::vector<Index> widths{2, 8, 2};
  std::string activation = "tanh";
  std::string loss = "mse";
  double init_scale = 1.0;
  DatasetConfig dataset;
};

struct InspectConfig {
  std::string at = "init";  // init | checkpoint
  int steps = 200;
};

struct CheckConfig {
  int order = 3;
  int directions = 5;
  /// Largest P for the finite-difference Hessian and oracle checks.
  Index max_dense = 64;
  std::map<std::string, double> tolerances;
};

struct ExperimentConfig {
  ProblemConfig problem;
  Method method = Method::kPartitioned;
  /// trivial | discrete | canonical | file:PATH
  std::string partition = "canonical";
  StepConfig step;
  std::uint64_t seed = 0;
  std::string out = "out";
  InspectConfig inspect;
  CheckConfig check;

  nlohmann::json to_json() const;
  /// Overlays j on the defaults. Unknown keys, bad values and missing files
  /// raise ConfigError. A run manifest is accepted in place of a config.
  static ExperimentConfig from_json(const nlohmann::json& j);
};

nlohmann::json default_config();
ExperimentConfig load_config(const std::filesystem::path& path);

/// Names of the checks run by `check`, in order.
const std::vector<std::string>& check_names();

struct Problem {
  Expr loss;
  ParamVector initial;
  Partition partition = Partition::trivial(1);
  std::optional<Dataset> dataset;
};

Problem build_problem(const ExperimentConfig& cfg);

struct HeatmapMatrix {
  std::vector<std::string> labels;
  Matrix values;
  double color_scale = 0.0;
};

struct HeatmapExport {
  HeatmapMatrix hbar;
  std::optional<HeatmapMatrix> inverse;
  bool pseudo_inverse = false;
  double levenberg_shift = 0.0;
  std::string warning;
  std::vector<Index> weight_groups;
  std::vector<Index> bias_groups;
  std::string at;
  int step = 0;
  double symmetry_error = 0.0;

  nlohmann::json hbar_json() const;
  nlohmann::json inverse_json() const;
  static HeatmapExport from_json(const nlohmann::json& hbar, const nlohmann::json& inverse);
  /// ww, bb or wb view of H̄ (inverse = false) or of its inverse.
  Matrix block(const std::string& name, bool inverse = false) const;
};

/// Inverts H̄: directly, then along the Levenberg ladder, then by
/// pseudo-inverse. Groups ending in "bias" form the bias block.
HeatmapExport make_heatmap(const PseudoSystem& sys, const std::vector<double>& ladder, const std::string& at,
                           int step);

int cmd_run(const ExperimentConfig& cfg, std::ostream& out, std::ostream& err);
int cmd_inspect(const ExperimentConfig& cfg, std::ostream& out, std::ostream& err);
int cmd_check(const ExperimentConfig& cfg, std::ostream& out, std::ostream& err);

/// Full command line: subcommand, flags, exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace gnewton::cli
