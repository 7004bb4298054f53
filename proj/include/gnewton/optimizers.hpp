// Partitioned second-order step and its baselines: gradient descent,
// Cauchy's steepest descent and damped Newton.
#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gnewton/autodiff.hpp"
#include "gnewton/partition.hpp"
#include "gnewton/summaries.hpp"

namespace gnewton {

enum class Method { kGd, kCauchy, kNewton, kPartitioned };

std::string to_string(Method m);
/// Accepts "gd", "cauchy", "newton", "partitioned".
Method method_from_string(const std::string& name);
const std::vector<std::string>& method_names();

/// Default Levenberg ladder: 1e-8 * 10^k for k = 0..16.
std::vector<double> default_ladder();

struct StepConfig {
  /// Global factor on every update (the step size for gd).
  double damping = 1.0;
  /// Weight of the third-order regularizer; 0 disables it.
  double epsilon = 0.0;
  RegularizationOptions regularization;
  std::vector<double> ladder = default_ladder();
  bool cauchy_fallback = true;
  int max_iterations = 100;
  double grad_tolerance = 1e-10;
  /// Stop once the loss reaches this value.
  std::optional<double> loss_target;
  /// Halve the update while the loss increases (off by default).
  bool line_search = false;
  /// Largest P for which the dense Newton step assembles H.
  Index dense_budget = 512;

  /// Throws std::invalid_argument unless damping > 0 (>= 0 when
  /// allow_zero_damping) and the ladder is positive and strictly increasing.
  void validate(bool allow_zero_damping = false) const;
};

enum class SolverStatus { kClean, kRegularized, kCauchyFallback, kZeroGroupsDropped };

struct SolveOutcome {
  Vector eta;
  SolverStatus status = SolverStatus::kClean;
  /// Ladder shift used when status is kRegularized.
  double shift = 0.0;
  /// Groups removed because their pseudo-gradient is zero.
  std::vector<Index> dropped;
  /// Cauchy fallback found non-positive curvature and used a plain gradient step.
  bool nonpositive_curvature = false;
};

/// "clean", "regularized(1e-08)", "cauchy-fallback", "zero-groups-dropped(1;3)"
/// or "zero-groups-dropped(all)". Group numbers are 1-based.
std::string status_string(SolverStatus status, double shift, const std::vector<Index>& dropped, Index group_count);

/// Raised when the Levenberg ladder is exhausted and no fallback applies.
class SolverError : public std::runtime_error {
 public:
  SolverError(const std::string& what, nlohmann::json diagnostics)
      : std::runtime_error(what), diagnostics_(std::move(diagnostics)) {}
  const nlohmann::json& diagnostics() const { return diagnostics_; }

 private:
  nlohmann::json diagnostics_;
};

/// True when the factorization has no negligible pivot and an acceptable
/// reciprocal condition estimate. LDLT::solve silently zeroes tiny pivots,
/// so this must be checked before trusting a solution.
bool factorization_usable(const Eigen::LDLT<Matrix>& ldlt);

/// Solves (hbar + epsilon Diag(r)) eta = gbar over the groups with nonzero
/// gbar. A failed factorization or a non-descent solution (eta^T gbar <= 0)
/// climbs the ladder; past the ladder, the Cauchy step (every eta_s equal to
/// 1^T gbar / 1^T hbar 1) is returned when the fallback is on.
SolveOutcome solve_pseudo_system(const PseudoSystem& sys, const StepConfig& cfg,
                                 const std::optional<Vector>& r = std::nullopt);

struct StepTrace {
  int iteration = 0;
  double loss_before = 0.0;
  double loss_after = 0.0;
  double grad_norm = 0.0;
  Vector eta;
  SolverStatus status = SolverStatus::kClean;
  double shift = 0.0;
  std::vector<Index> dropped;
  Index group_count = 0;
  PassCount passes;
  double wall_seconds = 0.0;

  std::string status_text() const { return status_string(status, shift, dropped, group_count); }
};

struct StepResult {
  Vector theta;
  StepTrace trace;
};

/// theta' = theta - damping * (g .* broadcast(eta)).
StepResult partitioned_newton_step(const Expr& f, const Vector& theta, const Partition& part, const StepConfig& cfg,
                                   PassCounter* counter = nullptr);
/// theta' = theta - damping * (g^T g / g^T H g) g, with one Hessian-vector product.
StepResult cauchy_step(const Expr& f, const Vector& theta, const StepConfig& cfg, PassCounter* counter = nullptr);
/// theta' = theta - damping * H^{-1} g with H assembled from P Hessian-vector products.
StepResult newton_step(const Expr& f, const Vector& theta, const StepConfig& cfg, PassCounter* counter = nullptr);
/// theta' = theta - damping * g.
StepResult gd_step(const Expr& f, const Vector& theta, const StepConfig& cfg, PassCounter* counter = nullptr);

struct RunResult {
  std::vector<StepTrace> trace;
  ParamVector final;
  bool converged = false;
  bool aborted = false;
  std::string abort_reason;
  PassCount passes;
};

/// Iterates until max_iterations, ||g|| <= grad_tolerance or the loss target.
/// A non-finite loss or a solver failure aborts and keeps the trace so far.
/// part may be omitted for methods other than kPartitioned.
RunResult run(const Expr& f, const ParamVector& theta0, Method method, const std::optional<Partition>& part,
              const StepConfig& cfg, PassCounter* counter = nullptr);

/// iter,loss,grad_norm,status,eta_1..eta_S; loss and grad_norm are taken at
/// the point where the step starts.
std::string trace_to_csv(std::span<const StepTrace> trace);
nlohmann::json trace_to_json(std::span<const StepTrace> trace);

}  // namespace gnewton
