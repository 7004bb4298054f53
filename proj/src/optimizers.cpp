#include "gnewton/optimizers.hpp"

#include <chrono>
#include <cmath>
#include <limits>

#include <fmt/format.h>
#include <fmt/ranges.h>

namespace gnewton {

namespace {

constexpr double kMinRcond = 1e-14;
constexpr int kMaxBacktracks = 30;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// LDLT solve that succeeds only for a finite, well-conditioned descent direction.
std::optional<Vector> try_descent_solve(const Matrix& M, const Vector& b) {
  const Eigen::LDLT<Matrix> ldlt(M);
  if (!factorization_usable(ldlt)) return std::nullopt;
  Vector x = ldlt.solve(b);
  if (!x.allFinite() || !(x.dot(b) > 0.0)) return std::nullopt;
  return x;
}

struct LadderResult {
  Vector x;
  double shift = 0.0;
  bool shifted = false;
};

std::optional<LadderResult> solve_with_ladder(const Matrix& M, const Vector& b, const std::vector<double>& ladder) {
  if (auto x = try_descent_solve(M, b)) return LadderResult{*x, 0.0, false};
  const Matrix I = Matrix::Identity(M.rows(), M.cols());
  for (double shift : ladder) {
    if (auto x = try_descent_solve(M + shift * I, b)) return LadderResult{*x, shift, true};
  }
  return std::nullopt;
}

struct Workspace {
  // Rows of the symbolic Hessian, built on first use by the dense Newton step.
  std::vector<Expr> hessian_rows;
};

void check_theta(const Expr& f, const Vector& theta) {
  if (f.param_count() != theta.size()) {
    throw ShapeError(fmt::format("loss expects {} parameters, got {}", f.param_count(), theta.size()));
  }
}

double finish_loss(const Expr& f, const Vector& theta, double loss_before, const StepConfig& cfg, Vector& delta,
                   PassCounter* counter) {
  double after = evaluate(f, Vector(theta - delta), counter);
  for (int k = 0; cfg.line_search && !(after <= loss_before) && k < kMaxBacktracks; ++k) {
    delta *= 0.5;
    after = evaluate(f, Vector(theta - delta), counter);
  }
  return after;
}

StepResult partitioned_impl(const Expr& f, const Vector& theta, const Partition& part, const StepConfig& cfg,
                            double loss, const Vector& g, PassCounter* counter) {
  if (part.param_count() != theta.size()) {
    throw ShapeError(fmt::format("partition covers {} parameters, theta has {}", part.param_count(), theta.size()));
  }
  const PseudoSystem sys = pseudo_hessian(f, theta, g, part, counter);
  std::optional<Vector> r;
  if (cfg.epsilon > 0.0) r = regularization_vector(f, theta, part, cfg.regularization, counter).r;
  const SolveOutcome sol = solve_pseudo_system(sys, cfg, r);

  Vector delta = cfg.damping * g.cwiseProduct(part.broadcast(sol.eta));
  StepResult out;
  out.trace.loss_before = loss;
  out.trace.loss_after = finish_loss(f, theta, loss, cfg, delta, counter);
  out.trace.grad_norm = g.norm();
  out.trace.eta = sol.eta;
  out.trace.status = sol.status;
  out.trace.shift = sol.shift;
  out.trace.dropped = sol.dropped;
  out.trace.group_count = part.group_count();
  out.theta = theta - delta;
  return out;
}

StepResult gd_impl(const Expr& f, const Vector& theta, const StepConfig& cfg, double loss, const Vector& g,
                   PassCounter* counter) {
  Vector delta = cfg.damping * g;
  StepResult out;
  out.trace.loss_before = loss;
  out.trace.loss_after = finish_loss(f, theta, loss, cfg, delta, counter);
  out.trace.grad_norm = g.norm();
  out.trace.eta = Vector::Constant(1, cfg.damping);
  out.trace.group_count = 1;
  out.theta = theta - delta;
  return out;
}

StepResult cauchy_impl(const Expr& f, const Vector& theta, const StepConfig& cfg, double loss, const Vector& g,
                       PassCounter* counter) {
  StepResult out;
  out.trace.loss_before = loss;
  out.trace.grad_norm = g.norm();
  out.trace.group_count = 1;
  const double gg = g.squaredNorm();
  if (gg == 0.0) {
    out.trace.loss_after = loss;
    out.trace.eta = Vector::Zero(1);
    out.trace.status = SolverStatus::kZeroGroupsDropped;
    out.trace.dropped = {0};
    out.theta = theta;
    return out;
  }
  const double gHg = g.dot(hessian_vector_product(f, theta, g, counter));
  double step = 1.0;
  if (gHg > 0.0 && std::isfinite(gHg)) {
    step = gg / gHg;
  } else {
    out.trace.status = SolverStatus::kCauchyFallback;
  }
  Vector delta = cfg.damping * step * g;
  out.trace.loss_after = finish_loss(f, theta, loss, cfg, delta, counter);
  out.trace.eta = Vector::Constant(1, step);
  out.theta = theta - delta;
  return out;
}

StepResult newton_impl(const Expr& f, const Vector& theta, const StepConfig& cfg, double loss, const Vector& g,
                       PassCounter* counter, Workspace& ws) {
  const Index P = theta.size();
  if (P > cfg.dense_budget) {
    throw BudgetError(fmt::format("dense Newton needs P <= {}, got P = {}", cfg.dense_budget, P));
  }
  if (ws.hessian_rows.empty()) {
    const Expr grad = gradient_expr(f, P);
    ws.hessian_rows.reserve(static_cast<std::size_t>(P));
    for (Index i = 0; i < P; ++i) ws.hessian_rows.push_back(gradient_expr(grad[i], P));
  }
  Matrix H(P, P);
  for (Index i = 0; i < P; ++i) {
    // Each row is one Hessian-vector product with a coordinate vector.
    H.row(i) = evaluate_tensor(ws.hessian_rows[static_cast<std::size_t>(i)], theta, counter).reshaped().transpose();
    if (counter) counter->backward.fetch_add(1, std::memory_order_relaxed);
  }
  H = 0.5 * (H + H.transpose()).eval();

  StepResult out;
  out.trace.loss_before = loss;
  out.trace.grad_norm = g.norm();
  out.trace.group_count = 0;
  if (g.squaredNorm() == 0.0) {
    out.trace.loss_after = loss;
    out.trace.status = SolverStatus::kZeroGroupsDropped;
    out.theta = theta;
    return out;
  }
  const auto solved = solve_with_ladder(H, g, cfg.ladder);
  if (!solved) {
    nlohmann::json diag;
    diag["hessian"] = nlohmann::json::array();
    for (Index i = 0; i < P; ++i) {
      diag["hessian"].push_back(std::vector<double>(H.row(i).begin(), H.row(i).end()));
    }
    diag["gradient"] = std::vector<double>(g.begin(), g.end());
    throw SolverError("Hessian singular or indefinite after the Levenberg ladder", diag);
  }
  if (solved->shifted) {
    out.trace.status = SolverStatus::kRegularized;
    out.trace.shift = solved->shift;
  }
  Vector delta = cfg.damping * solved->x;
  out.trace.loss_after = finish_loss(f, theta, loss, cfg, delta, counter);
  out.theta = theta - delta;
  return out;
}

StepResult dispatch(Method method, const Expr& f, const Vector& theta, const std::optional<Partition>& part,
                    const StepConfig& cfg, double loss, const Vector& g, PassCounter* counter, Workspace& ws) {
  switch (method) {
    case Method::kGd:
      return gd_impl(f, theta, cfg, loss, g, counter);
    case Method::kCauchy:
      return cauchy_impl(f, theta, cfg, loss, g, counter);
    case Method::kNewton:
      return newton_impl(f, theta, cfg, loss, g, counter, ws);
    case Method::kPartitioned:
      return partitioned_impl(f, theta, *part, cfg, loss, g, counter);
  }
  throw std::logic_error("unknown method");
}

StepResult single_step(Method method, const Expr& f, const Vector& theta, const std::optional<Partition>& part,
                       const StepConfig& cfg, PassCounter* counter) {
  cfg.validate(method == Method::kGd);
  check_theta(f, theta);
  PassCounter local;
  PassCounter* c = counter ? counter : &local;
  const PassCount before = snapshot(c);
  const auto t0 = Clock::now();
  const double loss = evaluate(f, theta, c);
  const Vector g = gradient(f, theta, c);
  Workspace ws;
  StepResult out = dispatch(method, f, theta, part, cfg, loss, g, c, ws);
  out.trace.passes = snapshot(c) - before;
  out.trace.wall_seconds = seconds_since(t0);
  return out;
}

}  // namespace

bool factorization_usable(const Eigen::LDLT<Matrix>& ldlt) {
  if (ldlt.info() != Eigen::Success) return false;
  const Vector d = ldlt.vectorD().cwiseAbs();
  if (d.size() == 0 || !d.allFinite() || !(d.minCoeff() > kMinRcond * d.maxCoeff())) return false;
  return ldlt.rcond() > kMinRcond;
}

std::string to_string(Method m) {
  switch (m) {
    case Method::kGd:
      return "gd";
    case Method::kCauchy:
      return "cauchy";
    case Method::kNewton:
      return "newton";
    case Method::kPartitioned:
      return "partitioned";
  }
  return "unknown";
}

const std::vector<std::string>& method_names() {
  static const std::vector<std::string> names{"gd", "cauchy", "newton", "partitioned"};
  return names;
}

Method method_from_string(const std::string& name) {
  if (name == "gd") return Method::kGd;
  if (name == "cauchy") return Method::kCauchy;
  if (name == "newton") return Method::kNewton;
  if (name == "partitioned") return Method::kPartitioned;
  throw std::invalid_argument(
      fmt::format("unknown method '{}' (valid: {})", name, fmt::join(method_names(), ", ")));
}

std::vector<double> default_ladder() {
  std::vector<double> ladder;
  for (int k = 0; k <= 16; ++k) ladder.push_back(1e-8 * std::pow(10.0, k));
  return ladder;
}

void StepConfig::validate(bool allow_zero_damping) const {
  const bool damping_ok = allow_zero_damping ? damping >= 0.0 : damping > 0.0;
  if (!damping_ok || !std::isfinite(damping)) {
    throw std::invalid_argument(fmt::format("damping must be positive, got {}", damping));
  }
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) {
    throw std::invalid_argument(fmt::format("epsilon must be nonnegative, got {}", epsilon));
  }
  for (std::size_t k = 0; k < ladder.size(); ++k) {
    if (!(ladder[k] > 0.0) || (k > 0 && !(ladder[k] > ladder[k - 1]))) {
      throw std::invalid_argument("Levenberg ladder must be positive and strictly increasing");
    }
  }
  if (max_iterations < 0) throw std::invalid_argument("max_iterations must be nonnegative");
  if (!(grad_tolerance >= 0.0)) throw std::invalid_argument("grad_tolerance must be nonnegative");
}

std::string status_string(SolverStatus status, double shift, const std::vector<Index>& dropped, Index group_count) {
  switch (status) {
    case SolverStatus::kClean:
      return "clean";
    case SolverStatus::kRegularized:
      return fmt::format("regularized({:g})", shift);
    case SolverStatus::kCauchyFallback:
      return "cauchy-fallback";
    case SolverStatus::kZeroGroupsDropped: {
      if (group_count > 0 && static_cast<Index>(dropped.size()) == group_count) return "zero-groups-dropped(all)";
      std::vector<Index> one_based;
      for (Index s : dropped) one_based.push_back(s + 1);
      return fmt::format("zero-groups-dropped({})", fmt::join(one_based, ";"));
    }
  }
  return "unknown";
}

SolveOutcome solve_pseudo_system(const PseudoSystem& sys, const StepConfig& cfg, const std::optional<Vector>& r) {
  const Index S = sys.gbar.size();
  if (sys.hbar.rows() != S || sys.hbar.cols() != S) {
    throw ShapeError(fmt::format("hbar is {}x{} but gbar has length {}", sys.hbar.rows(), sys.hbar.cols(), S));
  }
  if (cfg.epsilon > 0.0) {
    if (!r) throw std::invalid_argument("epsilon > 0 needs a regularization vector");
    if (r->size() != S) throw ShapeError(fmt::format("regularization vector has length {}, expected {}", r->size(), S));
  }

  SolveOutcome out;
  out.eta = Vector::Zero(S);
  std::vector<Index> active;
  for (Index s = 0; s < S; ++s) {
    if (sys.gbar[s] != 0.0) {
      active.push_back(s);
    } else {
      out.dropped.push_back(s);
    }
  }
  if (!out.dropped.empty()) out.status = SolverStatus::kZeroGroupsDropped;
  if (active.empty()) return out;

  const Index A = static_cast<Index>(active.size());
  Matrix M(A, A);
  Vector b(A);
  for (Index i = 0; i < A; ++i) {
    const Index si = active[static_cast<std::size_t>(i)];
    b[i] = sys.gbar[si];
    for (Index j = 0; j < A; ++j) M(i, j) = sys.hbar(si, active[static_cast<std::size_t>(j)]);
    if (cfg.epsilon > 0.0) M(i, i) += cfg.epsilon * (*r)[si];
  }

  if (const auto solved = solve_with_ladder(M, b, cfg.ladder)) {
    for (Index i = 0; i < A; ++i) out.eta[active[static_cast<std::size_t>(i)]] = solved->x[i];
    if (solved->shifted) {
      out.status = SolverStatus::kRegularized;
      out.shift = solved->shift;
    }
    return out;
  }

  if (!cfg.cauchy_fallback) {
    nlohmann::json diag = sys.to_json();
    diag["epsilon"] = cfg.epsilon;
    diag["ladder_top"] = cfg.ladder.empty() ? 0.0 : cfg.ladder.back();
    throw SolverError("pseudo-Hessian system unsolvable after the Levenberg ladder", diag);
  }
  // g^T g / g^T H g expressed through the summaries.
  const double num = sys.gbar.sum();
  const double den = sys.hbar.sum();
  out.status = SolverStatus::kCauchyFallback;
  out.shift = 0.0;
  if (den > 0.0 && std::isfinite(den)) {
    out.eta = Vector::Constant(S, num / den);
  } else {
    out.eta = Vector::Ones(S);
    out.nonpositive_curvature = true;
  }
  return out;
}

StepResult partitioned_newton_step(const Expr& f, const Vector& theta, const Partition& part, const StepConfig& cfg,
                                   PassCounter* counter) {
  return single_step(Method::kPartitioned, f, theta, part, cfg, counter);
}

StepResult cauchy_step(const Expr& f, const Vector& theta, const StepConfig& cfg, PassCounter* counter) {
  return single_step(Method::kCauchy, f, theta, std::nullopt, cfg, counter);
}

StepResult newton_step(const Expr& f, const Vector& theta, const StepConfig& cfg, PassCounter* counter) {
  return single_step(Method::kNewton, f, theta, std::nullopt, cfg, counter);
}

StepResult gd_step(const Expr& f, const Vector& theta, const StepConfig& cfg, PassCounter* counter) {
  return single_step(Method::kGd, f, theta, std::nullopt, cfg, counter);
}

RunResult run(const Expr& f, const ParamVector& theta0, Method method, const std::optional<Partition>& part,
              const StepConfig& cfg, PassCounter* counter) {
  cfg.validate(method == Method::kGd);
  check_theta(f, theta0.values());
  if (method == Method::kPartitioned && !part) throw std::invalid_argument("method 'partitioned' needs a partition");
  if (part && part->param_count() != theta0.size()) {
    throw ShapeError(fmt::format("partition covers {} parameters, theta has {}", part->param_count(), theta0.size()));
  }

  PassCounter local;
  PassCounter* c = counter ? counter : &local;
  const PassCount start = snapshot(c);
  Workspace ws;
  RunResult out;
  Vector theta = theta0.values();

  for (int it = 0;; ++it) {
    const auto t0 = Clock::now();
    const PassCount before = snapshot(c);
    double loss = 0.0;
    Vector g;
    try {
      loss = evaluate(f, theta, c);
      g = gradient(f, theta, c);
    } catch (const DomainError& e) {
      out.aborted = true;
      out.abort_reason = fmt::format("iteration {}: {}", it, e.what());
      break;
    }
    if (!std::isfinite(loss) || !g.allFinite()) {
      out.aborted = true;
      out.abort_reason = fmt::format("iteration {}: non-finite loss or gradient", it);
      break;
    }
    if (g.norm() <= cfg.grad_tolerance || (cfg.loss_target && loss <= *cfg.loss_target)) {
      out.converged = true;
      break;
    }
    if (it >= cfg.max_iterations) break;

    StepResult step;
    try {
      step = dispatch(method, f, theta, part, cfg, loss, g, c, ws);
    } catch (const SolverError& e) {
      out.aborted = true;
      out.abort_reason = fmt::format("iteration {}: {}", it, e.what());
      break;
    } catch (const DomainError& e) {
      out.aborted = true;
      out.abort_reason = fmt::format("iteration {}: {}", it, e.what());
      break;
    }
    if (!std::isfinite(step.trace.loss_after) || !step.theta.allFinite()) {
      out.aborted = true;
      out.abort_reason = fmt::format("iteration {}: step produced a non-finite loss", it);
      break;
    }
    step.trace.iteration = it;
    step.trace.passes = snapshot(c) - before;
    step.trace.wall_seconds = seconds_since(t0);
    theta = step.theta;
    out.trace.push_back(std::move(step.trace));
  }

  out.final = theta0.with_values(theta);
  out.passes = snapshot(c) - start;
  return out;
}

std::string trace_to_csv(std::span<const StepTrace> trace) {
  Index width = 0;
  for (const auto& t : trace) width = std::max(width, static_cast<Index>(t.eta.size()));
  std::string out = "iter,loss,grad_norm,status";
  for (Index s = 1; s <= width; ++s) out += fmt::format(",eta_{}", s);
  out += '\n';
  for (const auto& t : trace) {
    out += fmt::format("{},{},{},{}", t.iteration, t.loss_before, t.grad_norm, t.status_text());
    for (Index s = 0; s < width; ++s) {
      if (s < t.eta.size()) {
        out += fmt::format(",{}", t.eta[s]);
      } else {
        out += ',';
      }
    }
    out += '\n';
  }
  return out;
}

nlohmann::json trace_to_json(std::span<const StepTrace> trace) {
  auto out = nlohmann::json::array();
  for (const auto& t : trace) {
    std::vector<Index> dropped;
    for (Index s : t.dropped) dropped.push_back(s + 1);
    out.push_back({{"iteration", t.iteration},
                   {"loss_before", t.loss_before},
                   {"loss_after", t.loss_after},
                   {"grad_norm", t.grad_norm},
                   {"eta", std::vector<double>(t.eta.begin(), t.eta.end())},
                   {"status", t.status_text()},
                   {"dropped_groups", dropped},
                   {"passes", {{"forward", t.passes.forward}, {"backward", t.passes.backward}}},
                   {"wall_seconds", t.wall_seconds}});
  }
  return out;
}

}  // namespace gnewton
