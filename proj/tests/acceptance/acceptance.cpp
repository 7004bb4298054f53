// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "../fixtures.hpp"
#include "../oracles.hpp"
#include "gnewton/cli.hpp"
#include "gnewton/optimizers.hpp"
#include "gnewton/summaries.hpp"

namespace {

using namespace gnewton;
using json = nlohmann::json;

struct Verdict {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string name;
  std::function<Verdict()> check;
  double time_limit = 0.0;  // seconds; 0 means none
};

struct SuiteQuadratic {
  QuadraticProblem q;
  Vector theta;
};

// 50 PD quadratics, P in {2..8}, eigenvalues in [0.1, 10], gradient entries nonzero.
std::vector<SuiteQuadratic> quadratic_suite() {
  std::vector<SuiteQuadratic> out;
  std::mt19937_64 rng(2024);
  for (int k = 0; k < 50; ++k) {
    const Index P = 2 + k % 7;
    QuadraticSpec spec;
    spec.seed = 1000 + static_cast<std::uint64_t>(k);
    auto q = make_quadratic(P, spec);
    Vector theta;
    do {
      theta = q.center + oracle::random_vector(P, rng);
    } while ((q.A * (theta - q.center)).cwiseAbs().minCoeff() == 0.0);
    out.push_back({std::move(q), theta});
  }
  return out;
}

Partition random_grouping(Index P, std::mt19937_64& rng) {
  const Index S = 1 + static_cast<Index>(rng() % static_cast<std::uint64_t>(P));
  std::vector<std::vector<Index>> groups(static_cast<std::size_t>(S));
  for (Index p = 0; p < P; ++p) {
    const Index s = p < S ? p : static_cast<Index>(rng() % static_cast<std::uint64_t>(S));
    groups[static_cast<std::size_t>(s)].push_back(p);
  }
  return Partition::custom(P, groups);
}

Verdict newton_recovery() {
  double worst = 0.0;
  for (const auto& [q, theta] : quadratic_suite()) {
    const auto part = partitioned_newton_step(q.loss, theta, Partition::discrete(theta.size()), StepConfig{});
    const auto newton = newton_step(q.loss, theta, StepConfig{});
    const Vector dp = theta - part.theta, dn = theta - newton.theta;
    worst = std::max(worst, (dp - dn).norm() / dn.norm());
  }
  return {worst <= 1e-8, fmt::format("max relative displacement error {:.2e} (tol 1e-8)", worst)};
}

Verdict cauchy_recovery() {
  double worst = 0.0;
  for (const auto& [q, theta] : quadratic_suite()) {
    const auto step = partitioned_newton_step(q.loss, theta, Partition::trivial(theta.size()), StepConfig{});
    const Vector g = q.A * (theta - q.center);
    const double analytic = g.squaredNorm() / g.dot(q.A * g);
    worst = std::max(worst, std::abs(step.trace.eta[0] - analytic) / analytic);
    const Vector expected = theta - analytic * g;
    worst = std::max(worst, (step.theta - expected).norm() / (analytic * g.norm()));
  }
  return {worst <= 1e-12, fmt::format("max relative error {:.2e} (tol 1e-12)", worst)};
}

Verdict worked_example() {
  Matrix A = Matrix::Zero(2, 2);
  A.diagonal() << 1, 2;
  const auto q = make_quadratic(A, Vector::Zero(2));
  const Vector theta = Vector::Ones(2);
  const Vector trivial = partitioned_newton_step(q.loss, theta, Partition::trivial(2), StepConfig{}).theta;
  const Vector discrete = partitioned_newton_step(q.loss, theta, Partition::discrete(2), StepConfig{}).theta;
  const double err = std::max((trivial - Vector{{4.0 / 9.0, -1.0 / 9.0}}).cwiseAbs().maxCoeff(),
                              discrete.cwiseAbs().maxCoeff());
  return {err <= 1e-12, fmt::format("trivial ({:.15f}, {:.15f}), discrete ({:.1e}, {:.1e}); max error {:.1e}",
                                    trivial[0], trivial[1], discrete[0], discrete[1], err)};
}

Verdict oracle_equivalence() {
  double worst = 0.0;
  auto compare = [&](const Expr& f, const Vector& theta, const Partition& part) {
    const Vector g = gradient(f, theta);
    const auto sys = pseudo_hessian(f, theta, g, part);
    const Matrix H = oracle::fd_hessian(oracle::as_function(f), theta);
    const Matrix D = oracle::dense_pseudo_hessian(H, g, part);
    for (Index i = 0; i < D.rows(); ++i)
      for (Index j = 0; j < D.cols(); ++j)
        worst = std::max(worst, std::abs(sys.hbar(i, j) - D(i, j)) / (1e-5 * (1 + std::abs(D(i, j)))));
  };
  std::mt19937_64 rng(7);
  int cases = 0;
  for (Index P = 2; P <= 8; ++P) {
    QuadraticSpec spec;
    spec.seed = static_cast<std::uint64_t>(P);
    const auto q = make_quadratic(P, spec);
    const Vector theta = q.center + oracle::random_vector(P, rng);
    for (const auto& part : {Partition::trivial(P), Partition::discrete(P), random_grouping(P, rng)}) {
      compare(q.loss, theta, part);
      ++cases;
    }
  }
  const auto mlp = testing::mlp_fixture(Activation::kTanh, LossKind::kMse, {2, 3, 2});
  compare(mlp.loss, mlp.point.values(), mlp.partition);
  ++cases;
  return {worst <= 1.0, fmt::format("{} cases; worst entry error / (1e-5 (1+|entry|)) = {:.3f}", cases, worst)};
}

double nested_entry(const Expr& f, const Vector& theta, const std::vector<Vector>& dirs) {
  Expr e = f;
  for (std::size_t k = 0; k + 1 < dirs.size(); ++k) e = directional_derivative(e, dirs[k]);
  return gradient(e, theta).dot(dirs.back());
}

Verdict sum_collapse_and_symmetry() {
  double collapse = 0.0, symmetry = 0.0;
  std::mt19937_64 rng(99);
  for (const auto& fx : testing::shipped_fixtures()) {
    const Vector theta = fx.point.values();
    const Index S = fx.partition.group_count();
    for (int k = 0; k < 20; ++k) {
      const Vector u = oracle::random_vector(theta.size(), rng);
      std::vector<Vector> masks;
      for (Index s = 0; s < S; ++s) masks.push_back(fx.partition.mask(u, s));
      for (int d = 1; d <= 3; ++d) {
        const SummaryTensor D = summary_tensor(fx.loss, theta, u, fx.partition, d);
        const double t = taylor_term(fx.loss, theta, u, d);
        double scale = std::abs(t);
        for (double v : D.entries()) scale = std::max(scale, std::abs(v));
        if (scale > 0) collapse = std::max(collapse, std::abs(D.total() - t) / scale);
        if (d == 1) continue;
        // Each stored entry against the same derivative taken in every order.
        std::vector<Index> idx(static_cast<std::size_t>(d), 0);
        while (true) {
          const double stored = D.at(idx);
          std::vector<Index> perm = idx;
          do {
            std::vector<Vector> ordered;
            for (Index s : perm) ordered.push_back(masks[static_cast<std::size_t>(s)]);
            const double direct = nested_entry(fx.loss, theta, ordered);
            symmetry = std::max(symmetry, std::abs(direct - stored) / std::max(scale, 1e-300));
          } while (std::next_permutation(perm.begin(), perm.end()));
          int j = d - 1;
          while (j >= 0 && idx[static_cast<std::size_t>(j)] == S - 1) --j;
          if (j < 0) break;
          const Index next = idx[static_cast<std::size_t>(j)] + 1;
          for (int m = j; m < d; ++m) idx[static_cast<std::size_t>(m)] = next;
        }
      }
    }
  }
  const bool pass = collapse <= 1e-10 && symmetry <= 1e-10;
  return {pass, fmt::format("4 problems x 20 directions x d=1..3; sum-collapse {:.2e}, symmetry {:.2e} (tol 1e-10)",
                            collapse, symmetry)};
}

Verdict cost_accounting() {
  bool pass = true;
  std::string detail;
  for (const auto& fx : testing::shipped_fixtures()) {
    const Index S = fx.partition.group_count();
    PassCounter c;
    pseudo_hessian(fx.loss, fx.point.values(), fx.partition, &c);
    pass = pass && c.backward.load() == S + 1;
    detail += fmt::format("{}: S={} H̄ {} passes", fx.name, S, c.backward.load());
    for (int d = 1; d <= 3; ++d) {
      PassCounter cd;
      summary_tensor(fx.loss, fx.point.values(), Vector::Ones(fx.point.size()), fx.partition, d, {}, &cd);
      const double bound = std::pow(static_cast<double>(S), d - 1) + static_cast<double>(S) + 1;
      pass = pass && static_cast<double>(cd.backward.load()) <= bound;
      detail += fmt::format(", D{} {}<={}", d, cd.backward.load(), bound);
    }
    detail += "; ";
  }
  return {pass, detail};
}

Verdict model_decrease() {
  std::mt19937_64 rng(31);
  double worst = -INFINITY;
  int steps = 0;
  for (const auto& [q, theta] : quadratic_suite()) {
    const Index P = theta.size();
    const double f0 = evaluate(q.loss, theta);
    const double cauchy = f0 - evaluate(q.loss, cauchy_step(q.loss, theta, StepConfig{}).theta);
    for (const auto& part : {Partition::trivial(P), random_grouping(P, rng), Partition::discrete(P)}) {
      const auto step = partitioned_newton_step(q.loss, theta, part, StepConfig{});
      if (step.trace.status != SolverStatus::kClean) return {false, "non-clean step on a PD quadratic"};
      worst = std::max(worst, cauchy - (f0 - evaluate(q.loss, step.theta)));
      ++steps;
    }
  }
  return {worst <= 1e-12, fmt::format("{} steps; max (Cauchy decrease - partitioned decrease) = {:.2e} (tol 1e-12)",
                                      steps, worst)};
}

Verdict reparameterization() {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> scale(0.25, 4.0);
  struct Case {
    testing::Fixture fx;
    double damping;
  };
  const std::vector<Case> cases{{testing::quadratic_fixture(), 1.0},
                                {testing::mlp_fixture(Activation::kTanh, LossKind::kMse, {2, 3, 2}), 0.5}};
  double worst = 0.0;
  std::string detail;
  bool enough = true;
  for (const auto& [fx, damping] : cases) {
    int used = 0, excluded = 0;
    for (int draw = 0; draw < 5; ++draw) {
      Vector group_alpha(fx.partition.group_count());
      for (Index s = 0; s < group_alpha.size(); ++s) group_alpha[s] = scale(rng);
      const Vector alpha = fx.partition.broadcast(group_alpha);
      const Expr g = compose(fx.loss, Expr::parameters(alpha.size()) * Expr::constant(alpha.cwiseInverse()));
      StepConfig cfg;
      cfg.damping = damping;
      cfg.cauchy_fallback = false;
      Vector x = fx.point.values(), y = alpha.cwiseProduct(x);
      double gap = 0.0;
      bool clean = true;
      for (int t = 0; t < 10 && clean; ++t) {
        const auto sx = partitioned_newton_step(fx.loss, x, fx.partition, cfg);
        const auto sy = partitioned_newton_step(g, y, fx.partition, cfg);
        clean = sx.trace.status == SolverStatus::kClean && sy.trace.status == SolverStatus::kClean;
        x = sx.theta;
        y = sy.theta;
        const Vector back = y.cwiseQuotient(alpha);
        for (Index p = 0; p < x.size(); ++p) gap = std::max(gap, std::abs(back[p] - x[p]) / std::max(1.0, std::abs(x[p])));
      }
      if (!clean) {
        ++excluded;
        continue;
      }
      ++used;
      worst = std::max(worst, gap);
    }
    enough = enough && used > 0;
    detail += fmt::format("{} (damping {}): {} runs, {} excluded; ", fx.name, damping, used, excluded);
  }
  return {enough && worst <= 1e-8, detail + fmt::format("max per-coordinate error {:.2e} (tol 1e-8)", worst)};
}

Verdict regularizer() {
  double quad_max = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    QuadraticSpec spec;
    spec.seed = seed;
    const auto q = make_quadratic(4, spec);
    std::mt19937_64 rng(seed);
    const Vector r = regularization_vector(q.loss, oracle::random_vector(4, rng), Partition::discrete(4)).r;
    quad_max = std::max(quad_max, r.cwiseAbs().maxCoeff());
  }
  const Expr x = Expr::parameters(2);
  const Expr f = pow(x[0], 3) + square(x[1]);
  const Vector r = regularization_vector(f, Vector{{0.3, -0.8}}, Partition::discrete(2)).r;
  const double expected = std::pow(6.0, 2.0 / 3.0);
  const double err = std::max(std::abs(r[0] - expected), std::abs(r[1]));
  return {quad_max == 0.0 && err <= 1e-10,
          fmt::format("quadratics max |r| = {:g}; cubic r = ({:.15f}, {:g}), error {:.1e}", quad_max, r[0], r[1], err)};
}

std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "gnewton_acceptance" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

json moons_config(std::uint64_t seed) {
  return json::parse(fmt::format(R"({{
    "problem": {{"kind": "mlp", "widths": [2, 8, 8, 8, 2], "activation": "tanh", "loss": "softmax_ce",
                 "dataset": {{"kind": "moons", "n": 64, "noise": 0.1}}}},
    "method": "partitioned", "partition": "canonical", "seed": {},
    "step": {{"damping": 1.0, "line_search": true, "cauchy_fallback": true}}}})",
                                 seed));
}

Verdict figure_echo() {
  const auto dir = scratch_dir("inspect");
  json cfg = moons_config(0);
  cfg["step"]["grad_tolerance"] = 0.0;
  cfg["inspect"] = {{"at", "checkpoint"}, {"steps", 200}};
  cfg["out"] = dir.string();
  std::ofstream(dir / "cfg.json") << cfg.dump();
  const std::string path = (dir / "cfg.json").string();
  const char* argv[] = {"gnewton", "inspect", "--config", path.c_str()};
  std::ostringstream out, err;
  const int code = cli::run_cli(4, argv, out, err);
  if (code != 0) return {false, "inspect failed: " + err.str()};
  std::ifstream in(dir / "hbar.json");
  const json hbar = json::parse(in);
  const Matrix H = [&] {
    const auto& m = hbar.at("matrix");
    Matrix M(static_cast<Index>(m.size()), static_cast<Index>(m.size()));
    for (Index i = 0; i < M.rows(); ++i)
      for (Index j = 0; j < M.cols(); ++j) M(i, j) = m.at(static_cast<std::size_t>(i)).at(static_cast<std::size_t>(j)).get<double>();
    return M;
  }();
  const double diag = H.diagonal().cwiseAbs().maxCoeff();
  double off = 0.0;
  for (Index i = 0; i < H.rows(); ++i)
    for (Index j = 0; j < H.cols(); ++j)
      if (i != j) off = std::max(off, std::abs(H(i, j)));
  const bool pass = H.rows() == 8 && std::isfinite(diag) && diag > 0 && off > 1e-6 * diag;
  return {pass, fmt::format("H̄ {}x{} after {} steps; max |off-diagonal| / max |diagonal| = {:.3e} (needs > 1e-6)",
                            H.rows(), H.cols(), hbar.at("stamp").at("step").get<int>(), off / diag)};
}

Verdict end_to_end() {
  std::string detail = "moons [2,8,8,8,2] canonical, seeds 0-7, steps to loss <= 1e-3:";
  bool pass = true;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const auto cfg = cli::ExperimentConfig::from_json(moons_config(seed));
    const auto problem = cli::build_problem(cfg);
    StepConfig step = cfg.step;
    step.max_iterations = 500;
    step.loss_target = 1e-3;
    const auto res = run(problem.loss, problem.initial, Method::kPartitioned, problem.partition, step);
    const double loss = evaluate(problem.loss, res.final);
    const bool ok = !res.aborted && loss <= 1e-3;
    pass = pass && ok;
    detail += ok ? fmt::format(" {}", res.trace.size()) : fmt::format(" FAIL(loss {:.3g})", loss);
  }
  StepConfig newton;
  newton.max_iterations = 50;
  newton.grad_tolerance = 1e-8;
  const auto rb = testing::rosenbrock_fixture();
  const auto res = run(rb.loss, rb.point, Method::kNewton, std::nullopt, newton);
  const double gnorm = gradient(rb.loss, res.final.values()).norm();
  pass = pass && res.converged && gnorm <= 1e-8;
  detail += fmt::format("; Rosenbrock Newton {} steps, |g| = {:.1e}", res.trace.size(), gnorm);
  return {pass, detail};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "Newton recovery", newton_recovery, 5.0},
      {2, "Cauchy recovery", cauchy_recovery, 5.0},
      {3, "Worked example", worked_example},
      {4, "Oracle equivalence", oracle_equivalence},
      {5, "Sum-collapse and symmetry", sum_collapse_and_symmetry},
      {6, "Cost accounting", cost_accounting},
      {7, "Model-decrease dominance", model_decrease},
      {8, "Reparameterization invariance", reparameterization},
      {9, "Regularizer", regularizer},
      {10, "Cross-tensor interactions in H̄", figure_echo},
      {11, "End-to-end optimization", end_to_end},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.check();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.time_limit > 0 && secs > c.time_limit) {
      v.pass = false;
      v.detail += fmt::format("; exceeded {} s", c.time_limit);
    }
    failures += v.pass ? 0 : 1;
    std::cout << fmt::format("{} [{:>2}] {}: {} ({:.2f} s)\n", v.pass ? "PASS" : "FAIL", c.id, c.name, v.detail, secs)
              << std::flush;
  }
  std::cout << fmt::format("{}/{} criteria passed\n", criteria.size() - static_cast<std::size_t>(failures),
                           criteria.size());
  return failures == 0 ? 0 : 1;
}
