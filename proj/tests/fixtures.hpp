// The problems shipped with the test suites.
#pragma once

#include <string>
#include <vector>

#include "gnewton/partition.hpp"
#include "gnewton/problems.hpp"

namespace gnewton::testing {

struct Fixture {
  std::string name;
  Expr loss;
  ParamVector point;
  Partition partition;
};

inline Fixture quadratic_fixture(Index dim = 5, std::uint64_t seed = 3) {
  QuadraticSpec spec;
  spec.seed = seed;
  const auto q = make_quadratic(dim, spec);
  Vector x = q.center;
  for (Index i = 0; i < dim; ++i) x[i] += 0.3 * static_cast<double>(i + 1) - 0.7;
  std::vector<std::vector<Index>> groups{{0, 1}, {2}};
  for (Index i = 3; i < dim; ++i) groups[static_cast<std::size_t>(i % 2)].push_back(i);
  return {"quadratic", q.loss, ParamVector::flat(x), Partition::custom(dim, groups)};
}

inline Fixture rosenbrock_fixture() {
  Vector x(2);
  x << -1.2, 1.0;
  return {"rosenbrock", make_rosenbrock(), ParamVector::flat(x), Partition::discrete(2)};
}

inline Fixture mlp_fixture(Activation act = Activation::kTanh, LossKind loss = LossKind::kMse,
                           std::vector<Index> widths = {2, 3, 2}) {
  MlpSpec spec;
  spec.widths = std::move(widths);
  spec.activation = act;
  spec.loss = loss;
  spec.seed = 4;
  const auto data = synth_dataset(SynthKind::kMoons, 16, 9);
  const auto mlp = make_mlp(spec, data);
  return {"mlp-" + to_string(act) + "-" + to_string(loss), mlp.loss, mlp.initial, Partition::canonical(mlp.initial)};
}

inline std::vector<Fixture> shipped_fixtures() {
  return {quadratic_fixture(), rosenbrock_fixture(), mlp_fixture(),
          mlp_fixture(Activation::kSoftplus, LossKind::kSoftmaxCrossEntropy)};
}

}  // namespace gnewton::testing
