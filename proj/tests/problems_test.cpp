#include "gnewton/problems.hpp"

#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "gnewton/partition.hpp"
#include "oracles.hpp"

namespace gnewton {
namespace {

namespace fs = std::filesystem;

fs::path write_temp(const std::string& name, const std::string& content) {
  const fs::path path = fs::temp_directory_path() / ("gnewton_problems_" + name);
  std::ofstream(path) << content;
  return path;
}

std::string error_of(const fs::path& path, const CsvSchema& schema = {}) {
  try {
    load_csv(path, schema);
  } catch (const DatasetError& e) {
    return e.what();
  }
  return "";
}

TEST(Quadratic, HandExample) {
  Matrix A = Matrix::Zero(2, 2);
  A.diagonal() << 1, 2;
  const auto q = make_quadratic(A, Vector::Zero(2));
  const Vector g = gradient(q.loss, Vector::Ones(2));
  EXPECT_DOUBLE_EQ(g[0], 1.0);
  EXPECT_DOUBLE_EQ(g[1], 2.0);
  EXPECT_DOUBLE_EQ(evaluate(q.loss, Vector::Ones(2)), 1.5);
}

TEST(Quadratic, ZeroAtCenterAndHessianIsA) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    QuadraticSpec spec;
    spec.seed = seed;
    const auto q = make_quadratic(4, spec);
    EXPECT_NEAR(evaluate(q.loss, q.center), 0.0, 1e-14);
    std::mt19937_64 rng(seed);
    const Vector x = oracle::random_vector(4, rng);
    const Matrix H = oracle::fd_hessian(oracle::as_function(q.loss), x);
    EXPECT_LE((H - q.A).cwiseAbs().maxCoeff(), 1e-5);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(q.A);
    EXPECT_GE(eig.eigenvalues().minCoeff(), spec.eig_min - 1e-12);
    EXPECT_LE(eig.eigenvalues().maxCoeff(), spec.eig_max + 1e-12);
  }
}

TEST(Quadratic, Errors) {
  QuadraticSpec bad;
  bad.eig_min = 5;
  bad.eig_max = 1;
  EXPECT_THROW(make_quadratic(3, bad), std::invalid_argument);
  EXPECT_THROW(make_quadratic(0, QuadraticSpec{}), std::invalid_argument);
  Matrix asym(2, 2);
  asym << 1, 2, 0, 1;
  EXPECT_THROW(make_quadratic(asym, Vector::Zero(2)), std::invalid_argument);
}

TEST(Rosenbrock, Values) {
  const Expr f = make_rosenbrock();
  EXPECT_DOUBLE_EQ(evaluate(f, Vector::Ones(2)), 0.0);
  EXPECT_EQ(gradient(f, Vector::Ones(2)), Vector::Zero(2));
  EXPECT_DOUBLE_EQ(evaluate(f, Vector::Zero(2)), 1.0);
  EXPECT_NEAR(evaluate(f, (Vector(2) << -1.2, 1.0).finished()), 24.2, 1e-12);
}

TEST(Rosenbrock, FiniteDifferenceHessian) {
  const Vector x = (Vector(2) << -1.2, 1.0).finished();
  const Expr f = make_rosenbrock();
  Matrix H(2, 2);
  H << 2 - 400 * (x[1] - 3 * x[0] * x[0]), -400 * x[0], -400 * x[0], 200;
  const Matrix fd = oracle::fd_hessian(oracle::as_function(f), x, 1e-4);
  EXPECT_LE((fd - H).cwiseAbs().maxCoeff(), 1e-5 * (1 + H.cwiseAbs().maxCoeff()));
  for (Index i = 0; i < 2; ++i) {
    Vector e = Vector::Zero(2);
    e[i] = 1;
    const Vector col = hessian_vector_product(f, x, e);
    EXPECT_LE((col - H.col(i)).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Mlp, ParameterCount) {
  MlpSpec spec;
  spec.widths = {2, 3, 2};
  const auto data = synth_dataset(SynthKind::kMoons, 10, 1);
  const auto mlp = make_mlp(spec, data);
  EXPECT_EQ(spec.param_count(), 17);
  EXPECT_EQ(mlp.initial.size(), 17);
  EXPECT_EQ(mlp.loss.param_count(), 17);
  EXPECT_EQ(Partition::canonical(mlp.initial).group_count(), 4);
  EXPECT_EQ(mlp.initial.names()[0], "layer1/weight");
  EXPECT_EQ(mlp.initial.names()[3], "layer2/bias");
}

TEST(Mlp, ZeroTargetsZeroOutputLayer) {
  Dataset data;
  data.features = Matrix::Random(6, 2);
  data.targets = Matrix::Zero(6, 2);
  data.categorical = false;
  MlpSpec spec;
  spec.widths = {2, 4, 2};
  spec.zero_init_output = true;
  const auto mlp = make_mlp(spec, data);
  EXPECT_EQ(evaluate(mlp.loss, mlp.initial), 0.0);
}

TEST(Mlp, LossMatchesNumericForwardPass) {
  MlpSpec spec;
  spec.widths = {2, 3, 2};
  spec.seed = 5;
  const auto data = synth_dataset(SynthKind::kBlobs, 8, 2);
  const auto mlp = make_mlp(spec, data);
  const Matrix Z = mlp_outputs(spec, data, mlp.initial.values());
  double mse = 0.0;
  for (Index n = 0; n < data.size(); ++n) {
    for (Index k = 0; k < 2; ++k) {
      const double y = data.targets(n, 0) == static_cast<double>(k) ? 1.0 : 0.0;
      mse += (Z(n, k) - y) * (Z(n, k) - y);
    }
  }
  EXPECT_NEAR(evaluate(mlp.loss, mlp.initial), mse / static_cast<double>(data.size()), 1e-13);

  spec.loss = LossKind::kSoftmaxCrossEntropy;
  const auto ce = make_mlp(spec, data);
  double nll = 0.0;
  for (Index n = 0; n < data.size(); ++n) {
    const double lse = std::log(std::exp(Z(n, 0)) + std::exp(Z(n, 1)));
    nll += lse - Z(n, static_cast<Index>(data.targets(n, 0)));
  }
  EXPECT_NEAR(evaluate(ce.loss, ce.initial), nll / static_cast<double>(data.size()), 1e-13);
}

TEST(Mlp, GradientMatchesFiniteDifferences) {
  for (auto act : {Activation::kTanh, Activation::kSoftplus}) {
    for (auto loss : {LossKind::kMse, LossKind::kSoftmaxCrossEntropy}) {
      MlpSpec spec;
      spec.widths = {2, 3, 2};
      spec.activation = act;
      spec.loss = loss;
      spec.seed = 11;
      const auto data = synth_dataset(SynthKind::kMoons, 12, 3);
      const auto mlp = make_mlp(spec, data);
      const Vector x = mlp.initial.values();
      const Vector g = gradient(mlp.loss, x);
      const Vector fd = oracle::fd_gradient(oracle::as_function(mlp.loss), x);
      EXPECT_LE((g - fd).cwiseAbs().maxCoeff(), 1e-6) << to_string(act) << " " << to_string(loss);
    }
  }
}

TEST(Mlp, HessianMatchesFiniteDifferencesSmallP) {
  // widths [1,2,1]: P = 2 + 2 + 2 + 1 = 7.
  MlpSpec spec;
  spec.widths = {1, 2, 1};
  spec.seed = 2;
  Dataset data;
  data.features = (Matrix(4, 1) << -1.0, -0.3, 0.4, 1.2).finished();
  data.targets = (Matrix(4, 1) << 0.5, -0.2, 0.1, 0.7).finished();
  data.categorical = false;
  const auto mlp = make_mlp(spec, data);
  ASSERT_EQ(mlp.initial.size(), 7);
  const Vector x = mlp.initial.values();
  const Matrix fd = oracle::fd_hessian(oracle::as_function(mlp.loss), x);
  for (Index i = 0; i < 7; ++i) {
    Vector e = Vector::Zero(7);
    e[i] = 1;
    const Vector col = hessian_vector_product(mlp.loss, x, e);
    EXPECT_LE((col - fd.col(i)).cwiseAbs().maxCoeff(), 1e-5);
  }
}

TEST(Mlp, SpecValidation) {
  MlpSpec spec;
  spec.widths = {2, 2};
  EXPECT_THROW(spec.validate(), std::invalid_argument);
  spec.widths = {2, 0, 2};
  EXPECT_THROW(spec.validate(), std::invalid_argument);
  spec.widths = {3, 4, 2};
  EXPECT_THROW(make_mlp(spec, synth_dataset(SynthKind::kMoons, 10, 1)), std::invalid_argument);
}

TEST(Synth, Deterministic) {
  const auto a = synth_dataset(SynthKind::kBlobs, 100, 7);
  const auto b = synth_dataset(SynthKind::kBlobs, 100, 7);
  EXPECT_EQ(a.features, b.features);
  EXPECT_EQ(a.targets, b.targets);
  EXPECT_EQ(a.content_hash(), b.content_hash());
  EXPECT_NE(a.content_hash(), synth_dataset(SynthKind::kBlobs, 100, 8).content_hash());
}

TEST(Synth, LabelsAndBalance) {
  for (auto kind : {SynthKind::kMoons, SynthKind::kBlobs}) {
    for (Index n : {2, 7, 50, 101}) {
      const auto d = synth_dataset(kind, n, 4);
      ASSERT_EQ(d.size(), n);
      Index ones = 0;
      for (Index i = 0; i < n; ++i) {
        const double y = d.targets(i, 0);
        EXPECT_TRUE(y == 0.0 || y == 1.0);
        ones += y == 1.0 ? 1 : 0;
      }
      EXPECT_LE(std::abs((n - ones) - ones), 1);
    }
  }
  EXPECT_THROW(synth_dataset(SynthKind::kMoons, 1, 0), std::invalid_argument);
  EXPECT_THROW(synth_kind_from_string("spirals"), std::invalid_argument);
}

TEST(Csv, WellFormed) {
  const auto path = write_temp("ok.csv", "x1,x2,label\n0.5,1,0\n-2,3e-1,1\n4,5,1\n");
  const auto d = load_csv(path);
  EXPECT_EQ(d.size(), 3);
  EXPECT_EQ(d.features.cols(), 2);
  EXPECT_EQ(d.classes, 2);
  EXPECT_DOUBLE_EQ(d.features(1, 1), 0.3);
}

// Rows are file lines, the header being row 1.
TEST(Csv, NanCellNamesRow) {
  const auto path = write_temp("nan.csv", "x1,x2,label\n0.5,1,0\n1,nan,1\n");
  const std::string msg = error_of(path);
  EXPECT_NE(msg.find("row 3"), std::string::npos) << msg;
}

TEST(Csv, MissingLabelColumn) {
  const auto path = write_temp("nolabel.csv", "x1,x2\n0.5,1\n");
  const std::string msg = error_of(path);
  EXPECT_NE(msg.find("schema error"), std::string::npos) << msg;
}

TEST(Csv, NonNumericAndEmpty) {
  const std::string msg = error_of(write_temp("text.csv", "x1,label\nabc,0\n"));
  EXPECT_NE(msg.find("row 2"), std::string::npos) << msg;
  EXPECT_NE(msg.find("x1"), std::string::npos) << msg;
  EXPECT_FALSE(error_of(write_temp("empty.csv", "")).empty());
}

TEST(Csv, RoundTripKeepsContentHash) {
  const auto d = synth_dataset(SynthKind::kMoons, 20, 5);
  const auto path = fs::temp_directory_path() / "gnewton_problems_roundtrip.csv";
  save_csv(d, path);
  const auto back = load_csv(path);
  EXPECT_EQ(back.content_hash(), d.content_hash());
  EXPECT_EQ(load_csv(path).content_hash(), back.content_hash());
}

}  // namespace
}  // namespace gnewton
