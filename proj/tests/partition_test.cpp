#include "gnewton/partition.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "oracles.hpp"

namespace gnewton {
namespace {

using Groups = std::vector<std::vector<Index>>;

TEST(Partition, Trivial) {
  EXPECT_EQ(Partition::trivial(3).groups(), (Groups{{0, 1, 2}}));
  EXPECT_EQ(Partition::trivial(1).groups(), (Groups{{0}}));
  EXPECT_EQ(Partition::trivial(1'000'000).group_count(), 1);
  EXPECT_EQ(Partition::trivial(3).kind(), PartitionKind::kTrivial);
  EXPECT_THROW(Partition::trivial(0), std::invalid_argument);
}

TEST(Partition, Discrete) {
  EXPECT_EQ(Partition::discrete(3).groups(), (Groups{{0}, {1}, {2}}));
  EXPECT_EQ(Partition::discrete(1).groups(), (Groups{{0}}));
  EXPECT_EQ(Partition::discrete(2).groups(), (Groups{{0}, {1}}));
  EXPECT_THROW(Partition::discrete(0), std::invalid_argument);
}

TEST(Partition, Canonical) {
  std::vector<TensorShape> mlp;
  for (int l = 0; l < 10; ++l) {
    mlp.push_back({4, 4});
    mlp.push_back({4});
  }
  EXPECT_EQ(Partition::canonical(mlp).group_count(), 20);

  const auto single = Partition::canonical({{4}});
  EXPECT_EQ(single.groups(), Partition::trivial(4).groups());

  const auto two = Partition::canonical({{2, 3}, {3}}, {"w", "b"});
  EXPECT_EQ(two.groups(), (Groups{{0, 1, 2, 3, 4, 5}, {6, 7, 8}}));
  EXPECT_EQ(two.labels(), (std::vector<std::string>{"w", "b"}));
  EXPECT_THROW(Partition::canonical(std::vector<TensorShape>{}), std::invalid_argument);
}

TEST(Partition, CanonicalGroupSizesMatchShapes) {
  const std::vector<TensorShape> shapes{{3, 2}, {2}, {2, 2, 2}, {1}};
  const auto part = Partition::canonical(shapes);
  Index total = 0;
  for (std::size_t k = 0; k < shapes.size(); ++k) {
    EXPECT_EQ(static_cast<Index>(part.group(static_cast<Index>(k)).size()), element_count(shapes[k]));
    total += element_count(shapes[k]);
  }
  EXPECT_EQ(part.param_count(), total);
}

TEST(Partition, CustomValidation) {
  EXPECT_NO_THROW(Partition::custom(3, {{0, 2}, {1}}));
  EXPECT_THROW(Partition::custom(3, {{0, 1}, {1, 2}}), std::invalid_argument);  // overlap
  EXPECT_THROW(Partition::custom(3, {{0}, {1}}), std::invalid_argument);        // not covering
  EXPECT_THROW(Partition::custom(3, {{0, 1, 2}, {}}), std::invalid_argument);   // empty group
  EXPECT_THROW(Partition::custom(3, {{0, 1, 3}}), std::invalid_argument);       // out of range
  EXPECT_THROW(Partition::custom(2, {{0}, {1}}, {"only-one"}), std::invalid_argument);
}

TEST(Partition, GroupSum) {
  const auto part = Partition::custom(3, {{0, 1}, {2}});
  Vector v(3);
  v << 1, 2, 3;
  EXPECT_EQ(part.group_sum(v), (Vector(2) << 3, 3).finished());
  EXPECT_EQ(Partition::discrete(3).group_sum(v), v);
  EXPECT_EQ(part.group_sum(Vector::Zero(3)), Vector::Zero(2));
  EXPECT_THROW(part.group_sum(Vector::Zero(4)), ShapeError);
}

TEST(Partition, Broadcast) {
  const auto part = Partition::custom(3, {{0, 1}, {2}});
  EXPECT_EQ(part.broadcast((Vector(2) << 3, 3).finished()), Vector::Constant(3, 3.0));
  Vector eta(3);
  eta << 4, -1, 2;
  EXPECT_EQ(Partition::discrete(3).broadcast(eta), eta);
  EXPECT_EQ(Partition::trivial(5).broadcast(Vector::Constant(1, 2.5)), Vector::Constant(5, 2.5));
  EXPECT_THROW(part.broadcast(eta), ShapeError);
}

TEST(Partition, Mask) {
  const auto part = Partition::custom(3, {{0, 1}, {2}});
  Vector v(3);
  v << 1, 2, 3;
  EXPECT_EQ(part.mask(v, 0), (Vector(3) << 1, 2, 0).finished());
  EXPECT_EQ(part.mask(v, 0) + part.mask(v, 1), v);
  EXPECT_EQ(Partition::trivial(3).mask(v, 0), v);
  EXPECT_THROW(part.mask(v, 2), std::out_of_range);
}

TEST(Partition, BroadcastAndGroupSumProperties) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 25; ++trial) {
    const Index P = 1 + static_cast<Index>(rng() % 12);
    const Index S = 1 + static_cast<Index>(rng() % static_cast<std::uint64_t>(P));
    // Random surjective assignment of indices to groups.
    Groups groups(static_cast<std::size_t>(S));
    std::vector<Index> perm(static_cast<std::size_t>(P));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (Index k = 0; k < P; ++k) {
      const Index s = k < S ? k : static_cast<Index>(rng() % static_cast<std::uint64_t>(S));
      groups[static_cast<std::size_t>(s)].push_back(perm[static_cast<std::size_t>(k)]);
    }
    const auto part = Partition::custom(P, groups);
    const Vector eta = oracle::random_vector(S, rng);
    const Vector v = oracle::random_vector(P, rng);

    const Vector round = part.group_sum(part.broadcast(eta));
    for (Index s = 0; s < S; ++s) {
      EXPECT_NEAR(round[s], static_cast<double>(part.group(s).size()) * eta[s], 1e-12 * (1 + std::abs(round[s])));
    }
    EXPECT_NEAR(part.broadcast(eta).dot(v), eta.dot(part.group_sum(v)), 1e-12 * (1 + v.norm() * eta.norm()));

    Vector total = Vector::Zero(P);
    for (Index s = 0; s < S; ++s) total += part.mask(v, s);
    EXPECT_EQ(total, v);
  }
}

TEST(Partition, JsonUsesOneBasedIndices) {
  const auto part = Partition::custom(3, {{0, 2}, {1}}, {"a", "b"});
  const auto j = part.to_json();
  EXPECT_EQ(j.at("kind"), "custom");
  EXPECT_EQ(j.at("groups"), nlohmann::json::parse("[[1,3],[2]]"));
  EXPECT_EQ(j.at("labels"), nlohmann::json::parse(R"(["a","b"])"));
  const auto back = Partition::from_json(j, 3);
  EXPECT_EQ(back.groups(), part.groups());
  EXPECT_EQ(back.labels(), part.labels());
  EXPECT_THROW(Partition::from_json(nlohmann::json::parse(R"({"groups":[[1],[1,2]]})"), 2), std::invalid_argument);
}

}  // namespace
}  // namespace gnewton
