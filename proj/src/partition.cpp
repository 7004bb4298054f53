#include "gnewton/partition.hpp"

#include <stdexcept>

#include <fmt/format.h>

namespace gnewton {

std::string_view to_string(PartitionKind kind) {
  switch (kind) {
    case PartitionKind::kTrivial:
      return "trivial";
    case PartitionKind::kDiscrete:
      return "discrete";
    case PartitionKind::kCanonical:
      return "canonical";
    case PartitionKind::kCustom:
      return "custom";
  }
  return "custom";
}

PartitionKind partition_kind_from_string(std::string_view name) {
  if (name == "trivial") return PartitionKind::kTrivial;
  if (name == "discrete") return PartitionKind::kDiscrete;
  if (name == "canonical") return PartitionKind::kCanonical;
  if (name == "custom") return PartitionKind::kCustom;
  throw std::invalid_argument(fmt::format("unknown partition kind '{}'", name));
}

Partition::Partition(PartitionKind kind, Index param_count, std::vector<std::vector<Index>> groups,
                     std::vector<std::string> labels)
    : kind_(kind), groups_(std::move(groups)), labels_(std::move(labels)) {
  if (param_count < 1) throw std::invalid_argument("partition needs at least one parameter");
  if (groups_.empty()) throw std::invalid_argument("partition needs at least one group");
  if (!labels_.empty() && labels_.size() != groups_.size()) {
    throw std::invalid_argument(fmt::format("{} labels for {} groups", labels_.size(), groups_.size()));
  }
  owner_.assign(static_cast<std::size_t>(param_count), -1);
  for (std::size_t s = 0; s < groups_.size(); ++s) {
    if (groups_[s].empty()) throw std::invalid_argument(fmt::format("group {} is empty", s + 1));
    for (Index p : groups_[s]) {
      if (p < 0 || p >= param_count) {
        throw std::invalid_argument(fmt::format("index {} outside 1..{}", p + 1, param_count));
      }
      auto& o = owner_[static_cast<std::size_t>(p)];
      if (o != -1) throw std::invalid_argument(fmt::format("index {} appears in groups {} and {}", p + 1, o + 1, s + 1));
      o = static_cast<Index>(s);
    }
  }
  for (std::size_t p = 0; p < owner_.size(); ++p) {
    if (owner_[p] == -1) throw std::invalid_argument(fmt::format("index {} is not covered", p + 1));
  }
}

Partition Partition::trivial(Index param_count) {
  if (param_count < 1) throw std::invalid_argument("trivial partition of zero parameters");
  std::vector<Index> all(static_cast<std::size_t>(param_count));
  for (Index p = 0; p < param_count; ++p) all[static_cast<std::size_t>(p)] = p;
  return Partition(PartitionKind::kTrivial, param_count, {std::move(all)}, {"all"});
}

Partition Partition::discrete(Index param_count) {
  if (param_count < 1) throw std::invalid_argument("discrete partition of zero parameters");
  std::vector<std::vector<Index>> groups;
  std::vector<std::string> labels;
  groups.reserve(static_cast<std::size_t>(param_count));
  for (Index p = 0; p < param_count; ++p) {
    groups.push_back({p});
    labels.push_back(fmt::format("p{}", p + 1));
  }
  return Partition(PartitionKind::kDiscrete, param_count, std::move(groups), std::move(labels));
}

Partition Partition::canonical(const std::vector<TensorShape>& shapes, std::vector<std::string> names) {
  if (shapes.empty()) throw std::invalid_argument("canonical partition of an empty shape list");
  std::vector<std::vector<Index>> groups;
  Index next = 0;
  for (const auto& shape : shapes) {
    const Index n = element_count(shape);
    std::vector<Index> g(static_cast<std::size_t>(n));
    for (Index k = 0; k < n; ++k) g[static_cast<std::size_t>(k)] = next + k;
    next += n;
    groups.push_back(std::move(g));
  }
  if (names.empty()) {
    for (std::size_t k = 0; k < shapes.size(); ++k) names.push_back(fmt::format("tensor{}", k + 1));
  }
  return Partition(PartitionKind::kCanonical, next, std::move(groups), std::move(names));
}

Partition Partition::custom(Index param_count, std::vector<std::vector<Index>> groups,
                            std::vector<std::string> labels) {
  if (labels.empty()) {
    for (std::size_t k = 0; k < groups.size(); ++k) labels.push_back(fmt::format("group{}", k + 1));
  }
  return Partition(PartitionKind::kCustom, param_count, std::move(groups), std::move(labels));
}

Vector Partition::group_sum(const Vector& v) const {
  if (v.size() != param_count()) {
    throw ShapeError(fmt::format("group_sum: vector of length {} for {} parameters", v.size(), param_count()));
  }
  Vector out = Vector::Zero(group_count());
  for (Index s = 0; s < group_count(); ++s) {
    for (Index p : group(s)) out[s] += v[p];
  }
  return out;
}

Vector Partition::broadcast(const Vector& eta) const {
  if (eta.size() != group_count()) {
    throw ShapeError(fmt::format("broadcast: vector of length {} for {} groups", eta.size(), group_count()));
  }
  Vector out(param_count());
  for (Index p = 0; p < param_count(); ++p) out[p] = eta[owner(p)];
  return out;
}

Vector Partition::mask(const Vector& v, Index s) const {
  if (s < 0 || s >= group_count()) {
    throw std::out_of_range(fmt::format("group {} outside 1..{}", s + 1, group_count()));
  }
  if (v.size() != param_count()) throw ShapeError("mask: length mismatch");
  Vector out = Vector::Zero(v.size());
  for (Index p : group(s)) out[p] = v[p];
  return out;
}

nlohmann::json Partition::to_json() const {
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& g : groups_) {
    nlohmann::json ids = nlohmann::json::array();
    for (Index p : g) ids.push_back(p + 1);
    groups.push_back(std::move(ids));
  }
  return {{"kind", std::string(to_string(kind_))}, {"groups", std::move(groups)}, {"labels", labels_}};
}

Partition Partition::from_json(const nlohmann::json& j, Index param_count) {
  const auto kind = partition_kind_from_string(j.value("kind", std::string("custom")));
  std::vector<std::vector<Index>> groups;
  for (const auto& g : j.at("groups")) {
    std::vector<Index> ids;
    for (const auto& id : g) ids.push_back(id.get<Index>() - 1);
    groups.push_back(std::move(ids));
  }
  std::vector<std::string> labels = j.value("labels", std::vector<std::string>{});
  if (labels.empty()) {
    for (std::size_t k = 0; k < groups.size(); ++k) labels.push_back(fmt::format("group{}", k + 1));
  }
  return Partition(kind, param_count, std::move(groups), std::move(labels));
}

}  // namespace gnewton
