// Partitions of the parameter indices {0..P-1} into S disjoint, non-empty
// groups, and the linear maps induced by the 0/1 partition matrix.
#pragma once

#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "gnewton/autodiff.hpp"

namespace gnewton {

enum class PartitionKind { kTrivial, kDiscrete, kCanonical, kCustom };

std::string_view to_string(PartitionKind kind);
PartitionKind partition_kind_from_string(std::string_view name);

class Partition {
 public:
  /// One group holding every index.
  static Partition trivial(Index param_count);
  /// P singleton groups in index order.
  static Partition discrete(Index param_count);
  /// One group per tensor, in declaration order. Labels default to tensor
  /// names when given, "tensor<k>" otherwise.
  static Partition canonical(const std::vector<TensorShape>& shapes, std::vector<std::string> names = {});
  static Partition canonical(const ParamVector& theta) { return canonical(theta.shapes(), theta.names()); }
  /// Arbitrary disjoint cover of {0..P-1}; validated.
  static Partition custom(Index param_count, std::vector<std::vector<Index>> groups,
                          std::vector<std::string> labels = {});

  PartitionKind kind() const { return kind_; }
  Index group_count() const { return static_cast<Index>(groups_.size()); }
  Index param_count() const { return static_cast<Index>(owner_.size()); }
  const std::vector<Index>& group(Index s) const { return groups_.at(static_cast<std::size_t>(s)); }
  const std::vector<std::vector<Index>>& groups() const { return groups_; }
  const std::vector<std::string>& labels() const { return labels_; }
  /// Group index of parameter p.
  Index owner(Index p) const { return owner_.at(static_cast<std::size_t>(p)); }

  /// out_s = sum of v_p over p in group s.
  Vector group_sum(const Vector& v) const;
  /// out_p = eta_s for p in group s.
  Vector broadcast(const Vector& eta) const;
  /// Copy of v with every entry outside group s set to zero.
  Vector mask(const Vector& v, Index s) const;

  /// {"kind", "groups" (1-based), "labels"}.
  nlohmann::json to_json() const;
  static Partition from_json(const nlohmann::json& j, Index param_count);

 private:
  Partition(PartitionKind kind, Index param_count, std::vector<std::vector<Index>> groups,
            std::vector<std::string> labels);

  PartitionKind kind_ = PartitionKind::kCustom;
  std::vector<std::vector<Index>> groups_;
  std::vector<std::string> labels_;
  std::vector<Index> owner_;
};

}  // namespace gnewton
