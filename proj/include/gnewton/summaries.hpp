// Grouped higher-order derivative summaries.
//
// For a direction u and a partition of the parameters into S groups, the
// order-d summary tensor has entries
//
//   D(s_1, ..., s_d) = d^d L [mask(u, s_1), ..., mask(u, s_d)],
//
// and its entries sum to the scalar Taylor term d^d L [u, ..., u]. With
// u = grad L, the order-2 tensor is the pseudo-Hessian and the order-1 tensor
// the pseudo-gradient that drive the partitioned Newton step.
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gnewton/autodiff.hpp"
#include "gnewton/partition.hpp"

namespace gnewton {

/// Raised when a summary tensor would exceed the entry budget.
class BudgetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// FNV-1a over the raw bytes of a vector; used as a provenance fingerprint.
std::uint64_t fingerprint(const Vector& v);

class SummaryTensor {
 public:
  SummaryTensor(int order, Index size, std::vector<double> entries, std::uint64_t direction_fingerprint);

  int order() const { return order_; }
  Index size() const { return size_; }
  const std::vector<double>& entries() const { return entries_; }
  std::uint64_t direction_fingerprint() const { return direction_fingerprint_; }

  /// Entry at a multi-index of length order().
  double at(std::span<const Index> index) const;
  /// Sum of all entries (the full contraction with the all-ones vector).
  double total() const;
  /// Order-2 tensors as an S x S matrix.
  Matrix as_matrix() const;

  nlohmann::json to_json() const;

 private:
  int order_;
  Index size_;
  std::vector<double> entries_;
  std::uint64_t direction_fingerprint_;
};

struct PseudoSystem {
  Matrix hbar;  // S x S, symmetric
  Vector gbar;  // S, nonnegative
  std::vector<std::string> labels;
  std::uint64_t point_fingerprint = 0;

  nlohmann::json to_json() const;
  static PseudoSystem from_json(const nlohmann::json& j);
};

struct SummaryOptions {
  /// Upper bound on S^d.
  double max_entries = 1e6;
};

/// d^d L(theta)[u, ..., u] by d-1 nested directional derivatives followed by
/// one gradient. Costs one gradient-equivalent pass.
double taylor_term(const Expr& f, const Vector& theta, const Vector& u, int order,
                   PassCounter* counter = nullptr);

/// Order-d summary tensor. Only index multisets are computed: one gradient
/// pass per multiset of size d-1 yields a whole fibre over s_1, and the
/// remaining entries are filled by symmetry.
SummaryTensor summary_tensor(const Expr& f, const Vector& theta, const Vector& u, const Partition& part, int order,
                             const SummaryOptions& options = {}, PassCounter* counter = nullptr);

/// gbar_s = sum of g_p^2 over group s.
Vector pseudo_gradient(const Vector& g, const Partition& part);
Vector pseudo_gradient(const Expr& f, const Vector& theta, const Partition& part, PassCounter* counter = nullptr);

/// hbar = I_{S:P} G H G I_{P:S} from S Hessian-vector products, never forming
/// H. The overload without g spends one extra pass on the gradient.
PseudoSystem pseudo_hessian(const Expr& f, const Vector& theta, const Partition& part,
                            PassCounter* counter = nullptr);
PseudoSystem pseudo_hessian(const Expr& f, const Vector& theta, const Vector& g, const Partition& part,
                            PassCounter* counter = nullptr);

enum class RegularizationMode { kExact, kSampled };

struct RegularizationOptions {
  RegularizationMode mode = RegularizationMode::kExact;
  /// Largest group enumerated in exact mode.
  Index max_exact_group = 64;
  /// Triples drawn per group in sampled mode.
  Index samples = 256;
  std::uint64_t seed = 0;
};

struct RegularizationVector {
  Vector r;
  /// Sampled mode under-estimates the maximum.
  bool lower_bound = false;
  Index samples_per_group = 0;
};

/// r_s = (max |d^3 L / d theta_i d theta_j d theta_k| over i, j, k in group s)^(2/3).
RegularizationVector regularization_vector(const Expr& f, const Vector& theta, const Partition& part,
                                           const RegularizationOptions& options = {},
                                           PassCounter* counter = nullptr);

}  // namespace gnewton
