#include "gnewton/summaries.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <random>

#include <fmt/format.h>

namespace gnewton {

namespace {

using Multiset = std::vector<Index>;

// Calls visit on every non-decreasing sequence of length len over [0, S).
template <typename Visit>
void for_each_multiset(Index S, int len, Visit&& visit) {
  Multiset m(static_cast<std::size_t>(len), 0);
  while (true) {
    visit(static_cast<const Multiset&>(m));
    int k = len - 1;
    while (k >= 0 && m[static_cast<std::size_t>(k)] == S - 1) --k;
    if (k < 0) return;
    const Index next = m[static_cast<std::size_t>(k)] + 1;
    for (int j = k; j < len; ++j) m[static_cast<std::size_t>(j)] = next;
  }
}

double group_dot(const Partition& part, Index s, const Vector& u, const Vector& w) {
  double acc = 0.0;
  for (Index p : part.group(s)) acc += u[p] * w[p];
  return acc;
}

// For every multiset m of size order-1, the fibre s -> D(s, m...). One
// gradient pass per multiset.
std::map<Multiset, Vector> summary_fibres(const Expr& f, const Vector& theta, const Vector& u,
                                          const Partition& part, int order, PassCounter* counter) {
  const Index S = part.group_count();
  std::vector<Vector> masks;
  masks.reserve(static_cast<std::size_t>(S));
  for (Index s = 0; s < S; ++s) masks.push_back(part.mask(u, s));

  // Nested directional derivatives keyed by the multiset of directions
  // already applied, so shared suffixes are built once.
  std::map<Multiset, Expr> nested{{Multiset{}, f}};
  auto nested_for = [&](const Multiset& m) {
    for (std::size_t len = 1; len <= m.size(); ++len) {
      const Multiset suffix(m.end() - static_cast<std::ptrdiff_t>(len), m.end());
      if (nested.contains(suffix)) continue;
      const Multiset rest(suffix.begin() + 1, suffix.end());
      nested.emplace(suffix, directional_derivative(nested.at(rest), masks[static_cast<std::size_t>(suffix[0])]));
    }
    return nested.at(m);
  };

  std::map<Multiset, Vector> fibres;
  for_each_multiset(S, order - 1, [&](const Multiset& m) {
    const Vector w = gradient(nested_for(m), theta, counter);
    Vector fibre(S);
    for (Index s = 0; s < S; ++s) fibre[s] = group_dot(part, s, u, w);
    fibres.emplace(m, std::move(fibre));
  });
  return fibres;
}

void check_direction(const Vector& theta, const Vector& u) {
  if (u.size() != theta.size()) {
    throw ShapeError(fmt::format("direction of length {} for {} parameters", u.size(), theta.size()));
  }
}

}  // namespace

std::uint64_t fingerprint(const Vector& v) {
  std::uint64_t h = 1469598103934665603ULL;
  for (Index i = 0; i < v.size(); ++i) {
    unsigned char bytes[sizeof(double)];
    const double x = v[i];
    std::memcpy(bytes, &x, sizeof(double));
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 1099511628211ULL;
    }
  }
  return h;
}

SummaryTensor::SummaryTensor(int order, Index size, std::vector<double> entries, std::uint64_t direction_fingerprint)
    : order_(order), size_(size), entries_(std::move(entries)), direction_fingerprint_(direction_fingerprint) {
  const double expected = std::pow(static_cast<double>(size), order);
  if (order < 1 || size < 1 || static_cast<double>(entries_.size()) != expected) {
    throw ShapeError(fmt::format("summary tensor of order {} and size {} cannot hold {} entries", order, size,
                                 entries_.size()));
  }
}

double SummaryTensor::at(std::span<const Index> index) const {
  if (static_cast<int>(index.size()) != order_) throw ShapeError("multi-index length differs from the order");
  std::size_t flat = 0;
  for (Index s : index) {
    if (s < 0 || s >= size_) throw std::out_of_range("summary tensor index out of range");
    flat = flat * static_cast<std::size_t>(size_) + static_cast<std::size_t>(s);
  }
  return entries_[flat];
}

double SummaryTensor::total() const {
  double acc = 0.0;
  for (double e : entries_) acc += e;
  return acc;
}

Matrix SummaryTensor::as_matrix() const {
  if (order_ != 2) throw ShapeError("as_matrix needs an order-2 tensor");
  Matrix m(size_, size_);
  for (Index i = 0; i < size_; ++i)
    for (Index j = 0; j < size_; ++j) m(i, j) = entries_[static_cast<std::size_t>(i * size_ + j)];
  return m;
}

nlohmann::json SummaryTensor::to_json() const {
  return {{"order", order_},
          {"size", size_},
          {"entries", entries_},
          {"direction_fingerprint", fmt::format("{:016x}", direction_fingerprint_)}};
}

nlohmann::json PseudoSystem::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (Index i = 0; i < hbar.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(hbar.cols()));
    for (Index j = 0; j < hbar.cols(); ++j) row[static_cast<std::size_t>(j)] = hbar(i, j);
    rows.push_back(std::move(row));
  }
  return {{"hbar", std::move(rows)},
          {"gbar", std::vector<double>(gbar.data(), gbar.data() + gbar.size())},
          {"labels", labels},
          {"point_fingerprint", fmt::format("{:016x}", point_fingerprint)}};
}

PseudoSystem PseudoSystem::from_json(const nlohmann::json& j) {
  PseudoSystem sys;
  const auto& rows = j.at("hbar");
  const Index S = static_cast<Index>(rows.size());
  sys.hbar.resize(S, S);
  for (Index i = 0; i < S; ++i) {
    const auto& row = rows.at(static_cast<std::size_t>(i));
    if (static_cast<Index>(row.size()) != S) throw ShapeError("hbar must be square");
    for (Index k = 0; k < S; ++k) sys.hbar(i, k) = row.at(static_cast<std::size_t>(k)).get<double>();
  }
  const auto gbar = j.at("gbar").get<std::vector<double>>();
  if (static_cast<Index>(gbar.size()) != S) throw ShapeError("gbar length differs from hbar size");
  sys.gbar = Eigen::Map<const Vector>(gbar.data(), S);
  sys.labels = j.value("labels", std::vector<std::string>{});
  if (j.contains("point_fingerprint")) {
    sys.point_fingerprint = std::stoull(j.at("point_fingerprint").get<std::string>(), nullptr, 16);
  }
  return sys;
}

double taylor_term(const Expr& f, const Vector& theta, const Vector& u, int order, PassCounter* counter) {
  if (order < 1) throw std::invalid_argument("taylor_term needs order >= 1; use evaluate for order 0");
  check_direction(theta, u);
  Expr nested = f;
  for (int k = 1; k < order; ++k) nested = directional_derivative(nested, u);
  return gradient(nested, theta, counter).dot(u);
}

SummaryTensor summary_tensor(const Expr& f, const Vector& theta, const Vector& u, const Partition& part, int order,
                             const SummaryOptions& options, PassCounter* counter) {
  if (order < 1) throw std::invalid_argument("summary_tensor needs order >= 1");
  check_direction(theta, u);
  if (part.param_count() != theta.size()) throw ShapeError("partition does not match the parameter count");
  const Index S = part.group_count();
  const double entries = std::pow(static_cast<double>(S), order);
  if (entries > options.max_entries) {
    throw BudgetError(fmt::format("order-{} summary over {} groups needs {:g} entries (budget {:g}); "
                                  "use a coarser partition",
                                  order, S, entries, options.max_entries));
  }

  const auto fibres = summary_fibres(f, theta, u, part, order, counter);

  std::vector<double> out(static_cast<std::size_t>(entries));
  std::vector<Index> index(static_cast<std::size_t>(order), 0);
  for (std::size_t flat = 0; flat < out.size(); ++flat) {
    std::size_t rem = flat;
    for (int k = order - 1; k >= 0; --k) {
      index[static_cast<std::size_t>(k)] = static_cast<Index>(rem % static_cast<std::size_t>(S));
      rem /= static_cast<std::size_t>(S);
    }
    Multiset sorted = index;
    std::sort(sorted.begin(), sorted.end());
    const Multiset rest(sorted.begin() + 1, sorted.end());
    out[flat] = fibres.at(rest)[sorted.front()];
  }
  return SummaryTensor(order, S, std::move(out), fingerprint(u));
}

Vector pseudo_gradient(const Vector& g, const Partition& part) { return part.group_sum(g.cwiseProduct(g)); }

Vector pseudo_gradient(const Expr& f, const Vector& theta, const Partition& part, PassCounter* counter) {
  return pseudo_gradient(gradient(f, theta, counter), part);
}

PseudoSystem pseudo_hessian(const Expr& f, const Vector& theta, const Partition& part, PassCounter* counter) {
  return pseudo_hessian(f, theta, gradient(f, theta, counter), part, counter);
}

PseudoSystem pseudo_hessian(const Expr& f, const Vector& theta, const Vector& g, const Partition& part,
                            PassCounter* counter) {
  check_direction(theta, g);
  if (part.param_count() != theta.size()) throw ShapeError("partition does not match the parameter count");
  const Index S = part.group_count();
  const auto fibres = summary_fibres(f, theta, g, part, 2, counter);

  PseudoSystem sys;
  sys.hbar.resize(S, S);
  for (Index b = 0; b < S; ++b) {
    const Vector& fibre = fibres.at(Multiset{b});
    for (Index a = 0; a <= b; ++a) sys.hbar(a, b) = sys.hbar(b, a) = fibre[a];
  }
  sys.gbar = pseudo_gradient(g, part);
  sys.labels = part.labels();
  sys.point_fingerprint = fingerprint(theta);
  return sys;
}

RegularizationVector regularization_vector(const Expr& f, const Vector& theta, const Partition& part,
                                           const RegularizationOptions& options, PassCounter* counter) {
  const Index P = theta.size();
  if (part.param_count() != P) throw ShapeError("partition does not match the parameter count");
  const Expr grad = gradient_expr(f, P);
  std::map<Index, Expr> hessian_rows;
  auto hessian_row = [&](Index i) -> const Expr& {
    auto it = hessian_rows.find(i);
    if (it == hessian_rows.end()) it = hessian_rows.emplace(i, gradient_expr(grad[i], P)).first;
    return it->second;
  };
  // Third derivatives d^3 L / d_i d_j d_k for every k, as one gradient pass.
  auto third_fibre = [&](Index i, Index j) { return gradient(hessian_row(i)[j], theta, counter); };

  RegularizationVector out;
  out.r = Vector::Zero(part.group_count());
  std::mt19937_64 rng(options.seed);

  for (Index s = 0; s < part.group_count(); ++s) {
    const auto& members = part.group(s);
    const Index n = static_cast<Index>(members.size());
    double largest = 0.0;
    if (options.mode == RegularizationMode::kExact) {
      if (n > options.max_exact_group) {
        throw BudgetError(fmt::format("group {} has {} parameters, above the exact-mode limit {}; "
                                      "use sampled mode",
                                      s + 1, n, options.max_exact_group));
      }
      for (Index a = 0; a < n; ++a) {
        for (Index b = a; b < n; ++b) {
          const Vector w = third_fibre(members[static_cast<std::size_t>(a)], members[static_cast<std::size_t>(b)]);
          for (Index c = b; c < n; ++c) largest = std::max(largest, std::abs(w[members[static_cast<std::size_t>(c)]]));
        }
      }
    } else {
      std::uniform_int_distribution<Index> pick(0, n - 1);
      std::map<std::pair<Index, Index>, Vector> cache;
      for (Index k = 0; k < options.samples; ++k) {
        const Index i = members[static_cast<std::size_t>(pick(rng))];
        const Index j = members[static_cast<std::size_t>(pick(rng))];
        const Index l = members[static_cast<std::size_t>(pick(rng))];
        auto it = cache.find({i, j});
        if (it == cache.end()) it = cache.emplace(std::pair{i, j}, third_fibre(i, j)).first;
        largest = std::max(largest, std::abs(it->second[l]));
      }
      out.lower_bound = true;
      out.samples_per_group = options.samples;
    }
    out.r[s] = std::cbrt(largest * largest);
  }
  return out;
}

}  // namespace gnewton
