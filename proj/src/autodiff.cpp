#include "gnewton/autodiff.hpp"

#include <cmath>
#include <mutex>
#include <numeric>
#include <unordered_map>
#include <utility>

#include <fmt/format.h>

namespace gnewton {

namespace detail {

enum class Op : std::uint8_t {
  kParam,
  kConst,
  kSlice,
  kEmbed,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kNeg,
  kScale,
  kMatMul,
  kTranspose,
  kExp,
  kLog,
  kTanh,
  kSigmoid,
  kSoftplus,
  kPow,
  kSum,
  kFill,
  kSumRows,
  kSumCols,
  kBroadcastRows,
  kBroadcastCols,
};

using NodePtr = std::shared_ptr<const Node>;

struct Node {
  Op op = Op::kConst;
  Index rows = 0;
  Index cols = 0;
  Index params = 0;
  NodePtr a;
  NodePtr b;
  Matrix value;  // kConst
  bool zero = false;
  double factor = 0.0;  // kScale
  Index offset = 0;     // kSlice, kEmbed
  int exponent = 0;     // kPow

  mutable std::once_flag grad_once;
  mutable NodePtr grad;
};

}  // namespace detail

using detail::Node;
using detail::NodePtr;
using detail::Op;

struct ExprAccess {
  static Expr wrap(NodePtr n) { return Expr(std::move(n)); }
  static const NodePtr& ptr(const Expr& e) { return e.node_; }
};

namespace {

Expr wrap(NodePtr n) { return ExprAccess::wrap(std::move(n)); }
const NodePtr& ptr(const Expr& e) {
  if (!e.valid()) throw std::invalid_argument("use of an empty Expr");
  return ExprAccess::ptr(e);
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

// Row-major flat access into a column-major matrix.
inline double& flat(Matrix& m, Index k) { return m(k / m.cols(), k % m.cols()); }
inline double flat(const Matrix& m, Index k) { return m(k / m.cols(), k % m.cols()); }

Matrix compute(const Node& n, const Matrix* a, const Matrix* b, const Vector* theta) {
  switch (n.op) {
    case Op::kParam:
      return *theta;
    case Op::kConst:
      return n.value;
    case Op::kSlice: {
      Matrix out(n.rows, n.cols);
      for (Index k = 0; k < n.rows * n.cols; ++k) flat(out, k) = flat(*a, n.offset + k);
      return out;
    }
    case Op::kEmbed: {
      Matrix out = Matrix::Zero(n.rows, n.cols);
      for (Index k = 0; k < a->size(); ++k) flat(out, n.offset + k) = flat(*a, k);
      return out;
    }
    case Op::kAdd:
      return *a + *b;
    case Op::kSub:
      return *a - *b;
    case Op::kMul:
      return a->cwiseProduct(*b);
    case Op::kDiv:
      for (Index k = 0; k < b->size(); ++k) {
        if (b->data()[k] == 0.0) throw DomainError("div", fmt::format("zero denominator at element {}", k));
      }
      return a->cwiseQuotient(*b);
    case Op::kNeg:
      return -*a;
    case Op::kScale:
      return n.factor * *a;
    case Op::kMatMul:
      return *a * *b;
    case Op::kTranspose:
      return a->transpose();
    case Op::kExp:
      return a->array().exp().matrix();
    case Op::kLog:
      for (Index k = 0; k < a->size(); ++k) {
        const double v = a->data()[k];
        if (!(v > 0.0)) throw DomainError("log", fmt::format("non-positive argument {} at element {}", v, k));
      }
      return a->array().log().matrix();
    case Op::kTanh:
      return a->array().tanh().matrix();
    case Op::kSigmoid:
      return a->unaryExpr(&stable_sigmoid);
    case Op::kSoftplus:
      return a->unaryExpr(&stable_softplus);
    case Op::kPow: {
      const int e = n.exponent;
      return a->unaryExpr([e](double v) {
        double r = 1.0;
        for (int i = 0; i < e; ++i) r *= v;
        return r;
      });
    }
    case Op::kSum: {
      Matrix out(1, 1);
      out(0, 0) = a->sum();
      return out;
    }
    case Op::kFill:
      return Matrix::Constant(n.rows, n.cols, (*a)(0, 0));
    case Op::kSumRows:
      return a->colwise().sum();
    case Op::kSumCols:
      return a->rowwise().sum();
    case Op::kBroadcastRows:
      return a->replicate(n.rows, 1);
    case Op::kBroadcastCols:
      return a->replicate(1, n.cols);
  }
  throw std::logic_error("unknown op");
}

Index merge_params(const Node* a, const Node* b) {
  const Index pa = a ? a->params : 0;
  const Index pb = b ? b->params : 0;
  if (pa != 0 && pb != 0 && pa != pb) {
    throw ShapeError(fmt::format("expressions over different parameter counts ({} vs {})", pa, pb));
  }
  return pa != 0 ? pa : pb;
}

bool is_zero(const Expr& e) { return e.node()->op == Op::kConst && e.node()->zero; }

Expr zeros(Index rows, Index cols) { return Expr::constant(Matrix::Zero(rows, cols)); }

struct Attrs {
  Op op = Op::kConst;
  Index rows = 0;
  Index cols = 0;
  double factor = 0.0;
  Index offset = 0;
  int exponent = 0;
};

// Creates a node; folds it to a constant when no input depends on theta.
Expr make(const Attrs& proto, NodePtr a, NodePtr b = nullptr) {
  auto node = std::make_shared<Node>();
  node->op = proto.op;
  node->rows = proto.rows;
  node->cols = proto.cols;
  node->factor = proto.factor;
  node->offset = proto.offset;
  node->exponent = proto.exponent;
  node->params = merge_params(a.get(), b.get());
  if (node->params == 0) {
    const Matrix* av = a ? &a->value : nullptr;
    const Matrix* bv = b ? &b->value : nullptr;
    return Expr::constant(compute(*node, av, bv, nullptr));
  }
  node->a = std::move(a);
  node->b = std::move(b);
  return wrap(std::move(node));
}

Attrs proto(Op op, Index rows, Index cols) {
  Attrs n;
  n.op = op;
  n.rows = rows;
  n.cols = cols;
  return n;
}

void require_same_shape(const Expr& a, const Expr& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(fmt::format("{}: shape mismatch {}x{} vs {}x{}", what, a.rows(), a.cols(), b.rows(),
                                 b.cols()));
  }
}

// Promotes a 1 x 1 operand to the other operand's shape.
std::pair<Expr, Expr> align(const Expr& a, const Expr& b, const char* what) {
  const bool a_scalar = a.rows() == 1 && a.cols() == 1;
  const bool b_scalar = b.rows() == 1 && b.cols() == 1;
  if (a_scalar && !b_scalar) return {fill(a, b.rows(), b.cols()), b};
  if (b_scalar && !a_scalar) return {a, fill(b, a.rows(), a.cols())};
  require_same_shape(a, b, what);
  return {a, b};
}

Expr unary(Op op, const Expr& x) { return make(proto(op, x.rows(), x.cols()), ptr(x)); }

Expr scale(const Expr& x, double c) {
  if (c == 1.0) return x;
  if (c == 0.0 || is_zero(x)) return zeros(x.rows(), x.cols());
  Attrs p = proto(Op::kScale, x.rows(), x.cols());
  p.factor = c;
  return make(p, ptr(x));
}

// Rebuilds a node of the same kind over new inputs.
Expr rebuild(const Node& n, const Expr& a, const Expr& b) {
  switch (n.op) {
    case Op::kParam:
    case Op::kConst:
      throw std::logic_error("rebuild of a leaf");
    case Op::kSlice:
      return a.slice(n.offset, n.rows, n.cols);
    case Op::kEmbed:
      return embed(a, n.offset, n.rows, n.cols);
    case Op::kAdd:
      return a + b;
    case Op::kSub:
      return a - b;
    case Op::kMul:
      return a * b;
    case Op::kDiv:
      return a / b;
    case Op::kNeg:
      return -a;
    case Op::kScale:
      return scale(a, n.factor);
    case Op::kMatMul:
      return matmul(a, b);
    case Op::kTranspose:
      return transpose(a);
    case Op::kExp:
      return exp(a);
    case Op::kLog:
      return log(a);
    case Op::kTanh:
      return tanh(a);
    case Op::kSigmoid:
      return sigmoid(a);
    case Op::kSoftplus:
      return softplus(a);
    case Op::kPow:
      return pow(a, n.exponent);
    case Op::kSum:
      return sum(a);
    case Op::kFill:
      return fill(a, n.rows, n.cols);
    case Op::kSumRows:
      return sum_rows(a);
    case Op::kSumCols:
      return sum_cols(a);
    case Op::kBroadcastRows:
      return broadcast_rows(a, n.rows);
    case Op::kBroadcastCols:
      return broadcast_cols(a, n.cols);
  }
  throw std::logic_error("unknown op");
}

// Post-order over nodes that depend on theta.
std::vector<NodePtr> topological_order(const NodePtr& root) {
  std::vector<NodePtr> order;
  std::unordered_map<const Node*, bool> visited;
  std::vector<std::pair<NodePtr, bool>> stack{{root, false}};
  while (!stack.empty()) {
    auto [n, expanded] = stack.back();
    stack.pop_back();
    if (expanded) {
      order.push_back(n);
      continue;
    }
    if (visited[n.get()]) continue;
    visited[n.get()] = true;
    stack.emplace_back(n, true);
    if (n->b && n->b->params != 0 && !visited[n->b.get()]) stack.emplace_back(n->b, false);
    if (n->a && n->a->params != 0 && !visited[n->a.get()]) stack.emplace_back(n->a, false);
  }
  return order;
}

void accumulate(std::unordered_map<const Node*, Expr>& adjoints, const NodePtr& target, const Expr& contribution) {
  if (target->params == 0 || is_zero(contribution)) return;
  auto [it, inserted] = adjoints.try_emplace(target.get(), contribution);
  if (!inserted) it->second = it->second + contribution;
}

Expr build_gradient(const NodePtr& root, Index param_count) {
  const auto order = topological_order(root);
  std::unordered_map<const Node*, Expr> adjoints;
  adjoints.emplace(root.get(), Expr::scalar(1.0));
  Expr result = zeros(param_count, 1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const NodePtr& n = *it;
    const auto found = adjoints.find(n.get());
    if (found == adjoints.end()) continue;
    const Expr adj = found->second;
    const Expr out = wrap(n);
    const Expr a = n->a ? wrap(n->a) : Expr();
    const Expr b = n->b ? wrap(n->b) : Expr();

    switch (n->op) {
      case Op::kParam:
        result = result + adj;
        break;
      case Op::kConst:
        break;
      case Op::kSlice:
        accumulate(adjoints, n->a, embed(adj, n->offset, a.rows(), a.cols()));
        break;
      case Op::kEmbed:
        accumulate(adjoints, n->a, adj.slice(n->offset, a.rows(), a.cols()));
        break;
      case Op::kAdd:
        accumulate(adjoints, n->a, adj);
        accumulate(adjoints, n->b, adj);
        break;
      case Op::kSub:
        accumulate(adjoints, n->a, adj);
        if (n->b->params != 0) accumulate(adjoints, n->b, -adj);
        break;
      case Op::kMul:
        if (n->a->params != 0) accumulate(adjoints, n->a, adj * b);
        if (n->b->params != 0) accumulate(adjoints, n->b, adj * a);
        break;
      case Op::kDiv:
        if (n->a->params != 0) accumulate(adjoints, n->a, adj / b);
        if (n->b->params != 0) accumulate(adjoints, n->b, -((adj * out) / b));
        break;
      case Op::kNeg:
        accumulate(adjoints, n->a, -adj);
        break;
      case Op::kScale:
        accumulate(adjoints, n->a, scale(adj, n->factor));
        break;
      case Op::kMatMul:
        if (n->a->params != 0) accumulate(adjoints, n->a, matmul(adj, transpose(b)));
        if (n->b->params != 0) accumulate(adjoints, n->b, matmul(transpose(a), adj));
        break;
      case Op::kTranspose:
        accumulate(adjoints, n->a, transpose(adj));
        break;
      case Op::kExp:
        accumulate(adjoints, n->a, adj * out);
        break;
      case Op::kLog:
        // exp(-log a) keeps the log node, so its domain check guards every derivative.
        accumulate(adjoints, n->a, adj * exp(-out));
        break;
      case Op::kTanh:
        accumulate(adjoints, n->a, adj * (1.0 - square(out)));
        break;
      case Op::kSigmoid:
        accumulate(adjoints, n->a, adj * (out * (1.0 - out)));
        break;
      case Op::kSoftplus:
        accumulate(adjoints, n->a, adj * sigmoid(a));
        break;
      case Op::kPow:
        accumulate(adjoints, n->a, adj * scale(pow(a, n->exponent - 1), n->exponent));
        break;
      case Op::kSum:
        accumulate(adjoints, n->a, fill(adj, a.rows(), a.cols()));
        break;
      case Op::kFill:
        accumulate(adjoints, n->a, sum(adj));
        break;
      case Op::kSumRows:
        accumulate(adjoints, n->a, broadcast_rows(adj, a.rows()));
        break;
      case Op::kSumCols:
        accumulate(adjoints, n->a, broadcast_cols(adj, a.cols()));
        break;
      case Op::kBroadcastRows:
        accumulate(adjoints, n->a, sum_rows(adj));
        break;
      case Op::kBroadcastCols:
        accumulate(adjoints, n->a, sum_cols(adj));
        break;
    }
  }
  return result;
}

}  // namespace

Index element_count(const TensorShape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

ParamVector::ParamVector(Vector values, std::vector<TensorShape> shapes, std::vector<std::string> names)
    : values_(std::move(values)), shapes_(std::move(shapes)), names_(std::move(names)) {
  Index total = 0;
  for (const auto& s : shapes_) {
    for (Index d : s) {
      if (d < 1) throw ShapeError("tensor dimensions must be positive");
    }
    total += element_count(s);
  }
  if (total != values_.size()) {
    throw ShapeError(fmt::format("shape list covers {} elements but the vector has {}", total, values_.size()));
  }
  if (!names_.empty() && names_.size() != shapes_.size()) {
    throw ShapeError("tensor names must match the shape list");
  }
}

ParamVector ParamVector::flat(Vector values) {
  const Index n = values.size();
  return ParamVector(std::move(values), {TensorShape{n}});
}

ParamVector ParamVector::with_values(Vector values) const {
  if (values.size() != values_.size()) throw ShapeError("with_values: length mismatch");
  ParamVector out = *this;
  out.values_ = std::move(values);
  return out;
}

PassCount snapshot(const PassCounter* counter) {
  if (counter == nullptr) return {};
  return {counter->forward.load(), counter->backward.load()};
}

Expr Expr::parameters(Index count) {
  if (count < 1) throw ShapeError("parameter count must be positive");
  auto node = std::make_shared<Node>();
  node->op = Op::kParam;
  node->rows = count;
  node->cols = 1;
  node->params = count;
  return Expr(std::move(node));
}

Expr Expr::constant(Matrix value) {
  auto node = std::make_shared<Node>();
  node->op = Op::kConst;
  node->rows = value.rows();
  node->cols = value.cols();
  node->zero = value.isZero(0.0);
  node->value = std::move(value);
  return Expr(std::move(node));
}


Expr Expr::scalar(double value) { return constant(Matrix::Constant(1, 1, value)); }

Index Expr::rows() const { return ptr(*this)->rows; }
Index Expr::cols() const { return ptr(*this)->cols; }
Index Expr::param_count() const { return ptr(*this)->params; }

Expr Expr::slice(Index offset, Index r, Index c) const {
  if (offset < 0 || r < 1 || c < 1 || offset + r * c > rows() * cols()) {
    throw ShapeError(fmt::format("slice [{}, {}) out of range for {} elements", offset, offset + r * c,
                                 rows() * cols()));
  }
  if (offset == 0 && r == rows() && c == cols()) return *this;
  if (is_zero(*this)) return zeros(r, c);
  Attrs p = proto(Op::kSlice, r, c);
  p.offset = offset;
  return make(p, ptr(*this));
}

Expr operator+(const Expr& a0, const Expr& b0) {
  auto [a, b] = align(a0, b0, "add");
  if (is_zero(a)) return b;
  if (is_zero(b)) return a;
  return make(proto(Op::kAdd, a.rows(), a.cols()), ptr(a), ptr(b));
}

Expr operator-(const Expr& a0, const Expr& b0) {
  auto [a, b] = align(a0, b0, "sub");
  if (is_zero(b)) return a;
  if (is_zero(a)) return -b;
  return make(proto(Op::kSub, a.rows(), a.cols()), ptr(a), ptr(b));
}

Expr operator*(const Expr& a0, const Expr& b0) {
  auto [a, b] = align(a0, b0, "mul");
  if (is_zero(a) || is_zero(b)) return zeros(a.rows(), a.cols());
  return make(proto(Op::kMul, a.rows(), a.cols()), ptr(a), ptr(b));
}

Expr operator/(const Expr& a0, const Expr& b0) {
  auto [a, b] = align(a0, b0, "div");
  if (is_zero(a) && !b.is_constant()) return zeros(a.rows(), a.cols());
  return make(proto(Op::kDiv, a.rows(), a.cols()), ptr(a), ptr(b));
}

Expr operator-(const Expr& a) {
  if (is_zero(a)) return a;
  return unary(Op::kNeg, a);
}

Expr operator+(const Expr& a, double b) { return b == 0.0 ? a : a + Expr::scalar(b); }
Expr operator+(double a, const Expr& b) { return b + a; }
Expr operator-(const Expr& a, double b) { return b == 0.0 ? a : a - Expr::scalar(b); }
Expr operator-(double a, const Expr& b) { return Expr::scalar(a) - b; }
Expr operator*(const Expr& a, double b) { return scale(a, b); }
Expr operator*(double a, const Expr& b) { return scale(b, a); }
Expr operator/(const Expr& a, double b) {
  if (b == 0.0) throw DomainError("div", "division by the constant zero");
  return scale(a, 1.0 / b);
}
Expr operator/(double a, const Expr& b) { return Expr::scalar(a) / b; }

Expr exp(const Expr& x) { return unary(Op::kExp, x); }
Expr log(const Expr& x) { return unary(Op::kLog, x); }
Expr tanh(const Expr& x) { return unary(Op::kTanh, x); }
Expr sigmoid(const Expr& x) { return unary(Op::kSigmoid, x); }
Expr softplus(const Expr& x) { return unary(Op::kSoftplus, x); }

Expr pow(const Expr& x, int n) {
  if (n < 0) throw std::invalid_argument("pow: negative exponents are not supported");
  if (n == 0) return Expr::constant(Matrix::Ones(x.rows(), x.cols()));
  if (n == 1) return x;
  if (is_zero(x)) return x;
  Attrs p = proto(Op::kPow, x.rows(), x.cols());
  p.exponent = n;
  return make(p, ptr(x));
}

Expr square(const Expr& x) { return pow(x, 2); }

Expr matmul(const Expr& a, const Expr& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError(fmt::format("matmul: {}x{} times {}x{}", a.rows(), a.cols(), b.rows(), b.cols()));
  }
  if (is_zero(a) || is_zero(b)) return zeros(a.rows(), b.cols());
  return make(proto(Op::kMatMul, a.rows(), b.cols()), ptr(a), ptr(b));
}

Expr transpose(const Expr& x) {
  if (is_zero(x)) return zeros(x.cols(), x.rows());
  return make(proto(Op::kTranspose, x.cols(), x.rows()), ptr(x));
}

Expr sum(const Expr& x) {
  if (is_zero(x)) return zeros(1, 1);
  if (x.rows() == 1 && x.cols() == 1) return x;
  return make(proto(Op::kSum, 1, 1), ptr(x));
}

Expr mean(const Expr& x) { return scale(sum(x), 1.0 / static_cast<double>(x.rows() * x.cols())); }

Expr dot(const Expr& a, const Expr& b) {
  require_same_shape(a, b, "dot");
  return sum(a * b);
}

Expr sum_rows(const Expr& x) {
  if (is_zero(x)) return zeros(1, x.cols());
  if (x.rows() == 1) return x;
  return make(proto(Op::kSumRows, 1, x.cols()), ptr(x));
}

Expr sum_cols(const Expr& x) {
  if (is_zero(x)) return zeros(x.rows(), 1);
  if (x.cols() == 1) return x;
  return make(proto(Op::kSumCols, x.rows(), 1), ptr(x));
}

Expr broadcast_rows(const Expr& row, Index r) {
  if (row.rows() != 1) throw ShapeError("broadcast_rows expects a single row");
  if (r == 1) return row;
  if (is_zero(row)) return zeros(r, row.cols());
  return make(proto(Op::kBroadcastRows, r, row.cols()), ptr(row));
}

Expr broadcast_cols(const Expr& col, Index c) {
  if (col.cols() != 1) throw ShapeError("broadcast_cols expects a single column");
  if (c == 1) return col;
  if (is_zero(col)) return zeros(col.rows(), c);
  return make(proto(Op::kBroadcastCols, col.rows(), c), ptr(col));
}

Expr fill(const Expr& scalar, Index rows, Index cols) {
  if (scalar.rows() != 1 || scalar.cols() != 1) throw ShapeError("fill expects a 1x1 expression");
  if (rows == 1 && cols == 1) return scalar;
  if (is_zero(scalar)) return zeros(rows, cols);
  return make(proto(Op::kFill, rows, cols), ptr(scalar));
}

Expr embed(const Expr& x, Index offset, Index rows, Index cols) {
  if (offset < 0 || offset + x.rows() * x.cols() > rows * cols) {
    throw ShapeError("embed: source does not fit in the target");
  }
  if (offset == 0 && rows == x.rows() && cols == x.cols()) return x;
  if (is_zero(x)) return zeros(rows, cols);
  Attrs p = proto(Op::kEmbed, rows, cols);
  p.offset = offset;
  return make(p, ptr(x));
}

Expr compose(const Expr& f, const Expr& inner) {
  if (f.is_constant()) return f;
  if (inner.rows() != f.param_count() || inner.cols() != 1) {
    throw ShapeError(fmt::format("compose: inner expression must be {}x1", f.param_count()));
  }
  std::unordered_map<const Node*, Expr> mapped;
  for (const NodePtr& n : topological_order(ptr(f))) {
    if (n->op == Op::kParam) {
      mapped.emplace(n.get(), inner);
      continue;
    }
    auto input = [&](const NodePtr& p) -> Expr {
      if (!p) return Expr();
      if (p->params == 0) return wrap(p);
      return mapped.at(p.get());
    };
    mapped.emplace(n.get(), rebuild(*n, input(n->a), input(n->b)));
  }
  return mapped.at(f.node());
}

std::size_t node_count(const Expr& f) {
  std::unordered_map<const Node*, bool> seen;
  std::vector<const Node*> stack{ptr(f).get()};
  while (!stack.empty()) {
    const Node* n = stack.back();
    stack.pop_back();
    if (!n || seen[n]) continue;
    seen[n] = true;
    stack.push_back(n->a.get());
    stack.push_back(n->b.get());
  }
  return seen.size();
}

Matrix evaluate_tensor(const Expr& f, const Vector& theta, PassCounter* counter) {
  const NodePtr& root = ptr(f);
  if (counter) counter->forward.fetch_add(1, std::memory_order_relaxed);
  if (root->params == 0) return root->value;
  if (theta.size() != root->params) {
    throw ShapeError(fmt::format("expression expects {} parameters, got {}", root->params, theta.size()));
  }
  const auto order = topological_order(root);
  std::unordered_map<const Node*, Matrix> values;
  values.reserve(order.size());
  auto value_of = [&](const NodePtr& p) -> const Matrix* {
    if (!p) return nullptr;
    if (p->params == 0) return &p->value;
    return &values.at(p.get());
  };
  for (const NodePtr& n : order) {
    values.emplace(n.get(), compute(*n, value_of(n->a), value_of(n->b), &theta));
  }
  return std::move(values.at(root.get()));
}

double evaluate(const Expr& f, const Vector& theta, PassCounter* counter) {
  if (f.rows() != 1 || f.cols() != 1) throw ShapeError("evaluate expects a scalar expression");
  return evaluate_tensor(f, theta, counter)(0, 0);
}

double evaluate(const Expr& f, const ParamVector& theta, PassCounter* counter) {
  return evaluate(f, theta.values(), counter);
}

Expr gradient_expr(const Expr& f, Index param_count) {
  if (f.rows() != 1 || f.cols() != 1) throw ShapeError("gradient of a non-scalar expression");
  if (f.is_constant()) return zeros(param_count, 1);
  if (f.param_count() != param_count) {
    throw ShapeError(fmt::format("expression expects {} parameters, got {}", f.param_count(), param_count));
  }
  const NodePtr& root = ptr(f);
  std::call_once(root->grad_once, [&] { root->grad = ptr(build_gradient(root, param_count)); });
  return wrap(root->grad);
}

Vector gradient(const Expr& f, const Vector& theta, PassCounter* counter) {
  const Expr g = gradient_expr(f, theta.size());
  Vector out = evaluate_tensor(g, theta, nullptr);
  if (counter) {
    counter->forward.fetch_add(1, std::memory_order_relaxed);
    counter->backward.fetch_add(1, std::memory_order_relaxed);
  }
  return out;
}

Vector gradient(const Expr& f, const ParamVector& theta, PassCounter* counter) {
  return gradient(f, theta.values(), counter);
}

Expr directional_derivative(const Expr& f, const Vector& u) {
  const Expr g = gradient_expr(f, u.size());
  return dot(g, Expr::constant(u));
}

Vector hessian_vector_product(const Expr& f, const Vector& theta, const Vector& v, PassCounter* counter) {
  if (v.size() != theta.size()) throw ShapeError("direction length does not match the parameter count");
  return gradient(directional_derivative(f, v), theta, counter);
}

}  // namespace gnewton
