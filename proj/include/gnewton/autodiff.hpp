// Symbolic tensor expressions with nested reverse-mode differentiation.
//
// An Expr is an immutable DAG over a single parameter leaf (the flat vector
// theta, shape P x 1). Differentiating an Expr produces another Expr, so any
// derivative can be differentiated again: Hessian-vector products and
// higher-order directional derivatives are gradients of gradients.
//
// All tensors are 2-D (rows x cols) and flatten row-major. Scalars are 1 x 1.
#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace gnewton {

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Raised when evaluation leaves the domain of a primitive (log of a
/// non-positive value, division by zero).
class DomainError : public std::runtime_error {
 public:
  DomainError(std::string primitive, const std::string& what)
      : std::runtime_error(primitive + ": " + what), primitive_(std::move(primitive)) {}
  const std::string& primitive() const { return primitive_; }

 private:
  std::string primitive_;
};

/// Raised when operands have incompatible shapes or lengths.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using TensorShape = std::vector<Index>;

Index element_count(const TensorShape& shape);

/// Flat parameter vector carrying the tuple-of-tensors structure. Tensors are
/// concatenated in declaration order, each flattened row-major.
class ParamVector {
 public:
  ParamVector() = default;
  ParamVector(Vector values, std::vector<TensorShape> shapes, std::vector<std::string> names = {});

  /// One rank-1 tensor covering all values.
  static ParamVector flat(Vector values);

  const Vector& values() const { return values_; }
  const std::vector<TensorShape>& shapes() const { return shapes_; }
  const std::vector<std::string>& names() const { return names_; }
  Index size() const { return values_.size(); }
  double operator[](Index i) const { return values_[i]; }

  /// Same tensor structure, new values.
  ParamVector with_values(Vector values) const;

 private:
  Vector values_;
  std::vector<TensorShape> shapes_;
  std::vector<std::string> names_;
};

/// Counts forward evaluations and backward sweeps. A gradient is one of each.
struct PassCounter {
  std::atomic<std::int64_t> forward{0};
  std::atomic<std::int64_t> backward{0};
};

struct PassCount {
  std::int64_t forward = 0;
  std::int64_t backward = 0;

  friend PassCount operator-(PassCount a, PassCount b) {
    return {a.forward - b.forward, a.backward - b.backward};
  }
  friend PassCount operator+(PassCount a, PassCount b) {
    return {a.forward + b.forward, a.backward + b.backward};
  }
};

PassCount snapshot(const PassCounter* counter);

namespace detail {
struct Node;
}

class Expr {
 public:
  Expr() = default;

  /// The parameter leaf theta, a P x 1 column.
  static Expr parameters(Index count);
  static Expr constant(Matrix value);
  static Expr scalar(double value);

  bool valid() const { return node_ != nullptr; }
  Index rows() const;
  Index cols() const;
  /// P if the expression depends on the parameters, 0 otherwise.
  Index param_count() const;
  bool is_constant() const { return param_count() == 0; }

  /// Reads rows*cols consecutive elements of the row-major flattening,
  /// starting at offset, as a rows x cols tensor.
  Expr slice(Index offset, Index rows, Index cols) const;
  /// Scalar element of the row-major flattening.
  Expr operator[](Index i) const { return slice(i, 1, 1); }

  const detail::Node* node() const { return node_.get(); }

 private:
  friend struct ExprAccess;
  explicit Expr(std::shared_ptr<const detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<const detail::Node> node_;
};

// Elementwise arithmetic. A 1 x 1 operand broadcasts against any shape.
Expr operator+(const Expr& a, const Expr& b);
Expr operator-(const Expr& a, const Expr& b);
Expr operator*(const Expr& a, const Expr& b);
Expr operator/(const Expr& a, const Expr& b);
Expr operator-(const Expr& a);
Expr operator+(const Expr& a, double b);
Expr operator+(double a, const Expr& b);
Expr operator-(const Expr& a, double b);
Expr operator-(double a, const Expr& b);
Expr operator*(const Expr& a, double b);
Expr operator*(double a, const Expr& b);
Expr operator/(const Expr& a, double b);
Expr operator/(double a, const Expr& b);

Expr exp(const Expr& x);
Expr log(const Expr& x);
Expr tanh(const Expr& x);
Expr sigmoid(const Expr& x);
Expr softplus(const Expr& x);
/// x^n for n >= 0.
Expr pow(const Expr& x, int n);
Expr square(const Expr& x);

Expr matmul(const Expr& a, const Expr& b);
Expr transpose(const Expr& x);

Expr sum(const Expr& x);
Expr mean(const Expr& x);
Expr dot(const Expr& a, const Expr& b);
/// Column sums: r x c -> 1 x c.
Expr sum_rows(const Expr& x);
/// Row sums: r x c -> r x 1.
Expr sum_cols(const Expr& x);
/// Repeats a 1 x c row r times.
Expr broadcast_rows(const Expr& row, Index r);
/// Repeats an r x 1 column c times.
Expr broadcast_cols(const Expr& col, Index c);
/// Broadcasts a 1 x 1 expression to rows x cols.
Expr fill(const Expr& scalar, Index rows, Index cols);
/// Zero tensor of shape rows x cols with x written into the row-major
/// flattening at offset.
Expr embed(const Expr& x, Index offset, Index rows, Index cols);

/// f(inner(theta)): replaces the parameter leaf of f by inner, which must be
/// a P x 1 expression.
Expr compose(const Expr& f, const Expr& inner);

/// Number of distinct nodes in the DAG.
std::size_t node_count(const Expr& f);

/// Evaluates a tensor-valued expression.
Matrix evaluate_tensor(const Expr& f, const Vector& theta, PassCounter* counter = nullptr);
/// Evaluates a scalar expression.
double evaluate(const Expr& f, const Vector& theta, PassCounter* counter = nullptr);
double evaluate(const Expr& f, const ParamVector& theta, PassCounter* counter = nullptr);

/// Symbolic gradient of a scalar expression with respect to a P-vector of
/// parameters, as a P x 1 expression. Constant expressions give zeros.
Expr gradient_expr(const Expr& f, Index param_count);

/// Reverse-mode gradient: one forward evaluation and one backward sweep.
Vector gradient(const Expr& f, const Vector& theta, PassCounter* counter = nullptr);
Vector gradient(const Expr& f, const ParamVector& theta, PassCounter* counter = nullptr);

/// The scalar expression theta -> grad f(theta)^T u, differentiable again.
Expr directional_derivative(const Expr& f, const Vector& u);

/// H(theta) v via the gradient of grad f^T v. Counts as one gradient pass.
Vector hessian_vector_product(const Expr& f, const Vector& theta, const Vector& v,
                              PassCounter* counter = nullptr);

}  // namespace gnewton
