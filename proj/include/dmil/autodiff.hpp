#pragma once

// Reverse-mode differentiation over flat parameter vectors.
//
// A Tape records dense matrix operations as they are evaluated. Backward
// propagation yields first-order gradients. When the tape is created in
// tangent mode every node also carries a forward-mode tangent (the
// directional derivative along a chosen vector v), and the backward sweep
// propagates the tangents of the adjoints as well, which gives exact
// Hessian-vector products (forward-over-reverse). Unrolled inner gradient
// descent is differentiated by replaying an AdaptTrace backwards with those
// Hessian-vector products.

#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dmil/errors.hpp"

namespace dmil {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Flat parameter container for one network. Length is fixed at construction
/// and all arithmetic requires equal lengths.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::size_t n) : values_(Vector::Zero(static_cast<Eigen::Index>(n))) {}
  explicit ParamVector(Vector values) : values_(std::move(values)) {}
  ParamVector(std::initializer_list<double> values);

  static ParamVector from(std::span<const double> values);

  std::size_t size() const { return static_cast<std::size_t>(values_.size()); }
  bool empty() const { return values_.size() == 0; }

  double operator[](std::size_t i) const { return values_[static_cast<Eigen::Index>(i)]; }
  double& operator[](std::size_t i) { return values_[static_cast<Eigen::Index>(i)]; }

  const Vector& values() const { return values_; }
  std::span<const double> span() const { return {values_.data(), size()}; }
  std::vector<double> to_vector() const { return {values_.data(), values_.data() + values_.size()}; }

  ParamVector& operator+=(const ParamVector& other);
  ParamVector& operator-=(const ParamVector& other);
  ParamVector& operator*=(double c);

  /// Returns *this - rate * direction; the single update rule shared by every
  /// descent step so that replays reproduce results bit for bit.
  ParamVector descend(double rate, const ParamVector& direction) const;

  double norm() const { return values_.norm(); }
  bool all_finite() const { return values_.allFinite(); }

  friend ParamVector operator+(ParamVector a, const ParamVector& b) { return a += b; }
  friend ParamVector operator-(ParamVector a, const ParamVector& b) { return a -= b; }
  friend ParamVector operator*(double c, ParamVector a) { return a *= c; }
  friend bool operator==(const ParamVector& a, const ParamVector& b) {
    return a.size() == b.size() && a.values_ == b.values_;
  }

 private:
  Vector values_;
};

/// True when both vectors have identical length and identical bit patterns.
bool bitwise_equal(const ParamVector& a, const ParamVector& b);

namespace ad {

class Tape;

/// Handle to a node on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  /// With `tangents` set, nodes carry forward-mode tangents and backward()
  /// also produces adjoint tangents (Hessian-vector products at the leaves).
  explicit Tape(bool tangents = false) : tangents_(tangents) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Parameter leaf as a column vector. `direction` is its tangent.
  Var parameter(const ParamVector& theta, const ParamVector* direction = nullptr);
  Var constant(Matrix value);

  /// Seeds d(root)/d(root) = 1; root must be 1x1.
  void backward(Var root);

  bool tangents() const { return tangents_; }
  std::size_t size() const { return nodes_.size(); }

  const Matrix& value(Var v) const { return nodes_[v.id()].value; }
  /// Empty matrices stand for exact zeros.
  const Matrix& tangent(Var v) const { return nodes_[v.id()].tangent; }
  const Matrix& adjoint(Var v) const { return nodes_[v.id()].adjoint; }
  const Matrix& adjoint_tangent(Var v) const { return nodes_[v.id()].adjoint_tangent; }

  /// Smallest |pre-activation| seen by any relu on this tape; infinity if none.
  double min_relu_margin() const { return min_relu_margin_; }

 private:
  struct Node {
    Matrix value;
    Matrix tangent;
    Matrix adjoint;
    Matrix adjoint_tangent;
    bool requires_grad = false;
    std::function<void(Tape&, std::size_t)> backward;
  };

  Var push(Matrix value, Matrix tangent, bool requires_grad,
           std::function<void(Tape&, std::size_t)> backward);
  Node& node(std::size_t id) { return nodes_[id]; }
  const Node& node(std::size_t id) const { return nodes_[id]; }

  friend Var slice(Var, Eigen::Index, Eigen::Index, Eigen::Index);
  friend Var matmul(Var, Var);
  friend Var add_row(Var, Var);
  friend Var relu(Var);
  friend Var log_softmax_rows(Var);
  friend Var exp(Var);
  friend Var mul(Var, Var);
  friend Var add(Var, Var);
  friend Var sub(Var, Var);
  friend Var gather_rows(Var, std::vector<Eigen::Index>);
  friend Var sum(Var);
  friend Var scale(Var, double);
  friend Var add_scalar(Var, double);
  friend Var linear_combine(Var, Var, double);

  bool tangents_;
  std::vector<Node> nodes_;
  double min_relu_margin_ = std::numeric_limits<double>::infinity();
};

/// Reinterprets rows*cols consecutive entries of a column vector, starting at
/// `offset`, as a column-major rows x cols matrix.
Var slice(Var a, Eigen::Index offset, Eigen::Index rows, Eigen::Index cols);
Var matmul(Var a, Var b);
/// Adds the 1 x cols row vector `row` to every row of `a`.
Var add_row(Var a, Var row);
/// max(x, 0); the derivative at exactly 0 is taken as 0.
Var relu(Var a);
Var log_softmax_rows(Var a);
Var exp(Var a);
/// Elementwise product.
Var mul(Var a, Var b);
/// a + sign * b; shared by add and sub.
Var linear_combine(Var a, Var b, double sign);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var gather_rows(Var a, std::vector<Eigen::Index> rows);
/// Sum of all entries, as a 1x1 node.
Var sum(Var a);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);

}  // namespace ad

/// A scalar loss of one parameter vector. The data batch is captured by
/// `build`, which records the loss on the parameter's tape and returns a 1x1
/// node. `component` names the network in numeric-failure reports.
struct LossFunction {
  std::string component;
  std::function<ad::Var(ad::Var params)> build;
};

struct ValueAndGrad {
  double value = 0.0;
  ParamVector gradient;
};

double evaluate(const LossFunction& f, const ParamVector& theta);
ValueAndGrad value_and_grad(const LossFunction& f, const ParamVector& theta);
ParamVector grad(const LossFunction& f, const ParamVector& theta);
/// Exact Hessian-vector product H(theta) * v.
ParamVector hvp(const LossFunction& f, const ParamVector& theta, const ParamVector& v);

struct AdaptStep {
  ParamVector gradient;
  double rate = 0.0;
};

/// Record of plain gradient descent from `initial` to `adapted`.
struct AdaptTrace {
  ParamVector initial;
  std::vector<AdaptStep> steps;
  ParamVector adapted;
  /// Loss at each iterate, steps.size() + 1 entries (empty for identity traces).
  std::vector<double> losses;
  /// Set when the loss grew more than tenfold over the trace.
  bool diverged = false;

  /// Zero-step trace whose adapted parameters equal `theta`.
  static AdaptTrace identity(const ParamVector& theta);

  /// Parameters before step j (iterate(steps.size()) == adapted), replayed
  /// with the same update rule that produced the trace.
  ParamVector iterate(std::size_t j) const;
};

/// `steps` plain full-batch gradient descent steps at fixed rate `alpha`.
/// alpha must be finite and >= 0 (alpha == 0 yields an exact identity).
AdaptTrace inner_adapt(const LossFunction& f, const ParamVector& theta, double alpha, int steps);

enum class MetaGradMode { exact, first_order };

/// Pulls `outer_gradient` (taken at trace.adapted) back to trace.initial
/// through every inner step: v <- v - rate_j * H_j v, last step first.
/// `inner` holds either one loss used at every step or one loss per step.
ParamVector meta_grad(const AdaptTrace& trace, const ParamVector& outer_gradient,
                      std::span<const LossFunction> inner, MetaGradMode mode);
ParamVector meta_grad(const AdaptTrace& trace, const ParamVector& outer_gradient,
                      const LossFunction& inner, MetaGradMode mode);

}  // namespace dmil
