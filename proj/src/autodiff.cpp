#include "dmil/autodiff.hpp"

#include <cmath>
#include <cstring>
#include <limits>

namespace dmil {

ParamVector::ParamVector(std::initializer_list<double> values)
    : values_(static_cast<Eigen::Index>(values.size())) {
  Eigen::Index i = 0;
  for (double v : values) values_[i++] = v;
}

ParamVector ParamVector::from(std::span<const double> values) {
  Vector v(static_cast<Eigen::Index>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i) v[static_cast<Eigen::Index>(i)] = values[i];
  return ParamVector(std::move(v));
}

ParamVector& ParamVector::operator+=(const ParamVector& other) {
  require(size() == other.size(), "ParamVector length mismatch in +=");
  values_ += other.values_;
  return *this;
}

ParamVector& ParamVector::operator-=(const ParamVector& other) {
  require(size() == other.size(), "ParamVector length mismatch in -=");
  values_ -= other.values_;
  return *this;
}

ParamVector& ParamVector::operator*=(double c) {
  values_ *= c;
  return *this;
}

ParamVector ParamVector::descend(double rate, const ParamVector& direction) const {
  require(size() == direction.size(), "ParamVector length mismatch in descend");
  Vector next(values_.size());
  for (Eigen::Index i = 0; i < values_.size(); ++i) next[i] = values_[i] - rate * direction.values_[i];
  return ParamVector(std::move(next));
}

bool bitwise_equal(const ParamVector& a, const ParamVector& b) {
  return a.size() == b.size() &&
         (a.size() == 0 || std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(double)) == 0);
}

namespace ad {

namespace {

bool has(const Matrix& m) { return m.size() > 0; }

template <class Expr>
void accumulate(Matrix& dst, const Eigen::MatrixBase<Expr>& src) {
  if (has(dst)) {
    dst += src;
  } else {
    dst = src;
  }
}

void ensure_zero(Matrix& dst, Eigen::Index rows, Eigen::Index cols) {
  if (!has(dst)) dst = Matrix::Zero(rows, cols);
}

Tape& common_tape(Var a, Var b) {
  require(&a.tape() == &b.tape(), "operands recorded on different tapes");
  return a.tape();
}

}  // namespace

const Matrix& Var::value() const { return tape_->value(*this); }

Var Tape::push(Matrix value, Matrix tangent, bool requires_grad,
               std::function<void(Tape&, std::size_t)> backward) {
  Node n;
  n.value = std::move(value);
  if (tangents_) n.tangent = std::move(tangent);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(const ParamVector& theta, const ParamVector* direction) {
  Matrix tangent;
  if (tangents_ && direction != nullptr) {
    require(direction->size() == theta.size(), "tangent direction length differs from parameters");
    tangent = direction->values();
  }
  return push(theta.values(), std::move(tangent), true, nullptr);
}

Var Tape::constant(Matrix value) { return push(std::move(value), Matrix(), false, nullptr); }

void Tape::backward(Var root) {
  require(&root.tape() == this, "backward root belongs to another tape");
  Node& r = node(root.id());
  require(r.value.rows() == 1 && r.value.cols() == 1, "backward root must be a scalar");
  for (auto& n : nodes_) {
    n.adjoint.resize(0, 0);
    n.adjoint_tangent.resize(0, 0);
  }
  r.adjoint = Matrix::Ones(1, 1);
  for (std::size_t id = root.id() + 1; id-- > 0;) {
    const Node& n = node(id);
    if (!n.requires_grad || !n.backward) continue;
    if (!has(n.adjoint) && !has(n.adjoint_tangent)) continue;
    n.backward(*this, id);
  }
}

Var slice(Var a, Eigen::Index offset, Eigen::Index rows, Eigen::Index cols) {
  Tape& t = a.tape();
  const Matrix& av = t.node(a.id()).value;
  require(av.cols() == 1, "slice source must be a column vector");
  require(offset >= 0 && rows >= 0 && cols >= 0 && offset + rows * cols <= av.rows(), "slice out of range");
  Matrix value = Eigen::Map<const Matrix>(av.data() + offset, rows, cols);
  Matrix tangent;
  const Matrix& at = t.node(a.id()).tangent;
  if (has(at)) tangent = Eigen::Map<const Matrix>(at.data() + offset, rows, cols);
  const std::size_t pa = a.id();
  const Eigen::Index n = av.rows();
  return t.push(std::move(value), std::move(tangent), t.node(pa).requires_grad,
                [pa, offset, rows, cols, n](Tape& tp, std::size_t self) {
                  auto& s = tp.node(self);
                  auto& p = tp.node(pa);
                  if (has(s.adjoint)) {
                    ensure_zero(p.adjoint, n, 1);
                    p.adjoint.block(offset, 0, rows * cols, 1) +=
                        Eigen::Map<const Vector>(s.adjoint.data(), rows * cols);
                  }
                  if (has(s.adjoint_tangent)) {
                    ensure_zero(p.adjoint_tangent, n, 1);
                    p.adjoint_tangent.block(offset, 0, rows * cols, 1) +=
                        Eigen::Map<const Vector>(s.adjoint_tangent.data(), rows * cols);
                  }
                });
}

Var matmul(Var a, Var b) {
  Tape& t = common_tape(a, b);
  const auto& na = t.node(a.id());
  const auto& nb = t.node(b.id());
  require(na.value.cols() == nb.value.rows(), "matmul inner dimensions differ");
  Matrix value = na.value * nb.value;
  Matrix tangent;
  if (t.tangents()) {
    if (has(na.tangent)) accumulate(tangent, na.tangent * nb.value);
    if (has(nb.tangent)) accumulate(tangent, na.value * nb.tangent);
  }
  const bool rg = na.requires_grad || nb.requires_grad;
  const std::size_t pa = a.id(), pb = b.id();
  return t.push(std::move(value), std::move(tangent), rg, [pa, pb](Tape& tp, std::size_t self) {
    auto& s = tp.node(self);
    auto& A = tp.node(pa);
    auto& B = tp.node(pb);
    if (A.requires_grad) {
      if (has(s.adjoint)) accumulate(A.adjoint, s.adjoint * B.value.transpose());
      if (tp.tangents()) {
        if (has(s.adjoint_tangent)) accumulate(A.adjoint_tangent, s.adjoint_tangent * B.value.transpose());
        if (has(s.adjoint) && has(B.tangent)) accumulate(A.adjoint_tangent, s.adjoint * B.tangent.transpose());
      }
    }
    if (B.requires_grad) {
      if (has(s.adjoint)) accumulate(B.adjoint, A.value.transpose() * s.adjoint);
      if (tp.tangents()) {
        if (has(s.adjoint_tangent)) accumulate(B.adjoint_tangent, A.value.transpose() * s.adjoint_tangent);
        if (has(s.adjoint) && has(A.tangent)) accumulate(B.adjoint_tangent, A.tangent.transpose() * s.adjoint);
      }
    }
  });
}

Var add_row(Var a, Var row) {
  Tape& t = common_tape(a, row);
  const auto& na = t.node(a.id());
  const auto& nr = t.node(row.id());
  require(nr.value.rows() == 1 && nr.value.cols() == na.value.cols(), "add_row expects a 1 x cols row");
  Matrix value = na.value.rowwise() + nr.value.row(0);
  Matrix tangent;
  if (t.tangents()) {
    if (has(na.tangent)) accumulate(tangent, na.tangent);
    if (has(nr.tangent)) {
      ensure_zero(tangent, na.value.rows(), na.value.cols());
      tangent.rowwise() += nr.tangent.row(0);
    }
  }
  const bool rg = na.requires_grad || nr.requires_grad;
  const std::size_t pa = a.id(), pr = row.id();
  return t.push(std::move(value), std::move(tangent), rg, [pa, pr](Tape& tp, std::size_t self) {
    auto& s = tp.node(self);
    auto& A = tp.node(pa);
    auto& R = tp.node(pr);
    if (A.requires_grad) {
      if (has(s.adjoint)) accumulate(A.adjoint, s.adjoint);
      if (has(s.adjoint_tangent)) accumulate(A.adjoint_tangent, s.adjoint_tangent);
    }
    if (R.requires_grad) {
      if (has(s.adjoint)) accumulate(R.adjoint, s.adjoint.colwise().sum());
      if (has(s.adjoint_tangent)) accumulate(R.adjoint_tangent, s.adjoint_tangent.colwise().sum());
    }
  });
}

Var relu(Var a) {
  Tape& t = a.tape();
  const auto& na = t.node(a.id());
  Matrix mask = (na.value.array() > 0.0).cast<double>().matrix();
  Matrix value = na.value.cwiseMax(0.0);
  if (na.value.size() > 0) t.min_relu_margin_ = std::min(t.min_relu_margin_, na.value.cwiseAbs().minCoeff());
  Matrix tangent;
  if (has(na.tangent)) tangent = na.tangent.cwiseProduct(mask);
  const std::size_t pa = a.id();
  return t.push(std::move(value), std::move(tangent), na.requires_grad,
                [pa, mask = std::move(mask)](Tape& tp, std::size_t self) {
                  auto& s = tp.node(self);
                  auto& A = tp.node(pa);
                  if (has(s.adjoint)) accumulate(A.adjoint, s.adjoint.cwiseProduct(mask));
                  if (has(s.adjoint_tangent)) accumulate(A.adjoint_tangent, s.adjoint_tangent.cwiseProduct(mask));
                });
}

Var log_softmax_rows(Var a) {
  Tape& t = a.tape();
  const auto& na = t.node(a.id());
  const Vector row_max = na.value.rowwise().maxCoeff();
  Matrix shifted = na.value.colwise() - row_max;
  const Vector lse = shifted.array().exp().rowwise().sum().log().matrix();
  Matrix value = shifted.colwise() - lse;
  Matrix tangent;
  if (has(na.tangent)) {
    const Matrix p = value.array().exp().matrix();
    const Vector mean_t = p.cwiseProduct(na.tangent).rowwise().sum();
    tangent = na.tangent.colwise() - mean_t;
  }
  const std::size_t pa = a.id();
  return t.push(std::move(value), std::move(tangent), na.requires_grad, [pa](Tape& tp, std::size_t self) {
    auto& s = tp.node(self);
    auto& A = tp.node(pa);
    const Matrix p = s.value.array().exp().matrix();
    Vector adj_sum;
    if (has(s.adjoint)) {
      adj_sum = s.adjoint.rowwise().sum();
      Matrix d = s.adjoint - (p.array().colwise() * adj_sum.array()).matrix();
      accumulate(A.adjoint, d);
    }
    if (tp.tangents()) {
      if (has(s.adjoint_tangent)) {
        const Vector tadj_sum = s.adjoint_tangent.rowwise().sum();
        Matrix d = s.adjoint_tangent - (p.array().colwise() * tadj_sum.array()).matrix();
        accumulate(A.adjoint_tangent, d);
      }
      if (has(s.adjoint) && has(s.tangent)) {
        const Matrix tp_ = p.cwiseProduct(s.tangent);
        Matrix d = -(tp_.array().colwise() * adj_sum.array()).matrix();
        accumulate(A.adjoint_tangent, d);
      }
    }
  });
}

Var exp(Var a) {
  Tape& t = a.tape();
  const auto& na = t.node(a.id());
  Matrix value = na.value.array().exp().matrix();
  Matrix tangent;
  if (has(na.tangent)) tangent = value.cwiseProduct(na.tangent);
  const std::size_t pa = a.id();
  return t.push(std::move(value), std::move(tangent), na.requires_grad, [pa](Tape& tp, std::size_t self) {
    auto& s = tp.node(self);
    auto& A = tp.node(pa);
    if (has(s.adjoint)) accumulate(A.adjoint, s.adjoint.cwiseProduct(s.value));
    if (tp.tangents()) {
      if (has(s.adjoint_tangent)) accumulate(A.adjoint_tangent, s.adjoint_tangent.cwiseProduct(s.value));
      if (has(s.adjoint) && has(s.tangent)) accumulate(A.adjoint_tangent, s.adjoint.cwiseProduct(s.tangent));
    }
  });
}

Var mul(Var a, Var b) {
  Tape& t = common_tape(a, b);
  const auto& na = t.node(a.id());
  const auto& nb = t.node(b.id());
  require(na.value.rows() == nb.value.rows() && na.value.cols() == nb.value.cols(), "mul shape mismatch");
  Matrix value = na.value.cwiseProduct(nb.value);
  Matrix tangent;
  if (has(na.tangent)) accumulate(tangent, na.tangent.cwiseProduct(nb.value));
  if (has(nb.tangent)) accumulate(tangent, na.value.cwiseProduct(nb.tangent));
  const bool rg = na.requires_grad || nb.requires_grad;
  const std::size_t pa = a.id(), pb = b.id();
  return t.push(std::move(value), std::move(tangent), rg, [pa, pb](Tape& tp, std::size_t self) {
    auto& s = tp.node(self);
    auto& A = tp.node(pa);
    auto& B = tp.node(pb);
    auto pull = [&](auto& X, auto& Y) {
      if (!X.requires_grad) return;
      if (has(s.adjoint)) accumulate(X.adjoint, s.adjoint.cwiseProduct(Y.value));
      if (tp.tangents()) {
        if (has(s.adjoint_tangent)) accumulate(X.adjoint_tangent, s.adjoint_tangent.cwiseProduct(Y.value));
        if (has(s.adjoint) && has(Y.tangent)) accumulate(X.adjoint_tangent, s.adjoint.cwiseProduct(Y.tangent));
      }
    };
    if (pa == pb) {
      // x*x: both operand slots feed the same node.
      pull(A, B);
      pull(A, B);
    } else {
      pull(A, B);
      pull(B, A);
    }
  });
}

Var linear_combine(Var a, Var b, double sign) {
  Tape& t = common_tape(a, b);
  const auto& na = t.node(a.id());
  const auto& nb = t.node(b.id());
  require(na.value.rows() == nb.value.rows() && na.value.cols() == nb.value.cols(), "add/sub shape mismatch");
  Matrix value = sign > 0 ? Matrix(na.value + nb.value) : Matrix(na.value - nb.value);
  Matrix tangent;
  if (has(na.tangent)) accumulate(tangent, na.tangent);
  if (has(nb.tangent)) accumulate(tangent, sign * nb.tangent);
  const bool rg = na.requires_grad || nb.requires_grad;
  const std::size_t pa = a.id(), pb = b.id();
  return t.push(std::move(value), std::move(tangent), rg, [pa, pb, sign](Tape& tp, std::size_t self) {
    auto& s = tp.node(self);
    auto& A = tp.node(pa);
    auto& B = tp.node(pb);
    if (A.requires_grad) {
      if (has(s.adjoint)) accumulate(A.adjoint, s.adjoint);
      if (has(s.adjoint_tangent)) accumulate(A.adjoint_tangent, s.adjoint_tangent);
    }
    if (B.requires_grad) {
      if (has(s.adjoint)) accumulate(B.adjoint, sign * s.adjoint);
      if (has(s.adjoint_tangent)) accumulate(B.adjoint_tangent, sign * s.adjoint_tangent);
    }
  });
}


Var add(Var a, Var b) { return linear_combine(a, b, 1.0); }
Var sub(Var a, Var b) { return linear_combine(a, b, -1.0); }

Var gather_rows(Var a, std::vector<Eigen::Index> rows) {
  Tape& t = a.tape();
  const auto& na = t.node(a.id());
  const auto n = static_cast<Eigen::Index>(rows.size());
  Matrix value(n, na.value.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    require(rows[static_cast<std::size_t>(i)] >= 0 && rows[static_cast<std::size_t>(i)] < na.value.rows(),
            "gather_rows index out of range");
    value.row(i) = na.value.row(rows[static_cast<std::size_t>(i)]);
  }
  Matrix tangent;
  if (has(na.tangent)) {
    tangent.resize(n, na.value.cols());
    for (Eigen::Index i = 0; i < n; ++i) tangent.row(i) = na.tangent.row(rows[static_cast<std::size_t>(i)]);
  }
  const std::size_t pa = a.id();
  const Eigen::Index src_rows = na.value.rows(), cols = na.value.cols();
  return t.push(std::move(value), std::move(tangent), na.requires_grad,
                [pa, rows = std::move(rows), src_rows, cols](Tape& tp, std::size_t self) {
                  auto& s = tp.node(self);
                  auto& A = tp.node(pa);
                  if (has(s.adjoint)) {
                    ensure_zero(A.adjoint, src_rows, cols);
                    for (std::size_t i = 0; i < rows.size(); ++i)
                      A.adjoint.row(rows[i]) += s.adjoint.row(static_cast<Eigen::Index>(i));
                  }
                  if (has(s.adjoint_tangent)) {
                    ensure_zero(A.adjoint_tangent, src_rows, cols);
                    for (std::size_t i = 0; i < rows.size(); ++i)
                      A.adjoint_tangent.row(rows[i]) += s.adjoint_tangent.row(static_cast<Eigen::Index>(i));
                  }
                });
}

Var sum(Var a) {
  Tape& t = a.tape();
  const auto& na = t.node(a.id());
  Matrix value = Matrix::Constant(1, 1, na.value.sum());
  Matrix tangent;
  if (has(na.tangent)) tangent = Matrix::Constant(1, 1, na.tangent.sum());
  const std::size_t pa = a.id();
  const Eigen::Index r = na.value.rows(), c = na.value.cols();
  return t.push(std::move(value), std::move(tangent), na.requires_grad, [pa, r, c](Tape& tp, std::size_t self) {
    auto& s = tp.node(self);
    auto& A = tp.node(pa);
    if (has(s.adjoint)) accumulate(A.adjoint, Matrix::Constant(r, c, s.adjoint(0, 0)));
    if (has(s.adjoint_tangent)) accumulate(A.adjoint_tangent, Matrix::Constant(r, c, s.adjoint_tangent(0, 0)));
  });
}

Var scale(Var a, double c) {
  Tape& t = a.tape();
  const auto& na = t.node(a.id());
  Matrix value = c * na.value;
  Matrix tangent;
  if (has(na.tangent)) tangent = c * na.tangent;
  const std::size_t pa = a.id();
  return t.push(std::move(value), std::move(tangent), na.requires_grad, [pa, c](Tape& tp, std::size_t self) {
    auto& s = tp.node(self);
    auto& A = tp.node(pa);
    if (has(s.adjoint)) accumulate(A.adjoint, c * s.adjoint);
    if (has(s.adjoint_tangent)) accumulate(A.adjoint_tangent, c * s.adjoint_tangent);
  });
}

Var add_scalar(Var a, double c) {
  Tape& t = a.tape();
  const auto& na = t.node(a.id());
  Matrix value = na.value.array() + c;
  Matrix tangent = na.tangent;
  const std::size_t pa = a.id();
  return t.push(std::move(value), std::move(tangent), na.requires_grad, [pa](Tape& tp, std::size_t self) {
    auto& s = tp.node(self);
    auto& A = tp.node(pa);
    if (has(s.adjoint)) accumulate(A.adjoint, s.adjoint);
    if (has(s.adjoint_tangent)) accumulate(A.adjoint_tangent, s.adjoint_tangent);
  });
}

}  // namespace ad

namespace {

double scalar_of(const ad::Var& loss, const std::string& component) {
  const Matrix& v = loss.value();
  require(v.rows() == 1 && v.cols() == 1, "loss of '" + component + "' is not a scalar");
  const double x = v(0, 0);
  if (!std::isfinite(x)) throw NumericError(component, "loss is " + std::to_string(x));
  return x;
}

ParamVector leaf_result(const Matrix& m, std::size_t n, const std::string& component, const char* what) {
  if (m.size() == 0) return ParamVector(n);
  ParamVector out(Vector(Eigen::Map<const Vector>(m.data(), m.rows())));
  if (!out.all_finite()) throw NumericError(component, std::string(what) + " has non-finite entries");
  return out;
}

}  // namespace

double evaluate(const LossFunction& f, const ParamVector& theta) {
  ad::Tape tape(false);
  const ad::Var p = tape.parameter(theta);
  return scalar_of(f.build(p), f.component);
}

ValueAndGrad value_and_grad(const LossFunction& f, const ParamVector& theta) {
  ad::Tape tape(false);
  const ad::Var p = tape.parameter(theta);
  const ad::Var loss = f.build(p);
  ValueAndGrad out;
  out.value = scalar_of(loss, f.component);
  tape.backward(loss);
  out.gradient = leaf_result(tape.adjoint(p), theta.size(), f.component, "gradient");
  return out;
}

ParamVector grad(const LossFunction& f, const ParamVector& theta) { return value_and_grad(f, theta).gradient; }

ParamVector hvp(const LossFunction& f, const ParamVector& theta, const ParamVector& v) {
  require(v.size() == theta.size(), "hvp direction length differs from parameters");
  ad::Tape tape(true);
  const ad::Var p = tape.parameter(theta, &v);
  const ad::Var loss = f.build(p);
  scalar_of(loss, f.component);
  tape.backward(loss);
  return leaf_result(tape.adjoint_tangent(p), theta.size(), f.component, "Hessian-vector product");
}

AdaptTrace AdaptTrace::identity(const ParamVector& theta) {
  AdaptTrace t;
  t.initial = theta;
  t.adapted = theta;
  return t;
}

ParamVector AdaptTrace::iterate(std::size_t j) const {
  require(j <= steps.size(), "trace iterate index out of range");
  ParamVector theta = initial;
  for (std::size_t i = 0; i < j; ++i) theta = theta.descend(steps[i].rate, steps[i].gradient);
  return theta;
}

AdaptTrace inner_adapt(const LossFunction& f, const ParamVector& theta, double alpha, int steps) {
  require(steps >= 1, "inner_adapt requires steps >= 1");
  require(std::isfinite(alpha) && alpha >= 0.0, "inner_adapt requires a finite rate alpha >= 0");
  AdaptTrace trace;
  trace.initial = theta;
  ParamVector current = theta;
  for (int s = 0; s < steps; ++s) {
    ValueAndGrad vg = value_and_grad(f, current);
    trace.losses.push_back(vg.value);
    current = current.descend(alpha, vg.gradient);
    if (!current.all_finite()) throw NumericError(f.component, "inner update produced non-finite parameters");
    trace.steps.push_back({std::move(vg.gradient), alpha});
  }
  trace.losses.push_back(evaluate(f, current));
  trace.adapted = std::move(current);
  for (double l : trace.losses) {
    if (l > 10.0 * trace.losses.front()) trace.diverged = true;
  }
  return trace;
}

ParamVector meta_grad(const AdaptTrace& trace, const ParamVector& outer_gradient,
                      std::span<const LossFunction> inner, MetaGradMode mode) {
  require(outer_gradient.size() == trace.initial.size(), "outer gradient length differs from trace parameters");
  if (mode == MetaGradMode::first_order || trace.steps.empty()) return outer_gradient;
  require(inner.size() == 1 || inner.size() == trace.steps.size(),
          "meta_grad needs one inner loss or one per step");
  std::vector<ParamVector> iterates;
  iterates.reserve(trace.steps.size());
  ParamVector theta = trace.initial;
  for (const auto& step : trace.steps) {
    iterates.push_back(theta);
    theta = theta.descend(step.rate, step.gradient);
  }
  ParamVector v = outer_gradient;
  for (std::size_t j = trace.steps.size(); j-- > 0;) {
    const double rate = trace.steps[j].rate;
    if (rate == 0.0) continue;
    const LossFunction& f = inner.size() == 1 ? inner[0] : inner[j];
    v = v.descend(rate, hvp(f, iterates[j], v));
  }
  return v;
}

ParamVector meta_grad(const AdaptTrace& trace, const ParamVector& outer_gradient, const LossFunction& inner,
                      MetaGradMode mode) {
  return meta_grad(trace, outer_gradient, std::span<const LossFunction>(&inner, 1), mode);
}

}  // namespace dmil
