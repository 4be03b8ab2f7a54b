#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "spurlab/numkit/error.hpp"
#include "spurlab/numkit/matrix.hpp"

namespace spurlab {

enum class Activation { kIdentity, kRelu, kTanh };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::kIdentity: return "identity";
    case Activation::kRelu: return "relu";
    case Activation::kTanh: return "tanh";
  }
  return "identity";
}

// Throws for primitives the tape cannot differentiate.
inline Activation parse_activation(std::string_view name) {
  if (name == "identity") return Activation::kIdentity;
  if (name == "relu") return Activation::kRelu;
  if (name == "tanh") return Activation::kTanh;
  throw PreconditionError("unsupported primitive: activation '" + std::string(name) + "'");
}

inline double apply_activation(Activation act, double x) {
  switch (act) {
    case Activation::kRelu: return x > 0.0 ? x : 0.0;
    case Activation::kTanh: return std::tanh(x);
    case Activation::kIdentity: return x;
  }
  return x;
}

class Tape;

// Handle to a node on a Tape. Cheap to copy; valid while its Tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Matrix& value() const;
  const Matrix& grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode differentiation over matrix-valued nodes.
//
// Every operation appends a node holding its forward value and a closure that
// pushes the node's adjoint into its inputs. Nodes that cannot reach a
// variable (constants, stop_gradient outputs and everything computed only from
// them) carry no adjoint and are skipped by backward().
class Tape {
 public:
  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var variable(Matrix value) { return push(std::move(value), true, {}); }
  Var constant(Matrix value) { return push(std::move(value), false, {}); }

  const Matrix& value(std::size_t id) const { return nodes_.at(id).value; }

  // Zero-filled if no gradient reached the node.
  const Matrix& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty() && !n.value.empty()) n.grad = Matrix(n.value.rows(), n.value.cols());
    return n.grad;
  }

  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  void backward(Var output) {
    check_owner(output, "backward");
    if (value(output.id()).size() != 1) {
      throw PreconditionError("backward: output must be scalar, got " +
                              value(output.id()).shape_string());
    }
    for (Node& n : nodes_) n.grad = Matrix();
    nodes_[output.id()].grad = Matrix(1, 1, 1.0);
    for (std::size_t i = output.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty() || !n.backprop) continue;
      n.backprop(*this, i);
    }
  }

  // Adds `g` into the adjoint of `id`; no-op for nodes without gradient.
  void accumulate(std::size_t id, const Matrix& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.empty()) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  const Matrix& adjoint(std::size_t id) const { return nodes_[id].grad; }

  using Backprop = std::function<void(Tape&, std::size_t)>;

  Var push(Matrix value, bool needs_grad, Backprop backprop) {
    nodes_.push_back(Node{std::move(value), Matrix(), needs_grad, std::move(backprop)});
    return Var(this, nodes_.size() - 1);
  }

  void check_owner(Var v, const char* op) const {
    if (&v.tape() != this) {
      throw PreconditionError(std::string(op) + ": operand belongs to a different tape");
    }
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad;
    Backprop backprop;
  };
  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }
inline const Matrix& Var::grad() const { return tape_->grad(id_); }

namespace ad_detail {

inline Tape& same_tape(Var a, Var b, const char* op) {
  if (&a.tape() != &b.tape()) {
    throw PreconditionError(std::string(op) + ": operands belong to different tapes");
  }
  return a.tape();
}

inline void require_shape(bool ok, const char* op, const Matrix& a, const Matrix& b) {
  if (!ok) {
    throw PreconditionError(std::string(op) + ": incompatible shapes " + a.shape_string() +
                            " and " + b.shape_string());
  }
}

}  // namespace ad_detail

inline Var stop_gradient(Var a) { return a.tape().push(a.value(), false, {}); }

inline Var add(Var a, Var b) {
  Tape& t = ad_detail::same_tape(a, b, "add");
  ad_detail::require_shape(a.value().same_shape(b.value()), "add", a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(a.value() + b.value(), t.needs_grad(ia) || t.needs_grad(ib),
                [ia, ib](Tape& tp, std::size_t self) {
                  tp.accumulate(ia, tp.adjoint(self));
                  tp.accumulate(ib, tp.adjoint(self));
                });
}

inline Var sub(Var a, Var b) {
  Tape& t = ad_detail::same_tape(a, b, "sub");
  ad_detail::require_shape(a.value().same_shape(b.value()), "sub", a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(a.value() - b.value(), t.needs_grad(ia) || t.needs_grad(ib),
                [ia, ib](Tape& tp, std::size_t self) {
                  tp.accumulate(ia, tp.adjoint(self));
                  tp.accumulate(ib, -1.0 * tp.adjoint(self));
                });
}

// Elementwise product.
inline Var mul(Var a, Var b) {
  Tape& t = ad_detail::same_tape(a, b, "mul");
  ad_detail::require_shape(a.value().same_shape(b.value()), "mul", a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(hadamard(a.value(), b.value()), t.needs_grad(ia) || t.needs_grad(ib),
                [ia, ib](Tape& tp, std::size_t self) {
                  if (tp.needs_grad(ia)) tp.accumulate(ia, hadamard(tp.adjoint(self), tp.value(ib)));
                  if (tp.needs_grad(ib)) tp.accumulate(ib, hadamard(tp.adjoint(self), tp.value(ia)));
                });
}

inline Var scale(Var a, double s) {
  Tape& t = a.tape();
  const std::size_t ia = a.id();
  return t.push(a.value() * s, t.needs_grad(ia),
                [ia, s](Tape& tp, std::size_t self) { tp.accumulate(ia, tp.adjoint(self) * s); });
}

inline Var matmul(Var a, Var b) {
  Tape& t = ad_detail::same_tape(a, b, "matmul");
  ad_detail::require_shape(a.value().cols() == b.value().rows(), "matmul", a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(spurlab::matmul(a.value(), b.value()), t.needs_grad(ia) || t.needs_grad(ib),
                [ia, ib](Tape& tp, std::size_t self) {
                  const Matrix& g = tp.adjoint(self);
                  if (tp.needs_grad(ia)) tp.accumulate(ia, matmul_nt(g, tp.value(ib)));
                  if (tp.needs_grad(ib)) tp.accumulate(ib, matmul_tn(tp.value(ia), g));
                });
}

// a · bᵀ
inline Var matmul_nt(Var a, Var b) {
  Tape& t = ad_detail::same_tape(a, b, "matmul_nt");
  ad_detail::require_shape(a.value().cols() == b.value().cols(), "matmul_nt", a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(spurlab::matmul_nt(a.value(), b.value()), t.needs_grad(ia) || t.needs_grad(ib),
                [ia, ib](Tape& tp, std::size_t self) {
                  const Matrix& g = tp.adjoint(self);
                  if (tp.needs_grad(ia)) tp.accumulate(ia, spurlab::matmul(g, tp.value(ib)));
                  if (tp.needs_grad(ib)) tp.accumulate(ib, matmul_tn(g, tp.value(ia)));
                });
}

// Batched affine map: x [n×in], weight [out×in], bias [1×out] -> x·Wᵀ + b.
inline Var affine(Var x, Var weight, Var bias) {
  Tape& t = ad_detail::same_tape(x, weight, "affine");
  ad_detail::same_tape(x, bias, "affine");
  const Matrix& xv = x.value();
  const Matrix& wv = weight.value();
  const Matrix& bv = bias.value();
  ad_detail::require_shape(xv.cols() == wv.cols(), "affine", xv, wv);
  ad_detail::require_shape(bv.rows() == 1 && bv.cols() == wv.rows(), "affine", wv, bv);
  Matrix out = matmul_nt(xv, wv);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bv(0, c);
  }
  const std::size_t ix = x.id(), iw = weight.id(), ib = bias.id();
  const bool ng = t.needs_grad(ix) || t.needs_grad(iw) || t.needs_grad(ib);
  return t.push(std::move(out), ng, [ix, iw, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.adjoint(self);
    if (tp.needs_grad(ix)) tp.accumulate(ix, spurlab::matmul(g, tp.value(iw)));
    if (tp.needs_grad(iw)) tp.accumulate(iw, matmul_tn(g, tp.value(ix)));
    if (tp.needs_grad(ib)) {
      Matrix gb(1, g.cols());
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gb(0, c) += g(r, c);
      tp.accumulate(ib, gb);
    }
  });
}

inline Var activate(Var a, Activation act) {
  if (act == Activation::kIdentity) return a;
  Tape& t = a.tape();
  Matrix out = a.value();
  for (double& v : out.data()) v = apply_activation(act, v);
  const std::size_t ia = a.id();
  const std::size_t io = t.size();
  return t.push(std::move(out), t.needs_grad(ia), [ia, io, act](Tape& tp, std::size_t self) {
    Matrix g = tp.adjoint(self);
    const auto in = tp.value(ia).data();
    const auto outv = tp.value(io).data();
    auto gd = g.data();
    for (std::size_t i = 0; i < gd.size(); ++i) {
      if (act == Activation::kRelu) {
        if (!(in[i] > 0.0)) gd[i] = 0.0;
      } else {
        gd[i] *= 1.0 - outv[i] * outv[i];
      }
    }
    tp.accumulate(ia, g);
  });
}

inline Var relu(Var a) { return activate(a, Activation::kRelu); }
inline Var tanh(Var a) { return activate(a, Activation::kTanh); }

inline Var exp(Var a) {
  Tape& t = a.tape();
  Matrix out = a.value();
  for (double& v : out.data()) v = std::exp(v);
  const std::size_t ia = a.id(), io = t.size();
  return t.push(std::move(out), t.needs_grad(ia), [ia, io](Tape& tp, std::size_t self) {
    tp.accumulate(ia, hadamard(tp.adjoint(self), tp.value(io)));
  });
}

inline Var log(Var a) {
  Tape& t = a.tape();
  Matrix out = a.value();
  for (double& v : out.data()) {
    if (!(v > 0.0)) throw NumericError("log: non-positive argument " + std::to_string(v));
    v = std::log(v);
  }
  const std::size_t ia = a.id();
  return t.push(std::move(out), t.needs_grad(ia), [ia](Tape& tp, std::size_t self) {
    Matrix g = tp.adjoint(self);
    const auto in = tp.value(ia).data();
    auto gd = g.data();
    for (std::size_t i = 0; i < gd.size(); ++i) gd[i] /= in[i];
    tp.accumulate(ia, g);
  });
}

inline Var square(Var a) { return mul(a, a); }

inline Var sum(Var a) {
  Tape& t = a.tape();
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t ia = a.id();
  const std::size_t r = a.value().rows(), c = a.value().cols();
  return t.push(Matrix(1, 1, s), t.needs_grad(ia), [ia, r, c](Tape& tp, std::size_t self) {
    tp.accumulate(ia, Matrix(r, c, tp.adjoint(self)(0, 0)));
  });
}

inline Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw PreconditionError("mean: empty operand");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

// Row-wise dot product of two n×k matrices -> n×1.
inline Var row_dot(Var a, Var b) {
  Tape& t = ad_detail::same_tape(a, b, "row_dot");
  ad_detail::require_shape(a.value().same_shape(b.value()), "row_dot", a.value(), b.value());
  Matrix out(a.value().rows(), 1);
  for (std::size_t r = 0; r < out.rows(); ++r) out(r, 0) = dot(a.value().row(r), b.value().row(r));
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(std::move(out), t.needs_grad(ia) || t.needs_grad(ib),
                [ia, ib](Tape& tp, std::size_t self) {
                  const Matrix& g = tp.adjoint(self);
                  auto scaled = [&](std::size_t src) {
                    Matrix m = tp.value(src);
                    for (std::size_t r = 0; r < m.rows(); ++r)
                      for (double& v : m.row(r)) v *= g(r, 0);
                    return m;
                  };
                  if (tp.needs_grad(ia)) tp.accumulate(ia, scaled(ib));
                  if (tp.needs_grad(ib)) tp.accumulate(ib, scaled(ia));
                });
}

// Row-wise Euclidean norm -> n×1. The subgradient at a zero row is zero.
inline Var row_norm(Var a) {
  Tape& t = a.tape();
  Matrix out(a.value().rows(), 1);
  for (std::size_t r = 0; r < out.rows(); ++r) out(r, 0) = norm2(a.value().row(r));
  const std::size_t ia = a.id(), io = t.size();
  return t.push(std::move(out), t.needs_grad(ia), [ia, io](Tape& tp, std::size_t self) {
    const Matrix& g = tp.adjoint(self);
    const Matrix& norms = tp.value(io);
    Matrix d = tp.value(ia);
    for (std::size_t r = 0; r < d.rows(); ++r) {
      const double k = norms(r, 0) > 0.0 ? g(r, 0) / norms(r, 0) : 0.0;
      for (double& v : d.row(r)) v *= k;
    }
    tp.accumulate(ia, d);
  });
}

inline constexpr double kCosineEpsilon = 1e-12;

// Row-wise cosine similarity -> n×1. Each norm in the denominator is clamped
// below at kCosineEpsilon; a row where both operands are exactly zero has no
// defined direction and raises NumericError.
inline Var row_cosine(Var a, Var b) {
  Tape& t = ad_detail::same_tape(a, b, "row_cosine");
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  ad_detail::require_shape(av.same_shape(bv), "row_cosine", av, bv);
  const std::size_t n = av.rows();
  Matrix out(n, 1);
  std::vector<double> na(n), nb(n);
  for (std::size_t r = 0; r < n; ++r) {
    na[r] = norm2(av.row(r));
    nb[r] = norm2(bv.row(r));
    if (na[r] == 0.0 && nb[r] == 0.0) {
      throw NumericError("row_cosine: both operands are zero vectors in row " + std::to_string(r));
    }
    out(r, 0) = dot(av.row(r), bv.row(r)) /
                (std::max(na[r], kCosineEpsilon) * std::max(nb[r], kCosineEpsilon));
  }
  const std::size_t ia = a.id(), ib = b.id(), io = t.size();
  return t.push(std::move(out), t.needs_grad(ia) || t.needs_grad(ib),
                [ia, ib, io, na = std::move(na), nb = std::move(nb)](Tape& tp, std::size_t self) {
                  const Matrix& g = tp.adjoint(self);
                  const Matrix& cosv = tp.value(io);
                  // d cos / d x = other / (|x||y|) - cos * x / |x|^2, with a clamped
                  // norm treated as a constant.
                  auto partial = [&](std::size_t self_id, std::size_t other_id,
                                     const std::vector<double>& ns, const std::vector<double>& no) {
                    const Matrix& x = tp.value(self_id);
                    const Matrix& y = tp.value(other_id);
                    Matrix d(x.rows(), x.cols());
                    for (std::size_t r = 0; r < x.rows(); ++r) {
                      const double dx = std::max(ns[r], kCosineEpsilon);
                      const double dy = std::max(no[r], kCosineEpsilon);
                      const double k1 = g(r, 0) / (dx * dy);
                      const double k2 = ns[r] >= kCosineEpsilon ? g(r, 0) * cosv(r, 0) / (dx * dx) : 0.0;
                      for (std::size_t c = 0; c < x.cols(); ++c) d(r, c) = k1 * y(r, c) - k2 * x(r, c);
                    }
                    return d;
                  };
                  if (tp.needs_grad(ia)) tp.accumulate(ia, partial(ia, ib, na, nb));
                  if (tp.needs_grad(ib)) tp.accumulate(ib, partial(ib, ia, nb, na));
                });
}

// ---------------------------------------------------------------------------
// Whole-computation gradients.

// A scalar computation over a list of parameter matrices. It receives one
// tape variable per parameter and returns a 1×1 node.
using Computation = std::function<Var(Tape&, std::span<const Var>)>;

struct ValueAndGrad {
  double value = 0.0;
  std::vector<Matrix> gradient;
};

inline double evaluate(const Computation& f, std::span<const Matrix> params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Matrix& p : params) vars.push_back(tape.constant(p));
  const Var out = f(tape, vars);
  if (out.value().size() != 1) {
    throw PreconditionError("evaluate: computation is not scalar-valued");
  }
  return out.value()(0, 0);
}

inline ValueAndGrad value_and_grad(const Computation& f, std::span<const Matrix> params) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const Matrix& p : params) vars.push_back(tape.variable(p));
  const Var out = f(tape, vars);
  tape.backward(out);
  ValueAndGrad r{out.value()(0, 0), {}};
  r.gradient.reserve(vars.size());
  for (const Var& v : vars) r.gradient.push_back(tape.grad(v.id()));
  return r;
}

inline std::vector<Matrix> grad(const Computation& f, std::span<const Matrix> params) {
  return value_and_grad(f, params).gradient;
}

// Central differences (f(θ+εe_i) - f(θ-εe_i)) / 2ε for every coordinate.
inline std::vector<Matrix> finite_diff_grad(const Computation& f, std::span<const Matrix> params,
                                            double epsilon) {
  if (!(epsilon > 0.0 && epsilon <= 1e-2)) {
    throw PreconditionError("finite_diff_grad: epsilon must lie in (0, 1e-2]");
  }
  std::vector<Matrix> work(params.begin(), params.end());
  std::vector<Matrix> out;
  out.reserve(work.size());
  for (std::size_t p = 0; p < work.size(); ++p) {
    Matrix g(work[p].rows(), work[p].cols());
    for (std::size_t i = 0; i < work[p].size(); ++i) {
      double& slot = work[p].data()[i];
      const double saved = slot;
      slot = saved + epsilon;
      const double up = evaluate(f, work);
      slot = saved - epsilon;
      const double down = evaluate(f, work);
      slot = saved;
      g.data()[i] = (up - down) / (2.0 * epsilon);
    }
    out.push_back(std::move(g));
  }
  return out;
}

// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor). The floor keeps coordinates
// whose true gradient is ~0 from dominating through round-off.
inline double max_relative_error(std::span<const Matrix> a, std::span<const Matrix> b,
                                 double floor = 1e-6) {
  if (a.size() != b.size()) throw PreconditionError("max_relative_error: list sizes differ");
  double worst = 0.0;
  for (std::size_t p = 0; p < a.size(); ++p) {
    if (!a[p].same_shape(b[p])) throw PreconditionError("max_relative_error: shape mismatch");
    for (std::size_t i = 0; i < a[p].size(); ++i) {
      const double x = a[p].data()[i], y = b[p].data()[i];
      worst = std::max(worst, std::abs(x - y) / std::max({std::abs(x), std::abs(y), floor}));
    }
  }
  return worst;
}

}  // namespace spurlab
