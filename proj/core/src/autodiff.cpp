#include "odeflow/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <numeric>

#include "odeflow/error.hpp"

namespace odeflow {

namespace {

void require(bool ok, const char* op, const std::string& detail) {
  if (!ok) throw ShapeError(std::string(op) + ": " + detail);
}

Tape& tape_of(Var a) {
  if (!a.valid()) throw ContractError("operation on an unbound Var");
  return *a.tape();
}

Tape& tape_of(Var a, Var b) {
  Tape& t = tape_of(a);
  if (b.tape() != &t) throw ContractError("operands recorded on different tapes");
  return t;
}

ConstMatrixMap block(const Tensor& t, std::size_t offset, std::size_t r, std::size_t c) {
  return ConstMatrixMap(t.data() + offset, static_cast<Eigen::Index>(r),
                        static_cast<Eigen::Index>(c));
}

MatrixMap block(Tensor& t, std::size_t offset, std::size_t r, std::size_t c) {
  return MatrixMap(t.data() + offset, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

// Below this many multiply-adds the blocked GEMM setup costs more than the
// product itself, so per-head attention products use the lazy kernel.
constexpr Eigen::Index kSmallProduct = 32 * 32 * 32;

template <class A, class B>
void product_into(const A& a, const B& b, MatrixMap& out, bool accumulate) {
  if (a.rows() * a.cols() * b.cols() <= kSmallProduct) {
    if (accumulate) out.noalias() += a.lazyProduct(b);
    else out.noalias() = a.lazyProduct(b);
  } else {
    if (accumulate) out.noalias() += a * b;
    else out.noalias() = a * b;
  }
}

// out (+)= op(a) * op(b)
void gemm(bool ta, bool tb, const ConstMatrixMap& a, const ConstMatrixMap& b, MatrixMap out,
          bool accumulate) {
  if (!ta && !tb) product_into(a, b, out, accumulate);
  else if (ta && !tb) product_into(a.transpose(), b, out, accumulate);
  else if (!ta && tb) product_into(a, b.transpose(), out, accumulate);
  else product_into(a.transpose(), b.transpose(), out, accumulate);
}

template <class F>
Var unary(OpKind kind, Var x, Tensor out, F&& backward_body) {
  Tape& t = tape_of(x);
  const std::size_t xi = x.id();
  return t.record(kind, std::move(out), {xi},
                  [xi, body = std::forward<F>(backward_body)](Tape& tp, std::size_t self) {
                    if (!tp.requires_grad(xi)) return;
                    body(tp, self, tp.grad_buffer(xi));
                  });
}

}  // namespace

const char* op_name(OpKind kind) noexcept {
  switch (kind) {
    case OpKind::Constant: return "constant";
    case OpKind::Input: return "input";
    case OpKind::Parameter: return "parameter";
    case OpKind::MatMul: return "matmul";
    case OpKind::BatchMatMul: return "bmm";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::AddRowVec: return "add_rowvec";
    case OpKind::MulRowVec: return "mul_rowvec";
    case OpKind::CenterRows: return "center_rows";
    case OpKind::LayerNormRows: return "layer_norm_rows";
    case OpKind::SoftmaxRows: return "softmax_rows";
    case OpKind::Gelu: return "gelu";
    case OpKind::Log: return "log";
    case OpKind::Exp: return "exp";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Mse: return "mse";
    case OpKind::CrossEntropy: return "cross_entropy";
    case OpKind::Reshape: return "reshape";
    case OpKind::SplitHeads: return "split_heads";
    case OpKind::MergeHeads: return "merge_heads";
    case OpKind::SelectRows: return "select_rows";
    case OpKind::AssembleTokens: return "assemble_tokens";
    case OpKind::KthLargestRows: return "kth_largest_rows";
    case OpKind::GroupMax: return "group_max";
  }
  return "unknown";
}

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("value() on an unbound Var");
  return tape_->value(id_);
}

// ---- Tape -------------------------------------------------------------------

Var Tape::constant(Tensor value) { return record(OpKind::Constant, std::move(value), {}, nullptr); }

Var Tape::input(Tensor value) {
  Var v = record(OpKind::Input, std::move(value), {}, nullptr);
  nodes_[v.id()].requires_grad = true;
  return v;
}

Var Tape::parameter(Parameter& p) {
  Var v = record(OpKind::Parameter, p.value, {}, nullptr);
  if (p.trainable) {
    nodes_[v.id()].requires_grad = true;
    nodes_[v.id()].param = &p;
  }
  return v;
}

Var Tape::record(OpKind kind, Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  Node node;
  node.kind = kind;
  node.value = std::move(value);
  for (std::size_t in : inputs) {
    if (in >= nodes_.size()) throw ContractError("tape input id does not precede its consumer");
    node.requires_grad = node.requires_grad || nodes_[in].requires_grad;
  }
  node.inputs = std::move(inputs);
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.empty()) return Tensor(n.value.shape());
  return n.grad;
}

void Tape::backward(Var root) {
  if (root.tape() != this) throw ContractError("backward root belongs to another tape");
  if (nodes_[root.id()].value.numel() != 1) {
    throw ContractError("backward root must be a scalar, got " +
                        shape_string(nodes_[root.id()].value.shape()));
  }
  for (Node& n : nodes_) n.grad = Tensor();
  order_.clear();

  grad_buffer(root.id()).fill(1.0);
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    order_.push_back(i);
    if (n.backward) n.backward(*this, i);
    if (n.param) {
      if (!n.param->grad.same_shape(n.param->value)) n.param->grad = Tensor(n.param->value.shape());
      n.param->grad.matrix() += n.grad.matrix();
    }
  }
}

// ---- linear algebra ---------------------------------------------------------

Var matmul(Var a, Var b, bool ta, bool tb) {
  Tape& t = tape_of(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require(A.rank() == 2 && B.rank() == 2, "matmul", "operands must be matrices");
  const std::size_t m = ta ? A.dim(1) : A.dim(0);
  const std::size_t k = ta ? A.dim(0) : A.dim(1);
  const std::size_t kb = tb ? B.dim(1) : B.dim(0);
  const std::size_t n = tb ? B.dim(0) : B.dim(1);
  require(k == kb, "matmul", "inner dimensions differ: " + shape_string(A.shape()) + " x " +
                                 shape_string(B.shape()));
  Tensor out({m, n});
  gemm(ta, tb, A.matrix(), B.matrix(), out.matrix(), false);
  const std::size_t ai = a.id(), bi = b.id();
  return t.record(OpKind::MatMul, std::move(out), {ai, bi}, [=](Tape& tp, std::size_t self) {
    const Tensor& g = tp.upstream(self);
    const Tensor& Av = tp.value(ai);
    const Tensor& Bv = tp.value(bi);
    if (tp.requires_grad(ai)) {
      MatrixMap dA = tp.grad_buffer(ai).matrix();
      if (!ta) gemm(false, !tb, g.matrix(), Bv.matrix(), dA, true);
      else gemm(tb, true, Bv.matrix(), g.matrix(), dA, true);
    }
    if (tp.requires_grad(bi)) {
      MatrixMap dB = tp.grad_buffer(bi).matrix();
      if (!tb) gemm(!ta, false, Av.matrix(), g.matrix(), dB, true);
      else gemm(true, ta, g.matrix(), Av.matrix(), dB, true);
    }
  });
}

Var bmm(Var a, Var b, bool ta, bool tb) {
  Tape& t = tape_of(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require(A.rank() == 3 && B.rank() == 3 && A.dim(0) == B.dim(0), "bmm",
          "operands must be [G,m,k] and [G,k,n]");
  const std::size_t G = A.dim(0);
  const std::size_t ar = A.dim(1), ac = A.dim(2), br = B.dim(1), bc = B.dim(2);
  const std::size_t m = ta ? ac : ar, k = ta ? ar : ac;
  const std::size_t kb = tb ? bc : br, n = tb ? br : bc;
  require(k == kb, "bmm", "inner dimensions differ: " + shape_string(A.shape()) + " x " +
                              shape_string(B.shape()));
  Tensor out({G, m, n});
  for (std::size_t g = 0; g < G; ++g) {
    gemm(ta, tb, block(A, g * ar * ac, ar, ac), block(B, g * br * bc, br, bc),
         block(out, g * m * n, m, n), false);
  }
  const std::size_t ai = a.id(), bi = b.id();
  return t.record(OpKind::BatchMatMul, std::move(out), {ai, bi}, [=](Tape& tp, std::size_t self) {
    const Tensor& gr = tp.upstream(self);
    const Tensor& Av = tp.value(ai);
    const Tensor& Bv = tp.value(bi);
    const bool need_a = tp.requires_grad(ai), need_b = tp.requires_grad(bi);
    for (std::size_t g = 0; g < G; ++g) {
      auto gm = block(gr, g * m * n, m, n);
      auto am = block(Av, g * ar * ac, ar, ac);
      auto bm = block(Bv, g * br * bc, br, bc);
      if (need_a) {
        auto dA = block(tp.grad_buffer(ai), g * ar * ac, ar, ac);
        if (!ta) gemm(false, !tb, gm, bm, dA, true);
        else gemm(tb, true, bm, gm, dA, true);
      }
      if (need_b) {
        auto dB = block(tp.grad_buffer(bi), g * br * bc, br, bc);
        if (!tb) gemm(!ta, false, am, gm, dB, true);
        else gemm(true, ta, gm, am, dB, true);
      }
    }
  });
}

// ---- elementwise ------------------------------------------------------------

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require(a.value().same_shape(b.value()), "add",
          shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor out = a.value();
  out.matrix() += b.value().matrix();
  const std::size_t ai = a.id(), bi = b.id();
  return t.record(OpKind::Add, std::move(out), {ai, bi}, [=](Tape& tp, std::size_t self) {
    const Tensor& g = tp.upstream(self);
    if (tp.requires_grad(ai)) tp.grad_buffer(ai).matrix() += g.matrix();
    if (tp.requires_grad(bi)) tp.grad_buffer(bi).matrix() += g.matrix();
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require(a.value().same_shape(b.value()), "sub",
          shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor out = a.value();
  out.matrix() -= b.value().matrix();
  const std::size_t ai = a.id(), bi = b.id();
  return t.record(OpKind::Sub, std::move(out), {ai, bi}, [=](Tape& tp, std::size_t self) {
    const Tensor& g = tp.upstream(self);
    if (tp.requires_grad(ai)) tp.grad_buffer(ai).matrix() += g.matrix();
    if (tp.requires_grad(bi)) tp.grad_buffer(bi).matrix() -= g.matrix();
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require(a.value().same_shape(b.value()), "mul",
          shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor out = a.value();
  out.matrix().array() *= b.value().matrix().array();
  const std::size_t ai = a.id(), bi = b.id();
  return t.record(OpKind::Mul, std::move(out), {ai, bi}, [=](Tape& tp, std::size_t self) {
    const Tensor& g = tp.upstream(self);
    if (tp.requires_grad(ai)) {
      tp.grad_buffer(ai).matrix().array() += g.matrix().array() * tp.value(bi).matrix().array();
    }
    if (tp.requires_grad(bi)) {
      tp.grad_buffer(bi).matrix().array() += g.matrix().array() * tp.value(ai).matrix().array();
    }
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  out.matrix() *= s;
  return unary(OpKind::Scale, a, std::move(out), [s](Tape& tp, std::size_t self, Tensor& dx) {
    dx.matrix() += s * tp.upstream(self).matrix();
  });
}

Var add_rowvec(Var x, Var v) {
  Tape& t = tape_of(x, v);
  const Tensor& X = x.value();
  const Tensor& V = v.value();
  require(V.numel() == X.cols(), "add_rowvec",
          shape_string(V.shape()) + " against rows of " + shape_string(X.shape()));
  Tensor out = X;
  out.matrix().rowwise() += V.reshape({1, V.numel()}).matrix().row(0);
  const std::size_t xi = x.id(), vi = v.id();
  return t.record(OpKind::AddRowVec, std::move(out), {xi, vi}, [=](Tape& tp, std::size_t self) {
    const Tensor& g = tp.upstream(self);
    if (tp.requires_grad(xi)) tp.grad_buffer(xi).matrix() += g.matrix();
    if (tp.requires_grad(vi)) {
      Tensor& dv = tp.grad_buffer(vi);
      MatrixMap dvm(dv.data(), 1, static_cast<Eigen::Index>(dv.numel()));
      dvm += g.matrix().colwise().sum();
    }
  });
}

Var mul_rowvec(Var x, Var v) {
  Tape& t = tape_of(x, v);
  const Tensor& X = x.value();
  const Tensor& V = v.value();
  require(V.numel() == X.cols(), "mul_rowvec",
          shape_string(V.shape()) + " against rows of " + shape_string(X.shape()));
  Tensor out = X;
  ConstMatrixMap vrow(V.data(), 1, static_cast<Eigen::Index>(V.numel()));
  out.matrix().array().rowwise() *= vrow.array().row(0);
  const std::size_t xi = x.id(), vi = v.id();
  return t.record(OpKind::MulRowVec, std::move(out), {xi, vi}, [=](Tape& tp, std::size_t self) {
    const Tensor& g = tp.upstream(self);
    const Tensor& Vv = tp.value(vi);
    ConstMatrixMap vr(Vv.data(), 1, static_cast<Eigen::Index>(Vv.numel()));
    if (tp.requires_grad(xi)) {
      MatrixMap dx = tp.grad_buffer(xi).matrix();
      dx.array() += g.matrix().array().rowwise() * vr.array().row(0);
    }
    if (tp.requires_grad(vi)) {
      Tensor& dv = tp.grad_buffer(vi);
      MatrixMap dvm(dv.data(), 1, static_cast<Eigen::Index>(dv.numel()));
      dvm += (g.matrix().array() * tp.value(xi).matrix().array()).matrix().colwise().sum();
    }
  });
}

Var center_rows(Var x) {
  const Tensor& X = x.value();
  const std::size_t D = X.cols();
  require(D >= 2, "center_rows", "needs at least two columns");
  const double c = static_cast<double>(D) / static_cast<double>(D - 1);
  Tensor out = X;
  auto m = out.matrix();
  Eigen::VectorXd mu = m.rowwise().mean();
  m.colwise() -= mu;
  m *= c;
  return unary(OpKind::CenterRows, x, std::move(out), [c](Tape& tp, std::size_t self, Tensor& dx) {
    const auto g = tp.upstream(self).matrix();
    Eigen::VectorXd gm = g.rowwise().mean();
    auto d = dx.matrix();
    d += c * g;
    d.colwise() -= c * gm;
  });
}

Var layer_norm_rows(Var x, double eps) {
  const Tensor& X = x.value();
  const std::size_t R = X.rows();
  const std::size_t D = X.cols();
  Tensor out = X;
  std::vector<double> inv_std(R);
  auto m = out.matrix();
  for (std::size_t r = 0; r < R; ++r) {
    auto row = m.row(static_cast<Eigen::Index>(r));
    const double mu = row.mean();
    row.array() -= mu;
    const double var = row.squaredNorm() / static_cast<double>(D);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    row *= inv_std[r];
  }
  return unary(OpKind::LayerNormRows, x, std::move(out),
               [inv_std = std::move(inv_std)](Tape& tp, std::size_t self, Tensor& dx) {
                 const auto g = tp.upstream(self).matrix();
                 const auto xhat = tp.value(self).matrix();
                 auto d = dx.matrix();
                 for (Eigen::Index r = 0; r < g.rows(); ++r) {
                   const double gmean = g.row(r).mean();
                   const double gx = g.row(r).dot(xhat.row(r)) / static_cast<double>(g.cols());
                   d.row(r).array() += inv_std[static_cast<std::size_t>(r)] *
                                       (g.row(r).array() - gmean - xhat.row(r).array() * gx);
                 }
               });
}

Tensor softmax_rows(const Tensor& x) {
  Tensor out = x;
  auto m = out.matrix();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const double mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
  return out;
}

Var softmax_rows(Var x) {
  return unary(OpKind::SoftmaxRows, x, softmax_rows(x.value()),
               [](Tape& tp, std::size_t self, Tensor& dx) {
                 const auto g = tp.upstream(self).matrix();
                 const auto y = tp.value(self).matrix();
                 Eigen::VectorXd dot = (g.array() * y.array()).rowwise().sum();
                 dx.matrix().array() += y.array() * (g.colwise() - dot).array();
               });
}

double gelu(double x) noexcept { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

Var gelu(Var x) {
  // The derivative is formed alongside the value so backward is one multiply.
  const Tensor& X = x.value();
  Tensor out(X.shape());
  auto slope = std::make_shared<std::vector<double>>(X.numel());
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  for (std::size_t i = 0; i < X.numel(); ++i) {
    const double v = X[i];
    const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
    out[i] = v * cdf;
    (*slope)[i] = cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
  }
  return unary(OpKind::Gelu, x, std::move(out), [slope](Tape& tp, std::size_t self, Tensor& dx) {
    const Tensor& g = tp.upstream(self);
    for (std::size_t i = 0; i < slope->size(); ++i) dx[i] += g[i] * (*slope)[i];
  });
}

Var log(Var x) {
  Tensor out = x.value();
  out.matrix() = out.matrix().array().log().matrix();
  const std::size_t xi = x.id();
  return unary(OpKind::Log, x, std::move(out), [xi](Tape& tp, std::size_t self, Tensor& dx) {
    dx.matrix().array() += tp.upstream(self).matrix().array() / tp.value(xi).matrix().array();
  });
}

Var exp(Var x) {
  Tensor out = x.value();
  out.matrix() = out.matrix().array().exp().matrix();
  return unary(OpKind::Exp, x, std::move(out), [](Tape& tp, std::size_t self, Tensor& dx) {
    dx.matrix().array() += tp.upstream(self).matrix().array() * tp.value(self).matrix().array();
  });
}

// ---- reductions and losses --------------------------------------------------

Var sum(Var x) {
  const double s = x.value().matrix().sum();
  return unary(OpKind::Sum, x, Tensor::scalar(s), [](Tape& tp, std::size_t self, Tensor& dx) {
    dx.matrix().array() += tp.upstream(self).item();
  });
}

Var mean(Var x) {
  const double n = static_cast<double>(x.value().numel());
  const double s = x.value().matrix().sum() / n;
  return unary(OpKind::Mean, x, Tensor::scalar(s), [n](Tape& tp, std::size_t self, Tensor& dx) {
    dx.matrix().array() += tp.upstream(self).item() / n;
  });
}

Var mse(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require(a.value().same_shape(b.value()), "mse",
          shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  const double n = static_cast<double>(a.value().numel());
  const double s = (a.value().matrix() - b.value().matrix()).squaredNorm() / n;
  const std::size_t ai = a.id(), bi = b.id();
  return t.record(OpKind::Mse, Tensor::scalar(s), {ai, bi}, [=](Tape& tp, std::size_t self) {
    const double g = tp.upstream(self).item() * 2.0 / n;
    const auto diff = tp.value(ai).matrix() - tp.value(bi).matrix();
    if (tp.requires_grad(ai)) tp.grad_buffer(ai).matrix() += g * diff;
    if (tp.requires_grad(bi)) tp.grad_buffer(bi).matrix() -= g * diff;
  });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& L = logits.value();
  require(L.rank() == 2 && L.dim(0) == labels.size(), "cross_entropy",
          "logits " + shape_string(L.shape()) + " vs " + std::to_string(labels.size()) + " labels");
  Tensor probs = softmax_rows(L);
  double total = 0.0;
  std::vector<int> lab(labels.begin(), labels.end());
  for (std::size_t r = 0; r < lab.size(); ++r) {
    if (lab[r] < 0 || static_cast<std::size_t>(lab[r]) >= L.cols()) {
      throw ContractError("cross_entropy: label " + std::to_string(lab[r]) + " out of range");
    }
    total -= std::log(std::max(probs.at(r, static_cast<std::size_t>(lab[r])), 1e-300));
  }
  const double n = static_cast<double>(lab.size());
  return unary(OpKind::CrossEntropy, logits, Tensor::scalar(total / n),
               [probs = std::move(probs), lab = std::move(lab), n](Tape& tp, std::size_t self,
                                                                   Tensor& dx) {
                 const double g = tp.upstream(self).item() / n;
                 auto d = dx.matrix();
                 d += g * probs.matrix();
                 for (std::size_t r = 0; r < lab.size(); ++r) {
                   d(static_cast<Eigen::Index>(r), lab[r]) -= g;
                 }
               });
}

// ---- layout -----------------------------------------------------------------

Var reshape(Var x, Shape shape) {
  return unary(OpKind::Reshape, x, x.value().reshape(std::move(shape)),
               [](Tape& tp, std::size_t self, Tensor& dx) {
                 const Tensor& g = tp.upstream(self);
                 for (std::size_t i = 0; i < g.numel(); ++i) dx[i] += g[i];
               });
}

Var split_heads(Var x, std::size_t batch, std::size_t tokens, std::size_t heads) {
  const Tensor& X = x.value();
  const std::size_t D = X.cols();
  require(X.rows() == batch * tokens && heads > 0 && D % heads == 0, "split_heads",
          shape_string(X.shape()) + " with batch " + std::to_string(batch) + ", tokens " +
              std::to_string(tokens) + ", heads " + std::to_string(heads));
  const std::size_t d = D / heads;
  Tensor out({batch * heads, tokens, d});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < tokens; ++t) {
        const double* src = X.data() + (b * tokens + t) * D + h * d;
        double* dst = out.data() + ((b * heads + h) * tokens + t) * d;
        std::copy(src, src + d, dst);
      }
  return unary(OpKind::SplitHeads, x, std::move(out),
               [=](Tape& tp, std::size_t self, Tensor& dx) {
                 const Tensor& g = tp.upstream(self);
                 for (std::size_t b = 0; b < batch; ++b)
                   for (std::size_t h = 0; h < heads; ++h)
                     for (std::size_t t = 0; t < tokens; ++t) {
                       const double* src = g.data() + ((b * heads + h) * tokens + t) * d;
                       double* dst = dx.data() + (b * tokens + t) * D + h * d;
                       for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                     }
               });
}

Var merge_heads(Var x, std::size_t batch, std::size_t tokens, std::size_t heads) {
  const Tensor& X = x.value();
  require(X.rank() == 3 && X.dim(0) == batch * heads && X.dim(1) == tokens, "merge_heads",
          shape_string(X.shape()) + " with batch " + std::to_string(batch) + ", heads " +
              std::to_string(heads));
  const std::size_t d = X.dim(2);
  const std::size_t D = d * heads;
  Tensor out({batch * tokens, D});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < tokens; ++t) {
        const double* src = X.data() + ((b * heads + h) * tokens + t) * d;
        double* dst = out.data() + (b * tokens + t) * D + h * d;
        std::copy(src, src + d, dst);
      }
  return unary(OpKind::MergeHeads, x, std::move(out),
               [=](Tape& tp, std::size_t self, Tensor& dx) {
                 const Tensor& g = tp.upstream(self);
                 for (std::size_t b = 0; b < batch; ++b)
                   for (std::size_t h = 0; h < heads; ++h)
                     for (std::size_t t = 0; t < tokens; ++t) {
                       const double* src = g.data() + (b * tokens + t) * D + h * d;
                       double* dst = dx.data() + ((b * heads + h) * tokens + t) * d;
                       for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                     }
               });
}

Var select_rows(Var x, std::vector<std::size_t> rows) {
  const Tensor& X = x.value();
  const std::size_t C = X.cols();
  Tensor out({rows.size(), C});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] < X.rows(), "select_rows", "row index out of range");
    std::copy_n(X.data() + rows[i] * C, C, out.data() + i * C);
  }
  return unary(OpKind::SelectRows, x, std::move(out),
               [rows = std::move(rows), C](Tape& tp, std::size_t self, Tensor& dx) {
                 const Tensor& g = tp.upstream(self);
                 for (std::size_t i = 0; i < rows.size(); ++i) {
                   double* dst = dx.data() + rows[i] * C;
                   const double* src = g.data() + i * C;
                   for (std::size_t j = 0; j < C; ++j) dst[j] += src[j];
                 }
               });
}

Var assemble_tokens(Var patches, Var cls, Var registers, Var pos, std::size_t batch) {
  Tape& t = tape_of(patches, cls);
  tape_of(patches, pos);
  const Tensor& P = patches.value();
  const Tensor& C = cls.value();
  const Tensor& E = pos.value();
  const std::size_t D = P.cols();
  require(batch > 0 && P.rows() % batch == 0, "assemble_tokens", "patch rows not divisible by batch");
  const std::size_t M = P.rows() / batch;
  require(C.numel() == D && E.cols() == D && E.rows() == M + 1, "assemble_tokens",
          "cls/positional shapes do not match patches " + shape_string(P.shape()));
  std::size_t R = 0;
  if (registers.valid()) {
    tape_of(patches, registers);
    R = registers.value().rows();
    require(registers.value().cols() == D, "assemble_tokens", "register width mismatch");
  }
  const std::size_t T = M + 1 + R;
  Tensor out({batch * T, D});
  for (std::size_t b = 0; b < batch; ++b) {
    double* base = out.data() + b * T * D;
    for (std::size_t j = 0; j < D; ++j) base[j] = C[j] + E[j];
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t j = 0; j < D; ++j)
        base[(1 + m) * D + j] = P[(b * M + m) * D + j] + E[(1 + m) * D + j];
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t j = 0; j < D; ++j)
        base[(1 + M + r) * D + j] = registers.value()[r * D + j];
  }
  std::vector<std::size_t> inputs{patches.id(), cls.id(), pos.id()};
  if (registers.valid()) inputs.push_back(registers.id());
  const std::size_t pi = patches.id(), ci = cls.id(), ei = pos.id();
  const std::size_t ri = registers.valid() ? registers.id() : 0;
  return t.record(OpKind::AssembleTokens, std::move(out), std::move(inputs),
                  [=](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.upstream(self);
                    for (std::size_t b = 0; b < batch; ++b) {
                      const double* base = g.data() + b * T * D;
                      if (tp.requires_grad(ci)) {
                        Tensor& dc = tp.grad_buffer(ci);
                        for (std::size_t j = 0; j < D; ++j) dc[j] += base[j];
                      }
                      if (tp.requires_grad(ei)) {
                        Tensor& de = tp.grad_buffer(ei);
                        for (std::size_t j = 0; j < (M + 1) * D; ++j) de[j] += base[j];
                      }
                      if (tp.requires_grad(pi)) {
                        Tensor& dp = tp.grad_buffer(pi);
                        for (std::size_t j = 0; j < M * D; ++j) dp[b * M * D + j] += base[D + j];
                      }
                      if (R > 0 && tp.requires_grad(ri)) {
                        Tensor& dr = tp.grad_buffer(ri);
                        for (std::size_t j = 0; j < R * D; ++j) dr[j] += base[(1 + M) * D + j];
                      }
                    }
                  });
}

// ---- order statistics -------------------------------------------------------

Var kth_largest_rows(Var x, std::size_t k) {
  const Tensor& X = x.value();
  const std::size_t R = X.rows();
  const std::size_t C = X.cols();
  if (k < 1 || k > C) {
    throw ContractError("kth_largest_rows: k=" + std::to_string(k) + " with rows of length " +
                        std::to_string(C));
  }
  Tensor out({R});
  std::vector<std::size_t> picked(R);
  std::vector<std::size_t> idx(C);
  for (std::size_t r = 0; r < R; ++r) {
    const double* row = X.data() + r * C;
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k - 1), idx.end(),
                     [row](std::size_t a, std::size_t b) {
                       return row[a] > row[b] || (row[a] == row[b] && a < b);
                     });
    picked[r] = idx[k - 1];
    out[r] = row[picked[r]];
  }
  return unary(OpKind::KthLargestRows, x, std::move(out),
               [picked = std::move(picked), C](Tape& tp, std::size_t self, Tensor& dx) {
                 const Tensor& g = tp.upstream(self);
                 for (std::size_t r = 0; r < picked.size(); ++r) dx[r * C + picked[r]] += g[r];
               });
}

Var group_max(Var x, std::size_t group) {
  const Tensor& X = x.value();
  require(group > 0 && X.numel() % group == 0, "group_max",
          "group size " + std::to_string(group) + " does not divide " + std::to_string(X.numel()));
  const std::size_t G = X.numel() / group;
  Tensor out({G});
  std::vector<std::size_t> arg(G);
  for (std::size_t g = 0; g < G; ++g) {
    std::size_t best = g * group;
    for (std::size_t i = g * group + 1; i < (g + 1) * group; ++i)
      if (X[i] > X[best]) best = i;
    arg[g] = best;
    out[g] = X[best];
  }
  return unary(OpKind::GroupMax, x, std::move(out),
               [arg = std::move(arg)](Tape& tp, std::size_t self, Tensor& dx) {
                 const Tensor& g = tp.upstream(self);
                 for (std::size_t i = 0; i < arg.size(); ++i) dx[arg[i]] += g[i];
               });
}

}  // namespace odeflow
