#include "odeflow/fields.hpp"

#include "odeflow/error.hpp"

namespace odeflow {

Tensor VectorField::jvp(const Tensor& x, const Tensor& fx, const Tensor& direction,
                        double h) const {
  const double n = l2_norm(direction.values());
  if (n == 0.0) return Tensor(x.shape());
  Tensor shifted = x;
  shifted.matrix() += (h / n) * direction.matrix();
  Tensor out = evaluate(shifted);
  out.matrix() -= fx.matrix();
  out.matrix() *= n / h;
  return out;
}

Tensor BlockField::evaluate(const Tensor& x) const { return psi(x, *params_); }

Tensor BlockField::vjp(const Tensor& x, const Tensor& cotangent) const {
  Tape t;
  Var in = t.input(x);
  Var out = psi(in, bind_constant(t, *params_), {1, x.rows(), params_->heads});
  Var weighted = sum(mul(out, t.constant(cotangent)));
  t.backward(weighted);
  return t.grad(in);
}

LinearField::LinearField(RowMatrix a) : a_(std::move(a)) {
  if (a_.rows() != a_.cols()) throw ShapeError("LinearField needs a square matrix");
}

Tensor LinearField::evaluate(const Tensor& x) const {
  if (static_cast<Eigen::Index>(x.numel()) != a_.cols()) {
    throw ShapeError("LinearField of size " + std::to_string(a_.cols()) + " applied to " +
                     shape_string(x.shape()));
  }
  Tensor out(x.shape());
  Eigen::Map<Eigen::VectorXd>(out.data(), a_.rows()) =
      a_ * Eigen::Map<const Eigen::VectorXd>(x.data(), a_.cols());
  return out;
}

Tensor LinearField::vjp(const Tensor& x, const Tensor& cotangent) const {
  (void)x;
  Tensor out(cotangent.shape());
  Eigen::Map<Eigen::VectorXd>(out.data(), a_.cols()) =
      a_.transpose() * Eigen::Map<const Eigen::VectorXd>(cotangent.data(), a_.rows());
  return out;
}

}  // namespace odeflow
