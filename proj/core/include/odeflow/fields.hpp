#pragma once

#include "odeflow/dynamics.hpp"
#include "odeflow/tensor.hpp"

namespace odeflow {

/// An autonomous vector field x' = f(x) on states of a fixed shape.
class VectorField {
 public:
  virtual ~VectorField() = default;

  virtual Tensor evaluate(const Tensor& x) const = 0;
  /// J_f(x)^T c
  virtual Tensor vjp(const Tensor& x, const Tensor& cotangent) const = 0;

  /// J_f(x) v by forward differences along v/|v| with step h; fx = f(x).
  Tensor jvp(const Tensor& x, const Tensor& fx, const Tensor& direction, double h = 1e-6) const;
};

/// psi for one token state, backed by a BlockParams it does not own.
class BlockField final : public VectorField {
 public:
  explicit BlockField(const BlockParams& params) : params_(&params) {}

  Tensor evaluate(const Tensor& x) const override;
  Tensor vjp(const Tensor& x, const Tensor& cotangent) const override;

  const BlockParams& params() const noexcept { return *params_; }

 private:
  const BlockParams* params_;
};

/// f(x) = A vec(x), reshaped to x's shape. Used as an exact oracle field.
class LinearField final : public VectorField {
 public:
  explicit LinearField(RowMatrix a);

  Tensor evaluate(const Tensor& x) const override;
  Tensor vjp(const Tensor& x, const Tensor& cotangent) const override;

  const RowMatrix& matrix() const noexcept { return a_; }

 private:
  RowMatrix a_;
};

}  // namespace odeflow
