#include "odeflow/dynamics.hpp"

#include <cmath>
#include <random>

#include "odeflow/error.hpp"

namespace odeflow {

BlockParams::BlockParams(std::size_t d, std::size_t h, std::size_t r)
    : dim(d), heads(h), mlp_ratio(r) {
  if (d == 0 || h == 0 || d % h != 0) {
    throw ContractError("block dim " + std::to_string(d) + " not divisible by " +
                        std::to_string(h) + " heads");
  }
  if (r == 0) throw ContractError("mlp_ratio must be >= 1");
  w_q = Parameter("w_q", Tensor({d, d}));
  w_k = Parameter("w_k", Tensor({d, d}));
  w_v = Parameter("w_v", Tensor({d, d}));
  w_o = Parameter("w_o", Tensor({d, d}));
  w1 = Parameter("w1", Tensor({d, d * r}));
  w2 = Parameter("w2", Tensor({d * r, d}));
  gamma_attn = Parameter("gamma_attn", Tensor({d}, 1.0));
  beta_attn = Parameter("beta_attn", Tensor({d}));
  gamma_mlp = Parameter("gamma_mlp", Tensor({d}, 1.0));
  beta_mlp = Parameter("beta_mlp", Tensor({d}));
}

std::vector<Parameter*> BlockParams::parameters() {
  return {&w_q, &w_k, &w_v, &w_o, &w1, &w2, &gamma_attn, &beta_attn, &gamma_mlp, &beta_mlp};
}

std::vector<const Parameter*> BlockParams::parameters() const {
  return {&w_q, &w_k, &w_v, &w_o, &w1, &w2, &gamma_attn, &beta_attn, &gamma_mlp, &beta_mlp};
}

std::vector<Parameter*> BlockParams::projections() { return {&w_q, &w_k, &w_v, &w_o, &w1, &w2}; }

std::vector<const Parameter*> BlockParams::projections() const {
  return {&w_q, &w_k, &w_v, &w_o, &w1, &w2};
}

void BlockParams::set_trainable(bool trainable) {
  for (Parameter* p : parameters()) p->trainable = trainable;
}

BlockVars bind(Tape& t, BlockParams& p) {
  return {t.parameter(p.w_q),        t.parameter(p.w_k),       t.parameter(p.w_v),
          t.parameter(p.w_o),        t.parameter(p.w1),        t.parameter(p.w2),
          t.parameter(p.gamma_attn), t.parameter(p.beta_attn), t.parameter(p.gamma_mlp),
          t.parameter(p.beta_mlp)};
}

BlockVars bind_constant(Tape& t, const BlockParams& p) {
  return {t.constant(p.w_q.value),        t.constant(p.w_k.value),
          t.constant(p.w_v.value),        t.constant(p.w_o.value),
          t.constant(p.w1.value),         t.constant(p.w2.value),
          t.constant(p.gamma_attn.value), t.constant(p.beta_attn.value),
          t.constant(p.gamma_mlp.value),  t.constant(p.beta_mlp.value)};
}

Var normalize(Var x, Var gamma, Var beta, NormKind kind) {
  Var n = kind == NormKind::Center ? center_rows(x) : layer_norm_rows(x);
  return add_rowvec(mul_rowvec(n, gamma), beta);
}

Var attn_subflow(Var x, const BlockVars& w, const TokenLayout& layout, NormKind kind, Var* maps) {
  const std::size_t D = x.value().cols();
  const std::size_t H = layout.heads;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D / H));
  Var xc = normalize(x, w.gamma_attn, w.beta_attn, kind);
  Var q = split_heads(matmul(xc, w.w_q), layout.batch, layout.tokens, H);
  Var k = split_heads(matmul(xc, w.w_k), layout.batch, layout.tokens, H);
  Var v = split_heads(matmul(xc, w.w_v), layout.batch, layout.tokens, H);
  Var p = softmax_rows(scale(bmm(q, k, false, true), inv_sqrt_d));
  if (maps) *maps = p;
  Var heads = merge_heads(bmm(p, v), layout.batch, layout.tokens, H);
  return matmul(heads, w.w_o);
}

Var mlp_subflow(Var x, const BlockVars& w, NormKind kind) {
  Var xc = normalize(x, w.gamma_mlp, w.beta_mlp, kind);
  return matmul(gelu(matmul(xc, w.w1)), w.w2);
}

Var psi(Var x, const BlockVars& w, const TokenLayout& layout, Var* maps) {
  return add(mlp_subflow(x, w, NormKind::Center),
             attn_subflow(x, w, layout, NormKind::Center, maps));
}

// ---- plain-tensor evaluation ------------------------------------------------

namespace {

void check_state(const Tensor& x, const BlockParams& p) {
  if (x.rank() != 2 || x.cols() != p.dim) {
    throw ShapeError("token state " + shape_string(x.shape()) + " does not match block dim " +
                     std::to_string(p.dim));
  }
}

TokenLayout single(const Tensor& x, const BlockParams& p) { return {1, x.rows(), p.heads}; }

}  // namespace

Tensor HeadMaps::head(std::size_t h) const {
  const std::size_t T = maps.dim(1);
  Tensor out({T, T});
  std::copy_n(maps.data() + h * T * T, T * T, out.data());
  return out;
}

Tensor center_normalize(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  if (gamma.numel() != x.cols() || beta.numel() != x.cols()) {
    throw ShapeError("center_normalize: affine length does not match " + shape_string(x.shape()));
  }
  Tape t;
  return normalize(t.constant(x), t.constant(gamma), t.constant(beta), NormKind::Center).value();
}

HeadMaps attention_maps(const Tensor& x, const BlockParams& p) {
  check_state(x, p);
  Tape t;
  BlockVars w = bind_constant(t, p);
  Var maps;
  attn_subflow(t.constant(x), w, single(x, p), NormKind::Center, &maps);
  HeadMaps out;
  out.maps = maps.value();
  const std::size_t d = p.head_dim();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const auto wq = p.w_q.value.matrix();
  const auto wk = p.w_k.value.matrix();
  for (std::size_t h = 0; h < p.heads; ++h) {
    const auto cols = static_cast<Eigen::Index>(h * d);
    const auto width = static_cast<Eigen::Index>(d);
    RowMatrix a = wq.middleCols(cols, width) * wk.middleCols(cols, width).transpose() * inv_sqrt_d;
    out.logits_operator.push_back(Tensor::from_matrix(a));
  }
  return out;
}

Tensor attn_subflow(const Tensor& x, const BlockParams& p) {
  check_state(x, p);
  Tape t;
  return attn_subflow(t.constant(x), bind_constant(t, p), single(x, p), NormKind::Center).value();
}

Tensor mlp_subflow(const Tensor& x, const BlockParams& p) {
  check_state(x, p);
  Tape t;
  return mlp_subflow(t.constant(x), bind_constant(t, p), NormKind::Center).value();
}

Tensor psi(const Tensor& x, const BlockParams& p) {
  check_state(x, p);
  Tape t;
  return psi(t.constant(x), bind_constant(t, p), single(x, p)).value();
}

// ---- spectral control -------------------------------------------------------

double spectral_norm(const Tensor& w, int max_iters, double tol) {
  const auto W = w.matrix();
  if (W.size() == 0 || W.cwiseAbs().maxCoeff() == 0.0) return 0.0;
  std::mt19937_64 rng(0x5eed5eedULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd v(W.cols());
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = normal(rng);
  v.normalize();
  double sigma = 0.0;
  for (int it = 0; it < max_iters; ++it) {
    Eigen::VectorXd u = W * v;
    const double next = u.norm();
    Eigen::VectorXd wtu = W.transpose() * u;
    const double n = wtu.norm();
    if (n == 0.0) return next;
    v = wtu / n;
    const bool converged = it > 0 && std::abs(next - sigma) <= tol * next;
    sigma = next;
    if (converged) break;
  }
  return sigma;
}

void rescale_spectral(Tensor& w, double target_norm) {
  const double sigma = spectral_norm(w);
  if (sigma == 0.0) throw ContractError("rescale_spectral: zero matrix has no direction to scale");
  w.matrix() *= target_norm / sigma;
}

void spectral_init(BlockParams& p, double target_norm, std::uint64_t seed) {
  if (!(target_norm > 0.0)) throw ContractError("spectral_init: target_norm must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  for (Parameter* w : p.projections()) {
    do {
      for (double& v : w->value.values()) {
        double s = normal(rng);
        while (std::abs(s) > 0.04) s = normal(rng);
        v = s;
      }
    } while (max_abs(w->value.values()) == 0.0);
    rescale_spectral(w->value, target_norm);
  }
  p.gamma_attn.value.fill(1.0);
  p.gamma_mlp.value.fill(1.0);
  p.beta_attn.value.fill(0.0);
  p.beta_mlp.value.fill(0.0);
}

HeadNorms head_spectral_norms(const BlockParams& p) {
  HeadNorms out;
  const std::size_t d = p.head_dim();
  const auto wq = p.w_q.value.matrix();
  const auto wk = p.w_k.value.matrix();
  const auto wv = p.w_v.value.matrix();
  for (std::size_t h = 0; h < p.heads; ++h) {
    const auto c = static_cast<Eigen::Index>(h * d);
    const auto n = static_cast<Eigen::Index>(d);
    out.value = std::max(out.value, spectral_norm(Tensor::from_matrix(wv.middleCols(c, n))));
    RowMatrix kq = wk.middleCols(c, n) * wq.middleCols(c, n).transpose();
    out.key_query = std::max(out.key_query, spectral_norm(Tensor::from_matrix(kq)));
  }
  return out;
}

}  // namespace odeflow
