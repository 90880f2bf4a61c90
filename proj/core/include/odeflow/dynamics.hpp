#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "odeflow/autodiff.hpp"
#include "odeflow/tensor.hpp"

namespace odeflow {

enum class NormKind { Center, Layer };

/// Weights of one attention + MLP block.
///
/// The ODE student uses a single instance for every integration step, so the
/// field it defines is autonomous. Teacher layers each own an instance.
/// Per-head projections are column blocks of the D x D matrices: head h uses
/// columns [h*d, (h+1)*d) of w_q, w_k and w_v.
struct BlockParams {
  std::size_t dim = 0;
  std::size_t heads = 1;
  std::size_t mlp_ratio = 1;

  Parameter w_q, w_k, w_v, w_o;
  Parameter w1, w2;
  Parameter gamma_attn, beta_attn;
  Parameter gamma_mlp, beta_mlp;

  BlockParams() = default;
  /// Zero projections, unit gains, zero shifts.
  BlockParams(std::size_t dim, std::size_t heads, std::size_t mlp_ratio);

  std::size_t head_dim() const noexcept { return dim / heads; }
  std::size_t hidden_dim() const noexcept { return dim * mlp_ratio; }

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::vector<Parameter*> projections();
  std::vector<const Parameter*> projections() const;
  void set_trainable(bool trainable);
};

/// BlockParams recorded on a tape.
struct BlockVars {
  Var w_q, w_k, w_v, w_o, w1, w2;
  Var gamma_attn, beta_attn, gamma_mlp, beta_mlp;
};

BlockVars bind(Tape& tape, BlockParams& p);
BlockVars bind_constant(Tape& tape, const BlockParams& p);

/// Tokens are stored as a (batch * tokens) x dim matrix; batch samples are
/// contiguous row blocks.
struct TokenLayout {
  std::size_t batch = 1;
  std::size_t tokens = 1;
  std::size_t heads = 1;
};

Var normalize(Var x, Var gamma, Var beta, NormKind kind);
/// G(x). When `maps` is non-null it receives the [batch*heads, T, T] attention maps.
Var attn_subflow(Var x, const BlockVars& w, const TokenLayout& layout, NormKind kind,
                 Var* maps = nullptr);
/// F(x).
Var mlp_subflow(Var x, const BlockVars& w, NormKind kind);
/// psi(x) = F(x) + G(x).
Var psi(Var x, const BlockVars& w, const TokenLayout& layout, Var* maps = nullptr);

// ---- plain-tensor evaluation (single sample, x is (M+1+R) x D) -------------

/// Per-head logits operators A_h = W_Q^h (W_K^h)^T / sqrt(d) and the
/// row-stochastic maps P_h = softmax_rows(Xc A_h Xc^T) on the center-normalized
/// state Xc that the attention sub-flow actually sees.
struct HeadMaps {
  std::vector<Tensor> logits_operator;  // heads x [D x D]
  Tensor maps;                          // [heads, T, T]

  std::size_t heads() const noexcept { return logits_operator.size(); }
  Tensor head(std::size_t h) const;
};

Tensor center_normalize(const Tensor& x, const Tensor& gamma, const Tensor& beta);
HeadMaps attention_maps(const Tensor& x, const BlockParams& p);
Tensor attn_subflow(const Tensor& x, const BlockParams& p);
Tensor mlp_subflow(const Tensor& x, const BlockParams& p);
Tensor psi(const Tensor& x, const BlockParams& p);

// ---- spectral control -------------------------------------------------------

/// Largest singular value by power iteration on W^T W. Returns 0 for a zero matrix.
double spectral_norm(const Tensor& w, int max_iters = 1000, double tol = 1e-12);

/// W <- W * target_norm / |W|_2. Throws ContractError for a zero matrix.
void rescale_spectral(Tensor& w, double target_norm);

/// Draw every projection from a truncated normal (std 0.02, cut at 2 std) and
/// rescale it so that its spectral norm equals `target_norm`. Gains are reset
/// to one and shifts to zero.
void spectral_init(BlockParams& p, double target_norm, std::uint64_t seed);

/// Max over heads of ||W_V^h||_2 and ||W_K^h (W_Q^h)^T||_2.
struct HeadNorms {
  double value = 0.0;
  double key_query = 0.0;
};
HeadNorms head_spectral_norms(const BlockParams& p);

}  // namespace odeflow
