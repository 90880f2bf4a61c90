#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "odeflow/autodiff.hpp"
#include "odeflow/dynamics.hpp"
#include "odeflow/fields.hpp"
#include "odeflow/integrator.hpp"

namespace odeflow {

struct StabilityReport {
  double lipschitz_local = 0.0;
  double cn_sup = 0.0;
  double bound_prop1 = 0.0;
  double bound_closed_form = 0.0;
  double err_empirical = 0.0;
  double lambda_max = 0.0;
  double lyapunov_time = 0.0;  // +inf when lambda_max <= 0
};

/// JSON object with keys lipschitz_local, cn_sup, bound_prop1,
/// bound_closed_form, err_empirical, lambda_max, lyapunov_time. An infinite
/// Lyapunov time is written as the string "inf".
std::string to_json(const StabilityReport& r);

/// Inputs of the closed-form discretization bound.
struct BoundInputs {
  double radius = 10.0;
  double lipschitz = 0.5;
  int steps = 24;
  int head_dim = 1;
  double norm_wv = 0.0;   // ||W_V||_2
  double norm_wkq = 0.0;  // ||W_K W_Q^T||_2
};

/// max over points sampled in the eps-ball around x0 (x0 included) of the
/// Jacobian spectral norm, by power iteration with finite-difference JVPs and
/// exact VJPs.
double local_lipschitz(const VectorField& field, const Tensor& x0, double eps, int n_samples,
                       std::uint64_t seed, int power_iters = 200);

/// Sum over maps of the max over rows of log(g_1 / g_k), where g_j is the j-th
/// largest entry of the row. `maps` is [G, T, T] (G = steps x heads x batch).
Var jasmin_loss(Var maps, std::size_t k);
double jasmin_loss(std::span<const HeadMaps> maps, std::size_t k);

/// e^(L-1) C_N / (2 N L) for L > 0, C_N / (2 N) for L = 0.
double bound_prop1(double lipschitz, double cn, int steps);

/// (e^L - 1)/(2 L N) * R^2 ||W_V|| (R ||W_K W_Q^T|| + sqrt d) / (N^2 sqrt d)
double bound_closed_form(const BoundInputs& b);

/// sup over recorded states of |J_f(x_n) f(x_n)|_2 (central differences along f). The
/// state norm matches the one empirical_err and local_lipschitz measure in.
double estimate_cn_sup(const VectorField& field, const Trajectory& traj);

/// max_n |y(t_n) - x_n|_2 between a coarse solve and a fine reference solve.
double empirical_err(const VectorField& field, const Tensor& x0, int coarse_steps, int ref_steps,
                     double horizon);

struct LyapunovEstimate {
  double lambda_max = 0.0;
  double lyapunov_time = 0.0;
};

/// Benettin estimate of the maximal Lyapunov exponent along the Euler solve.
LyapunovEstimate lyapunov_max(const VectorField& field, const Tensor& x0, int steps, double horizon,
                              int renorm_every, std::uint64_t seed);

struct SampleLyapunov {
  int label = 0;
  int prediction = 0;
  double lambda = 0.0;
};

struct ClassLyapunovRow {
  int label = 0;
  std::size_t count = 0;
  double mean_lambda = 0.0;
  double accuracy = 0.0;
};

/// Per-class mean exponent and accuracy. Classes in [0, num_classes) without
/// samples are omitted and reported in `warnings`.
std::vector<ClassLyapunovRow> per_class_lyapunov(std::span<const SampleLyapunov> samples,
                                                 int num_classes,
                                                 std::vector<std::string>* warnings = nullptr);

}  // namespace odeflow
