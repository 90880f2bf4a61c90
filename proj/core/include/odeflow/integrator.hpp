#pragma once

#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "odeflow/fields.hpp"
#include "odeflow/tensor.hpp"

namespace odeflow {

inline constexpr int kDefaultSteps = 24;
inline constexpr double kDefaultHorizon = 1.0;
/// Any state entry beyond this magnitude aborts integration.
inline constexpr double kDivergenceLimit = 1e6;

/// x_0 ... x_N of an explicit Euler solve with dt = horizon / steps. When not
/// recorded only x_0 and x_N are kept.
struct Trajectory {
  std::vector<Tensor> states;
  int steps = 0;
  double horizon = 0.0;
  bool recorded = true;

  double dt() const noexcept { return horizon / steps; }
  const Tensor& initial() const { return states.front(); }
  const Tensor& final() const { return states.back(); }
};

/// x_{n+1} = x_n + (T/N) f(x_n). Throws DivergenceError naming the step that
/// produced a non-finite or runaway state.
Trajectory euler_integrate(const VectorField& field, const Tensor& x0, int steps, double horizon,
                           bool record = true);

/// states[round_half_up(s * N)]
const Tensor& state_at_fraction(const Trajectory& traj, double s);

/// Maps a CLS vector to class logits.
using Classifier = std::function<std::vector<double>(std::span<const double>)>;

/// Index of the largest entry; ties go to the lowest index.
int argmax(std::span<const double> v);

struct SweepRow {
  int steps = 0;
  double horizon = 0.0;
  int prediction = -1;
  double cls_drift = 0.0;
  std::string error;

  bool ok() const noexcept { return error.empty(); }
};

/// One row per step count: predicted class and |CLS_N - CLS_ref| against the
/// solve at (horizon, reference_steps). Divergence is reported per row.
std::vector<SweepRow> step_sweep(const VectorField& field, const Tensor& x0,
                                 std::span<const int> steps, double horizon, int reference_steps,
                                 const Classifier& head);

/// Grid over horizons x step counts with dt = T / N for every cell.
std::vector<SweepRow> horizon_sweep(const VectorField& field, const Tensor& x0,
                                    std::span<const double> horizons, std::span<const int> steps,
                                    double reference_horizon, int reference_steps,
                                    const Classifier& head);

/// Columns: step,t,cls_0..cls_{D-1}.
void write_trajectory_csv(std::ostream& out, const Trajectory& traj);

}  // namespace odeflow
