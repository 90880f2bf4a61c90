#include "odeflow/integrator.hpp"

#include <cmath>
#include <ostream>

#include "odeflow/error.hpp"

namespace odeflow {

namespace {

void guard(const Tensor& x, int step) {
  for (double v : x.values()) {
    if (!std::isfinite(v) || std::abs(v) > kDivergenceLimit) {
      throw DivergenceError(step, "integration diverged at step " + std::to_string(step));
    }
  }
}

std::vector<double> cls_row(const Tensor& x) {
  auto r = x.row(0);
  return {r.begin(), r.end()};
}

double distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace

Trajectory euler_integrate(const VectorField& field, const Tensor& x0, int steps, double horizon,
                           bool record) {
  if (steps < 1) throw ContractError("euler_integrate: steps must be >= 1");
  if (!(horizon > 0.0)) throw ContractError("euler_integrate: horizon must be positive");
  Trajectory traj;
  traj.steps = steps;
  traj.horizon = horizon;
  traj.recorded = record;
  traj.states.reserve(record ? static_cast<std::size_t>(steps) + 1 : 2);
  traj.states.push_back(x0);
  const double dt = horizon / steps;
  Tensor x = x0;
  for (int n = 0; n < steps; ++n) {
    Tensor f = field.evaluate(x);
    x.matrix() += dt * f.matrix();
    guard(x, n + 1);
    if (record) traj.states.push_back(x);
  }
  if (!record) traj.states.push_back(std::move(x));
  return traj;
}

const Tensor& state_at_fraction(const Trajectory& traj, double s) {
  if (!traj.recorded) throw ContractError("state_at_fraction needs a recorded trajectory");
  if (!(s >= 0.0 && s <= 1.0)) throw ContractError("state_at_fraction: s outside [0, 1]");
  const auto idx = static_cast<std::size_t>(std::floor(s * traj.steps + 0.5));
  return traj.states.at(idx);
}

int argmax(std::span<const double> v) {
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

std::vector<SweepRow> step_sweep(const VectorField& field, const Tensor& x0,
                                 std::span<const int> steps, double horizon, int reference_steps,
                                 const Classifier& head) {
  return horizon_sweep(field, x0, std::span<const double>(&horizon, 1), steps, horizon,
                       reference_steps, head);
}

std::vector<SweepRow> horizon_sweep(const VectorField& field, const Tensor& x0,
                                    std::span<const double> horizons, std::span<const int> steps,
                                    double reference_horizon, int reference_steps,
                                    const Classifier& head) {
  if (horizons.empty() || steps.empty()) throw ContractError("sweep needs a non-empty grid");
  std::vector<double> reference;
  try {
    reference = cls_row(euler_integrate(field, x0, reference_steps, reference_horizon, false).final());
  } catch (const DivergenceError&) {
    reference.clear();
  }
  std::vector<SweepRow> rows;
  for (double T : horizons) {
    for (int N : steps) {
      SweepRow row;
      row.steps = N;
      row.horizon = T;
      try {
        const Trajectory traj = euler_integrate(field, x0, N, T, false);
        const std::vector<double> cls = cls_row(traj.final());
        row.prediction = argmax(head(cls));
        row.cls_drift = reference.empty() ? std::nan("") : distance(cls, reference);
      } catch (const DivergenceError& e) {
        row.error = e.what();
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

void write_trajectory_csv(std::ostream& out, const Trajectory& traj) {
  const std::size_t D = traj.initial().cols();
  out << "step,t";
  for (std::size_t j = 0; j < D; ++j) out << ",cls_" << j;
  out << '\n';
  const auto old_precision = out.precision(17);
  for (std::size_t i = 0; i < traj.states.size(); ++i) {
    const int step = traj.recorded ? static_cast<int>(i) : (i == 0 ? 0 : traj.steps);
    out << step << ',' << step * traj.dt();
    for (double v : traj.states[i].row(0)) out << ',' << v;
    out << '\n';
  }
  out.precision(old_precision);
}

}  // namespace odeflow
