#include "odeflow/stability.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <random>

#include <json.hpp>

#include "odeflow/error.hpp"

namespace odeflow {

std::string to_json(const StabilityReport& r) {
  nlohmann::ordered_json j;
  j["lipschitz_local"] = r.lipschitz_local;
  j["cn_sup"] = r.cn_sup;
  j["bound_prop1"] = r.bound_prop1;
  j["bound_closed_form"] = r.bound_closed_form;
  j["err_empirical"] = r.err_empirical;
  j["lambda_max"] = r.lambda_max;
  if (std::isinf(r.lyapunov_time)) {
    j["lyapunov_time"] = "inf";
  } else {
    j["lyapunov_time"] = r.lyapunov_time;
  }
  return j.dump(2);
}

namespace {

Tensor random_unit(const Shape& shape, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor v(shape);
  for (double& x : v.values()) x = normal(rng);
  v.matrix() /= l2_norm(v.values());
  return v;
}

double jacobian_norm(const VectorField& field, const Tensor& x, std::mt19937_64& rng, int iters) {
  const Tensor fx = field.evaluate(x);
  Tensor v = random_unit(x.shape(), rng);
  double sigma = 0.0;
  for (int it = 0; it < iters; ++it) {
    const Tensor jv = field.jvp(x, fx, v);
    const double next = l2_norm(jv.values());
    if (next == 0.0) return 0.0;
    Tensor w = field.vjp(x, jv);
    const double wn = l2_norm(w.values());
    if (wn == 0.0) return next;
    w.matrix() /= wn;
    v = std::move(w);
    const bool converged = it > 0 && std::abs(next - sigma) <= 1e-10 * next;
    sigma = next;
    if (converged) break;
  }
  return sigma;
}

}  // namespace

double local_lipschitz(const VectorField& field, const Tensor& x0, double eps, int n_samples,
                       std::uint64_t seed, int power_iters) {
  if (!(eps > 0.0) || n_samples < 1) {
    throw ContractError("local_lipschitz: eps must be positive and n_samples >= 1");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double dims = static_cast<double>(x0.numel());
  double best = 0.0;
  for (int s = 0; s < n_samples; ++s) {
    Tensor x = x0;
    if (s > 0) {
      const Tensor dir = random_unit(x0.shape(), rng);
      const double radius = eps * std::pow(unit(rng), 1.0 / dims);
      x.matrix() += radius * dir.matrix();
    }
    best = std::max(best, jacobian_norm(field, x, rng, power_iters));
  }
  return best;
}

Var jasmin_loss(Var maps, std::size_t k) {
  if (k < 2) throw ContractError("jasmin_loss: k must be > 1");
  const Tensor& P = maps.value();
  if (P.rank() != 3) throw ShapeError("jasmin_loss expects [G, T, T] maps");
  if (P.dim(2) < k) {
    throw ContractError("jasmin_loss: rows of length " + std::to_string(P.dim(2)) +
                        " have no " + std::to_string(k) + "-th largest entry");
  }
  Var ratio = sub(log(kth_largest_rows(maps, 1)), log(kth_largest_rows(maps, k)));
  return sum(group_max(ratio, P.dim(1)));
}

double jasmin_loss(std::span<const HeadMaps> maps, std::size_t k) {
  double total = 0.0;
  for (const HeadMaps& m : maps) {
    Tape t;
    total += jasmin_loss(t.constant(m.maps), k).value().item();
  }
  return total;
}

double bound_prop1(double lipschitz, double cn, int steps) {
  if (lipschitz < 0.0 || cn < 0.0 || steps < 1) {
    throw ContractError("bound_prop1: need L >= 0, C_N >= 0, N >= 1");
  }
  const double n = static_cast<double>(steps);
  if (lipschitz == 0.0) return cn / (2.0 * n);
  return std::exp(lipschitz - 1.0) * cn / (2.0 * n * lipschitz);
}

double bound_closed_form(const BoundInputs& b) {
  if (!(b.radius > 0.0) || !(b.lipschitz > 0.0) || b.steps < 1 || b.head_dim < 1) {
    throw ContractError("bound_closed_form: need R > 0, L > 0, N >= 1, d >= 1");
  }
  const double n = static_cast<double>(b.steps);
  const double sqrt_d = std::sqrt(static_cast<double>(b.head_dim));
  const double prefactor = std::expm1(b.lipschitz) / (2.0 * b.lipschitz * n);
  const double tail = b.radius * b.radius * b.norm_wv * (b.radius * b.norm_wkq + sqrt_d) /
                      (n * n * sqrt_d);
  return prefactor * tail;
}

double estimate_cn_sup(const VectorField& field, const Trajectory& traj) {
  if (!traj.recorded) throw ContractError("estimate_cn_sup needs a recorded trajectory");
  if (traj.steps < 2) throw ContractError("estimate_cn_sup needs N >= 2");
  constexpr double h = 1e-5;
  double best = 0.0;
  for (const Tensor& x : traj.states) {
    const Tensor f = field.evaluate(x);
    const double n = l2_norm(f.values());
    if (n == 0.0) continue;
    Tensor plus = x, minus = x;
    plus.matrix() += (h / n) * f.matrix();
    minus.matrix() -= (h / n) * f.matrix();
    Tensor d = field.evaluate(plus);
    d.matrix() -= field.evaluate(minus).matrix();
    best = std::max(best, l2_norm(d.values()) * n / (2.0 * h));
  }
  return best;
}

double empirical_err(const VectorField& field, const Tensor& x0, int coarse_steps, int ref_steps,
                     double horizon) {
  if (coarse_steps < 1 || ref_steps < 8 * coarse_steps) {
    throw ContractError("empirical_err: reference needs at least 8x the coarse steps");
  }
  if (ref_steps % coarse_steps != 0) {
    throw ContractError("empirical_err: reference steps must be a multiple of coarse steps");
  }
  const Trajectory coarse = euler_integrate(field, x0, coarse_steps, horizon, true);
  const Trajectory fine = euler_integrate(field, x0, ref_steps, horizon, true);
  const int stride = ref_steps / coarse_steps;
  double worst = 0.0;
  for (int n = 0; n <= coarse_steps; ++n) {
    Tensor diff = fine.states[static_cast<std::size_t>(n * stride)];
    diff.matrix() -= coarse.states[static_cast<std::size_t>(n)].matrix();
    worst = std::max(worst, l2_norm(diff.values()));
  }
  return worst;
}

LyapunovEstimate lyapunov_max(const VectorField& field, const Tensor& x0, int steps, double horizon,
                              int renorm_every, std::uint64_t seed) {
  if (renorm_every < 1 || steps < renorm_every) {
    throw ContractError("lyapunov_max: need N >= renorm_every >= 1");
  }
  if (!(horizon > 0.0)) throw ContractError("lyapunov_max: horizon must be positive");
  std::mt19937_64 rng(seed);
  const double dt = horizon / steps;
  Tensor x = x0;
  Tensor delta = random_unit(x0.shape(), rng);
  double log_growth = 0.0;
  // Growth is measured against the norm right after each renormalization so
  // that an untouched perturbation contributes exactly log(1) = 0.
  double base = l2_norm(delta.values());
  for (int n = 0; n < steps; ++n) {
    const Tensor f = field.evaluate(x);
    const Tensor jd = field.jvp(x, f, delta);
    delta.matrix() += dt * jd.matrix();
    x.matrix() += dt * f.matrix();
    if (!x.all_finite()) throw DivergenceError(n + 1, "lyapunov_max: trajectory diverged");
    const double r = l2_norm(delta.values());
    const bool last = n + 1 == steps;
    if ((n + 1) % renorm_every == 0 || last || r < 1e-300) {
      if (r == 0.0) break;
      log_growth += std::log(r / base);
      if (r != base) {
        delta.matrix() /= r;
        base = l2_norm(delta.values());
      }
    }
  }
  LyapunovEstimate out;
  out.lambda_max = log_growth / horizon;
  out.lyapunov_time =
      out.lambda_max > 0.0 ? 1.0 / out.lambda_max : std::numeric_limits<double>::infinity();
  return out;
}

std::vector<ClassLyapunovRow> per_class_lyapunov(std::span<const SampleLyapunov> samples,
                                                 int num_classes,
                                                 std::vector<std::string>* warnings) {
  std::map<int, ClassLyapunovRow> acc;
  for (const SampleLyapunov& s : samples) {
    ClassLyapunovRow& row = acc[s.label];
    row.label = s.label;
    ++row.count;
    row.mean_lambda += s.lambda;
    row.accuracy += s.prediction == s.label ? 1.0 : 0.0;
  }
  std::vector<ClassLyapunovRow> rows;
  for (int c = 0; c < num_classes; ++c) {
    auto it = acc.find(c);
    if (it == acc.end()) {
      if (warnings) warnings->push_back("class " + std::to_string(c) + " has no samples");
      continue;
    }
    ClassLyapunovRow row = it->second;
    row.mean_lambda /= static_cast<double>(row.count);
    row.accuracy /= static_cast<double>(row.count);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace odeflow
