#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace oracle {

Mat to_mat(const Tensor& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.data()[r * t.cols() + c];
  return m;
}

Tensor from_mat(const Mat& m) {
  Tensor t({m.size(), m.empty() ? 0 : m[0].size()});
  for (std::size_t r = 0; r < m.size(); ++r)
    for (std::size_t c = 0; c < m[r].size(); ++c) t.data()[r * m[r].size() + c] = m[r][c];
  return t;
}

Mat matmul(const Mat& a, const Mat& b) {
  const std::size_t n = a.size(), k = b.size(), m = b.empty() ? 0 : b[0].size();
  Mat out(n, std::vector<double>(m, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t l = 0; l < k; ++l) s += a[i][l] * b[l][j];
      out[i][j] = s;
    }
  return out;
}

Mat transpose(const Mat& a) {
  if (a.empty()) return {};
  Mat t(a[0].size(), std::vector<double>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[0].size(); ++j) t[j][i] = a[i][j];
  return t;
}

Mat identity(std::size_t n) {
  Mat m(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) m[i][i] = 1.0;
  return m;
}

Tensor random_tensor(const odeflow::Shape& shape, std::uint64_t seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape);
  for (double& v : t.values()) v = u(rng);
  return t;
}

std::vector<double> fd_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                double h) {
  std::vector<double> g(x.numel());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double keep = probe[i];
    probe[i] = keep + h;
    const double up = f(probe);
    probe[i] = keep - h;
    const double down = f(probe);
    probe[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

double relative_error(std::span<const double> a, std::span<const double> b, double floor) {
  double diff = 0.0, ref = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    ref += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max(std::sqrt(ref), floor);
}

double gradient_error(const OpBuilder& op, const std::vector<Tensor>& inputs, std::uint64_t seed,
                      double h) {
  using odeflow::Tape;
  using odeflow::Var;
  Tensor weight;
  auto loss_on = [&](Tape& t, const std::vector<Tensor>& values, std::vector<Var>& vars) {
    vars.clear();
    for (const Tensor& v : values) vars.push_back(t.input(v));
    Var out = op(t, vars);
    if (weight.empty()) weight = random_tensor(out.shape(), seed ^ 0x9e3779b97f4a7c15ULL, 0.5, 1.5);
    return odeflow::sum(odeflow::mul(out, t.constant(weight)));
  };
  Tape tape;
  std::vector<Var> vars;
  Var loss = loss_on(tape, inputs, vars);
  tape.backward(loss);
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor analytic = tape.grad(vars[i]);
    auto f = [&](const Tensor& probe) {
      std::vector<Tensor> values = inputs;
      values[i] = probe;
      Tape t;
      std::vector<Var> v;
      return loss_on(t, values, v).value().item();
    };
    const std::vector<double> numeric = fd_gradient(f, inputs[i], h);
    worst = std::max(worst, relative_error(analytic.values(), numeric));
  }
  return worst;
}

std::vector<double> singular_values(const Mat& a_in) {
  // Work on the orientation with at least as many rows as columns.
  Mat a = a_in.size() >= a_in[0].size() ? a_in : transpose(a_in);
  const std::size_t m = a.size(), n = a[0].size();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += a[i][p] * a[i][p];
          beta += a[i][q] * a[i][q];
          gamma += a[i][p] * a[i][q];
        }
        if (gamma == 0.0) continue;
        off = std::max(off, std::abs(gamma) / std::sqrt(alpha * beta));
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double ap = a[i][p], aq = a[i][q];
          a[i][p] = c * ap - s * aq;
          a[i][q] = s * ap + c * aq;
        }
      }
    if (off < 1e-15) break;
  }
  std::vector<double> sv(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += a[i][j] * a[i][j];
    sv[j] = std::sqrt(s);
  }
  std::sort(sv.rbegin(), sv.rend());
  return sv;
}

Mat expm(const Mat& a) {
  const std::size_t n = a.size();
  double norm = 0.0;
  for (const auto& row : a) {
    double s = 0.0;
    for (double v : row) s += std::abs(v);
    norm = std::max(norm, s);
  }
  int squarings = 0;
  while (norm > 0.25) {
    norm /= 2.0;
    ++squarings;
  }
  const double scale = std::ldexp(1.0, -squarings);
  Mat x = a;
  for (auto& row : x)
    for (double& v : row) v *= scale;
  Mat result = identity(n), term = identity(n);
  for (int k = 1; k <= 24; ++k) {
    term = matmul(term, x);
    for (auto& row : term)
      for (double& v : row) v /= k;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) result[i][j] += term[i][j];
  }
  for (int s = 0; s < squarings; ++s) result = matmul(result, result);
  return result;
}

Mat center_normalize(const Mat& x, std::span<const double> gamma, std::span<const double> beta) {
  Mat out = x;
  for (auto& row : out) {
    const double d = static_cast<double>(row.size());
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= d;
    for (std::size_t j = 0; j < row.size(); ++j)
      row[j] = gamma[j] * (d / (d - 1.0)) * (row[j] - mean) + beta[j];
  }
  return out;
}

Mat layer_normalize(const Mat& x, std::span<const double> gamma, std::span<const double> beta,
                    double eps) {
  Mat out = x;
  for (auto& row : out) {
    const double d = static_cast<double>(row.size());
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= d;
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= d;
    for (std::size_t j = 0; j < row.size(); ++j)
      row[j] = gamma[j] * (row[j] - mean) / std::sqrt(var + eps) + beta[j];
  }
  return out;
}

namespace {

Mat normalized(const Mat& x, const odeflow::Parameter& g, const odeflow::Parameter& b, bool ln) {
  return ln ? layer_normalize(x, g.value.values(), b.value.values())
            : center_normalize(x, g.value.values(), b.value.values());
}

}  // namespace

std::vector<Mat> attention_maps(const Mat& xn, const odeflow::BlockParams& p) {
  const std::size_t T = xn.size(), D = p.dim, H = p.heads, d = D / H;
  const Mat wq = to_mat(p.w_q.value), wk = to_mat(p.w_k.value);
  std::vector<Mat> maps;
  for (std::size_t h = 0; h < H; ++h) {
    Mat logits(T, std::vector<double>(T, 0.0));
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < T; ++j) {
        // x_i^T W_Q^h (W_K^h)^T x_j / sqrt(d)
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          double qi = 0.0, kj = 0.0;
          for (std::size_t e = 0; e < D; ++e) {
            qi += xn[i][e] * wq[e][h * d + c];
            kj += xn[j][e] * wk[e][h * d + c];
          }
          s += qi * kj;
        }
        logits[i][j] = s / std::sqrt(static_cast<double>(d));
      }
    for (auto& row : logits) {
      const double mx = *std::max_element(row.begin(), row.end());
      double z = 0.0;
      for (double& v : row) z += (v = std::exp(v - mx));
      for (double& v : row) v /= z;
    }
    maps.push_back(std::move(logits));
  }
  return maps;
}

Mat attention(const Mat& x, const odeflow::BlockParams& p, bool layer_norm) {
  const std::size_t T = x.size(), D = p.dim, H = p.heads, d = D / H;
  const Mat xn = normalized(x, p.gamma_attn, p.beta_attn, layer_norm);
  const std::vector<Mat> maps = attention_maps(xn, p);
  const Mat wv = to_mat(p.w_v.value), wo = to_mat(p.w_o.value);
  Mat concat(T, std::vector<double>(D, 0.0));
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t c = 0; c < d; ++c) {
        double s = 0.0;
        for (std::size_t j = 0; j < T; ++j) {
          double vj = 0.0;
          for (std::size_t e = 0; e < D; ++e) vj += xn[j][e] * wv[e][h * d + c];
          s += maps[h][i][j] * vj;
        }
        concat[i][h * d + c] = s;
      }
  return matmul(concat, wo);
}

Mat mlp(const Mat& x, const odeflow::BlockParams& p, bool layer_norm) {
  Mat hidden = matmul(normalized(x, p.gamma_mlp, p.beta_mlp, layer_norm), to_mat(p.w1.value));
  for (auto& row : hidden)
    for (double& v : row) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
  return matmul(hidden, to_mat(p.w2.value));
}

Mat psi(const Mat& x, const odeflow::BlockParams& p) {
  Mat f = mlp(x, p), g = attention(x, p);
  for (std::size_t i = 0; i < f.size(); ++i)
    for (std::size_t j = 0; j < f[i].size(); ++j) f[i][j] += g[i][j];
  return f;
}

Mat teacher_block(const Mat& x, const odeflow::BlockParams& p) {
  Mat mid = x;
  const Mat a = attention(x, p, true);
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < x[i].size(); ++j) mid[i][j] += a[i][j];
  Mat out = mid;
  const Mat m = mlp(mid, p, true);
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < x[i].size(); ++j) out[i][j] += m[i][j];
  return out;
}

Mat patches(const Tensor& image, std::size_t S) {
  const std::size_t H = image.dim(0), W = image.dim(1), C = image.dim(2);
  Mat out;
  for (std::size_t py = 0; py < H / S; ++py)
    for (std::size_t px = 0; px < W / S; ++px) {
      std::vector<double> row;
      for (std::size_t dy = 0; dy < S; ++dy)
        for (std::size_t dx = 0; dx < S; ++dx)
          for (std::size_t c = 0; c < C; ++c)
            row.push_back(image.data()[((py * S + dy) * W + (px * S + dx)) * C + c]);
      out.push_back(std::move(row));
    }
  return out;
}

double jasmin(const std::vector<Mat>& maps, std::size_t k) {
  double total = 0.0;
  for (const Mat& m : maps) {
    double worst = -INFINITY;
    for (std::vector<double> row : m) {
      std::sort(row.rbegin(), row.rend());
      worst = std::max(worst, std::log(row[0] / row[k - 1]));
    }
    total += worst;
  }
  return total;
}

double mse(const Mat& a, const Mat& b) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j, ++n) s += (a[i][j] - b[i][j]) * (a[i][j] - b[i][j]);
  return s / static_cast<double>(n);
}

}  // namespace oracle
