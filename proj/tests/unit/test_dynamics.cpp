#include <doctest.h>

#include <cmath>
#include <numeric>

#include "oracles.hpp"
#include "odeflow/container.hpp"
#include "odeflow/dynamics.hpp"
#include "odeflow/error.hpp"

using namespace odeflow;

namespace {

BlockParams random_block(std::size_t dim, std::size_t heads, std::size_t ratio, std::uint64_t seed,
                         double scale = 0.4) {
  BlockParams p(dim, heads, ratio);
  std::uint64_t s = seed;
  for (Parameter* w : p.parameters()) {
    w->value = oracle::random_tensor(w->value.shape(), ++s, -scale, scale);
  }
  // Keep the affine maps near identity so the normalization stays meaningful.
  for (Parameter* g : {&p.gamma_attn, &p.gamma_mlp})
    for (double& v : g->value.values()) v += 1.0;
  return p;
}

double max_diff(const oracle::Mat& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) m = std::max(m, std::abs(a[i][j] - b.at(i, j)));
  return m;
}

}  // namespace

TEST_SUITE("dynamics") {

TEST_CASE("center normalize") {
  const std::size_t D = 5;
  Tensor ones({D}, 1.0), zeros({D}, 0.0);
  Tensor c({1, D}, 3.5);
  for (double v : oracle::entries(center_normalize(c, ones, zeros))) CHECK(v == 0.0);

  Tensor centered = Tensor::matrix({{1, -2, 0, 3, -2}});
  Tensor out = center_normalize(centered, ones, zeros);
  for (std::size_t j = 0; j < D; ++j) CHECK(out[j] == doctest::Approx(centered[j] * 5.0 / 4.0).epsilon(1e-15));

  Tensor r = oracle::random_tensor({6, D}, 3, -5.0, 5.0);
  Tensor g = oracle::random_tensor({D}, 4, 0.5, 2.0);
  Tensor rn = center_normalize(r, Tensor({D}, 1.7), zeros);
  for (std::size_t i = 0; i < 6; ++i) {
    const auto row = rn.row(i);
    CHECK(std::abs(std::accumulate(row.begin(), row.end(), 0.0) / D) < 1e-12);
  }
  const Tensor b = oracle::random_tensor({D}, 5);
  const auto lib = center_normalize(r, g, b);
  const auto ref = oracle::center_normalize(oracle::to_mat(r), g.values(), b.values());
  CHECK(max_diff(ref, lib) < 1e-13);
}

TEST_CASE("attention maps") {
  BlockParams p = random_block(8, 2, 2, 1);
  p.w_q.value.fill(0.0);
  const Tensor x = oracle::random_tensor({5, 8}, 2);
  const HeadMaps hm = attention_maps(x, p);
  REQUIRE(hm.heads() == 2);
  for (double v : oracle::entries(hm.maps)) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));

  BlockParams q = random_block(8, 2, 2, 3);
  const HeadMaps single = attention_maps(oracle::random_tensor({1, 8}, 4), q);
  for (double v : oracle::entries(single.maps)) CHECK(v == 1.0);

  const Tensor x3 = oracle::random_tensor({3, 8}, 5, -2.0, 2.0);
  const HeadMaps lib = attention_maps(x3, q);
  const auto xn = oracle::center_normalize(oracle::to_mat(x3), q.gamma_attn.value.values(),
                                           q.beta_attn.value.values());
  const auto ref = oracle::attention_maps(xn, q);
  for (std::size_t h = 0; h < 2; ++h) CHECK(max_diff(ref[h], lib.head(h)) < 1e-12);
}

TEST_CASE("attention maps are row stochastic for extreme inputs") {
  BlockParams p = random_block(8, 4, 1, 7, 3.0);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const HeadMaps hm = attention_maps(oracle::random_tensor({9, 8}, 100 + s, -50.0, 50.0), p);
    const Tensor& m = hm.maps;
    for (std::size_t r = 0; r < m.rows(); ++r) {
      const auto row = m.row(r);
      CHECK(std::abs(std::accumulate(row.begin(), row.end(), 0.0) - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("attention sub-flow") {
  BlockParams p = random_block(6, 2, 1, 11);
  p.w_v.value.fill(0.0);
  for (double v : oracle::entries(attn_subflow(oracle::random_tensor({4, 6}, 1), p))) CHECK(v == 0.0);

  // One head with identity projections on a single token.
  BlockParams id(4, 1, 1);
  for (Parameter* w : {&id.w_q, &id.w_k, &id.w_v, &id.w_o}) w->value = oracle::from_mat(oracle::identity(4));
  const Tensor x = Tensor::matrix({{1, 2, 3, 6}});
  const Tensor g = attn_subflow(x, id);
  const double m = 3.0;
  for (std::size_t j = 0; j < 4; ++j) CHECK(g[j] == doctest::Approx((x[j] - m) * 4.0 / 3.0).epsilon(1e-14));

  BlockParams q = random_block(8, 2, 2, 13);
  const Tensor xr = oracle::random_tensor({5, 8}, 14, -2.0, 2.0);
  CHECK(max_diff(oracle::attention(oracle::to_mat(xr), q), attn_subflow(xr, q)) < 1e-10);
}

TEST_CASE("mlp sub-flow") {
  BlockParams p = random_block(6, 2, 2, 21);
  const Tensor x = oracle::random_tensor({4, 6}, 22);
  BlockParams a = p;
  a.w2.value.fill(0.0);
  for (double v : oracle::entries(mlp_subflow(x, a))) CHECK(v == 0.0);
  BlockParams b = p;
  b.w1.value.fill(0.0);
  for (double v : oracle::entries(mlp_subflow(x, b))) CHECK(v == 0.0);

  BlockParams r1 = random_block(8, 2, 1, 23);
  const Tensor xr = oracle::random_tensor({5, 8}, 24, -2.0, 2.0);
  CHECK(max_diff(oracle::mlp(oracle::to_mat(xr), r1), mlp_subflow(xr, r1)) < 1e-10);
}

TEST_CASE("psi") {
  BlockParams zero(8, 2, 2);
  for (double v : oracle::entries(psi(oracle::random_tensor({5, 8}, 1), zero))) CHECK(v == 0.0);

  BlockParams p = random_block(8, 2, 2, 31);
  const Tensor x = oracle::random_tensor({5, 8}, 32, -2.0, 2.0);
  const Tensor y1 = psi(x, p);
  CHECK(y1 == psi(x, p));
  const Tensor f = mlp_subflow(x, p), g = attn_subflow(x, p);
  for (std::size_t i = 0; i < y1.numel(); ++i) CHECK(std::abs(y1[i] - (f[i] + g[i])) < 1e-15);
  CHECK(max_diff(oracle::psi(oracle::to_mat(x), p), y1) < 1e-10);
}

TEST_CASE("psi on a tape matches the plain evaluation") {
  BlockParams p = random_block(8, 2, 2, 41);
  const std::size_t B = 3, T = 5;
  const Tensor xb = oracle::random_tensor({B * T, 8}, 42, -2.0, 2.0);
  Tape tape;
  const BlockVars w = bind_constant(tape, p);
  const Tensor out = psi(tape.constant(xb), w, {B, T, 2}).value();
  for (std::size_t b = 0; b < B; ++b) {
    Tensor xs({T, 8});
    for (std::size_t t = 0; t < T; ++t)
      std::copy_n(xb.row(b * T + t).data(), 8, xs.row(t).data());
    const Tensor ys = psi(xs, p);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < 8; ++j) CHECK(std::abs(out.at(b * T + t, j) - ys.at(t, j)) < 1e-12);
  }
}

TEST_CASE("psi is equivariant to patch permutations") {
  BlockParams p = random_block(8, 2, 2, 51);
  const Tensor x = oracle::random_tensor({6, 8}, 52, -2.0, 2.0);
  const std::vector<std::size_t> perm = {0, 3, 5, 1, 2, 4};
  Tensor xp({6, 8});
  for (std::size_t i = 0; i < 6; ++i) std::copy_n(x.row(perm[i]).data(), 8, xp.row(i).data());
  const Tensor y = psi(x, p), yp = psi(xp, p);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 8; ++j) CHECK(std::abs(yp.at(i, j) - y.at(perm[i], j)) < 1e-12);
}

TEST_CASE("spectral norm") {
  CHECK(spectral_norm(oracle::from_mat(oracle::identity(5))) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(spectral_norm(Tensor::matrix({{0, 2}, {0, 0}})) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(spectral_norm(Tensor({3, 3})) == 0.0);
  for (std::uint64_t s = 1; s <= 5; ++s) {
    const Tensor w = oracle::random_tensor({8, 8}, s);
    const double ref = oracle::singular_values(oracle::to_mat(w)).front();
    CHECK(std::abs(spectral_norm(w) - ref) < 1e-6);
  }
  const Tensor rect = oracle::random_tensor({8, 24}, 9);
  CHECK(std::abs(spectral_norm(rect) - oracle::singular_values(oracle::to_mat(rect)).front()) < 1e-6);
}

TEST_CASE("rescale to a target spectral norm") {
  Tensor d = Tensor::matrix({{3, 0}, {0, 1}});
  rescale_spectral(d, 1.0);
  CHECK(d.at(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(d.at(1, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(d.at(0, 1) == 0.0);
  Tensor z({2, 2});
  CHECK_THROWS_AS(rescale_spectral(z, 1.0), ContractError);
}

TEST_CASE("spectral init") {
  BlockParams a(16, 4, 2), b(16, 4, 2);
  spectral_init(a, 1.0, 77);
  spectral_init(b, 1.0, 77);
  for (std::size_t i = 0; i < a.parameters().size(); ++i)
    CHECK(a.parameters()[i]->value == b.parameters()[i]->value);
  for (const Parameter* w : a.projections()) {
    CAPTURE(w->name);
    const double ref = oracle::singular_values(oracle::to_mat(w->value)).front();
    CHECK(std::abs(ref - 1.0) < 1e-3);
  }
  for (double v : oracle::entries(a.gamma_attn.value)) CHECK(v == 1.0);
  for (double v : oracle::entries(a.beta_mlp.value)) CHECK(v == 0.0);
  BlockParams c(16, 4, 2);
  spectral_init(c, 0.5, 78);
  CHECK(c.w_q.value != a.w_q.value);
  CHECK(std::abs(spectral_norm(c.w_o.value) - 0.5) < 1e-3);
  CHECK_THROWS_AS(spectral_init(c, 0.0, 1), ContractError);
}

TEST_CASE("block parameters validate their shape") {
  CHECK_THROWS_AS(BlockParams(10, 3, 1), ContractError);
  CHECK_THROWS_AS(psi(Tensor({3, 6}), BlockParams(8, 2, 1)), ShapeError);
}

TEST_CASE("container round trip is bit exact") {
  BlockParams p = random_block(8, 2, 2, 61);
  const Container c = block_container(p, 16);
  const std::string bytes = encode_container(c);
  CHECK(bytes.substr(0, 4) == "ODEV");
  const Container back = decode_container(bytes);
  CHECK(back == c);
  CHECK(encode_container(back) == bytes);
  const BlockParams q = block_from_container(back);
  CHECK(q.dim == 8);
  CHECK(q.heads == 2);
  CHECK(q.mlp_ratio == 2);
  for (std::size_t i = 0; i < p.parameters().size(); ++i)
    CHECK(q.parameters()[i]->value == p.parameters()[i]->value);
}

TEST_CASE("container rejects malformed bytes") {
  const std::string bytes = encode_container(block_container(random_block(4, 1, 1, 71), 4));
  CHECK_THROWS_AS(decode_container("ODEX" + bytes.substr(4)), FormatError);
  CHECK_THROWS_AS(decode_container(bytes.substr(0, 10)), FormatError);
  CHECK_THROWS_AS(decode_container(bytes.substr(0, bytes.size() - 3)), FormatError);
  std::string wrong_version = bytes;
  wrong_version[4] = 9;
  CHECK_THROWS_AS(decode_container(wrong_version), FormatError);
  Container c = decode_container(bytes);
  CHECK_THROWS_AS(c.get("missing"), FormatError);
}

}  // TEST_SUITE
