#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "helpers.hpp"
#include "perft/errors.hpp"
#include "perft/numerics.hpp"
#include "perft/rng.hpp"

using namespace perft;
using perft::testing::naive_matmul;
using perft::testing::naive_transpose;
using perft::testing::random_tensor;

TEST_CASE("tensor construction checks shape and finiteness") {
  CHECK_THROWS_AS(Tensor({2, 0}), DimensionError);
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), DimensionError);
  CHECK_THROWS_AS(Tensor({1, 2}, {1.0, std::nan("")}), NumericError);
  CHECK_THROWS_AS(Tensor({1, 1}, {INFINITY}), NumericError);
  Tensor t({3}, {1.0, 2.0, 3.0});
  CHECK(t.rows() == 1);
  CHECK(t.cols() == 3);
}

TEST_CASE("bitwise_equal separates signed zeros") {
  Tensor a({1, 1}, {0.0});
  Tensor b({1, 1}, {-0.0});
  CHECK(a == b);
  CHECK_FALSE(bitwise_equal(a, b));
  CHECK(bitwise_equal(a, a));
}

TEST_CASE("matmul examples") {
  const Tensor i2 = Tensor::identity(2);
  const Tensor m = Tensor::from_rows({{1, 2}, {3, 4}});
  CHECK(matmul(i2, m) == m);
  CHECK(matmul(Tensor::from_rows({{1, 0}}), Tensor::from_rows({{2}, {5}})) == Tensor::from_rows({{2}}));
  CHECK_THROWS_AS(matmul(Tensor::zeros(2, 3), Tensor::zeros(2, 3)), DimensionError);
}

TEST_CASE("matmul family agrees with a triple-loop oracle") {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = random_tensor(rng, 3, 4);
    const Tensor b = random_tensor(rng, 4, 2);
    CHECK(max_abs_diff(matmul(a, b), naive_matmul(a, b)) < 1e-12);
    CHECK(max_abs_diff(matmul_tn(naive_transpose(a), b), naive_matmul(a, b)) < 1e-12);
    CHECK(max_abs_diff(matmul_nt(a, naive_transpose(b)), naive_matmul(a, b)) < 1e-12);
    Tensor c = random_tensor(rng, 3, 2);
    Tensor expect = c;
    const Tensor ab = naive_matmul(a, b);
    for (std::size_t i = 0; i < expect.size(); ++i) expect[i] += 0.5 * ab[i];
    gemm_accumulate(c, naive_transpose(a), true, naive_transpose(b), true, 0.5);
    CHECK(max_abs_diff(c, expect) < 1e-12);
  }
}

TEST_CASE("matmul backward matches finite differences") {
  Rng rng(2);
  Parameter a("a", random_tensor(rng, 3, 4));
  Parameter b("b", random_tensor(rng, 4, 2));
  const Tensor w = random_tensor(rng, 3, 2);
  auto f = [&] {
    const Tensor c = matmul(a.value, b.value);
    double s = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) s += w[i] * c[i];
    return s;
  };
  matmul_backward(a.value, b.value, w, &a.grad, &b.grad);
  std::vector<Parameter*> ps{&a, &b};
  const auto num = finite_diff_grad(f, ps);
  CHECK(max_relative_error(a.grad, num[0]) < 1e-8);
  CHECK(max_relative_error(b.grad, num[1]) < 1e-8);
}

TEST_CASE("gather and scatter rows") {
  const Tensor a = Tensor::from_rows({{1, 2}, {3, 4}, {5, 6}});
  const std::vector<std::size_t> rows{2, 0};
  CHECK(gather_rows(a, rows) == Tensor::from_rows({{5, 6}, {1, 2}}));
  Tensor out = Tensor::zeros(3, 2);
  scatter_add_rows(out, Tensor::from_rows({{1, 1}, {2, 2}}), rows, 2.0);
  CHECK(out == Tensor::from_rows({{4, 4}, {0, 0}, {2, 2}}));
  CHECK(gather_rows(a, {}).empty());
}

TEST_CASE("softmax examples") {
  CHECK(max_abs_diff(softmax_rows(Tensor::from_rows({{0, 0, 0}})), Tensor::from_rows({{1.0 / 3, 1.0 / 3, 1.0 / 3}})) <
        1e-15);
  const Tensor p = softmax_rows(Tensor::from_rows({{0, std::log(2.0), std::log(6.0)}}));
  CHECK(p(0, 0) == doctest::Approx(1.0 / 9).epsilon(1e-14));
  CHECK(p(0, 1) == doctest::Approx(2.0 / 9).epsilon(1e-14));
  CHECK(p(0, 2) == doctest::Approx(6.0 / 9).epsilon(1e-14));
  const Tensor big = softmax_rows(Tensor::from_rows({{1000, 0}}));
  CHECK(big.all_finite());
  CHECK(big(0, 0) == 1.0);
  CHECK(big(0, 1) < 1e-300);
}

TEST_CASE("softmax rows sum to one and ignore row shifts") {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor z = random_tensor(rng, 4, 7, 5.0);
    const Tensor p = softmax_rows(z);
    for (std::size_t r = 0; r < z.rows(); ++r) {
      double s = 0.0;
      for (double v : p.row(r)) s += v;
      CHECK(std::abs(s - 1.0) < 1e-12);
      const double shift = rng.uniform(-50, 50);
      for (auto& v : z.row(r)) v += shift;
    }
    CHECK(max_abs_diff(softmax_rows(z), p) < 1e-12);
  }
}

TEST_CASE("softmax and logsumexp backward") {
  Rng rng(4);
  Parameter z("z", random_tensor(rng, 3, 5));
  const Tensor w = random_tensor(rng, 3, 5);
  auto f = [&] {
    const Tensor p = softmax_rows(z.value);
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += w[i] * p[i];
    return s;
  };
  z.grad = softmax_rows_backward(softmax_rows(z.value), w);
  std::vector<Parameter*> ps{&z};
  CHECK(max_relative_error(z.grad, finite_diff_grad(f, ps)[0]) < 1e-8);
  const auto lse = logsumexp_rows(Tensor::from_rows({{0, 0, 0, 0}}));
  CHECK(lse[0] == doctest::Approx(std::log(4.0)).epsilon(1e-15));
}

TEST_CASE("activations and their derivatives") {
  CHECK(parse_activation("relu") == Activation::relu);
  CHECK_THROWS_AS(parse_activation("gelu"), ConfigError);
  CHECK(activate(Activation::relu, -2.0) == 0.0);
  CHECK(activate(Activation::identity, -2.0) == -2.0);
  CHECK(activate(Activation::silu, 1.0) == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
  for (auto a : {Activation::identity, Activation::relu, Activation::silu}) {
    for (double x : {-1.3, -0.2, 0.4, 2.1}) {
      const double h = 1e-6;
      const double num = (activate(a, x + h) - activate(a, x - h)) / (2 * h);
      CHECK(activate_derivative(a, x) == doctest::Approx(num).epsilon(1e-7));
    }
  }
}

TEST_CASE("rms norm forward and backward") {
  Rng rng(5);
  Parameter x("x", random_tensor(rng, 3, 6));
  Parameter g("g", random_tensor(rng, 1, 6));
  const Tensor y = rms_norm(x.value, g.value);
  for (std::size_t r = 0; r < 3; ++r) {
    double ms = 0.0;
    for (double v : x.value.row(r)) ms += v * v / 6.0;
    const double inv = 1.0 / std::sqrt(ms + kRmsEps);
    for (std::size_t c = 0; c < 6; ++c) CHECK(y(r, c) == doctest::Approx(x.value(r, c) * inv * g.value(0, c)));
  }
  const Tensor w = random_tensor(rng, 3, 6);
  auto f = [&] {
    const Tensor out = rms_norm(x.value, g.value);
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += w[i] * out[i];
    return s;
  };
  RmsNormCache cache;
  rms_norm(x.value, g.value, &cache);
  x.grad = rms_norm_backward(cache, g.value, w, &g.grad);
  std::vector<Parameter*> ps{&x, &g};
  const auto num = finite_diff_grad(f, ps);
  CHECK(max_relative_error(x.grad, num[0]) < 1e-8);
  CHECK(max_relative_error(g.grad, num[1]) < 1e-8);
}

TEST_CASE("finite_diff_grad examples") {
  Parameter x("x", Tensor({1, 1}, {3.0}));
  std::vector<Parameter*> ps{&x};
  const auto g = finite_diff_grad([&] { return x.value[0] * x.value[0]; }, ps);
  CHECK(std::abs(g[0][0] - 6.0) < 1e-6);
  CHECK(x.value[0] == 3.0);

  Parameter m("m", Tensor::from_rows({{1, 2}, {3, 4}}));
  std::vector<Parameter*> pm{&m};
  const auto gs = finite_diff_grad(
      [&] {
        double s = 0.0;
        for (double v : m.value.data()) s += v;
        return s;
      },
      pm);
  CHECK(max_abs_diff(gs[0], Tensor::filled(2, 2, 1.0)) < 1e-9);

  // Two-class cross-entropy: gradient is softmax minus one-hot.
  Parameter z("z", Tensor::from_rows({{0.3, -1.1}}));
  std::vector<Parameter*> pz{&z};
  auto ce = [&] {
    const double lse = std::log(std::exp(z.value[0]) + std::exp(z.value[1]));
    return lse - z.value[1];
  };
  const double e0 = std::exp(0.3), e1 = std::exp(-1.1);
  const Tensor analytic = Tensor::from_rows({{e0 / (e0 + e1), e1 / (e0 + e1) - 1.0}});
  CHECK(max_relative_error(finite_diff_grad(ce, pz)[0], analytic) < 1e-7);

  CHECK_THROWS_AS(finite_diff_grad([] { return std::nan(""); }, ps), NumericError);
}

TEST_CASE("max_relative_error metric") {
  CHECK(max_relative_error(Tensor({1, 2}, {0.0, 100.0}), Tensor({1, 2}, {0.5, 101.0})) ==
        doctest::Approx(0.5));
}

TEST_CASE("chi2_cdf closed forms and domain") {
  for (int k : {1, 2, 5, 16}) CHECK(chi2_cdf(0.0, k) == 0.0);
  CHECK(chi2_cdf(2.0, 2) == doctest::Approx(1.0 - std::exp(-1.0)).epsilon(1e-14));
  // k = 4: 1 - e^{-x/2} (1 + x/2)
  CHECK(chi2_cdf(5.0, 4) == doctest::Approx(1.0 - std::exp(-2.5) * 3.5).epsilon(1e-13));
  CHECK_THROWS_AS(chi2_cdf(-0.1, 2), DomainError);
  CHECK_THROWS_AS(chi2_cdf(1.0, 0), DomainError);
  double prev = 0.0;
  for (double x = 0.0; x < 40.0; x += 0.25) {
    const double v = chi2_cdf(x, 7);
    CHECK(v >= prev);
    CHECK(v <= 1.0);
    prev = v;
  }
}

TEST_CASE("chi2_cdf agrees with a Monte-Carlo oracle") {
  Rng rng(6);
  constexpr int kSamples = 1000000;
  const std::vector<double> xs{0.5, 1, 2, 5, 10};
  for (int k : {1, 2, 4, 8, 16}) {
    std::vector<std::size_t> below(xs.size(), 0);
    for (int s = 0; s < kSamples; ++s) {
      double q = 0.0;
      for (int i = 0; i < k; ++i) {
        const double z = rng.normal();
        q += z * z;
      }
      for (std::size_t j = 0; j < xs.size(); ++j) below[j] += q < xs[j];
    }
    for (std::size_t j = 0; j < xs.size(); ++j) {
      const double mc = static_cast<double>(below[j]) / kSamples;
      INFO("k=" << k << " x=" << xs[j]);
      CHECK(std::abs(chi2_cdf(xs[j], k) - mc) < 2e-3);
    }
  }
}

TEST_CASE("rng known answers and determinism") {
  std::uint64_t state = 0;
  CHECK(splitmix64(state) == 0xe220a8397b1dcdafULL);
  CHECK(splitmix64(state) == 0x6e789e6aa1b965f4ULL);
  CHECK(splitmix64(state) == 0x06c45d188009454fULL);
  Rng r(42);
  CHECK(r.next_u64() == 0x15780b2e0c2ec716ULL);
  CHECK(r.next_u64() == 0x6104d9866d113a7eULL);
  CHECK(r.next_u64() == 0xae17533239e499a1ULL);

  Rng a(7), b(7);
  for (int i = 0; i < 100; ++i) CHECK(a.normal() == b.normal());
  Rng c(7);
  Rng child1 = c.fork(1);
  Rng d(7);
  Rng child2 = d.fork(2);
  CHECK(child1.next_u64() != child2.next_u64());
}

TEST_CASE("rng distributions") {
  Rng r(8);
  std::vector<int> hist(5, 0);
  double sum = 0.0, sq = 0.0;
  constexpr int n = 200000;
  for (int i = 0; i < n; ++i) {
    const auto v = r.below(5);
    REQUIRE(v < 5);
    ++hist[v];
    const double z = r.normal();
    sum += z;
    sq += z * z;
    const double u = r.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
  }
  for (int h : hist) CHECK(std::abs(h / double(n) - 0.2) < 0.005);
  CHECK(std::abs(sum / n) < 0.01);
  CHECK(std::abs(sq / n - 1.0) < 0.01);
}

namespace {

// Cyclic Jacobi rotations; returns eigenvalues (descending) and row eigenvectors.
std::pair<std::vector<double>, Tensor> jacobi_eigen(Tensor a) {
  const std::size_t n = a.rows();
  Tensor v = Tensor::identity(n);
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a(p, q)) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](auto x, auto y) { return a(x, x) > a(y, y); });
  std::vector<double> vals;
  Tensor vecs = Tensor::zeros(n, n);
  for (std::size_t r = 0; r < n; ++r) {
    vals.push_back(a(idx[r], idx[r]));
    for (std::size_t k = 0; k < n; ++k) vecs(r, k) = v(k, idx[r]);
  }
  return {vals, vecs};
}

Tensor centered(const Tensor& x) {
  Tensor c = x;
  for (std::size_t j = 0; j < x.cols(); ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) m += x(i, j);
    m /= x.rows();
    for (std::size_t i = 0; i < x.rows(); ++i) c(i, j) -= m;
  }
  return c;
}

}  // namespace

TEST_CASE("pca two-point axis and sign convention") {
  const PcaModel m = pca_fit(Tensor::from_rows({{0, 0}, {1, 1}}), 1);
  CHECK(m.components(0, 0) == doctest::Approx(1 / std::sqrt(2.0)));
  CHECK(m.components(0, 1) == doctest::Approx(1 / std::sqrt(2.0)));
  const PcaModel flipped = pca_fit(Tensor::from_rows({{0, 1}, {1, 0}}), 1);
  CHECK(flipped.components(0, 0) > 0.0);
}

TEST_CASE("pca full-rank reconstruction and orthonormality") {
  Rng rng(9);
  const Tensor x = random_tensor(rng, 12, 5);
  const PcaResult r = pca_fit_project(x, 5);
  const Tensor gram = matmul_nt(r.model.components, r.model.components);
  CHECK(max_abs_diff(gram, Tensor::identity(5)) < 1e-8);
  const Tensor recon = matmul(r.projected, r.model.components);
  CHECK(max_abs_diff(recon, centered(x)) < 1e-8);
  // Projected training data is centred.
  for (std::size_t j = 0; j < 5; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < 12; ++i) m += r.projected(i, j);
    CHECK(std::abs(m) < 1e-10);
  }
}

TEST_CASE("pca on a noisy line matches a Jacobi eigen oracle") {
  Rng rng(10);
  Tensor x = Tensor::zeros(50, 3);
  for (std::size_t i = 0; i < 50; ++i) {
    const double t = rng.uniform(-3, 3);
    x(i, 0) = 2 * t + 0.05 * rng.normal();
    x(i, 1) = -t + 0.05 * rng.normal();
    x(i, 2) = 0.5 * t + 0.05 * rng.normal();
  }
  const PcaModel m = pca_fit(x, 1);
  CHECK(m.explained_ratio() > 0.95);
  const Tensor c = centered(x);
  Tensor cov = matmul_tn(c, c);
  cov *= 1.0 / 49.0;
  const auto [vals, vecs] = jacobi_eigen(cov);
  CHECK(m.explained_variance[0] == doctest::Approx(vals[0]).epsilon(1e-10));
  const double sign = vecs(0, 0) > 0 ? 1.0 : -1.0;
  for (std::size_t k = 0; k < 3; ++k) CHECK(m.components(0, k) == doctest::Approx(sign * vecs(0, k)).epsilon(1e-8));
  double total = 0.0;
  for (double v : vals) total += v;
  CHECK(m.total_variance == doctest::Approx(total).epsilon(1e-12));
}

TEST_CASE("pca degenerate inputs") {
  CHECK_THROWS_AS(pca_fit(Tensor::from_rows({{1, 2}, {1, 2}, {1, 2}}), 1), DegenerateInputError);
  CHECK_THROWS_AS(pca_fit(Tensor::from_rows({{1, 2}}), 1), DegenerateInputError);
  CHECK_THROWS(pca_fit(Tensor::from_rows({{1, 2}, {3, 4}}), 3));
}

TEST_CASE("pca projection is bit-stable") {
  Rng rng(11);
  const Tensor x = random_tensor(rng, 20, 4);
  const PcaResult a = pca_fit_project(x, 2);
  const PcaResult b = pca_fit_project(x, 2);
  CHECK(bitwise_equal(a.projected, b.projected));
}
