#include <catch2/catch_amalgamated.hpp>

#include "hstu/matrix.hpp"

using namespace hstu;

namespace {

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double scl = 1.0) {
  Matrix m(r, c);
  for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = real(rng.normal() * scl);
  return m;
}

}  // namespace

TEST_CASE("matmul matches hand-computed product") {
  Matrix a = Matrix::from({{1, 2}, {3, 4}});
  Matrix b = Matrix::from({{5, 6}, {7, 8}});
  Matrix c = matmul(a, b);
  CHECK(c(0, 0) == 19);
  CHECK(c(0, 1) == 22);
  CHECK(c(1, 0) == 43);
  CHECK(c(1, 1) == 50);
}

TEST_CASE("matmul rejects mismatched inner dims") {
  Matrix a(2, 3), b(2, 2);
  CHECK_THROWS_AS(matmul(a, b), ConfigError);
}

TEST_CASE("matmul is bitwise deterministic across runs") {
  Rng rng(7);
  Matrix a = random_matrix(rng, 17, 23);
  Matrix b = random_matrix(rng, 23, 11);
  Matrix c1 = matmul(a, b);
  Matrix c2 = matmul(a, b);
  for (std::size_t i = 0; i < c1.size(); ++i) CHECK(c1.data()[i] == c2.data()[i]);
}

TEST_CASE("matmul associativity holds within tolerance") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix a = random_matrix(rng, 5, 7);
    Matrix b = random_matrix(rng, 7, 6);
    Matrix c = random_matrix(rng, 6, 4);
    Matrix left = matmul(matmul(a, b), c);
    Matrix right = matmul(a, matmul(b, c));
    CHECK(max_abs_diff(left, right) < 1e-9);
  }
}

TEST_CASE("matmul_nt and matmul_tn agree with explicit transpose") {
  Rng rng(13);
  Matrix a = random_matrix(rng, 6, 9);
  Matrix b = random_matrix(rng, 4, 9);
  // kernels may fuse multiply-adds differently, so allow a few ulps
  CHECK(max_abs_diff(matmul_nt(a, b), matmul(a, transpose(b))) < 1e-12);
  Matrix c = random_matrix(rng, 6, 5);
  CHECK(max_abs_diff(matmul_tn(a, c), matmul(transpose(a), c)) < 1e-12);
}

TEST_CASE("silu matches frozen values and asymptotes") {
  CHECK(silu_scalar(0.0) == 0.0);
  CHECK(silu_scalar(1.0) == Catch::Approx(0.7310585786300049).epsilon(1e-12));
  CHECK(silu_scalar(-1.0) == Catch::Approx(-0.2689414213699951).epsilon(1e-12));
  // silu(x) -> x from below; the gap at x=20 is 4.12e-8, at x=40 it is below 1e-8.
  CHECK(std::abs(silu_scalar(20.0) - 20.0) < 1e-7);
  CHECK(std::abs(silu_scalar(40.0) - 40.0) < 1e-8);
  // silu(x) -> 0 as x -> -inf
  CHECK(std::abs(silu_scalar(-40.0)) < 1e-8);
}

TEST_CASE("silu gradient matches central differences") {
  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    double x = rng.uniform(-6.0, 6.0);
    double h = 1e-6;
    double num = (silu_scalar(x + h) - silu_scalar(x - h)) / (2 * h);
    CHECK(silu_grad_scalar(x) == Catch::Approx(num).margin(1e-7));
  }
}

TEST_CASE("gelu satisfies the reflection identity and gradient check") {
  Rng rng(19);
  for (int trial = 0; trial < 50; ++trial) {
    double x = rng.uniform(-4.0, 4.0);
    CHECK(gelu_scalar(x) - gelu_scalar(-x) == Catch::Approx(x).margin(1e-12));
    double h = 1e-6;
    double num = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2 * h);
    CHECK(gelu_grad_scalar(x) == Catch::Approx(num).margin(1e-7));
  }
  CHECK(gelu_scalar(0.0) == 0.0);
}

TEST_CASE("layer_norm_rows normalizes [1,3] to [-1,1]") {
  Matrix m = Matrix::from({{1, 3}});
  Matrix out = layer_norm_rows(m, 0.0);
  CHECK(out(0, 0) == Catch::Approx(-1.0).epsilon(1e-12));
  CHECK(out(0, 1) == Catch::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("layer_norm_rows output has zero mean and unit variance per row") {
  Rng rng(23);
  Matrix m = random_matrix(rng, 8, 16, 3.0);
  Matrix out = layer_norm_rows(m, 1e-12);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    double mean = 0, var = 0;
    for (std::size_t j = 0; j < out.cols(); ++j) mean += out(i, j);
    mean /= out.cols();
    for (std::size_t j = 0; j < out.cols(); ++j) var += (out(i, j) - mean) * (out(i, j) - mean);
    var /= out.cols();
    CHECK(std::abs(mean) < 1e-9);
    CHECK(var == Catch::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("layer_norm_rows is scale invariant up to epsilon effects") {
  Rng rng(29);
  Matrix m = random_matrix(rng, 4, 12);
  Matrix a = layer_norm_rows(m, 1e-12);
  Matrix b = layer_norm_rows(scale(m, 16.0), 1e-12);
  CHECK(max_abs_diff(a, b) < 1e-9);
}

TEST_CASE("layer_norm_rows vjp matches central differences") {
  Rng rng(31);
  const double eps = 1e-6;
  Matrix x = random_matrix(rng, 3, 5);
  Matrix g = random_matrix(rng, 3, 5);
  Matrix analytic = layer_norm_rows_vjp(x, eps, g);
  const double h = 1e-6;
  for (std::size_t i = 0; i < x.size(); ++i) {
    Matrix xp = x, xm = x;
    xp.data()[i] += h;
    xm.data()[i] -= h;
    double lp = 0, lm = 0;
    Matrix yp = layer_norm_rows(xp, eps), ym = layer_norm_rows(xm, eps);
    for (std::size_t k = 0; k < x.size(); ++k) {
      lp += yp.data()[k] * g.data()[k];
      lm += ym.data()[k] * g.data()[k];
    }
    double num = (lp - lm) / (2 * h);
    CHECK(analytic.data()[i] == Catch::Approx(num).margin(1e-6));
  }
}

TEST_CASE("softmax_rows matches frozen values") {
  Matrix m = Matrix::from({{std::log(1.0), std::log(3.0)}});
  Matrix p = softmax_rows(m);
  CHECK(p(0, 0) == Catch::Approx(0.25).epsilon(1e-12));
  CHECK(p(0, 1) == Catch::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("softmax_rows handles masks and fully masked rows") {
  Matrix m = Matrix::from({{5, 1, 3}, {2, 2, 2}});
  Matrix mask = Matrix::from({{0, 1, 1}, {0, 0, 0}});
  Matrix p = softmax_rows(m, &mask);
  CHECK(p(0, 0) == 0.0);
  CHECK(p(0, 1) + p(0, 2) == Catch::Approx(1.0).epsilon(1e-12));
  // masked logit 5 must not leak into normalization
  CHECK(p(0, 2) == Catch::Approx(std::exp(3.0) / (std::exp(1.0) + std::exp(3.0))).epsilon(1e-12));
  for (std::size_t j = 0; j < 3; ++j) CHECK(p(1, j) == 0.0);
}

TEST_CASE("softmax_rows is shift invariant and stable at large logits") {
  Matrix m = Matrix::from({{1000.0, 1001.0, 999.0}});
  Matrix p = softmax_rows(m);
  CHECK(p.all_finite());
  CHECK(sum(p) == Catch::Approx(1.0).epsilon(1e-12));
  Matrix shifted = softmax_rows(Matrix::from({{0.0, 1.0, -1.0}}));
  CHECK(max_abs_diff(p, shifted) < 1e-12);
}

TEST_CASE("softmax_rows vjp matches central differences") {
  Rng rng(37);
  Matrix z = random_matrix(rng, 2, 4);
  Matrix g = random_matrix(rng, 2, 4);
  Matrix p = softmax_rows(z);
  Matrix analytic = softmax_rows_vjp(p, g);
  const double h = 1e-6;
  for (std::size_t i = 0; i < z.size(); ++i) {
    Matrix zp = z, zm = z;
    zp.data()[i] += h;
    zm.data()[i] -= h;
    double lp = 0, lm = 0;
    Matrix pp = softmax_rows(zp), pm = softmax_rows(zm);
    for (std::size_t k = 0; k < z.size(); ++k) {
      lp += pp.data()[k] * g.data()[k];
      lm += pm.data()[k] * g.data()[k];
    }
    CHECK(analytic.data()[i] == Catch::Approx((lp - lm) / (2 * h)).margin(1e-6));
  }
}

TEST_CASE("broadcast bias add applies the row to every row") {
  Matrix m = Matrix::from({{1, 2}, {3, 4}});
  Matrix b = Matrix::from({{10, 20}});
  Matrix out = add_row_broadcast(m, b);
  CHECK(out(0, 0) == 11);
  CHECK(out(1, 1) == 24);
}

TEST_CASE("flop counter tracks matmul work exactly") {
  FlopCounter fc;
  {
    FlopScope scope(fc);
    Matrix a(3, 4), b(4, 5);
    matmul(a, b);
  }
  CHECK(fc.linear == 2ull * 3 * 4 * 5);
  // counting stops outside the scope
  Matrix a(3, 4), b(4, 5);
  matmul(a, b);
  CHECK(fc.linear == 2ull * 3 * 4 * 5);
}

TEST_CASE("rng streams are reproducible and draws stay in bounds") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) {
    CHECK(a.raw() == b.raw());
  }
  Rng r(1);
  for (int i = 0; i < 1000; ++i) {
    std::uint64_t v = r.uniform_u64(17);
    CHECK(v < 17);
    double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

TEST_CASE("dirichlet_flat draws lie on the simplex") {
  Rng r(5);
  for (int trial = 0; trial < 100; ++trial) {
    auto p = r.dirichlet_flat(1 + trial % 5);
    double total = 0;
    for (double v : p) {
      CHECK(v >= 0.0);
      total += v;
    }
    CHECK(total == Catch::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("shuffle is a seeded permutation") {
  std::vector<int> v1{1, 2, 3, 4, 5, 6, 7, 8}, v2 = v1, sorted = v1;
  Rng a(9), b(9);
  a.shuffle(v1);
  b.shuffle(v2);
  CHECK(v1 == v2);
  std::sort(v1.begin(), v1.end());
  CHECK(v1 == sorted);
}
