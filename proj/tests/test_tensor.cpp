#include <doctest.h>

#include <cmath>

#include "nmt/params.hpp"
#include "test_support.hpp"

using namespace nmt;

TEST_CASE("l2_normalize examples") {
  auto a = l2_normalize(std::vector<double>{1, 0, 0});
  CHECK(a == std::vector<double>{1, 0, 0});
  auto b = l2_normalize(std::vector<double>{3, 4});
  CHECK(b[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(b[1] == doctest::Approx(0.8).epsilon(1e-15));
  auto z = l2_normalize(std::vector<double>{0, 0});
  CHECK(z[0] == 0.0);
  CHECK(z[1] == 0.0);
}

TEST_CASE("matmul variants agree with a naive triple loop") {
  std::mt19937_64 rng(3);
  Tensor a = testing::gaussian(4, 3, rng), b = testing::gaussian(3, 5, rng);
  Tensor c = matmul(a, b);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 3; ++k) s += a(i, k) * b(k, j);
      CHECK(c(i, j) == doctest::Approx(s).epsilon(1e-14));
    }
  Tensor bt = testing::gaussian(5, 3, rng);
  Tensor nt = matmul_nt(a, bt);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) CHECK(nt(i, j) == doctest::Approx(dot(a.row(i), bt.row(j))));
  Tensor a2 = testing::gaussian(4, 2, rng);
  Tensor tn = matmul_tn(a, a2);
  CHECK(tn.rows() == 3);
  CHECK(tn.cols() == 2);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 4; ++k) s += a(k, i) * a2(k, j);
      CHECK(tn(i, j) == doctest::Approx(s));
    }
  CHECK_THROWS_AS(matmul(a, a), ContractError);
}

TEST_CASE("row normalization backward matches finite differences") {
  std::mt19937_64 rng(5);
  Tensor x = testing::gaussian(3, 4, rng), w = testing::gaussian(3, 4, rng);
  RowNormalized f = normalize_rows(x);
  CHECK(testing::max_row_norm_error(f.out) < 1e-14);
  Tensor dx = normalize_rows_backward(f, w);
  const double eps = 1e-6;
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor xp = x, xm = x;
    xp[i] += eps;
    xm[i] -= eps;
    double lp = 0, lm = 0;
    Tensor op = normalize_rows(xp).out, om = normalize_rows(xm).out;
    for (std::size_t k = 0; k < x.size(); ++k) {
      lp += w[k] * op[k];
      lm += w[k] * om[k];
    }
    CHECK(dx[i] == doctest::Approx((lp - lm) / (2 * eps)).epsilon(1e-7));
  }
}

TEST_CASE("zero rows stay zero through normalization") {
  Tensor x = Tensor::matrix(2, 3);
  x(1, 0) = 2.0;
  RowNormalized f = normalize_rows(x);
  CHECK(f.out(0, 0) == 0.0);
  CHECK(f.out(1, 0) == 1.0);
  CHECK(f.out.all_finite());
}

TEST_CASE("grad_check accepts an exact gradient") {
  ParameterStore store;
  ParamId t = store.add("theta", Tensor({3}, std::vector<double>{1, 2, 3}));
  store.grad(t) = Tensor({3}, std::vector<double>{2, 4, 6});
  auto f = [&](const ParameterStore& p) {
    double s = 0;
    for (double v : p.value(t).values()) s += v * v;
    return s;
  };
  GradCheckReport r = grad_check(f, store);
  CHECK(r.passed());
  CHECK(r.worst() < 1e-9);
  CHECK(store.value(t) == Tensor({3}, std::vector<double>{1, 2, 3}));
}

TEST_CASE("grad_check rejects a gradient off by 2x") {
  ParameterStore store;
  ParamId t = store.add("theta", Tensor({3}, std::vector<double>{1, 2, 3}));
  store.grad(t) = Tensor({3}, std::vector<double>{4, 8, 12});
  auto f = [&](const ParameterStore& p) {
    double s = 0;
    for (double v : p.value(t).values()) s += v * v;
    return s;
  };
  GradCheckReport r = grad_check(f, store);
  CHECK_FALSE(r.passed());
  CHECK(r.worst() == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("relative error definition") {
  CHECK(relative_error(2.0, 3.0) == doctest::Approx(1.0 / 3.0));
  CHECK(relative_error(0.0, 0.0) == 0.0);
  CHECK(relative_error(1e-9, 0.0) == doctest::Approx(0.1));
}

TEST_CASE("grad_check reports non-finite forwards as failures") {
  ParameterStore store;
  ParamId t = store.add("theta", Tensor::vector(2, 1.0));
  store.grad(t) = Tensor::vector(2, 0.0);
  auto f = [](const ParameterStore&) { return std::nan(""); };
  GradCheckReport r = grad_check(f, store);
  CHECK_FALSE(r.passed());
  CHECK_FALSE(r.params[0].failure.empty());
}

TEST_CASE("parameter store rejects duplicate names and rounds to f32") {
  ParameterStore store;
  store.add("a", Tensor::vector(2, 0.1));
  CHECK_THROWS_AS(store.add("a", Tensor::vector(1)), ContractError);
  store.round_to_f32();
  CHECK(store.value(store.id("a"))[0] == static_cast<double>(0.1f));
  CHECK_FALSE(store.find("missing").has_value());
}

TEST_CASE("gradient buffers accumulate in order") {
  ParameterStore store;
  ParamId a = store.add("a", Tensor::vector(2));
  GradientBuffer g1(store), g2(store);
  g1[a][0] = 1.0;
  g2[a][0] = 3.0;
  g1.add(g2);
  g1.scale(0.5);
  store.accumulate(g1);
  CHECK(store.grad(a)[0] == 2.0);
  store.zero_grad();
  CHECK(store.grad(a)[0] == 0.0);
}
