#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nmt/matching.hpp"
#include "test_support.hpp"

using namespace nmt;

namespace {

// Plain-space alternating normalization of exp(C / T).
Tensor naive_sinkhorn(const Tensor& c, double temperature, std::size_t iters) {
  Tensor p = c;
  for (auto& v : p.values()) v = std::exp(v / temperature);
  const std::size_t m = c.rows();
  for (std::size_t it = 0; it < iters; ++it) {
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < m; ++j) s += p(i, j);
      for (std::size_t j = 0; j < m; ++j) p(i, j) /= s;
    }
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0;
      for (std::size_t i = 0; i < m; ++i) s += p(i, j);
      for (std::size_t i = 0; i < m; ++i) p(i, j) /= s;
    }
  }
  return p;
}

std::vector<std::size_t> brute_force_lap(const Tensor& c) {
  std::vector<std::size_t> perm(c.rows()), best;
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  double best_score = -INFINITY;
  do {
    double s = 0;
    for (std::size_t i = 0; i < perm.size(); ++i) s += c(i, perm[i]);
    if (s > best_score) {
      best_score = s;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace

TEST_CASE("affinity of unit rows") {
  Tensor eye = Tensor::from_rows({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  CHECK(affinity(eye, eye) == eye);
  Tensor a = Tensor::from_rows({{0.6, 0.8}}), b = Tensor::from_rows({{0.6, 0.8}, {-0.6, -0.8}});
  Tensor c = affinity(a, b);
  CHECK(c(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(c(0, 1) == doctest::Approx(-1.0).epsilon(1e-15));
}

TEST_CASE("sinkhorn fixed points") {
  TransportPlan one = sinkhorn_log(Tensor::from_rows({{-3.7}}));
  CHECK(one.values(0, 0) == 1.0);
  for (double t : {0.01, 0.1, 2.0}) {
    TransportPlan p = sinkhorn_log(Tensor::matrix(4, 4, 0.3), {t, 5});
    for (double v : p.values.values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-14));
  }
}

TEST_CASE("2x2 sinkhorn saturates the diagonal and matches the naive oracle") {
  Tensor c = Tensor::from_rows({{1, -1}, {-1, 1}});
  TransportPlan p = sinkhorn_log(c, {0.1, 50});
  CHECK(p.values(0, 0) > 0.999);
  CHECK(p.values(1, 1) > 0.999);
  CHECK(testing::max_abs_diff(p.values, naive_sinkhorn(c, 0.1, 50)) < 1e-8);
}

TEST_CASE("log-domain agrees with plain-space sinkhorn on random inputs") {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 50; ++t) {
    const std::size_t m = 2 + t % 15;
    Tensor c = affinity(testing::unit_rows(m, 8, rng), testing::unit_rows(m, 8, rng));
    TransportPlan p = sinkhorn_log(c, {0.1, 30});
    CHECK(testing::max_abs_diff(p.values, naive_sinkhorn(c, 0.1, 30)) < 1e-8);
    CHECK(p.iterations_used == 30);
    CHECK(p.max_marginal_error == doctest::Approx(max_marginal_error(p.values)));
  }
}

TEST_CASE("sinkhorn survives temperatures that overflow plain space") {
  Tensor c = Tensor::from_rows({{1, -1, 0}, {0, 1, -1}, {-1, 0, 1}});
  TransportPlan p = sinkhorn_log(c, {0.001, 20});
  CHECK(p.values.all_finite());
  CHECK(p.values(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("sinkhorn rejects non-square and bad options") {
  CHECK_THROWS_AS(sinkhorn_log(Tensor::matrix(2, 3)), ConfigError);
  CHECK_THROWS(sinkhorn_log(Tensor::matrix(2, 2), {0.0, 10}));
}

TEST_CASE("decode examples") {
  Matching a = decode_matching(Tensor::from_rows({{0.9, 0.1}, {0.1, 0.9}}));
  CHECK(a.assignment == std::vector<std::size_t>{0, 1});
  CHECK(a.injective);
  Matching u = decode_matching(Tensor::matrix(3, 3, 1.0 / 3));
  CHECK(u.assignment == std::vector<std::size_t>{0, 0, 0});
  CHECK_FALSE(u.injective);
}

TEST_CASE("low temperature decode recovers the assignment optimum") {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> noise(-0.05, 0.05);
  for (int t = 0; t < 30; ++t) {
    auto perm = testing::random_permutation(5, rng);
    Tensor c = Tensor::matrix(5, 5);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) c(i, j) = noise(rng) + (perm[i] == j ? 0.3 : 0.0);
    auto lap = brute_force_lap(c);
    CHECK(lap == perm);
    CHECK(decode_matching(sinkhorn_log(c, {0.05, 20}).values).assignment == lap);
  }
}

TEST_CASE("accuracy counts matches") {
  CHECK(accuracy({0, 1, 2}, {0, 1, 2}) == 1.0);
  CHECK(accuracy({1, 0}, {0, 1}) == 0.0);
  CHECK(accuracy({0, 1, 3, 2}, {0, 1, 2, 3}) == 0.5);
  CHECK_THROWS_AS(accuracy({0}, {0, 1}), ContractError);
}
