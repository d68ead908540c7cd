#include <doctest.h>

#include <cmath>

#include "nmt/losses.hpp"
#include "test_support.hpp"

using namespace nmt;

namespace {

Tensor eye(std::size_t m) {
  Tensor t = Tensor::matrix(m, m);
  for (std::size_t i = 0; i < m; ++i) t(i, i) = 1.0;
  return t;
}

std::vector<std::size_t> iota(std::size_t m) {
  std::vector<std::size_t> v(m);
  for (std::size_t i = 0; i < m; ++i) v[i] = i;
  return v;
}

}  // namespace

TEST_CASE("infonce closed forms") {
  const double e = std::exp(1.0);
  CHECK(std::abs(info_nce(eye(2), eye(2), iota(2), 1.0, InfoNceMode::PaperLiteral) - (-1.0)) < 1e-10);
  CHECK(std::abs(info_nce(eye(2), eye(2), iota(2), 1.0, InfoNceMode::Conventional) + std::log(e / (e + 1))) < 1e-10);
  CHECK(info_nce(eye(2), eye(2), iota(2), 1.0, InfoNceMode::Conventional) == doctest::Approx(0.3133).epsilon(1e-4));
  CHECK(std::abs(info_nce(eye(4), eye(4), iota(4), 1.0, InfoNceMode::Conventional) + std::log(e / (e + 3))) < 1e-10);
}

TEST_CASE("infonce respects the truth permutation and the temperature") {
  Tensor f2 = Tensor::from_rows({{0, 1}, {1, 0}});
  const double tau = 0.5;
  const double want = -std::log(std::exp(2.0) / (std::exp(2.0) + 1.0));
  CHECK(std::abs(info_nce(eye(2), f2, {1, 0}, tau, InfoNceMode::Conventional) - want) < 1e-12);
}

TEST_CASE("infonce needs two keypoints") {
  CHECK_THROWS_AS(info_nce(eye(1), eye(1), {0}, 1.0, InfoNceMode::Conventional), ContractError);
  CHECK_THROWS_AS(info_nce(eye(2), eye(2), {0, 0}, 1.0, InfoNceMode::Conventional), ContractError);
}

TEST_CASE("infonce mode names") {
  CHECK(parse_infonce_mode("paper-literal") == InfoNceMode::PaperLiteral);
  CHECK(parse_infonce_mode("conventional") == InfoNceMode::Conventional);
  CHECK(to_string(InfoNceMode::PaperLiteral) == "paper-literal");
  CHECK_THROWS_AS(parse_infonce_mode("other"), ConfigError);
}

TEST_CASE("infonce gradients match finite differences") {
  std::mt19937_64 rng(3);
  for (auto mode : {InfoNceMode::PaperLiteral, InfoNceMode::Conventional}) {
    Tensor f1 = testing::unit_rows(5, 6, rng), f2 = testing::unit_rows(5, 6, rng);
    auto truth = testing::random_permutation(5, rng);
    const double tau = 0.2;
    InfoNceGrad g;
    info_nce(f1, f2, truth, tau, mode, &g);
    const double h = 1e-6;
    for (std::size_t i = 0; i < f1.size(); i += 4) {
      Tensor p = f1, m = f1;
      p[i] += h;
      m[i] -= h;
      const double num = (info_nce(p, f2, truth, tau, mode) - info_nce(m, f2, truth, tau, mode)) / (2 * h);
      CHECK(g.df1[i] == doctest::Approx(num).epsilon(1e-6));
      p = f2;
      m = f2;
      p[i] += h;
      m[i] -= h;
      const double num2 = (info_nce(f1, p, truth, tau, mode) - info_nce(f1, m, truth, tau, mode)) / (2 * h);
      CHECK(g.df2[i] == doctest::Approx(num2).epsilon(1e-6));
    }
    const double lt = std::log(tau);
    const double num = (info_nce(f1, f2, truth, std::exp(lt + h), mode) - info_nce(f1, f2, truth, std::exp(lt - h), mode)) / (2 * h);
    CHECK(g.dtau_raw == doctest::Approx(num).epsilon(1e-6));
  }
}

TEST_CASE("hyperspherical examples") {
  CHECK(std::abs(hyperspherical(eye(3))) < 1e-12);
  CHECK(std::abs(hyperspherical(Tensor::from_rows({{0.6, 0.8}, {0.6, 0.8}})) - 2.0) < 1e-12);
  const double s = std::sqrt(3.0) / 2;
  Tensor simplex = Tensor::from_rows({{1, 0, 0}, {-0.5, s, 0}, {-0.5, -s, 0}});
  CHECK(std::abs(hyperspherical(simplex) - (-1.5)) < 1e-12);
}

TEST_CASE("hyperspherical gradient routes to the first maximizer") {
  Tensor f = Tensor::from_rows({{1, 0}, {0, 1}, {0, 1}});
  Tensor df = Tensor::matrix(3, 2);
  hyperspherical(f, &df);
  // Row 0 ties between rows 1 and 2 and picks row 1; rows 1 and 2 pick each other.
  CHECK(df(0, 1) == 1.0);
  CHECK(df(1, 0) == 1.0);
  CHECK(df(1, 1) == 2.0);
  CHECK(df(2, 1) == 2.0);
  CHECK(df(2, 0) == 0.0);
}

TEST_CASE("layer weights and layer loss") {
  CHECK(layer_weights(4, 0.3) == std::vector<double>{0.3, 0.6, 0.9, 1.2});
  for (double w : layer_weights(4, 0.3)) CHECK(std::isfinite(w));
  CHECK(layer_hyperspherical({eye(3), eye(3)}, {eye(3), eye(3)}, 0.3) == 0.0);
  Tensor dup = Tensor::from_rows({{1, 0}, {1, 0}});
  const double h = hyperspherical(dup);
  CHECK(std::abs(layer_hyperspherical({dup}, {dup}, 0.3) - 0.3 * h) < 1e-12);
  // Streams are averaged: one stream at h, the other at 0.
  CHECK(std::abs(layer_hyperspherical({dup}, {eye(2)}, 0.3) - 0.15 * h) < 1e-12);
}

TEST_CASE("total loss is the unweighted sum of its parts") {
  std::mt19937_64 rng(5);
  Tensor f1 = testing::unit_rows(4, 6, rng), f2 = testing::unit_rows(4, 6, rng);
  std::vector<Tensor> s1{testing::unit_rows(4, 6, rng), f1}, s2{testing::unit_rows(4, 6, rng), f2};
  auto truth = testing::random_permutation(4, rng);
  LossConfig cfg;
  const double tau_raw = std::log(0.07);
  LossReport r = total_loss(f1, f2, s1, s2, truth, tau_raw, cfg);
  const double a = info_nce(f1, f2, truth, 0.07, cfg.mode);
  const double b = 0.5 * (hyperspherical(f1) + hyperspherical(f2));
  const double c = layer_hyperspherical(s1, s2, cfg.layer_p);
  CHECK(r.infonce == doctest::Approx(a).epsilon(1e-14));
  CHECK(r.hyperspherical_final == doctest::Approx(b).epsilon(1e-14));
  CHECK(r.hyperspherical_layers == doctest::Approx(c).epsilon(1e-14));
  CHECK(r.total == doctest::Approx(a + b + c).epsilon(1e-14));

  cfg.use_infonce = false;
  cfg.use_layer_hyperspherical = false;
  CHECK(total_loss(f1, f2, s1, s2, truth, tau_raw, cfg).total == doctest::Approx(b).epsilon(1e-14));
}

TEST_CASE("all-zero components give zero total") {
  LossConfig cfg;
  cfg.use_infonce = false;
  LossReport r = total_loss(eye(3), eye(3), {eye(3)}, {eye(3)}, iota(3), 0.0, cfg);
  CHECK(r.total == 0.0);
}
