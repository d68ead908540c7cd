#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "nmt/spline_gnn.hpp"
#include "test_support.hpp"

using namespace nmt;

namespace {

double hat(double s, std::size_t i) { return std::max(0.0, 1.0 - std::abs(s - static_cast<double>(i))); }

// Materializes the full kernel for every arc and takes the max explicitly.
Tensor dense_reference(const Tensor& weight, const Tensor& bias, const Tensor& x,
                       const KeypointGraph& g, std::size_t K, bool relu) {
  const std::size_t in = x.cols(), out = bias.size();
  Tensor result = Tensor::matrix(g.num_nodes, out, -INFINITY);
  for (const Arc& arc : g.arcs) {
    std::vector<double> msg(out, 0.0);
    for (std::size_t i0 = 0; i0 < K; ++i0)
      for (std::size_t i1 = 0; i1 < K; ++i1) {
        const double b = hat(arc.pseudo[0] * (K - 1), i0) * hat(arc.pseudo[1] * (K - 1), i1);
        const std::size_t slot = i0 + K * i1;
        for (std::size_t c = 0; c < in; ++c)
          for (std::size_t o = 0; o < out; ++o)
            msg[o] += b * x(arc.src, c) * weight[(slot * in + c) * out + o];
      }
    for (std::size_t o = 0; o < out; ++o) result(arc.dst, o) = std::max(result(arc.dst, o), msg[o]);
  }
  for (std::size_t v = 0; v < g.num_nodes; ++v)
    for (std::size_t o = 0; o < out; ++o) {
      result(v, o) += bias[o];
      if (relu) result(v, o) = std::max(0.0, result(v, o));
    }
  return result;
}

}  // namespace

TEST_CASE("basis at the boundary and interior knots") {
  auto b = spline_basis({0.0, 0.0}, 5);
  REQUIRE(b.size() == 1);
  CHECK(b[0].index == 0);
  CHECK(b[0].weight == 1.0);
  b = spline_basis({0.5, 0.5}, 5);
  REQUIRE(b.size() == 1);
  CHECK(b[0].index == 2 + 5 * 2);
  CHECK(b[0].weight == 1.0);
  b = spline_basis({1.0, 1.0}, 5);
  REQUIRE(b.size() == 1);
  CHECK(b[0].index == 24);
}

TEST_CASE("basis between knots splits linearly") {
  auto b = spline_basis({0.3, 0.0}, 5);
  REQUIRE(b.size() == 2);
  std::sort(b.begin(), b.end(), [](auto& l, auto& r) { return l.index < r.index; });
  CHECK(b[0].index == 1);
  CHECK(b[0].weight == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(b[1].index == 2);
  CHECK(b[1].weight == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("basis weights sum to one and reject out-of-range input") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 100; ++i) {
    auto b = spline_basis({u(rng), u(rng)}, 3 + i % 4);
    CHECK(b.size() <= 4);
    double s = 0;
    for (auto& t : b) s += t.weight;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
  }
  CHECK_THROWS_AS(spline_basis({1.2, 0.0}, 5), ContractError);
  CHECK_THROWS_AS(spline_basis({0.0, -0.1}, 5), ContractError);
}

TEST_CASE("identity kernel on a lone self-looped node") {
  ParameterStore store;
  const std::size_t K = 5;
  Tensor w({K * K, 2, 2}, 0.0);
  const std::size_t slot = 2 + K * 2;
  w[(slot * 2 + 0) * 2 + 0] = 1.0;
  w[(slot * 2 + 1) * 2 + 1] = 1.0;
  SplineConv conv(store.add("w", w), store.add("b", Tensor::vector(2)), {2, 2, K, true});
  KeypointGraph g = build_graph(Tensor::from_rows({{3.0, 4.0}}));
  Tensor out = conv.forward(store, Tensor::from_rows({{1.0, -1.0}}), g);
  CHECK(out(0, 0) == 1.0);
  CHECK(out(0, 1) == 0.0);
}

TEST_CASE("zero kernel outputs the rectified bias") {
  ParameterStore store;
  Tensor bias({3}, std::vector<double>{0.5, -2.0, 1.5});
  SplineConv conv(store.add("w", Tensor({25, 2, 3}, 0.0)), store.add("b", bias), {2, 3, 5, true});
  KeypointGraph g = build_graph(Tensor::from_rows({{0, 0}, {1, 1}}));
  Tensor out = conv.forward(store, Tensor::from_rows({{1, 2}, {3, 4}}), g);
  for (std::size_t v = 0; v < 2; ++v) {
    CHECK(out(v, 0) == 0.5);
    CHECK(out(v, 1) == 0.0);
    CHECK(out(v, 2) == 1.5);
  }
}

TEST_CASE("spline convolution matches the dense contraction oracle") {
  std::mt19937_64 rng(17);
  for (bool relu : {true, false}) {
    for (std::size_t K : {3u, 5u}) {
      ParameterStore store;
      SplineConv conv(store, "c", {4, 6, K, relu}, rng);
      store.value(conv.bias()) = Tensor({6}, testing::gaussian(1, 6, rng).values());
      for (Tensor pts : {Tensor::from_rows({{0, 0}, {1, 0}, {1, 1}, {0, 1}}), testing::gaussian(9, 2, rng)}) {
        KeypointGraph g = build_graph(pts);
        Tensor x = testing::gaussian(pts.rows(), 4, rng);
        Tensor got = conv.forward(store, x, g);
        Tensor want = dense_reference(store.value(conv.weight()), store.value(conv.bias()), x, g, K, relu);
        CHECK(testing::max_abs_diff(got, want) < 1e-12);
      }
    }
  }
}

TEST_CASE("isolated vertex is a contract violation") {
  ParameterStore store;
  std::mt19937_64 rng(1);
  SplineConv conv(store, "c", {2, 2, 5, true}, rng);
  KeypointGraph g = build_graph(Tensor::from_rows({{0, 0}, {1, 1}, {2, 0}}), false);
  g.num_nodes = 4;
  g.incoming.resize(4);
  CHECK_THROWS_AS(conv.forward(store, testing::gaussian(4, 2, rng), g), ContractError);
}

TEST_CASE("gnn output rows are unit norm at desk and paper widths") {
  std::mt19937_64 rng(4);
  {
    ParameterStore store;
    SplineGnn gnn(store, "gnn", {32, 16, 5}, rng);
    Tensor out = gnn.forward(store, testing::gaussian(5, 32, rng), build_graph(testing::gaussian(5, 2, rng)));
    CHECK(out.rows() == 5);
    CHECK(out.cols() == 16);
    CHECK(testing::max_row_norm_error(out) < 1e-12);
  }
  {
    ParameterStore store;
    SplineGnn gnn(store, "gnn", {1024, 648, 5}, rng);
    Tensor out = gnn.forward(store, testing::gaussian(23, 1024, rng), build_graph(testing::gaussian(23, 2, rng)));
    CHECK(out.rows() == 23);
    CHECK(out.cols() == 648);
    CHECK(testing::max_row_norm_error(out) < 1e-12);
  }
}

TEST_CASE("gnn is permutation equivariant") {
  std::mt19937_64 rng(8);
  ParameterStore store;
  SplineGnn gnn(store, "gnn", {8, 12, 5}, rng);
  Tensor pts = testing::gaussian(10, 2, rng);
  Tensor x = testing::gaussian(10, 8, rng);
  KeypointGraph g = build_graph(pts);
  auto perm = testing::random_permutation(10, rng);
  Tensor px = Tensor::matrix(10, 8);
  for (std::size_t i = 0; i < 10; ++i) std::copy(x.row(perm[i]).begin(), x.row(perm[i]).end(), px.row(i).begin());
  Tensor out = gnn.forward(store, x, g);
  Tensor pout = gnn.forward(store, px, permute_graph(g, perm));
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t o = 0; o < 12; ++o) CHECK(pout(i, o) == doctest::Approx(out(perm[i], o)).epsilon(1e-12));
}

TEST_CASE("gnn rejects a feature width mismatch") {
  std::mt19937_64 rng(8);
  ParameterStore store;
  SplineGnn gnn(store, "gnn", {8, 12, 5}, rng);
  CHECK_THROWS_AS(gnn.forward(store, testing::gaussian(3, 7, rng), build_graph(testing::gaussian(3, 2, rng))),
                  ConfigError);
}

TEST_CASE("gnn gradients pass finite differences") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 3; ++trial) {
    ParameterStore store;
    SplineGnn gnn(store, "gnn", {5, 6, 5}, rng);
    KeypointGraph g = build_graph(testing::gaussian(6, 2, rng));
    Tensor x = testing::gaussian(6, 5, rng), w = testing::gaussian(6, 6, rng);
    SplineGnn::Cache cache;
    gnn.forward(store, x, g, &cache);
    GradientBuffer grads(store);
    Tensor dx = gnn.backward(store, cache, w, grads);
    store.accumulate(grads);
    auto loss = [&](const ParameterStore& p, const Tensor& in) {
      Tensor o = gnn.forward(p, in, g);
      double s = 0;
      for (std::size_t i = 0; i < o.size(); ++i) s += w[i] * o[i];
      return s;
    };
    CHECK(grad_check([&](const ParameterStore& p) { return loss(p, x); }, store).passed());
    for (std::size_t i = 0; i < x.size(); i += 3) {
      Tensor xp = x, xm = x;
      xp[i] += 1e-6;
      xm[i] -= 1e-6;
      CHECK(dx[i] == doctest::Approx((loss(store, xp) - loss(store, xm)) / 2e-6).epsilon(1e-5));
    }
  }
}
