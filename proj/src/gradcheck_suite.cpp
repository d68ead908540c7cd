#include "nmt/gradcheck_suite.hpp"

#include <algorithm>
#include <random>

#include "nmt/model.hpp"

namespace nmt {

namespace {

Tensor gaussian(std::vector<std::size_t> shape, std::mt19937_64& rng, double sigma = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, sigma);
  for (auto& v : t.values()) v = n(rng);
  return t;
}

Tensor random_points(std::size_t m, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 100.0);
  Tensor pts = Tensor::matrix(m, 2);
  for (auto& v : pts.values()) v = u(rng);
  return pts;
}

double weighted_sum(const Tensor& w, const Tensor& x) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += w[i] * x[i];
  return s;
}

void commit(ParameterStore& store, const GradientBuffer& g) {
  store.zero_grad();
  store.accumulate(g);
}

GradCheckReport check_gnn(std::mt19937_64& rng, const GradCheckOptions& opts) {
  const std::size_t m = 3 + rng() % 6;
  const std::size_t in = (rng() % 2) ? 16 : 8, d = (rng() % 2) ? 16 : 8;
  const std::size_t K = (rng() % 2) ? 5 : 3;
  ParameterStore store;
  SplineGnn gnn(store, "gnn", {in, d, K}, rng);
  const KeypointGraph graph = build_graph(random_points(m, rng), true);
  const Tensor x = gaussian({m, in}, rng);
  const Tensor w = gaussian({m, d}, rng);

  SplineGnn::Cache cache;
  gnn.forward(store, x, graph, &cache);
  GradientBuffer g(store);
  gnn.backward(store, cache, w, g);
  commit(store, g);
  return grad_check(
      [&](const ParameterStore& p) { return weighted_sum(w, gnn.forward(p, x, graph)); }, store, opts);
}

GradCheckReport check_decoder(std::mt19937_64& rng, const GradCheckOptions& opts) {
  const std::size_t m1 = 3 + rng() % 6, m2 = m1;
  const DecoderConfig cfg{(rng() % 2) ? 16u : 8u, 2, 2, 2};
  ParameterStore store;
  NormDecoder dec(store, "decoder", cfg, rng);
  auto sequence = [&](std::size_t m, int idx) {
    FeatureSequence s;
    s.tokens = normalize_rows(gaussian({m, cfg.d_model}, rng)).out;
    Tensor g = normalize_rows(gaussian({1, cfg.d_model}, rng)).out;
    s.global.assign(g.values().begin(), g.values().end());
    s.image_index = idx;
    return s;
  };
  const FeatureSequence f1 = sequence(m1, 1), f2 = sequence(m2, 2);
  DecodeGrads w;
  w.tokens1 = gaussian({m1, cfg.d_model}, rng);
  w.tokens2 = gaussian({m2, cfg.d_model}, rng);
  Tensor g1 = gaussian({1, cfg.d_model}, rng), g2 = gaussian({1, cfg.d_model}, rng);
  w.global1.assign(g1.values().begin(), g1.values().end());
  w.global2.assign(g2.values().begin(), g2.values().end());
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    w.snapshots1.push_back(gaussian({m1, cfg.d_model}, rng));
    w.snapshots2.push_back(gaussian({m2, cfg.d_model}, rng));
  }
  auto objective = [&](const DecodeResult& r) {
    double s = weighted_sum(w.tokens1, r.f1.tokens) + weighted_sum(w.tokens2, r.f2.tokens);
    for (std::size_t i = 0; i < cfg.d_model; ++i) {
      s += w.global1[i] * r.f1.global[i] + w.global2[i] * r.f2.global[i];
    }
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      s += weighted_sum(w.snapshots1[l], r.snapshots1[l]) + weighted_sum(w.snapshots2[l], r.snapshots2[l]);
    }
    return s;
  };

  NormDecoder::Cache cache;
  dec.forward(store, f1, f2, &cache);
  GradientBuffer g(store);
  dec.backward(store, cache, w, g);
  commit(store, g);
  return grad_check([&](const ParameterStore& p) { return objective(dec.forward(p, f1, f2)); },
                    store, opts);
}

GradCheckReport check_losses(std::mt19937_64& rng, const GradCheckOptions& opts) {
  const std::size_t m = 3 + rng() % 6, d = (rng() % 2) ? 16 : 8, layers = 3;
  ParameterStore store;
  const ParamId r1 = store.add("loss.final1", gaussian({m, d}, rng));
  const ParamId r2 = store.add("loss.final2", gaussian({m, d}, rng));
  std::vector<ParamId> s1, s2;
  for (std::size_t l = 0; l < layers; ++l) {
    s1.push_back(store.add("loss.snap1." + std::to_string(l), gaussian({m, d}, rng)));
    s2.push_back(store.add("loss.snap2." + std::to_string(l), gaussian({m, d}, rng)));
  }
  const ParamId tau = store.add("loss.tau_raw", Tensor::vector(1, std::log(0.07) + 0.3 * gaussian({1}, rng)[0]));
  std::vector<std::size_t> truth(m);
  for (std::size_t i = 0; i < m; ++i) truth[i] = i;
  std::shuffle(truth.begin(), truth.end(), rng);
  LossConfig cfg;
  cfg.mode = (rng() % 2) ? InfoNceMode::PaperLiteral : InfoNceMode::Conventional;

  struct Normalized {
    RowNormalized f1, f2;
    std::vector<RowNormalized> a, b;
  };
  auto normalize_all = [&](const ParameterStore& p) {
    Normalized n{normalize_rows(p.value(r1)), normalize_rows(p.value(r2)), {}, {}};
    for (std::size_t l = 0; l < layers; ++l) {
      n.a.push_back(normalize_rows(p.value(s1[l])));
      n.b.push_back(normalize_rows(p.value(s2[l])));
    }
    return n;
  };
  auto outs = [](const std::vector<RowNormalized>& v) {
    std::vector<Tensor> t;
    for (const auto& r : v) t.push_back(r.out);
    return t;
  };
  auto evaluate = [&](const ParameterStore& p, LossGrads* lg, Normalized* keep) {
    Normalized n = normalize_all(p);
    const double v = total_loss(n.f1.out, n.f2.out, outs(n.a), outs(n.b), truth, p.value(tau)[0], cfg, lg).total;
    if (keep) *keep = std::move(n);
    return v;
  };

  LossGrads lg;
  Normalized n;
  evaluate(store, &lg, &n);
  GradientBuffer g(store);
  g[r1] = normalize_rows_backward(n.f1, lg.tokens1);
  g[r2] = normalize_rows_backward(n.f2, lg.tokens2);
  for (std::size_t l = 0; l < layers; ++l) {
    g[s1[l]] = normalize_rows_backward(n.a[l], lg.snapshots1[l]);
    g[s2[l]] = normalize_rows_backward(n.b[l], lg.snapshots2[l]);
  }
  g[tau][0] = lg.dtau_raw;
  commit(store, g);
  return grad_check([&](const ParameterStore& p) { return evaluate(p, nullptr, nullptr); }, store, opts);
}

TrainConfig tiny_config(std::mt19937_64& rng) {
  TrainConfig c;
  c.d_model = 8;
  c.heads = 2;
  c.decoder_layers = 2;
  c.gnn_input_dim = 8;
  c.kernel_size = 3;
  c.mlp_mult = 2;
  c.backbone_grid = 8;
  c.backbone_stride = 32.0;
  c.splat_sigma = 40.0;
  c.data.m_min = 3;
  c.data.m_max = 6;
  c.data.latent_dim = 6;
  c.data.signal_dims = 3;
  c.data.num_classes = 3;
  c.data.keypoint_types = 6;
  c.infonce_mode = (rng() % 2) ? InfoNceMode::PaperLiteral : InfoNceMode::Conventional;
  return c;
}

GradCheckReport check_features(std::mt19937_64& rng, const GradCheckOptions& opts) {
  // Backbone projections and global token; downstream modules frozen.
  TrainConfig c = tiny_config(rng);
  MatchingModel model(c, rng());
  for (auto& p : model.params()) {
    p.trainable = p.name.rfind("backbone.", 0) == 0 || p.name.rfind("global.", 0) == 0;
  }
  const PairRecord pair = generate_pair(c.data, rng());
  GradientBuffer g(model.params());
  model.loss(pair, &g);
  commit(model.params(), g);
  return grad_check([&](const ParameterStore&) { return model.loss(pair).total; }, model.params(), opts);
}

// The end-to-end loss is O(10) while many weight gradients are below 1e-6,
// where central differences carry ~1e-10 of round-off; the relative error is
// floored at 1e-5 here.
GradCheckReport check_model(std::mt19937_64& rng, const GradCheckOptions& options) {
  GradCheckOptions opts = options;
  opts.floor = std::max(opts.floor, 1e-5);
  TrainConfig c = tiny_config(rng);
  MatchingModel model(c, rng());
  const PairRecord pair = generate_pair(c.data, rng());
  GradientBuffer g(model.params());
  model.loss(pair, &g);
  commit(model.params(), g);
  return grad_check([&](const ParameterStore&) { return model.loss(pair).total; }, model.params(), opts);
}

}  // namespace

const std::vector<std::string>& gradcheck_modules() {
  static const std::vector<std::string> names{"spline-gnn", "norm-transformer", "losses",
                                              "feature-extraction", "model"};
  return names;
}

std::vector<GradSuiteResult> run_gradcheck(const std::string& module, std::size_t instances,
                                           std::uint64_t seed, const GradCheckOptions& options) {
  GradCheckReport (*fn)(std::mt19937_64&, const GradCheckOptions&) = nullptr;
  if (module == "spline-gnn") fn = check_gnn;
  else if (module == "norm-transformer") fn = check_decoder;
  else if (module == "losses") fn = check_losses;
  else if (module == "feature-extraction") fn = check_features;
  else if (module == "model") fn = check_model;
  else throw ConfigError("unknown gradcheck module '" + module + "'");

  std::vector<GradSuiteResult> out;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < instances; ++i) {
    GradCheckOptions o = options;
    o.seed = rng();
    out.push_back({module, i, fn(rng, o)});
  }
  return out;
}

}  // namespace nmt
