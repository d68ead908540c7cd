#include "nmt/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace nmt {

void DecoderConfig::validate() const {
  if (d_model == 0 || heads == 0 || layers == 0 || mlp_mult == 0) {
    throw ConfigError("decoder: d_model, heads, layers and mlp_mult must be positive");
  }
  if (d_model % heads != 0) {
    throw ConfigError("decoder: heads (" + std::to_string(heads) + ") must divide d_model (" +
                      std::to_string(d_model) + ")");
  }
}

namespace {

Tensor row_matrix(std::span<const double> v) {
  return Tensor({1, v.size()}, std::vector<double>(v.begin(), v.end()));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void add_row_bias(Tensor& x, const Tensor& bias) {
  for (std::size_t r = 0; r < x.rows(); ++r) axpy(1.0, bias.values(), x.row(r));
}

void accumulate_column_sums(const Tensor& x, Tensor& dst) {
  for (std::size_t r = 0; r < x.rows(); ++r) axpy(1.0, x.row(r), dst.values());
}

}  // namespace

Tensor attention_forward(const ParameterStore& params, const AttentionParams& p,
                         std::size_t heads, const Tensor& xq, const Tensor& xkv,
                         AttentionCache* cache) {
  const std::size_t d = xq.cols();
  if (xkv.cols() != d || d % heads != 0) throw ContractError("attention: width mismatch");
  const std::size_t nq = xq.rows(), nkv = xkv.rows(), dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor q = matmul(xq, params.value(p.wq));
  Tensor k = matmul(xkv, params.value(p.wk));
  Tensor v = matmul(xkv, params.value(p.wv));
  Tensor heads_out = Tensor::matrix(nq, d);
  std::vector<Tensor> probs;
  probs.reserve(heads);

  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * dh;
    Tensor prob = Tensor::matrix(nq, nkv);
    for (std::size_t i = 0; i < nq; ++i) {
      auto pi = prob.row(i);
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < nkv; ++j) {
        double s = 0.0;
        for (std::size_t c = c0; c < c0 + dh; ++c) s += q(i, c) * k(j, c);
        pi[j] = s * scale;
        mx = std::max(mx, pi[j]);
      }
      double z = 0.0;
      for (auto& e : pi) {
        e = std::exp(e - mx);
        z += e;
      }
      for (auto& e : pi) e /= z;
      for (std::size_t j = 0; j < nkv; ++j) {
        for (std::size_t c = c0; c < c0 + dh; ++c) heads_out(i, c) += pi[j] * v(j, c);
      }
    }
    probs.push_back(std::move(prob));
  }

  Tensor y = matmul(heads_out, params.value(p.wo));
  if (cache) {
    *cache = AttentionCache{xq, xkv, std::move(q), std::move(k), std::move(v),
                            std::move(heads_out), std::move(probs)};
  }
  return y;
}

void attention_backward(const ParameterStore& params, const AttentionParams& p, std::size_t heads,
                        const AttentionCache& cache, const Tensor& dout, GradientBuffer& grads,
                        Tensor& dxq, Tensor& dxkv) {
  const std::size_t d = cache.xq.cols();
  const std::size_t nq = cache.xq.rows(), nkv = cache.xkv.rows(), dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  matmul_tn_acc(cache.heads_out, dout, grads[p.wo]);
  Tensor dheads = matmul_nt(dout, params.value(p.wo));

  Tensor dq = Tensor::matrix(nq, d), dk = Tensor::matrix(nkv, d), dv = Tensor::matrix(nkv, d);
  std::vector<double> dp(nkv);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * dh;
    const Tensor& prob = cache.probs[h];
    for (std::size_t i = 0; i < nq; ++i) {
      double rowdot = 0.0;
      for (std::size_t j = 0; j < nkv; ++j) {
        double s = 0.0;
        for (std::size_t c = c0; c < c0 + dh; ++c) {
          s += dheads(i, c) * cache.v(j, c);
          dv(j, c) += prob(i, j) * dheads(i, c);
        }
        dp[j] = s;
        rowdot += prob(i, j) * s;
      }
      for (std::size_t j = 0; j < nkv; ++j) {
        const double ds = prob(i, j) * (dp[j] - rowdot) * scale;
        if (ds == 0.0) continue;
        for (std::size_t c = c0; c < c0 + dh; ++c) {
          dq(i, c) += ds * cache.k(j, c);
          dk(j, c) += ds * cache.q(i, c);
        }
      }
    }
  }

  matmul_tn_acc(cache.xq, dq, grads[p.wq]);
  matmul_tn_acc(cache.xkv, dk, grads[p.wk]);
  matmul_tn_acc(cache.xkv, dv, grads[p.wv]);
  dxq = matmul_nt(dq, params.value(p.wq));
  dxkv = matmul_nt(dk, params.value(p.wk));
  add_inplace(dxkv, matmul_nt(dv, params.value(p.wv)));
}

Tensor normalized_residual(const Tensor& x, const Tensor& branch, std::span<const double> alpha,
                           ResidualCache* cache) {
  RowNormalized fa = normalize_rows(branch);
  Tensor r = x;
  for (std::size_t i = 0; i < r.rows(); ++i) {
    auto ri = r.row(i);
    auto ai = fa.out.row(i);
    for (std::size_t c = 0; c < ri.size(); ++c) ri[c] += std::abs(alpha[c]) * (ai[c] - ri[c]);
  }
  RowNormalized out = normalize_rows(r);
  Tensor y = out.out;
  if (cache) *cache = ResidualCache{x, std::move(fa), std::move(out)};
  return y;
}

Tensor normalized_residual_backward(const ResidualCache& cache, std::span<const double> alpha_raw,
                                    const Tensor& dout, Tensor& dbranch,
                                    std::span<double> dalpha) {
  Tensor dr = normalize_rows_backward(cache.out, dout);
  Tensor dx = dr;
  Tensor dfa = dr;
  for (std::size_t i = 0; i < dr.rows(); ++i) {
    auto g = dr.row(i);
    auto xi = cache.x.row(i);
    auto fi = cache.branch.out.row(i);
    for (std::size_t c = 0; c < g.size(); ++c) {
      const double a = std::abs(alpha_raw[c]);
      const double sign = alpha_raw[c] > 0.0 ? 1.0 : (alpha_raw[c] < 0.0 ? -1.0 : 0.0);
      dx(i, c) = g[c] * (1.0 - a);
      dfa(i, c) = g[c] * a;
      dalpha[c] += sign * g[c] * (fi[c] - xi[c]);
    }
  }
  dbranch = normalize_rows_backward(cache.branch, dfa);
  return dx;
}

Tensor norm_self_attn(const ParameterStore& params, const DecoderLayerParams& layer,
                      std::size_t heads, const FeatureSequence& seq, SelfAttnCache* cache) {
  Tensor xkv = vstack(seq.tokens, row_matrix(seq.global));
  Tensor branch = attention_forward(params, layer.self_attn, heads, seq.tokens, xkv,
                                    cache ? &cache->attn : nullptr);
  return normalized_residual(seq.tokens, branch, params.value(layer.alpha_a).values(),
                             cache ? &cache->residual : nullptr);
}

void norm_self_attn_backward(const ParameterStore& params, const DecoderLayerParams& layer,
                             std::size_t heads, const SelfAttnCache& cache, const Tensor& dout,
                             GradientBuffer& grads, Tensor& dtokens,
                             std::vector<double>& dglobal) {
  Tensor dbranch;
  dtokens = normalized_residual_backward(cache.residual, params.value(layer.alpha_a).values(), dout,
                                         dbranch, grads[layer.alpha_a].values());
  Tensor dxq, dxkv;
  attention_backward(params, layer.self_attn, heads, cache.attn, dbranch, grads, dxq, dxkv);
  add_inplace(dtokens, dxq);
  const std::size_t m = dtokens.rows();
  for (std::size_t i = 0; i < m; ++i) axpy(1.0, dxkv.row(i), dtokens.row(i));
  auto g = dxkv.row(m);
  dglobal.assign(g.begin(), g.end());
}

Tensor norm_cross_attn(const ParameterStore& params, const DecoderLayerParams& layer,
                       std::size_t heads, const Tensor& tokens, const Tensor& other,
                       CrossAttnCache* cache) {
  Tensor branch = attention_forward(params, layer.cross_attn, heads, tokens, other,
                                    cache ? &cache->attn : nullptr);
  return normalized_residual(tokens, branch, params.value(layer.alpha_c).values(),
                             cache ? &cache->residual : nullptr);
}

void norm_cross_attn_backward(const ParameterStore& params, const DecoderLayerParams& layer,
                              std::size_t heads, const CrossAttnCache& cache, const Tensor& dout,
                              GradientBuffer& grads, Tensor& dtokens, Tensor& dother) {
  Tensor dbranch;
  dtokens = normalized_residual_backward(cache.residual, params.value(layer.alpha_c).values(), dout,
                                         dbranch, grads[layer.alpha_c].values());
  Tensor dxq;
  attention_backward(params, layer.cross_attn, heads, cache.attn, dbranch, grads, dxq, dother);
  add_inplace(dtokens, dxq);
}

Tensor modulate_global(const Tensor& tokens, std::span<const double> global, ModulateCache* cache) {
  if (global.size() != tokens.cols()) throw ContractError("modulate_global: width mismatch");
  Tensor prod = tokens;
  for (std::size_t i = 0; i < prod.rows(); ++i) {
    auto r = prod.row(i);
    for (std::size_t c = 0; c < r.size(); ++c) r[c] *= global[c];
  }
  RowNormalized norm = normalize_rows(prod);
  Tensor out = norm.out;
  if (cache) {
    *cache = ModulateCache{tokens, std::vector<double>(global.begin(), global.end()),
                           std::move(norm)};
  }
  return out;
}

void modulate_global_backward(const ModulateCache& cache, const Tensor& dout, Tensor& dtokens,
                              std::vector<double>& dglobal) {
  Tensor dprod = normalize_rows_backward(cache.product, dout);
  dtokens = dprod;
  dglobal.assign(cache.global.size(), 0.0);
  for (std::size_t i = 0; i < dprod.rows(); ++i) {
    auto g = dprod.row(i);
    auto t = cache.tokens.row(i);
    for (std::size_t c = 0; c < g.size(); ++c) {
      dtokens(i, c) = g[c] * cache.global[c];
      dglobal[c] += g[c] * t[c];
    }
  }
}

FeatureSequence norm_mlp(const ParameterStore& params, const DecoderLayerParams& layer,
                         const FeatureSequence& seq, MlpCache* cache) {
  Tensor x = vstack(seq.tokens, row_matrix(seq.global));
  Tensor hidden = matmul(x, params.value(layer.mlp.w1));
  add_row_bias(hidden, params.value(layer.mlp.b1));
  Tensor act = hidden;
  for (auto& v : act.values()) v *= sigmoid(v);
  Tensor branch = matmul(act, params.value(layer.mlp.w2));
  add_row_bias(branch, params.value(layer.mlp.b2));

  ResidualCache residual;
  Tensor y = normalized_residual(x, branch, params.value(layer.alpha_m).values(),
                                 cache ? &residual : nullptr);
  const std::size_t m = seq.tokens.rows();
  FeatureSequence out{slice_rows(y, 0, m), {}, seq.image_index};
  auto g = y.row(m);
  out.global.assign(g.begin(), g.end());
  if (cache) {
    *cache = MlpCache{std::move(x), std::move(hidden), std::move(act), std::move(residual)};
  }
  return out;
}

void norm_mlp_backward(const ParameterStore& params, const DecoderLayerParams& layer,
                       const MlpCache& cache, const Tensor& dtokens_out,
                       std::span<const double> dglobal_out, GradientBuffer& grads,
                       Tensor& dtokens, std::vector<double>& dglobal) {
  Tensor dy = vstack(dtokens_out, row_matrix(dglobal_out));
  Tensor dbranch;
  Tensor dx = normalized_residual_backward(cache.residual, params.value(layer.alpha_m).values(), dy,
                                           dbranch, grads[layer.alpha_m].values());
  matmul_tn_acc(cache.act, dbranch, grads[layer.mlp.w2]);
  accumulate_column_sums(dbranch, grads[layer.mlp.b2]);
  Tensor dact = matmul_nt(dbranch, params.value(layer.mlp.w2));
  for (std::size_t i = 0; i < dact.size(); ++i) {
    const double h = cache.hidden[i];
    const double s = sigmoid(h);
    dact[i] *= s * (1.0 + h * (1.0 - s));
  }
  matmul_tn_acc(cache.x, dact, grads[layer.mlp.w1]);
  accumulate_column_sums(dact, grads[layer.mlp.b1]);
  add_inplace(dx, matmul_nt(dact, params.value(layer.mlp.w1)));

  const std::size_t m = dtokens_out.rows();
  dtokens = slice_rows(dx, 0, m);
  auto g = dx.row(m);
  dglobal.assign(g.begin(), g.end());
}

namespace {

Tensor random_matrix(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  Tensor t = Tensor::matrix(rows, cols);
  for (auto& v : t.values()) v = normal(rng);
  return t;
}

AttentionParams make_attention(ParameterStore& store, const std::string& prefix, std::size_t d,
                               std::mt19937_64& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  AttentionParams p;
  p.wq = store.add(prefix + ".wq", random_matrix(d, d, s, rng));
  p.wk = store.add(prefix + ".wk", random_matrix(d, d, s, rng));
  p.wv = store.add(prefix + ".wv", random_matrix(d, d, s, rng));
  p.wo = store.add(prefix + ".wo", random_matrix(d, d, s, rng));
  return p;
}

void add_into(std::vector<double>& dst, std::span<const double> src) {
  if (dst.empty()) dst.assign(src.size(), 0.0);
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

}  // namespace

NormDecoder::NormDecoder(ParameterStore& store, const std::string& name,
                         const DecoderConfig& config, std::mt19937_64& rng)
    : config_(config) {
  config.validate();
  const std::size_t d = config.d_model, hd = config.mlp_mult * config.d_model;
  const double alpha0 = 1.0 / static_cast<double>(config.layers);
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::string prefix = name + ".layer" + std::to_string(l);
    DecoderLayerParams p;
    p.self_attn = make_attention(store, prefix + ".self", d, rng);
    p.cross_attn = make_attention(store, prefix + ".cross", d, rng);
    p.mlp.w1 = store.add(prefix + ".mlp.w1", random_matrix(d, hd, 1.0 / std::sqrt(double(d)), rng));
    p.mlp.b1 = store.add(prefix + ".mlp.b1", Tensor::vector(hd));
    p.mlp.w2 = store.add(prefix + ".mlp.w2", random_matrix(hd, d, 1.0 / std::sqrt(double(hd)), rng));
    p.mlp.b2 = store.add(prefix + ".mlp.b2", Tensor::vector(d));
    p.alpha_a = store.add(prefix + ".alpha_attn", Tensor::vector(d, alpha0));
    p.alpha_c = store.add(prefix + ".alpha_cross", Tensor::vector(d, alpha0));
    p.alpha_m = store.add(prefix + ".alpha_mlp", Tensor::vector(d, alpha0));
    layers_.push_back(p);
  }
}

DecodeResult NormDecoder::forward(const ParameterStore& params, const FeatureSequence& f1,
                                  const FeatureSequence& f2, Cache* cache,
                                  const BlockObserver& observer) const {
  const std::size_t heads = config_.heads;
  for (const auto* f : {&f1, &f2}) {
    if (f->tokens.rank() != 2 || f->tokens.cols() != config_.d_model ||
        f->global.size() != config_.d_model) {
      throw ContractError("decoder: sequence width does not match d_model");
    }
  }
  if (f1.tokens.rows() != f2.tokens.rows()) {
    throw ContractError("decoder: both images need the same number of keypoints");
  }
  DecodeResult res{f1, f2, {}, {}};
  res.f1.image_index = 1;
  res.f2.image_index = 2;
  if (cache) cache->layers.assign(layers_.size(), {});
  auto notify = [&](std::string_view block, const FeatureSequence& s) {
    if (observer) observer(block, s);
  };

  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& p = layers_[l];
    LayerCache* lc = cache ? &cache->layers[l] : nullptr;
    FeatureSequence& a = res.f1;
    FeatureSequence& b = res.f2;

    a.tokens = norm_self_attn(params, p, heads, a, lc ? &lc->self1 : nullptr);
    notify("self_attn", a);
    b.tokens = norm_self_attn(params, p, heads, b, lc ? &lc->self2 : nullptr);
    notify("self_attn", b);

    a.tokens = norm_cross_attn(params, p, heads, a.tokens, b.tokens, lc ? &lc->cross1 : nullptr);
    notify("cross_attn", a);
    b.tokens = norm_cross_attn(params, p, heads, b.tokens, a.tokens, lc ? &lc->cross2 : nullptr);
    notify("cross_attn", b);

    a.tokens = modulate_global(a.tokens, a.global, lc ? &lc->mod1 : nullptr);
    notify("modulate", a);
    b.tokens = modulate_global(b.tokens, b.global, lc ? &lc->mod2 : nullptr);
    notify("modulate", b);

    a = norm_mlp(params, p, a, lc ? &lc->mlp1 : nullptr);
    notify("mlp", a);
    b = norm_mlp(params, p, b, lc ? &lc->mlp2 : nullptr);
    notify("mlp", b);

    res.snapshots1.push_back(a.tokens);
    res.snapshots2.push_back(b.tokens);
  }
  return res;
}

DecodeInputGrads NormDecoder::backward(const ParameterStore& params, const Cache& cache,
                                       const DecodeGrads& dout, GradientBuffer& grads) const {
  const std::size_t heads = config_.heads;
  Tensor dt1 = dout.tokens1, dt2 = dout.tokens2;
  std::vector<double> dg1 = dout.global1, dg2 = dout.global2;
  if (dg1.empty()) dg1.assign(config_.d_model, 0.0);
  if (dg2.empty()) dg2.assign(config_.d_model, 0.0);

  for (std::size_t l = layers_.size(); l-- > 0;) {
    const auto& p = layers_[l];
    const LayerCache& lc = cache.layers[l];
    if (!dout.snapshots1.empty()) add_inplace(dt1, dout.snapshots1[l]);
    if (!dout.snapshots2.empty()) add_inplace(dt2, dout.snapshots2[l]);

    Tensor dmod1, dmod2;
    std::vector<double> g1, g2;
    norm_mlp_backward(params, p, lc.mlp2, dt2, dg2, grads, dmod2, g2);
    norm_mlp_backward(params, p, lc.mlp1, dt1, dg1, grads, dmod1, g1);
    dg1 = g1;
    dg2 = g2;

    Tensor dc1, dc2;
    modulate_global_backward(lc.mod2, dmod2, dc2, g2);
    modulate_global_backward(lc.mod1, dmod1, dc1, g1);
    add_into(dg1, g1);
    add_into(dg2, g2);

    // Stream 2 read the updated stream 1, so its key/value gradient lands on dc1.
    Tensor ds2, dother;
    norm_cross_attn_backward(params, p, heads, lc.cross2, dc2, grads, ds2, dother);
    add_inplace(dc1, dother);
    Tensor ds1;
    norm_cross_attn_backward(params, p, heads, lc.cross1, dc1, grads, ds1, dother);
    add_inplace(ds2, dother);

    norm_self_attn_backward(params, p, heads, lc.self2, ds2, grads, dt2, g2);
    norm_self_attn_backward(params, p, heads, lc.self1, ds1, grads, dt1, g1);
    add_into(dg1, g1);
    add_into(dg2, g2);
  }
  return {std::move(dt1), std::move(dt2), std::move(dg1), std::move(dg2)};
}

}  // namespace nmt
