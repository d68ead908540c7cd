#include "nmt/spline_gnn.hpp"

#include <cmath>
#include <limits>

namespace nmt {

std::vector<BasisTerm> spline_basis(const std::array<double, 2>& u, std::size_t kernel_size) {
  if (kernel_size < 2) throw ContractError("spline_basis: kernel size must be at least 2");
  std::array<std::array<std::pair<std::size_t, double>, 2>, 2> per_dim;
  for (int d = 0; d < 2; ++d) {
    if (!(u[d] >= 0.0 && u[d] <= 1.0)) {
      throw ContractError("spline_basis: pseudo-coordinate " + std::to_string(u[d]) +
                          " outside [0, 1]");
    }
    const double s = u[d] * static_cast<double>(kernel_size - 1);
    std::size_t lower = static_cast<std::size_t>(std::floor(s));
    lower = std::min(lower, kernel_size - 2);
    const double frac = s - static_cast<double>(lower);
    per_dim[d] = {{{lower, 1.0 - frac}, {lower + 1, frac}}};
  }
  std::vector<BasisTerm> terms;
  for (const auto& [i1, w1] : per_dim[1]) {
    for (const auto& [i0, w0] : per_dim[0]) {
      const double w = w0 * w1;
      if (w > 0.0) terms.push_back({i0 + kernel_size * i1, w});
    }
  }
  return terms;
}

SplineConv::SplineConv(ParameterStore& store, const std::string& name,
                       const SplineConvConfig& config, std::mt19937_64& rng)
    : config_(config) {
  if (config.kernel_size < 2) throw ConfigError("spline conv kernel size must be at least 2");
  const std::size_t k2 = config.kernel_size * config.kernel_size;
  Tensor w({k2, config.in_dim, config.out_dim});
  std::normal_distribution<double> normal(0.0, 0.1 / std::sqrt(static_cast<double>(config.in_dim)));
  for (auto& v : w.values()) v = normal(rng);
  weight_ = store.add(name + ".weight", std::move(w));
  bias_ = store.add(name + ".bias", Tensor::vector(config.out_dim));
}

Tensor SplineConv::forward(const ParameterStore& params, const Tensor& x,
                           const KeypointGraph& graph, Cache* cache) const {
  const std::size_t in = config_.in_dim, out = config_.out_dim;
  if (x.rank() != 2 || x.cols() != in || x.rows() != graph.num_nodes) {
    throw ContractError("spline conv: expected features of shape (" +
                        std::to_string(graph.num_nodes) + ", " + std::to_string(in) + "), got " +
                        shape_string(x.shape()));
  }
  const Tensor& weight = params.value(weight_);
  const Tensor& bias = params.value(bias_);
  const std::size_t m = graph.num_nodes;

  std::vector<std::vector<BasisTerm>> basis(graph.arcs.size());
  for (std::size_t a = 0; a < graph.arcs.size(); ++a) {
    basis[a] = spline_basis(graph.arcs[a].pseudo, config_.kernel_size);
  }

  Tensor pre = Tensor::matrix(m, out, -std::numeric_limits<double>::infinity());
  std::vector<std::size_t> winner(m * out, 0);
  std::vector<double> msg(out);
  for (std::size_t v = 0; v < m; ++v) {
    if (graph.incoming[v].empty()) {
      throw ContractError("spline conv: vertex " + std::to_string(v) +
                          " has no incoming arcs (enable self-loops)");
    }
    auto best = pre.row(v);
    for (std::size_t a : graph.incoming[v]) {
      std::fill(msg.begin(), msg.end(), 0.0);
      auto xu = x.row(graph.arcs[a].src);
      for (const auto& term : basis[a]) {
        const double* wb = weight.data() + term.index * in * out;
        for (std::size_t i = 0; i < in; ++i) {
          const double s = term.weight * xu[i];
          if (s == 0.0) continue;
          const double* wi = wb + i * out;
          for (std::size_t o = 0; o < out; ++o) msg[o] += s * wi[o];
        }
      }
      for (std::size_t o = 0; o < out; ++o) {
        if (msg[o] > best[o]) {
          best[o] = msg[o];
          winner[v * out + o] = a;
        }
      }
    }
    for (std::size_t o = 0; o < out; ++o) best[o] += bias[o];
  }

  Tensor y = pre;
  if (config_.relu) {
    for (auto& v : y.values()) v = std::max(v, 0.0);
  }
  if (cache) {
    cache->input = x;
    cache->preact = std::move(pre);
    cache->winner = std::move(winner);
    cache->basis = std::move(basis);
    cache->arc_src.resize(graph.arcs.size());
    for (std::size_t a = 0; a < graph.arcs.size(); ++a) cache->arc_src[a] = graph.arcs[a].src;
  }
  return y;
}

Tensor SplineConv::backward(const ParameterStore& params, const Cache& cache, const Tensor& dout,
                            GradientBuffer& grads) const {
  const std::size_t in = config_.in_dim, out = config_.out_dim;
  const std::size_t m = cache.preact.rows();
  const Tensor& weight = params.value(weight_);
  Tensor& dweight = grads[weight_];
  Tensor& dbias = grads[bias_];

  // Route each output coordinate's gradient to its winning arc.
  Tensor darc = Tensor::matrix(cache.basis.size(), out);
  for (std::size_t v = 0; v < m; ++v) {
    for (std::size_t o = 0; o < out; ++o) {
      double g = dout(v, o);
      if (config_.relu && cache.preact(v, o) <= 0.0) g = 0.0;
      if (g == 0.0) continue;
      dbias[o] += g;
      darc(cache.winner[v * out + o], o) += g;
    }
  }

  Tensor dx = Tensor::matrix(m, in);
  for (std::size_t a = 0; a < cache.basis.size(); ++a) {
    auto g = darc.row(a);
    bool any = false;
    for (double v : g) any = any || v != 0.0;
    if (!any) continue;
    const std::size_t u = cache.arc_src[a];
    auto xu = cache.input.row(u);
    auto dxu = dx.row(u);
    for (const auto& term : cache.basis[a]) {
      const double* wb = weight.data() + term.index * in * out;
      double* dwb = dweight.data() + term.index * in * out;
      for (std::size_t i = 0; i < in; ++i) {
        const double* wi = wb + i * out;
        double* dwi = dwb + i * out;
        const double s = term.weight * xu[i];
        double acc = 0.0;
        for (std::size_t o = 0; o < out; ++o) {
          dwi[o] += s * g[o];
          acc += wi[o] * g[o];
        }
        dxu[i] += term.weight * acc;
      }
    }
  }
  return dx;
}

SplineGnn::SplineGnn(ParameterStore& store, const std::string& name, const GnnConfig& config,
                     std::mt19937_64& rng)
    : config_(config),
      layer1_(store, name + ".conv1", {config.input_dim, config.d_model, config.kernel_size, true},
              rng),
      layer2_(store, name + ".conv2", {config.d_model, config.d_model, config.kernel_size, false},
              rng) {}

Tensor SplineGnn::forward(const ParameterStore& params, const Tensor& features,
                          const KeypointGraph& graph, Cache* cache) const {
  if (features.rank() != 2 || features.cols() != config_.input_dim) {
    throw ConfigError("gnn: feature width " +
                      std::to_string(features.rank() == 2 ? features.cols() : 0) +
                      " does not match configured input dimension " +
                      std::to_string(config_.input_dim));
  }
  Tensor h = layer1_.forward(params, features, graph, cache ? &cache->layer1 : nullptr);
  Tensor y = layer2_.forward(params, h, graph, cache ? &cache->layer2 : nullptr);
  RowNormalized norm = normalize_rows(y);
  Tensor out = norm.out;
  if (cache) cache->norm = std::move(norm);
  return out;
}

Tensor SplineGnn::backward(const ParameterStore& params, const Cache& cache, const Tensor& dout,
                           GradientBuffer& grads) const {
  Tensor dy = normalize_rows_backward(cache.norm, dout);
  Tensor dh = layer2_.backward(params, cache.layer2, dy, grads);
  return layer1_.backward(params, cache.layer1, dh, grads);
}

}  // namespace nmt
