#include "nmt/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

namespace nmt {

InfoNceMode parse_infonce_mode(const std::string& s) {
  if (s == "paper-literal" || s == "paper_literal") return InfoNceMode::PaperLiteral;
  if (s == "conventional") return InfoNceMode::Conventional;
  throw ConfigError("unknown infonce mode '" + s + "' (expected paper-literal or conventional)");
}

std::string to_string(InfoNceMode mode) {
  return mode == InfoNceMode::PaperLiteral ? "paper-literal" : "conventional";
}

namespace {

void validate_truth(const std::vector<std::size_t>& truth, std::size_t m) {
  if (truth.size() != m) throw ContractError("truth permutation has the wrong length");
  std::set<std::size_t> seen;
  for (auto t : truth) {
    if (t >= m || !seen.insert(t).second) throw ContractError("truth is not a permutation");
  }
}

// One anchor's term: -z[pos] + logsumexp(z over the denominator set).
// Writes dl/dz into dz.
double anchor_loss(const std::vector<double>& z, std::size_t pos, InfoNceMode mode,
                   std::vector<double>& dz) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t l = 0; l < z.size(); ++l) {
    if (mode == InfoNceMode::PaperLiteral && l == pos) continue;
    mx = std::max(mx, z[l]);
  }
  double s = 0.0;
  for (std::size_t l = 0; l < z.size(); ++l) {
    if (mode == InfoNceMode::PaperLiteral && l == pos) continue;
    s += std::exp(z[l] - mx);
  }
  const double lse = mx + std::log(s);
  for (std::size_t l = 0; l < z.size(); ++l) {
    const bool in_denominator = !(mode == InfoNceMode::PaperLiteral && l == pos);
    dz[l] = in_denominator ? std::exp(z[l] - lse) : 0.0;
  }
  dz[pos] -= 1.0;
  return lse - z[pos];
}

}  // namespace

double info_nce(const Tensor& f1, const Tensor& f2, const std::vector<std::size_t>& truth,
                double tau, InfoNceMode mode, InfoNceGrad* grad) {
  const std::size_t m = f1.rows();
  if (m < 2) throw ContractError("info_nce: need at least two keypoints (no negatives otherwise)");
  if (f2.rows() != m) throw ContractError("info_nce: keypoint counts differ");
  if (!(tau > 0.0)) throw ContractError("info_nce: tau must be positive");
  validate_truth(truth, m);

  const Tensor sim = matmul_nt(f1, f2);
  Tensor dsim = Tensor::matrix(m, m);
  const double scale = 1.0 / (2.0 * static_cast<double>(m));
  double total = 0.0, dtau_raw = 0.0;
  std::vector<double> z(m), dz(m);

  // Image 1 anchors against image 2 candidates.
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t l = 0; l < m; ++l) z[l] = sim(i, l) / tau;
    total += anchor_loss(z, truth[i], mode, dz);
    for (std::size_t l = 0; l < m; ++l) {
      dsim(i, l) += scale * dz[l] / tau;
      dtau_raw -= scale * dz[l] * z[l];
    }
  }
  // Image 2 anchors against image 1 candidates.
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = truth[i];
    for (std::size_t l = 0; l < m; ++l) z[l] = sim(l, j) / tau;
    total += anchor_loss(z, i, mode, dz);
    for (std::size_t l = 0; l < m; ++l) {
      dsim(l, j) += scale * dz[l] / tau;
      dtau_raw -= scale * dz[l] * z[l];
    }
  }

  if (grad) {
    grad->df1 = matmul(dsim, f2);
    grad->df2 = matmul_tn(dsim, f1);
    grad->dtau_raw = dtau_raw;
  }
  return total * scale;
}

double hyperspherical(const Tensor& f, Tensor* df, double scale) {
  const std::size_t m = f.rows();
  if (m < 2) return 0.0;
  const Tensor c = matmul_nt(f, f);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t best = i == 0 ? 1 : 0;
    for (std::size_t j = 0; j < m; ++j) {
      if (j != i && c(i, j) > c(i, best)) best = j;
    }
    loss += c(i, best);
    if (df) {
      axpy(scale, f.row(best), df->row(i));
      axpy(scale, f.row(i), df->row(best));
    }
  }
  return loss;
}

std::vector<double> layer_weights(std::size_t layers, double p) {
  std::vector<double> w(layers);
  // Products are snapped to 12 decimals so that 3 * 0.3 comes out as 0.9.
  for (std::size_t k = 0; k < layers; ++k) {
    w[k] = std::round(static_cast<double>(k + 1) * p * 1e12) / 1e12;
  }
  return w;
}

double layer_hyperspherical(const std::vector<Tensor>& snapshots1,
                            const std::vector<Tensor>& snapshots2, double p,
                            std::vector<Tensor>* d1, std::vector<Tensor>* d2) {
  if (snapshots1.size() != snapshots2.size()) {
    throw ContractError("layer_hyperspherical: streams have different layer counts");
  }
  const auto w = layer_weights(snapshots1.size(), p);
  double loss = 0.0;
  for (std::size_t k = 0; k < w.size(); ++k) {
    Tensor* g1 = d1 ? &(*d1)[k] : nullptr;
    Tensor* g2 = d2 ? &(*d2)[k] : nullptr;
    loss += w[k] * 0.5 *
            (hyperspherical(snapshots1[k], g1, 0.5 * w[k]) +
             hyperspherical(snapshots2[k], g2, 0.5 * w[k]));
  }
  return loss;
}

LossReport total_loss(const Tensor& final1, const Tensor& final2,
                      const std::vector<Tensor>& snapshots1, const std::vector<Tensor>& snapshots2,
                      const std::vector<std::size_t>& truth, double tau_raw,
                      const LossConfig& config, LossGrads* grads) {
  LossReport r;
  if (grads) {
    grads->tokens1 = Tensor(final1.shape(), 0.0);
    grads->tokens2 = Tensor(final2.shape(), 0.0);
    grads->snapshots1.clear();
    grads->snapshots2.clear();
    for (const auto& s : snapshots1) grads->snapshots1.emplace_back(s.shape(), 0.0);
    for (const auto& s : snapshots2) grads->snapshots2.emplace_back(s.shape(), 0.0);
    grads->dtau_raw = 0.0;
  }
  if (config.use_infonce) {
    InfoNceGrad g;
    r.infonce = info_nce(final1, final2, truth, std::exp(tau_raw), config.mode, grads ? &g : nullptr);
    if (grads) {
      add_inplace(grads->tokens1, g.df1);
      add_inplace(grads->tokens2, g.df2);
      grads->dtau_raw = g.dtau_raw;
    }
  }
  if (config.use_hyperspherical) {
    r.hyperspherical_final = 0.5 * (hyperspherical(final1, grads ? &grads->tokens1 : nullptr, 0.5) +
                                    hyperspherical(final2, grads ? &grads->tokens2 : nullptr, 0.5));
  }
  if (config.use_layer_hyperspherical) {
    r.hyperspherical_layers =
        layer_hyperspherical(snapshots1, snapshots2, config.layer_p,
                             grads ? &grads->snapshots1 : nullptr, grads ? &grads->snapshots2 : nullptr);
  }
  r.total = r.infonce + r.hyperspherical_final + r.hyperspherical_layers;
  return r;
}

}  // namespace nmt
