#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "nmt/tensor.hpp"

namespace nmt {

enum class InfoNceMode {
  // Positive pair excluded from the denominator, as the objective is usually printed
  // for this model.
  PaperLiteral,
  // Standard form: the positive is part of the softmax denominator.
  Conventional,
};

InfoNceMode parse_infonce_mode(const std::string& s);
std::string to_string(InfoNceMode mode);

struct LossConfig {
  double layer_p = 0.3;
  InfoNceMode mode = InfoNceMode::Conventional;
  bool use_infonce = true;
  bool use_hyperspherical = true;
  bool use_layer_hyperspherical = true;
};

// Symmetric InfoNCE over cross-image cosines, averaged over the 2m anchors.
// truth[i] is the image-2 index matching image-1 keypoint i.
struct InfoNceGrad {
  Tensor df1, df2;
  double dtau_raw = 0.0;  // derivative w.r.t. log(tau)
};
double info_nce(const Tensor& f1, const Tensor& f2, const std::vector<std::size_t>& truth,
                double tau, InfoNceMode mode, InfoNceGrad* grad = nullptr);

// sum_i max_{j != i} <f_i, f_j>. Adds scale * gradient into *df when given.
double hyperspherical(const Tensor& f, Tensor* df = nullptr, double scale = 1.0);

// (p, 2p, ..., Lp)
std::vector<double> layer_weights(std::size_t layers, double p);

// sum_k k p * mean over streams of hyperspherical(layer k tokens).
double layer_hyperspherical(const std::vector<Tensor>& snapshots1,
                            const std::vector<Tensor>& snapshots2, double p,
                            std::vector<Tensor>* d1 = nullptr, std::vector<Tensor>* d2 = nullptr);

struct LossReport {
  double infonce = 0.0;
  double hyperspherical_final = 0.0;
  double hyperspherical_layers = 0.0;
  double total = 0.0;
};

struct LossGrads {
  Tensor tokens1, tokens2;
  std::vector<Tensor> snapshots1, snapshots2;
  double dtau_raw = 0.0;
};

// InfoNCE + final hyperspherical (mean over the two images) + layer-wise
// hyperspherical, summed without weights.
LossReport total_loss(const Tensor& final1, const Tensor& final2,
                      const std::vector<Tensor>& snapshots1, const std::vector<Tensor>& snapshots2,
                      const std::vector<std::size_t>& truth, double tau_raw,
                      const LossConfig& config, LossGrads* grads = nullptr);

}  // namespace nmt
