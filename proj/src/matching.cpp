#include "nmt/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace nmt {

Tensor affinity(const Tensor& f1, const Tensor& f2) {
  if (f1.rank() != 2 || f2.rank() != 2 || f1.cols() != f2.cols()) {
    throw ContractError("affinity: feature dimensions differ");
  }
  return matmul_nt(f1, f2);
}

namespace {

double log_sum_exp(const double* x, std::size_t n, std::size_t stride) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, x[i * stride]);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(x[i * stride] - mx);
  return mx + std::log(s);
}

}  // namespace

TransportPlan sinkhorn_log(const Tensor& c, const SinkhornOptions& options) {
  if (!(options.temperature > 0.0)) throw ContractError("sinkhorn: temperature must be positive");
  if (options.iters < 1) throw ContractError("sinkhorn: at least one iteration required");
  if (c.rank() != 2 || c.rows() != c.cols()) {
    throw ConfigError("sinkhorn: affinity matrix must be square, got " + shape_string(c.shape()));
  }
  if (!c.all_finite()) throw ContractError("sinkhorn: non-finite affinity");

  const std::size_t m = c.rows();
  Tensor log_k = c;
  for (auto& v : log_k.values()) v /= options.temperature;
  for (std::size_t it = 0; it < options.iters; ++it) {
    for (std::size_t i = 0; i < m; ++i) {
      const double z = log_sum_exp(log_k.data() + i * m, m, 1);
      for (auto& v : log_k.row(i)) v -= z;
    }
    for (std::size_t j = 0; j < m; ++j) {
      const double z = log_sum_exp(log_k.data() + j, m, m);
      for (std::size_t i = 0; i < m; ++i) log_k(i, j) -= z;
    }
  }
  for (auto& v : log_k.values()) v = std::exp(v);
  TransportPlan plan{std::move(log_k), options.iters, 0.0};
  plan.max_marginal_error = max_marginal_error(plan.values);
  return plan;
}

double max_marginal_error(const Tensor& plan) {
  const std::size_t r = plan.rows(), cols = plan.cols();
  double err = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += plan(i, j);
    err = std::max(err, std::abs(s - 1.0));
  }
  for (std::size_t j = 0; j < cols; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < r; ++i) s += plan(i, j);
    err = std::max(err, std::abs(s - 1.0));
  }
  return err;
}

Matching decode_matching(const Tensor& plan) {
  if (!plan.all_finite()) throw ContractError("decode_matching: non-finite plan");
  Matching out;
  out.assignment.resize(plan.rows());
  std::vector<bool> used(plan.cols(), false);
  for (std::size_t i = 0; i < plan.rows(); ++i) {
    auto row = plan.row(i);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    out.assignment[i] = best;
    if (used[best]) out.injective = false;
    used[best] = true;
  }
  return out;
}

double accuracy(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& truth) {
  if (predicted.size() != truth.size()) {
    throw ContractError("accuracy: prediction has " + std::to_string(predicted.size()) +
                        " entries, truth has " + std::to_string(truth.size()));
  }
  if (truth.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += predicted[i] == truth[i];
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

}  // namespace nmt
