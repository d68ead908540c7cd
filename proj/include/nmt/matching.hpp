#pragma once

#include <cstddef>
#include <vector>

#include "nmt/tensor.hpp"

namespace nmt {

struct SinkhornOptions {
  double temperature = 0.1;
  std::size_t iters = 20;
};

// Doubly stochastic matrix with the marginal error left after the last round.
struct TransportPlan {
  Tensor values;
  std::size_t iterations_used = 0;
  double max_marginal_error = 0.0;
};

struct Matching {
  std::vector<std::size_t> assignment;  // row i -> column assignment[i]
  bool injective = true;
};

// Cosine affinities C = f1 * f2^T of unit-norm rows.
Tensor affinity(const Tensor& f1, const Tensor& f2);

// Log-domain Sinkhorn on the kernel C / temperature. One round is a row pass
// followed by a column pass. Square inputs only.
TransportPlan sinkhorn_log(const Tensor& affinity, const SinkhornOptions& options = {});

// max over rows and columns of |sum - 1|
double max_marginal_error(const Tensor& plan);

// Row-wise argmax, ties to the lowest column. Flags non-injective results.
Matching decode_matching(const Tensor& plan);

double accuracy(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& truth);

}  // namespace nmt
