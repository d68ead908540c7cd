#pragma once

#include <array>
#include <random>
#include <string>
#include <vector>

#include "nmt/geometry.hpp"
#include "nmt/params.hpp"

namespace nmt {

struct BasisTerm {
  std::size_t index = 0;  // flat kernel index i0 + K * i1
  double weight = 0.0;
};

// Degree-1 open B-spline basis on K uniform knots per dimension over [0,1]^2.
// Returns the non-zero terms (at most 4); weights sum to one.
std::vector<BasisTerm> spline_basis(const std::array<double, 2>& u, std::size_t kernel_size);

struct SplineConvConfig {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  std::size_t kernel_size = 5;
  bool relu = true;
};

// Spline convolution with max aggregation over incoming arcs:
//   out[v] = act(max_{u->v} sum_b w_b(u->v) * x[u] W_b + bias)
// Weight shape is (K^2, in, out). Max ties go to the lowest arc index.
class SplineConv {
 public:
  struct Cache {
    Tensor input;
    Tensor preact;                               // after bias, before ReLU
    std::vector<std::size_t> winner;             // m x out arc index of the max
    std::vector<std::size_t> arc_src;
    std::vector<std::vector<BasisTerm>> basis;   // per arc
  };

  SplineConv() = default;
  SplineConv(ParameterStore& store, const std::string& name, const SplineConvConfig& config,
             std::mt19937_64& rng);
  SplineConv(ParamId weight, ParamId bias, const SplineConvConfig& config)
      : config_(config), weight_(weight), bias_(bias) {}

  Tensor forward(const ParameterStore& params, const Tensor& x, const KeypointGraph& graph,
                 Cache* cache = nullptr) const;
  // Accumulates weight/bias gradients, returns the input gradient.
  Tensor backward(const ParameterStore& params, const Cache& cache, const Tensor& dout,
                  GradientBuffer& grads) const;

  const SplineConvConfig& config() const { return config_; }
  ParamId weight() const { return weight_; }
  ParamId bias() const { return bias_; }

 private:
  SplineConvConfig config_;
  ParamId weight_;
  ParamId bias_;
};

struct GnnConfig {
  std::size_t input_dim = 32;
  std::size_t d_model = 64;
  std::size_t kernel_size = 5;
};

// Two spline convolutions (ReLU after the first only) followed by row
// normalization, so the decoder receives unit-norm tokens.
class SplineGnn {
 public:
  struct Cache {
    SplineConv::Cache layer1;
    SplineConv::Cache layer2;
    RowNormalized norm;
  };

  SplineGnn() = default;
  SplineGnn(ParameterStore& store, const std::string& name, const GnnConfig& config,
            std::mt19937_64& rng);

  Tensor forward(const ParameterStore& params, const Tensor& features, const KeypointGraph& graph,
                 Cache* cache = nullptr) const;
  Tensor backward(const ParameterStore& params, const Cache& cache, const Tensor& dout,
                  GradientBuffer& grads) const;

  const GnnConfig& config() const { return config_; }
  const SplineConv& layer1() const { return layer1_; }
  const SplineConv& layer2() const { return layer2_; }

 private:
  GnnConfig config_;
  SplineConv layer1_;
  SplineConv layer2_;
};

}  // namespace nmt
