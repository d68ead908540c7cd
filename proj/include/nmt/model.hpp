#pragma once

#include <memory>
#include <vector>

#include "nmt/config.hpp"
#include "nmt/dataset.hpp"
#include "nmt/features.hpp"
#include "nmt/geometry.hpp"
#include "nmt/losses.hpp"
#include "nmt/matching.hpp"
#include "nmt/spline_gnn.hpp"
#include "nmt/transformer.hpp"

namespace nmt {

// Per-image activations kept for the backward pass.
struct ImageForward {
  KeypointGraph graph;
  BackboneOutput backbone;
  Tensor features;
  SplineGnn::Cache gnn;
  GlobalToken::Cache global;
  FeatureSequence sequence;
  SampleDiagnostics diagnostics;
};

struct PairForward {
  ImageForward image1, image2;
  DecodeResult decoded;
  NormDecoder::Cache decoder;
};

struct Prediction {
  Matching matching;
  TransportPlan plan;
  Tensor affinity;
  std::vector<double> match_scores;  // cosine of each row's chosen column
};

// Backbone -> keypoint sampling + global token -> spline GNN -> two-stream
// decoder, all weights in one ParameterStore.
class MatchingModel {
 public:
  // Builds the synthetic or file backbone named by the config.
  MatchingModel(const TrainConfig& config, std::uint64_t seed);
  // Uses a caller-supplied backbone; it must already be registered in `store`
  // if it owns parameters.
  MatchingModel(const TrainConfig& config, std::unique_ptr<Backbone> backbone,
                ParameterStore store, std::uint64_t seed);

  MatchingModel(const MatchingModel&) = delete;
  MatchingModel& operator=(const MatchingModel&) = delete;

  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }
  const TrainConfig& config() const { return config_; }
  const SplineGnn& gnn() const { return gnn_; }
  const NormDecoder& decoder() const { return decoder_; }
  const Backbone& backbone() const { return *backbone_; }
  ParamId tau_raw() const { return tau_raw_; }

  ImageForward encode(const ImageInput& image, bool keep_cache) const;
  PairForward forward(const PairRecord& pair, bool keep_cache,
                      const BlockObserver& observer = {}) const;

  // Loss of one pair; accumulates parameter gradients into `grads` when given.
  LossReport loss(const PairRecord& pair, GradientBuffer* grads = nullptr) const;
  LossReport loss(const PairRecord& pair, const LossConfig& loss_config,
                  GradientBuffer* grads) const;

  Prediction predict(const PairRecord& pair) const;
  Prediction predict(const PairRecord& pair, const SinkhornOptions& options) const;

 private:
  void build(std::uint64_t seed);
  void backward_image(const ImageInput& image, const ImageForward& fwd, const Tensor& dtokens,
                      std::span<const double> dglobal, GradientBuffer& grads) const;

  TrainConfig config_;
  ParameterStore params_;
  std::unique_ptr<Backbone> backbone_;
  GlobalToken global_;
  SplineGnn gnn_;
  NormDecoder decoder_;
  ParamId tau_raw_;
};

}  // namespace nmt
