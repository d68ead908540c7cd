#include "nmt/model.hpp"

#include <cmath>
#include <random>

namespace nmt {

namespace {

SyntheticBackboneConfig synthetic_config(const TrainConfig& c) {
  SyntheticBackboneConfig s;
  s.latent_dim = c.data.latent_dim;
  s.c_last = c.gnn_input_dim / 2;
  s.c_second = c.gnn_input_dim - s.c_last;
  s.grid = c.backbone_grid;
  s.stride = c.backbone_stride;
  s.splat_sigma = c.splat_sigma;
  s.lr_scale = c.backbone_lr_factor;
  return s;
}

BackboneOutput zeros_like(const BackboneOutput& out) {
  BackboneOutput z = out;
  z.last.grid.fill(0.0);
  z.second_last.grid.fill(0.0);
  return z;
}

}  // namespace

MatchingModel::MatchingModel(const TrainConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed ^ 0xB5AD4ECEDA1CE2A9ull);
  if (config_.backbone == "synthetic") {
    backbone_ = std::make_unique<SyntheticBackbone>(params_, "backbone", synthetic_config(config_), rng);
  } else {
    backbone_ = std::make_unique<FeatureFileBackbone>(config_.gnn_input_dim);
  }
  build(seed);
}

MatchingModel::MatchingModel(const TrainConfig& config, std::unique_ptr<Backbone> backbone,
                             ParameterStore store, std::uint64_t seed)
    : config_(config), params_(std::move(store)), backbone_(std::move(backbone)) {
  config_.validate();
  if (backbone_->output_width() != config_.gnn_input_dim) {
    throw ConfigError("backbone width does not match gnn_input_dim");
  }
  build(seed);
}

void MatchingModel::build(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  global_ = GlobalToken(params_, "global", config_.gnn_input_dim, config_.d_model, rng);
  gnn_ = SplineGnn(params_, "gnn", {config_.gnn_input_dim, config_.d_model, config_.kernel_size}, rng);
  decoder_ = NormDecoder(params_, "decoder",
                         {config_.d_model, config_.heads, config_.decoder_layers, config_.mlp_mult}, rng);
  tau_raw_ = params_.add("loss.tau_raw", Tensor::vector(1, std::log(config_.tau_init)));
}

ImageForward MatchingModel::encode(const ImageInput& image, bool keep_cache) const {
  image.keypoints.validate();
  ImageForward f;
  f.graph = build_graph(image.keypoints.coords, true);
  f.backbone = backbone_->run(params_, image);
  f.features = extract_keypoint_features(f.backbone, image.keypoints, config_.gnn_input_dim,
                                         &f.diagnostics);
  f.sequence.tokens = gnn_.forward(params_, f.features, f.graph, keep_cache ? &f.gnn : nullptr);
  f.sequence.global = global_.forward(params_, f.backbone, keep_cache ? &f.global : nullptr);
  return f;
}

PairForward MatchingModel::forward(const PairRecord& pair, bool keep_cache,
                                   const BlockObserver& observer) const {
  PairForward p;
  p.image1 = encode(pair.image1, keep_cache);
  p.image2 = encode(pair.image2, keep_cache);
  p.image1.sequence.image_index = 1;
  p.image2.sequence.image_index = 2;
  if (observer) {
    observer("gnn", p.image1.sequence);
    observer("gnn", p.image2.sequence);
  }
  p.decoded = decoder_.forward(params_, p.image1.sequence, p.image2.sequence,
                               keep_cache ? &p.decoder : nullptr, observer);
  return p;
}

LossReport MatchingModel::loss(const PairRecord& pair, GradientBuffer* grads) const {
  return loss(pair, config_.loss_config(), grads);
}

LossReport MatchingModel::loss(const PairRecord& pair, const LossConfig& loss_config,
                               GradientBuffer* grads) const {
  pair.validate();
  PairForward fwd = forward(pair, grads != nullptr);
  const auto& d = fwd.decoded;
  LossGrads lg;
  const double tau_raw = params_.value(tau_raw_)[0];
  LossReport report = total_loss(d.f1.tokens, d.f2.tokens, d.snapshots1, d.snapshots2, pair.truth,
                                 tau_raw, loss_config, grads ? &lg : nullptr);
  if (!grads) return report;

  (*grads)[tau_raw_][0] += lg.dtau_raw;
  DecodeGrads dg;
  dg.tokens1 = std::move(lg.tokens1);
  dg.tokens2 = std::move(lg.tokens2);
  dg.snapshots1 = std::move(lg.snapshots1);
  dg.snapshots2 = std::move(lg.snapshots2);
  DecodeInputGrads din = decoder_.backward(params_, fwd.decoder, dg, *grads);
  backward_image(pair.image1, fwd.image1, din.tokens1, din.global1, *grads);
  backward_image(pair.image2, fwd.image2, din.tokens2, din.global2, *grads);
  return report;
}

void MatchingModel::backward_image(const ImageInput& image, const ImageForward& fwd,
                                   const Tensor& dtokens, std::span<const double> dglobal,
                                   GradientBuffer& grads) const {
  Tensor dfeatures = gnn_.backward(params_, fwd.gnn, dtokens, grads);
  BackboneOutput dmaps = zeros_like(fwd.backbone);
  extract_keypoint_features_backward(fwd.backbone, image.keypoints, dfeatures, dmaps);
  global_.backward(params_, fwd.global, dglobal, grads, dmaps);
  backbone_->backward(params_, image, dmaps, grads);
}

Prediction MatchingModel::predict(const PairRecord& pair) const {
  return predict(pair, {config_.sinkhorn_temperature, config_.sinkhorn_iters});
}

Prediction MatchingModel::predict(const PairRecord& pair, const SinkhornOptions& options) const {
  PairForward fwd = forward(pair, false);
  Prediction p;
  p.affinity = affinity(fwd.decoded.f1.tokens, fwd.decoded.f2.tokens);
  p.plan = sinkhorn_log(p.affinity, options);
  p.matching = decode_matching(p.plan.values);
  p.match_scores.resize(p.matching.assignment.size());
  for (std::size_t i = 0; i < p.match_scores.size(); ++i) {
    p.match_scores[i] = p.affinity(i, p.matching.assignment[i]);
  }
  return p;
}

}  // namespace nmt
