#pragma once

#include <functional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "nmt/params.hpp"

namespace nmt {

// Per-image token stream of the decoder: m keypoint tokens plus one global token,
// all on the unit sphere.
struct FeatureSequence {
  Tensor tokens;               // m x d
  std::vector<double> global;  // d
  int image_index = 1;
};

struct DecoderConfig {
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t layers = 2;
  std::size_t mlp_mult = 4;
  void validate() const;
};

struct AttentionParams {
  ParamId wq, wk, wv, wo;
};

struct MlpParams {
  ParamId w1, b1, w2, b2;
};

struct DecoderLayerParams {
  AttentionParams self_attn;
  AttentionParams cross_attn;
  MlpParams mlp;
  ParamId alpha_a, alpha_c, alpha_m;  // raw step sizes, used through |.|
};

// Multi-head scaled dot-product attention, queries from `xq`, keys/values from `xkv`.
struct AttentionCache {
  Tensor xq, xkv, q, k, v, heads_out;
  std::vector<Tensor> probs;  // one n_q x n_kv matrix per head
};

Tensor attention_forward(const ParameterStore& params, const AttentionParams& p,
                         std::size_t heads, const Tensor& xq, const Tensor& xkv,
                         AttentionCache* cache = nullptr);
void attention_backward(const ParameterStore& params, const AttentionParams& p, std::size_t heads,
                        const AttentionCache& cache, const Tensor& dout, GradientBuffer& grads,
                        Tensor& dxq, Tensor& dxkv);

// out = Norm(x + |alpha| * (Norm(branch) - x)), row-wise.
struct ResidualCache {
  Tensor x;
  RowNormalized branch;
  RowNormalized out;
};

Tensor normalized_residual(const Tensor& x, const Tensor& branch, std::span<const double> alpha,
                           ResidualCache* cache = nullptr);
// Returns dx; writes d(branch) and accumulates d(alpha_raw).
Tensor normalized_residual_backward(const ResidualCache& cache, std::span<const double> alpha_raw,
                                    const Tensor& dout, Tensor& dbranch,
                                    std::span<double> dalpha);

struct SelfAttnCache {
  AttentionCache attn;
  ResidualCache residual;
};
struct CrossAttnCache {
  AttentionCache attn;
  ResidualCache residual;
};
struct ModulateCache {
  Tensor tokens;
  std::vector<double> global;
  RowNormalized product;
};
struct MlpCache {
  Tensor x;       // (m+1) x d, global token last
  Tensor hidden;  // pre-activation
  Tensor act;
  ResidualCache residual;
};

// Keypoint tokens attend over themselves plus the global token; the global token
// itself is not updated here.
Tensor norm_self_attn(const ParameterStore& params, const DecoderLayerParams& layer,
                      std::size_t heads, const FeatureSequence& seq, SelfAttnCache* cache = nullptr);
void norm_self_attn_backward(const ParameterStore& params, const DecoderLayerParams& layer,
                             std::size_t heads, const SelfAttnCache& cache, const Tensor& dout,
                             GradientBuffer& grads, Tensor& dtokens, std::vector<double>& dglobal);

// Tokens of `tokens` attend over the keypoint tokens of `other`.
Tensor norm_cross_attn(const ParameterStore& params, const DecoderLayerParams& layer,
                       std::size_t heads, const Tensor& tokens, const Tensor& other,
                       CrossAttnCache* cache = nullptr);
void norm_cross_attn_backward(const ParameterStore& params, const DecoderLayerParams& layer,
                              std::size_t heads, const CrossAttnCache& cache, const Tensor& dout,
                              GradientBuffer& grads, Tensor& dtokens, Tensor& dother);

// Each token becomes Norm(token * global) (element-wise product).
Tensor modulate_global(const Tensor& tokens, std::span<const double> global,
                       ModulateCache* cache = nullptr);
void modulate_global_backward(const ModulateCache& cache, const Tensor& dout, Tensor& dtokens,
                              std::vector<double>& dglobal);

// Linear(d, h*d) -> SiLU -> Linear(h*d, d), normalized residual with alpha_M,
// applied to the tokens and the global token.
FeatureSequence norm_mlp(const ParameterStore& params, const DecoderLayerParams& layer,
                         const FeatureSequence& seq, MlpCache* cache = nullptr);
void norm_mlp_backward(const ParameterStore& params, const DecoderLayerParams& layer,
                       const MlpCache& cache, const Tensor& dtokens_out,
                       std::span<const double> dglobal_out, GradientBuffer& grads,
                       Tensor& dtokens, std::vector<double>& dglobal);

struct DecodeResult {
  FeatureSequence f1, f2;
  // Keypoint tokens after each layer, per stream.
  std::vector<Tensor> snapshots1, snapshots2;
};

// Gradients arriving at the decoder outputs. Snapshot gradients may be empty.
struct DecodeGrads {
  Tensor tokens1, tokens2;
  std::vector<double> global1, global2;
  std::vector<Tensor> snapshots1, snapshots2;
};

struct DecodeInputGrads {
  Tensor tokens1, tokens2;
  std::vector<double> global1, global2;
};

// Called after each sub-block with its name and the affected stream.
using BlockObserver = std::function<void(std::string_view block, const FeatureSequence& seq)>;

// Two-stream normalized transformer decoder with one parameter set shared by
// both streams. Per layer: self-attention on each stream, cross-attention
// 1<-2 then 2<-1 (reading the updated stream 1), global modulation, MLP.
class NormDecoder {
 public:
  struct LayerCache {
    SelfAttnCache self1, self2;
    CrossAttnCache cross1, cross2;
    ModulateCache mod1, mod2;
    MlpCache mlp1, mlp2;
  };
  struct Cache {
    std::vector<LayerCache> layers;
  };

  NormDecoder() = default;
  NormDecoder(ParameterStore& store, const std::string& name, const DecoderConfig& config,
              std::mt19937_64& rng);

  DecodeResult forward(const ParameterStore& params, const FeatureSequence& f1,
                       const FeatureSequence& f2, Cache* cache = nullptr,
                       const BlockObserver& observer = {}) const;
  DecodeInputGrads backward(const ParameterStore& params, const Cache& cache,
                            const DecodeGrads& dout, GradientBuffer& grads) const;

  const DecoderConfig& config() const { return config_; }
  const std::vector<DecoderLayerParams>& layers() const { return layers_; }

 private:
  DecoderConfig config_;
  std::vector<DecoderLayerParams> layers_;
};

}  // namespace nmt
