#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "nmt/geometry.hpp"
#include "nmt/params.hpp"

namespace nmt {

enum class LayerTag { Last, SecondLast };

// H x W x c grid of backbone features; `stride` is image pixels per cell.
struct FeatureMap {
  Tensor grid;
  double stride = 1.0;
  LayerTag tag = LayerTag::Last;

  std::size_t height() const { return grid.shape()[0]; }
  std::size_t width() const { return grid.shape()[1]; }
  std::size_t channels() const { return grid.shape()[2]; }
  void validate() const;
};

struct BackboneOutput {
  FeatureMap last;
  FeatureMap second_last;
  std::size_t width() const { return last.channels() + second_last.channels(); }
};

struct SampleDiagnostics {
  std::size_t clamped = 0;  // points that fell outside the image
};

struct BilinearTap {
  std::size_t row = 0, col = 0;
  double weight = 0.0;
};

// Taps for a pixel-space point (x, y). Cell (r, q) is centred at
// ((q + 0.5) * stride, (r + 0.5) * stride); coordinates clamp to the grid.
std::vector<BilinearTap> bilinear_taps(const FeatureMap& map, const std::array<double, 2>& point,
                                       SampleDiagnostics* diag = nullptr);
std::vector<double> bilinear_sample(const FeatureMap& map, const std::array<double, 2>& point,
                                    SampleDiagnostics* diag = nullptr);

// m x (c_last + c_second): both maps sampled at each keypoint, last layer first.
Tensor extract_keypoint_features(const BackboneOutput& out, const KeypointSet& keypoints,
                                 std::size_t expected_width, SampleDiagnostics* diag = nullptr);
// Scatters feature gradients back onto the two grids.
void extract_keypoint_features_backward(const BackboneOutput& out, const KeypointSet& keypoints,
                                        const Tensor& dfeatures, BackboneOutput& dout);

// Spatial means of both maps, concatenated.
std::vector<double> pooled_features(const BackboneOutput& out);

// Learned affine projection of the pooled backbone features to d_model, normalized.
class GlobalToken {
 public:
  struct Cache {
    std::vector<double> pooled;
    RowNormalized norm;
  };

  GlobalToken() = default;
  GlobalToken(ParameterStore& store, const std::string& name, std::size_t input_dim,
              std::size_t d_model, std::mt19937_64& rng);

  std::vector<double> forward(const ParameterStore& params, const BackboneOutput& out,
                              Cache* cache = nullptr) const;
  // Accumulates the projection and bias gradients and spreads the pooled gradient
  // uniformly over both grids of `dout`.
  void backward(const ParameterStore& params, const Cache& cache, std::span<const double> dglobal,
                GradientBuffer& grads, BackboneOutput& dout) const;

  ParamId projection() const { return proj_; }
  ParamId bias() const { return bias_; }

 private:
  ParamId proj_;
  ParamId bias_;
  std::size_t input_dim_ = 0;
};

// What a backbone receives for one image.
struct ImageInput {
  KeypointSet keypoints;
  std::optional<Tensor> latents;  // m x latent_dim, synthetic backbone only
  std::filesystem::path feature_file;  // precomputed backbone output
  std::uint64_t render_seed = 0;
  double render_noise = 0.0;
};

// The only pipeline stage that sees image content.
class Backbone {
 public:
  virtual ~Backbone() = default;
  virtual BackboneOutput run(const ParameterStore& params, const ImageInput& image) const = 0;
  // Receives d(loss)/d(maps). Backbones without parameters ignore it.
  virtual void backward(const ParameterStore& /*params*/, const ImageInput& /*image*/,
                        const BackboneOutput& /*dmaps*/, GradientBuffer& /*grads*/) const {}
  virtual std::size_t output_width() const = 0;
};

struct SyntheticBackboneConfig {
  std::size_t latent_dim = 16;
  std::size_t c_last = 16;
  std::size_t c_second = 16;
  std::size_t grid = 32;
  double stride = 8.0;
  double splat_sigma = 4.0;  // pixels; the second-last map uses twice this
  double lr_scale = 0.03;
};

// Gaussian splat of each latent at its keypoint plus seeded per-cell noise.
// Returns an H x W x latent_dim grid.
Tensor render_latents(const Tensor& latents, const KeypointSet& keypoints, std::size_t grid,
                      double stride, double sigma, double noise_level, std::uint64_t seed);

// Stand-in for a pretrained image backbone: renders latents into two grids
// (narrow and wide splats) and maps them through learned 1x1 projections.
class SyntheticBackbone final : public Backbone {
 public:
  SyntheticBackbone(ParameterStore& store, const std::string& name,
                    const SyntheticBackboneConfig& config, std::mt19937_64& rng);

  BackboneOutput run(const ParameterStore& params, const ImageInput& image) const override;
  void backward(const ParameterStore& params, const ImageInput& image, const BackboneOutput& dmaps,
                GradientBuffer& grads) const override;
  std::size_t output_width() const override { return config_.c_last + config_.c_second; }
  const SyntheticBackboneConfig& config() const { return config_; }

 private:
  std::array<Tensor, 2> render(const ImageInput& image) const;

  SyntheticBackboneConfig config_;
  ParamId proj_last_;
  ParamId proj_second_;
};

// Little-endian "NMTF" file: magic, version u32, H, W, c_last, c_second (u32),
// stride f32, then the row-major f32 grids, last layer first.
inline constexpr std::uint32_t kFeatureFileVersion = 1;
void write_feature_file(const std::filesystem::path& path, const BackboneOutput& out);
BackboneOutput read_feature_file(const std::filesystem::path& path);

// Adapter for precomputed backbone features on disk.
class FeatureFileBackbone final : public Backbone {
 public:
  explicit FeatureFileBackbone(std::size_t width) : width_(width) {}
  BackboneOutput run(const ParameterStore& params, const ImageInput& image) const override;
  std::size_t output_width() const override { return width_; }

 private:
  std::size_t width_;
};

}  // namespace nmt
