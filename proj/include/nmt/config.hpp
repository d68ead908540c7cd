#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "nmt/losses.hpp"

namespace nmt {

// One `key = value` line of a config file.
struct ConfigEntry {
  std::string key;
  std::string value;
  std::size_t line = 0;
};

// Plain-text `key = value` lines; `#` starts a comment. Throws ParseError with
// the offending line number.
std::vector<ConfigEntry> parse_key_values(const std::string& text, const std::string& source);
std::vector<ConfigEntry> read_key_value_file(const std::filesystem::path& path);

// Synthetic correspondence task: class-conditioned keypoint latents, a random
// similarity warp for image 2, and a shuffled image-2 order.
struct SyntheticPairSpec {
  std::size_t m_min = 5;
  std::size_t m_max = 10;
  std::size_t num_classes = 10;
  std::size_t keypoint_types = 10;  // distinct keypoint identities per class
  double image_size = 256.0;
  double rotation_deg = 30.0;
  double scale_min = 0.8;
  double scale_max = 1.25;
  double translation = 16.0;  // pixels, uniform in [-t, t] per axis
  double jitter = 1.0;        // pixels, Gaussian sigma
  std::size_t latent_dim = 16;
  std::size_t signal_dims = 6;
  double descriptor_noise = 0.1;  // norm of per-instance noise on the identity part
  double nuisance = 3.0;          // norm of per-instance noise on the remaining dims
  double render_noise = 0.02;     // per-cell backbone noise
  bool shuffle = true;
  std::uint64_t bundle_seed = 7;  // fixes the class latent bundles
  int class_id = -1;              // -1: cycle through classes

  void validate() const;
  // Applies one entry; returns false when the key is not a spec key.
  bool apply(const std::string& key, const std::string& value);
  std::vector<std::pair<std::string, std::string>> entries() const;
};

struct TrainConfig {
  // model
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t decoder_layers = 2;
  std::size_t gnn_input_dim = 32;
  std::size_t kernel_size = 5;
  std::size_t mlp_mult = 4;
  // synthetic backbone
  std::string backbone = "synthetic";  // synthetic | file
  std::size_t backbone_grid = 32;
  double backbone_stride = 8.0;
  double splat_sigma = 4.0;
  // loss
  double layer_loss_p = 0.3;
  InfoNceMode infonce_mode = InfoNceMode::Conventional;
  double tau_init = 0.07;
  bool use_infonce = true;
  bool use_hyperspherical = true;
  bool use_layer_hyperspherical = true;
  // optimization
  std::size_t batch_size = 8;
  std::size_t epochs = 6;
  double base_lr = 5e-4;
  double backbone_lr_factor = 0.03;
  std::vector<std::size_t> lr_decay_epochs{2, 5};
  double lr_decay_factor = 0.1;
  // inference
  double sinkhorn_temperature = 0.1;
  std::size_t sinkhorn_iters = 20;
  // run
  std::uint64_t seed = 1;
  std::size_t threads = 0;  // 0: hardware concurrency
  // data: explicit files, or synthetic generation when empty
  std::filesystem::path train_data;
  std::filesystem::path val_data;
  std::size_t train_pairs = 2000;
  std::size_t val_pairs_per_class = 100;
  SyntheticPairSpec data;

  static TrainConfig desk();
  static TrainConfig paper();

  void validate() const;
  LossConfig loss_config() const;

  // `preset = desk|paper` is applied first; unknown keys are errors.
  static TrainConfig from_entries(const std::vector<ConfigEntry>& entries,
                                  const std::filesystem::path& base_dir = {});
  static TrainConfig from_file(const std::filesystem::path& path);
  std::string to_text() const;
};

SyntheticPairSpec spec_from_entries(const std::vector<ConfigEntry>& entries,
                                    std::size_t* count = nullptr);

}  // namespace nmt
