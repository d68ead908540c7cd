#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nmt/config.hpp"
#include "nmt/features.hpp"

namespace nmt {

// One image pair with ground truth: keypoint i of image 1 matches keypoint
// truth[i] of image 2.
struct PairRecord {
  ImageInput image1;
  ImageInput image2;
  std::vector<std::size_t> truth;
  int class_id = 0;

  std::size_t size() const { return truth.size(); }
  void validate() const;
};

// Per-class identity prototypes (keypoint_types x signal_dims), fixed by the
// spec's bundle seed.
Tensor latent_bundle(const SyntheticPairSpec& spec, int class_id);

PairRecord generate_pair(const SyntheticPairSpec& spec, std::uint64_t seed);
// Classes cycle 0, 1, ..., num_classes - 1 unless spec.class_id is fixed.
std::vector<PairRecord> generate_pairs(const SyntheticPairSpec& spec, std::size_t count,
                                       std::uint64_t seed);

// Line-delimited JSON records. Feature-file paths are resolved relative to the
// dataset file.
void write_pairs(const std::filesystem::path& path, const std::vector<PairRecord>& pairs);
std::vector<PairRecord> read_pairs(const std::filesystem::path& path);
PairRecord parse_pair_line(const std::string& line, const std::filesystem::path& base_dir = {});
std::string pair_to_json_line(const PairRecord& pair);

}  // namespace nmt
