#pragma once

#include <filesystem>
#include <memory>
#include <vector>

#include "nmt/train.hpp"

namespace nmt {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct LoadedCheckpoint {
  TrainConfig config;
  std::unique_ptr<MatchingModel> model;
  Adam optimizer;
  std::size_t epoch = 0;
  std::vector<EpochMetrics> history;
};

// Arrays are stored as f32; values that are already f32-representable (see
// ParameterStore::round_to_f32) survive a round trip exactly.
void save_checkpoint(const std::filesystem::path& path, const MatchingModel& model,
                     const Adam* optimizer, std::size_t epoch,
                     const std::vector<EpochMetrics>& history);

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace nmt
