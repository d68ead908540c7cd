#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nmt/params.hpp"

namespace nmt {

struct GradSuiteResult {
  std::string module;
  std::size_t instance = 0;
  GradCheckReport report;
};

// spline-gnn, norm-transformer, losses, feature-extraction, model
const std::vector<std::string>& gradcheck_modules();

// Builds `instances` random small problems for `module` and finite-difference
// checks every trainable parameter. Throws ConfigError for an unknown module.
std::vector<GradSuiteResult> run_gradcheck(const std::string& module, std::size_t instances,
                                           std::uint64_t seed, const GradCheckOptions& options = {});

}  // namespace nmt
