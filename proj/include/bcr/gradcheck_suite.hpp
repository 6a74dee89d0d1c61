#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bcr/diffcore.hpp"

namespace bcr {

struct GradSuiteEntry {
  std::string name;
  ad::GradCheckReport report;
};

// Finite-difference checks over every primitive plus the fast and slow losses,
// `trials` random instances each.
std::vector<GradSuiteEntry> run_gradcheck_suite(std::size_t trials, std::uint64_t seed,
                                                const ad::GradCheckOptions& opts = {});

// End-to-end slow-stage Cox loss over a random small cohort (bags n <= 8,
// d <= 6, k <= 4); gradients w.r.t. beta, V and w.
ad::GradCheckReport slow_stage_gradcheck(std::uint64_t seed, const ad::GradCheckOptions& opts = {});

}  // namespace bcr
