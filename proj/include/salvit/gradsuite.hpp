#pragma once

#include <string>
#include <vector>

namespace salvit::ep {

struct GradSuiteEntry {
  std::string name;
  double max_rel_error = 0.0;
};

/// End-to-end gradient verification across the model: masked self-attention
/// (including the position table and the saliency vector), the saliency
/// embedding -> parameter generator -> power normalization chain, a full
/// SalViT block, the descriptor, the grid and offset losses, and every
/// alignment mode. Each case runs `points` random parameter draws and
/// reports the worst central-difference discrepancy.
std::vector<GradSuiteEntry> run_gradient_suite(int points = 10, std::uint64_t seed = 99);

}  // namespace salvit::ep
