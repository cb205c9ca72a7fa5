#pragma once

#include <string>
#include <vector>

#include "salvit/tensor.hpp"

namespace salvit::sal {

/// Single-channel foreground-likelihood grid over an image, values in [0,1].
struct SaliencyMap {
  int width = 0;
  int height = 0;
  std::vector<double> values;  // row-major

  SaliencyMap() = default;
  SaliencyMap(int w, int h, double fill = 0.0)
      : width(w), height(h), values(static_cast<std::size_t>(w) * h, fill) {}

  double& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
  double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const { return values.size(); }
  void validate_range() const;
};

struct BinaryMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> values;

  BinaryMask() = default;
  BinaryMask(int w, int h) : width(w), height(h), values(static_cast<std::size_t>(w) * h, 0) {}
  std::uint8_t& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

BinaryMask threshold_mask(const SaliencyMap& m, double thr = 0.5);

/// Exact Euclidean distance to the nearest foreground cell (0 inside the
/// foreground, +inf when the mask is empty). `two_pass` switches from the
/// brute-force reference to the O(N) row/column scan algorithm; both are
/// exact and tested against each other.
std::vector<double> distance_transform(const BinaryMask& fg, bool two_pass = false);

/// Distance-transform diffusion followed by Gaussian blur:
///   out = blur(exp(-dist(fg)/diffusion_scale)), fg = {raw >= 0.5}.
/// blur_sigma == 0 disables the blur. Output stays in [0,1] and the
/// thresholded foreground keeps values >= 0.5 at the default scales.
SaliencyMap preprocess(const SaliencyMap& raw, double diffusion_scale, double blur_sigma,
                       bool two_pass_dt = false);

/// Mean-pool to an l x l token grid, row-major to match token order.
/// Sides not divisible by l are reflect-padded to the next multiple.
nc::Tensor downscale(const SaliencyMap& m, int l);

enum class FailureMode { kThreshold, kReverse };

/// Saliency-failure simulation: binarize at a threshold, or reverse (1 - m).
SaliencyMap simulate_failure(const SaliencyMap& m, FailureMode mode, double threshold = 0.5);

/// Intersection-over-union of two binary masks; 1 when both are empty.
double mean_iou(const BinaryMask& a, const BinaryMask& b);

/// "SAL <width> <height>" header line followed by little-endian 32-bit
/// floats, row-major.
void save_saliency(const std::string& path, const SaliencyMap& m);
SaliencyMap load_saliency(const std::string& path);

}  // namespace salvit::sal
