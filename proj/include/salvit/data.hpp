#pragma once

#include <array>
#include <vector>

#include "salvit/keypoints.hpp"
#include "salvit/saliency.hpp"
#include "salvit/tensor.hpp"

namespace salvit::ep {

/// Axis-aligned box in pixels, {x0, y0, x1, y1}, half-open.
struct Box {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;
  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
};

/// One rendered image with its annotations. `rgb` is [3,H,W] in [0,1];
/// `saliency` is the stored prior and `saliency_pre` its preprocessed
/// (diffused + blurred) form consumed by the encoder.
struct AnnotatedImage {
  nc::Tensor rgb;
  sal::SaliencyMap saliency;
  sal::SaliencyMap saliency_pre;
  std::vector<fskd::Keypoint> keypoints;  // indexed by type id
  Box object_box;
  int species = -1;
  int image_id = -1;
  // preprocessing actually applied to saliency_pre; kept so re-preprocessing
  // after occlusion or failure simulation matches the original pipeline
  double sal_diffusion = 8.0;
  double sal_blur = 2.0;
};

/// Support/query task instance; the unit of meta-training and evaluation.
/// `type_ids` lists the keypoint types active in this episode (all-way).
struct Episode {
  std::vector<AnnotatedImage> support;
  std::vector<AnnotatedImage> queries;
  std::vector<int> type_ids;
  int species = -1;
  std::uint64_t id = 0;
};

}  // namespace salvit::ep
