#pragma once

#include <array>

namespace salvit::fskd {

/// 2-D keypoint in padded-image pixel coordinates.
struct Keypoint {
  double x = 0.0;
  double y = 0.0;
  bool visible = true;
  int type = -1;  // keypoint-type id within the dataset schema
};

/// Location plus 2x2 covariance (row-major {xx, xy, yx, yy}) and the grid
/// probability score used for candidate selection.
struct KeypointPrediction {
  double x = 0.0;
  double y = 0.0;
  std::array<double, 4> cov{0.0, 0.0, 0.0, 0.0};
  double score = 0.0;
};

}  // namespace salvit::fskd
