#pragma once

#include <string>
#include <vector>

#include "salvit/data.hpp"
#include "salvit/params.hpp"
#include "salvit/rng.hpp"

namespace salvit::occ {

enum class BoxType { kGray, kAvgPixel, kBackgroundCrop };

BoxType box_type_from_string(const std::string& s);

/// Test-time occlusion: a box of random size centered at a query keypoint.
struct OcclusionSpec {
  BoxType type = BoxType::kGray;
  double area_lo = 0.01, area_hi = 0.04;  // ratio to the object box area
  double aspect_lo = 0.7, aspect_hi = 1.4;
  double prob = 0.0;  // per-keypoint occlusion probability
  double gray = 0.5;

  void validate() const;
};

/// Occludes the image around `kp` in place and re-preprocesses the saliency.
/// Gray and average-pixel boxes zero the saliency inside the box; the
/// background crop transplants both pixels and saliency from a window of the
/// largest background-connected region (falling back to gray when none
/// fits, reported through *fell_back).
void occlude_test(ep::AnnotatedImage& img, const fskd::Keypoint& kp, const OcclusionSpec& spec,
                  nc::Rng& rng, bool* fell_back = nullptr);

/// Training-time foreground masking flags. Between min_patches and
/// max_patches foreground token cells are masked per image.
struct MaskStrategy {
  bool rgb = false;
  bool sal = false;
  bool feat = false;
  int min_patches = 2;
  int max_patches = 12;
  double gray = 0.5;

  bool any() const { return rgb || sal || feat; }
  void validate() const;
};

/// One occluded view of an input: masked pixels/saliency plus the masked
/// cell list (applied to backbone features when the feat flag is set).
struct MaskedView {
  nc::Tensor rgb;
  sal::SaliencyMap saliency_pre;
  std::vector<int> cells;
};

MaskedView mask_train(const ep::AnnotatedImage& img, const MaskStrategy& strategy, int l,
                      int patch, nc::Rng& rng);

enum class AlignMode { kNone, kProbKl, kFeatL1, kFeatL2, kFeatMmd, kRecon, kNonOcclLoss };

AlignMode align_mode_from_string(const std::string& s);
std::string to_string(AlignMode m);

/// Both views' artifacts; unused members may stay invalid for a given mode.
struct AlignArtifacts {
  std::vector<std::pair<nc::Var, nc::Var>> prob_pairs;  // clean, occluded; [1,S*S]
  std::vector<std::pair<nc::Var, nc::Var>> feat_pairs;  // E(I), E(I_occ); [n,d]
  nc::Var recon_pred;                                   // [masked, 3*patch*patch]
  nc::Var recon_target;
  nc::Var clean_ms;  // localization loss of the clean view
  bool detach_clean = false;
  /// MMD kernel bandwidth; <= 0 selects the median pairwise distance of the
  /// current values (held constant, not differentiated through).
  double mmd_bandwidth = 0.0;
};

/// Alignment loss between the clean and occluded views. KL is
/// KL[P || P_occ] with probabilities clamped at 1e-12 inside the logs,
/// averaged over (query, type, scale); feature distances average over
/// images; MMD uses a Gaussian kernel with the median-distance bandwidth.
nc::Var align_loss(AlignMode mode, const AlignArtifacts& art);

/// Linear pixel-reconstruction head used by the recon alignment.
void init_recon_params(nc::ParamStore& ps, const std::string& prefix, int enc_dim, int patch,
                       nc::Rng& rng);

/// lambda1 * L_ms_occ + lambda2 * L_reg + lambda3 * L_aln. Invalid vars
/// contribute nothing.
nc::Var total_loss(nc::Var ms_occ, nc::Var reg, nc::Var aln, double lambda1, double lambda2,
                   double lambda3);

}  // namespace salvit::occ
