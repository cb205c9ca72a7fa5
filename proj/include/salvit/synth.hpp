#pragma once

#include <string>
#include <vector>

#include "salvit/data.hpp"
#include "salvit/rng.hpp"

namespace salvit::ep {

/// Keypoint schema of the synthetic quadrupeds. Base and novel sets are
/// disjoint; auxiliary keypoints are interpolated on six limb paths whose
/// endpoints are base keypoints.
struct KeypointSchema {
  static constexpr int kNose = 0;
  static constexpr int kEarL = 1;
  static constexpr int kEarR = 2;
  static constexpr int kEyeL = 3;
  static constexpr int kEyeR = 4;
  static constexpr int kLeg0 = 5;    // 5..8: hip points
  static constexpr int kKnee0 = 9;   // 9..12
  static constexpr int kPaw0 = 13;   // 13..16
  static constexpr int kCount = 17;

  static const std::vector<int>& base_ids();
  static const std::vector<int>& novel_ids();
  /// Six default limb paths (hip->paw x4, ear->nose x2), base endpoints.
  static const std::vector<std::pair<int, int>>& aux_paths();
  static std::string name(int id);
};

struct SynthConfig {
  int species = 5;
  int per_species = 200;
  int image_size = 96;
  std::uint64_t seed = 1;
  int distractors_lo = 5;
  int distractors_hi = 9;
  double pixel_noise = 0.02;
};

struct Dataset {
  SynthConfig cfg;
  double sal_diffusion = 8.0;
  double sal_blur = 2.0;
  double sal_diffusion_hi = 0.0;  // > diffusion: per-image jittered scale
  std::vector<AnnotatedImage> images;
  std::vector<std::vector<int>> by_species;  // image indices per species
};

/// Deterministic synthetic dataset: part-based quadrupeds over cluttered
/// backgrounds, exact part-union saliency, tight object boxes. The stored
/// saliency is the exact part union; `sal_diffusion_hi > sal_diffusion`
/// jitters the preprocessing scale per image (a stand-in for detectors of
/// varying tightness), deterministically from (dataset seed, image id).
Dataset gen_dataset(const SynthConfig& cfg, double sal_diffusion = 8.0, double sal_blur = 2.0,
                    double sal_diffusion_hi = 0.0);

void save_dataset(const std::string& dir, const Dataset& ds);
Dataset load_dataset(const std::string& dir, double sal_diffusion = 8.0, double sal_blur = 2.0,
                     double sal_diffusion_hi = 0.0);

/// The per-image preprocessing scale used when jitter is enabled.
double diffusion_scale_for(std::uint64_t dataset_seed, int image_id, double lo, double hi);

/// Linear interpolation x = (1-t) u1 + t u2 on each path at every node;
/// paths with an invisible endpoint are skipped. Types are numbered from
/// KeypointSchema::kCount upward in (path, node) order.
std::vector<fskd::Keypoint> aux_keypoints(const std::vector<fskd::Keypoint>& kps,
                                          const std::vector<std::pair<int, int>>& paths,
                                          const std::vector<double>& nodes);

struct EpisodeSpec {
  int shots = 1;
  int queries = 1;
  bool novel_types = false;     // novel vs base keypoint set
  bool unseen_species = false;  // test split vs training split
  bool use_aux = false;         // append auxiliary keypoints (training)
  std::vector<double> aux_nodes{0.25, 0.5, 0.75};
  int unseen_species_id = -1;  // defaults to the last species

  void validate(const Dataset& ds) const;
};

Episode sample_episode(const Dataset& ds, const EpisodeSpec& spec, nc::Rng& rng);

}  // namespace salvit::ep
