#pragma once

#include <map>
#include <string>
#include <vector>

#include "salvit/data.hpp"
#include "salvit/encoder.hpp"
#include "salvit/keypoints.hpp"

namespace salvit::fskd {

struct HeadConfig {
  std::vector<int> scales{4, 6, 8};  // grid sides, coarse to fine
  int d_v = 4;                       // latent covariance channels
  int d_desc = 32;                   // descriptor channels
  int desc_min_side = 2;             // stride-2 convs stop at this side
  double omega_eps = 1e-6;           // precision stabilizer
  double pool_sigma = 1.0;           // SKR Gaussian bandwidth, grid cells

  void validate() const;
  int finest_scale() const;
  int descriptor_side(int l) const;  // final grid side after reduction
  int psi_len(int l) const { return d_desc * descriptor_side(l) * descriptor_side(l); }
};

/// Gaussian pooling of a token grid at a keypoint. Weights are a normalized
/// Gaussian over cell centers, in grid coordinates kp/px_per_cell; the
/// sigma -> 0 limit picks the containing cell. The keypoint must be visible.
nc::Var skr(nc::Var tokens, int l, double px_per_cell, const Keypoint& kp, double pool_sigma);

/// Mean of the visible-shot representations (ProtoNet-style centroid).
nc::Var prototype_mean(const std::vector<nc::Var>& skrs);

/// Channel-wise modulation of the query map by a prototype: F(p) = E(p) o c.
nc::Var modulate(nc::Var tokens, nc::Var proto);

void init_head_params(nc::ParamStore& ps, const std::string& prefix, const HeadConfig& cfg,
                      int enc_dim, int l, nc::Rng& rng);

/// Descriptor net: a 1x1 channel-reducing convolution, then 3x3 stride-2
/// convolutions down to a small grid, flattened to [1, psi_len].
nc::Var descriptor(nc::Var fatt, int l, nc::Binder& params, const std::string& prefix,
                   const HeadConfig& cfg);

/// One localization scale: a grid probability map (softmax over S^2 cells),
/// tanh-squashed offsets in (-1,1), and the latent covariance field.
struct ScaleOutput {
  int scale = 0;
  nc::Var prob;    // [1, S*S]
  nc::Var offset;  // [1, 2*S*S], (dx, dy) pairs per cell
  nc::Var latent;  // [1, 2*d_v*S*S]
};

std::vector<ScaleOutput> localize(nc::Var psi, nc::Binder& params, const std::string& prefix,
                                  const HeadConfig& cfg);

/// Precision matrix at one grid cell: omega = Q Q^T / d_v (+ eps I), with Q
/// the [2, d_v] reshape of the cell's latent vector. PSD by construction.
nc::Var precision_at(const ScaleOutput& out, int cell, int d_v, double eps);

struct TargetEncoding {
  int gx = 0, gy = 0;     // grid cell
  double ox = 0, oy = 0;  // offsets in [-1, 1)
  int cell(int scale) const { return gy * scale + gx; }
};

/// Inverse of the decode arithmetic for a single scale.
TargetEncoding encode_target(double x, double y, int scale, double l0);

struct LossPair {
  nc::Var cls;
  nc::Var os;
};

/// Grid cross-entropy plus the Mahalanobis offset loss, teacher-forced at
/// the ground-truth cell:
///   cls = -log P(g_hat)
///   os  = (1/2) [ (x - x_hat)^T omega (x - x_hat) - log det omega ]
/// with x decoded from the predicted offset at the ground-truth cell.
LossPair losses_at_scale(const ScaleOutput& out, const Keypoint& gt, double l0,
                         const HeadConfig& cfg);

/// Mean over scales of (cls + os).
nc::Var multi_scale_loss(const std::vector<ScaleOutput>& outs, const Keypoint& gt, double l0,
                         const HeadConfig& cfg);

/// Multi-scale decode: the argmax cell per scale (ties to the lowest
/// row-major index), offsets applied, positions averaged over scales and the
/// covariance accumulated as (1/4Ns) sum (l0/S)^2 inv(omega). A fully
/// degenerate precision yields the max-uncertainty sentinel covariance.
KeypointPrediction decode(const std::vector<ScaleOutput>& outs, double l0,
                          const HeadConfig& cfg);

inline constexpr double kMaxUncertainty = 1e12;

/// Bundled model state: encoder + localization head parameters.
struct FskdModel {
  enc::EncoderConfig enc_cfg;
  HeadConfig head_cfg;
  nc::ParamStore params;

  static constexpr const char* kEncPrefix = "enc";
  static constexpr const char* kHeadPrefix = "head";
};

FskdModel make_model(const enc::EncoderConfig& ecfg, const HeadConfig& hcfg, nc::Rng& rng);

void save_model(const std::string& path, const FskdModel& model,
                const std::map<std::string, std::string>& extra_meta = {});
FskdModel load_model(const std::string& path);

/// Everything a detection pass produces, kept for transductive reuse.
struct TypeInference {
  KeypointPrediction prediction;
  nc::Tensor finest_prob;    // [S*S] values at the finest scale
  nc::Tensor finest_offset;  // [2*S*S]
};

struct EpisodeInference {
  std::vector<nc::Tensor> prototypes;               // per type, [1, d]
  std::vector<std::vector<nc::Tensor>> skrs;        // per type, per visible shot
  std::vector<nc::Tensor> query_tokens;             // per query, [n, d]
  std::vector<std::vector<TypeInference>> queries;  // [query][type]
  std::vector<int> type_ids;
};

/// Inductive inference over one episode. Deterministic; one prediction per
/// (query, prototype). With `override_prototypes` the support pass is reused
/// from `base` and only the query heads run (transductive second pass).
EpisodeInference detect_episode(const ep::Episode& episode, const FskdModel& model);
EpisodeInference redetect_with_prototypes(const ep::Episode& episode, const FskdModel& model,
                                          const std::vector<nc::Tensor>& prototypes);

}  // namespace salvit::fskd
