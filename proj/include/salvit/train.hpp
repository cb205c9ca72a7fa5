#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "salvit/config.hpp"

namespace salvit::ep {

/// One episode's training loss graph plus logging values and the tensors
/// needed for a diagnostics dump on numeric failure.
struct EpisodeLossOut {
  nc::Var total;
  double ms = 0.0;
  double reg = 0.0;
  double aln = 0.0;
  std::vector<double> thetas;      // theta-tilde per (image, block)
  std::vector<nc::Var> masks;      // saliency vectors fed to the blocks
  std::vector<nc::Var> attention;  // first attention head per encode
};

/// Builds the loss for one episode: the occluded view drives the
/// localization loss, the morphology regularizer averages over images and
/// blocks, and the alignment term compares against a clean second pass.
/// With masking off and alignment none this reduces to plain training and
/// consumes no randomness.
EpisodeLossOut episode_loss(nc::Binder& bind, const Episode& episode, const RunConfig& rc,
                            nc::Rng& mask_rng);

struct TrainResult {
  fskd::FskdModel model;
  double final_loss = 0.0;
  int steps = 0;
  std::string metrics_csv;
};

using ProgressFn = std::function<void(int step, double loss)>;

/// Episodic training. Deterministic given the config seed; aborts with a
/// diagnostics dump when the loss goes non-finite. `out_dir` may be empty
/// (no CSV logging).
TrainResult train_run(const RunConfig& rc, const Dataset& ds, const std::string& out_dir,
                      const ProgressFn& progress = nullptr);

enum class SalFailure { kNone, kThreshold, kReverse };

struct EvalOptions {
  int episodes = 200;
  EpisodeSpec spec;
  std::optional<occ::OcclusionSpec> occlusion;  // applied per query keypoint
  SalFailure failure = SalFailure::kNone;
  double failure_threshold = 0.5;
  std::string pred_csv;  // per-prediction rows when non-empty
  int threads = 1;
  double pck_tau = 0.1;
};

struct EvalResult {
  double pck = 0.0;      // mean of per-episode PCK scores
  double mean_ne = 0.0;  // mean normalized error
  int episodes = 0;
  int predictions = 0;
};

EvalResult evaluate(const fskd::FskdModel& model, const Dataset& ds, const EvalOptions& opt,
                    nc::Rng& rng);

struct TransduceResult {
  double pck_inductive = 0.0;
  double pck_avg = 0.0;
  double pck_soft = 0.0;
  double pck_gt = 0.0;
  int episodes = 0;
};

/// Inductive first pass, pseudo-label harvesting, three refinement variants
/// (unweighted average, soft assignment, ground-truth oracle) and
/// re-detection with each.
TransduceResult eval_transductive(const fskd::FskdModel& model, const Dataset& ds,
                                  const EpisodeSpec& spec, const td::TransductiveConfig& tcfg,
                                  int episodes, nc::Rng& rng, double pck_tau = 0.1,
                                  int threads = 1);

struct OverfitResult {
  double final_ms = 0.0;
  double pck = 0.0;
  int steps = 0;
};

/// Repeated optimization of a single fixed episode; stops early once the
/// localization loss and PCK targets are both met.
OverfitResult overfit_single_episode(const RunConfig& rc, const Episode& episode, int max_steps,
                                     double target_ms, const ProgressFn& progress = nullptr);

}  // namespace salvit::ep
