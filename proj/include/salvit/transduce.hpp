#pragma once

#include <vector>

#include "salvit/fskd.hpp"

namespace salvit::td {

/// Pseudo-labeled query keypoint: the feature pooled at a predicted
/// location, its grid probability score, and its provenance.
struct Candidate {
  nc::Tensor feature;  // [1, d]
  double score = 0.0;  // p in [0,1]
  int query = -1;
  int type_index = -1;  // index into the episode's active type list
  int rank = -1;        // position within the query's top-W list
  double x = 0.0, y = 0.0;
};

struct TransductiveConfig {
  int top_w = 2;          // grids retrieved per query per type
  int eta = 20;           // candidates kept per type
  double kappa = 0.8;     // support weight in the refinement
  double sigma = 0.05;    // assignment bandwidth
  bool normalize = true;  // length-normalize features for the assignment

  void validate() const;
};

/// Top-W grid cells of the finest-scale probability map per (query, type),
/// decoded to positions and pooled into features on the query encoding.
std::vector<std::vector<Candidate>> harvest(const fskd::EpisodeInference& inf,
                                            const fskd::FskdModel& model, int top_w);

/// The eta highest-score candidates; ties break by (query, rank) ascending.
/// Asking for more than exist keeps everything and sets *warned.
std::vector<Candidate> select_top_eta(std::vector<Candidate> candidates, int eta,
                                      bool* warned = nullptr);

/// Soft-assignment probabilities over prototypes:
///   p_n = exp(-|phi - c_n| / (2 sigma^2)) / sum_i exp(-|phi - c_i| / (2 sigma^2)).
/// The exponent uses the norm (not its square).
std::vector<double> assign_prob(const nc::Tensor& phi, const std::vector<nc::Tensor>& prototypes,
                                double sigma);

/// Soft-assignment prototype refinement:
///   c* = [kappa sum(SKR) + (1-kappa) sum p * phi] / [kappa |S| + (1-kappa) sum p]
/// with p computed against the pre-refinement prototypes. kappa = 1 returns
/// the inductive prototypes bitwise.
std::vector<nc::Tensor> refine(const std::vector<nc::Tensor>& prototypes,
                               const std::vector<std::vector<nc::Tensor>>& skrs,
                               const std::vector<std::vector<Candidate>>& selected,
                               const TransductiveConfig& cfg);

/// Unweighted mean of SKRs and selected candidates per type.
std::vector<nc::Tensor> refine_avg_baseline(const std::vector<std::vector<nc::Tensor>>& skrs,
                                            const std::vector<std::vector<Candidate>>& selected);

/// Upper-bound refinement: drops candidates whose predicted location is not
/// PCK-correct against the query ground truth, then applies refine().
std::vector<nc::Tensor> refine_gt_oracle(const std::vector<nc::Tensor>& prototypes,
                                         const std::vector<std::vector<nc::Tensor>>& skrs,
                                         const std::vector<std::vector<Candidate>>& selected,
                                         const ep::Episode& episode,
                                         const std::vector<int>& type_ids, double pck_tau,
                                         const TransductiveConfig& cfg);

}  // namespace salvit::td
