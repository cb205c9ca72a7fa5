#include "salvit/transduce.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "salvit/metrics.hpp"

namespace salvit::td {

using nc::Tensor;

void TransductiveConfig::validate() const {
  if (top_w < 1) throw std::invalid_argument("transduce: top_w must be >= 1");
  if (eta < 0) throw std::invalid_argument("transduce: eta must be >= 0");
  if (!(kappa >= 0.0 && kappa <= 1.0)) throw std::invalid_argument("transduce: kappa in [0,1]");
  if (sigma <= 0.0) throw std::invalid_argument("transduce: sigma must be positive");
}

namespace {

Tensor unit_normalized(const Tensor& v) {
  double nrm = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) nrm += v[i] * v[i];
  nrm = std::sqrt(nrm);
  if (nrm == 0.0) return v;
  Tensor out = v;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= nrm;
  return out;
}

double norm_dist(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

// Gaussian pooling on plain tensors, mirroring the graph-side skr().
Tensor pool_feature(const Tensor& tokens, int l, double px_per_cell, double x, double y,
                    double pool_sigma) {
  const int n = l * l;
  const int d = tokens.dim(1);
  const double gx = x / px_per_cell, gy = y / px_per_cell;
  std::vector<double> w(static_cast<std::size_t>(n), 0.0);
  if (pool_sigma <= 1e-12) {
    const int cx = std::clamp(static_cast<int>(std::floor(gx)), 0, l - 1);
    const int cy = std::clamp(static_cast<int>(std::floor(gy)), 0, l - 1);
    w[static_cast<std::size_t>(cy * l + cx)] = 1.0;
  } else {
    double total = 0.0;
    for (int r = 0; r < l; ++r)
      for (int c = 0; c < l; ++c) {
        const double dx = (c + 0.5) - gx, dy = (r + 0.5) - gy;
        const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * pool_sigma * pool_sigma));
        w[static_cast<std::size_t>(r * l + c)] = v;
        total += v;
      }
    for (double& v : w) v /= total;
  }
  Tensor out({1, d});
  for (int i = 0; i < n; ++i) {
    if (w[static_cast<std::size_t>(i)] == 0.0) continue;
    for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(j)] += w[static_cast<std::size_t>(i)] * tokens.at(i, j);
  }
  return out;
}

}  // namespace

std::vector<std::vector<Candidate>> harvest(const fskd::EpisodeInference& inf,
                                            const fskd::FskdModel& model, int top_w) {
  if (top_w < 1) throw std::invalid_argument("harvest: top_w must be >= 1");
  const int finest = model.head_cfg.finest_scale();
  const double l0 = static_cast<double>(model.enc_cfg.image_size);
  const double cell_px = l0 / static_cast<double>(finest);
  const int n_types = static_cast<int>(inf.prototypes.size());

  std::vector<std::vector<Candidate>> out(static_cast<std::size_t>(n_types));
  for (std::size_t qi = 0; qi < inf.queries.size(); ++qi) {
    for (int t = 0; t < n_types; ++t) {
      const fskd::TypeInference& ti = inf.queries[qi][static_cast<std::size_t>(t)];
      const Tensor& prob = ti.finest_prob;
      // top-W cells by probability, ties to the lower index
      std::vector<int> order(prob.size());
      for (std::size_t i = 0; i < prob.size(); ++i) order[i] = static_cast<int>(i);
      std::stable_sort(order.begin(), order.end(),
                       [&](int a, int b) { return prob[static_cast<std::size_t>(a)] > prob[static_cast<std::size_t>(b)]; });
      const int w_count = std::min<int>(top_w, static_cast<int>(order.size()));
      for (int w = 0; w < w_count; ++w) {
        const int cell = order[static_cast<std::size_t>(w)];
        const int gx = cell % finest, gy = cell / finest;
        Candidate cand;
        cand.score = prob[static_cast<std::size_t>(cell)];
        cand.query = static_cast<int>(qi);
        cand.type_index = t;
        cand.rank = w;
        cand.x = cell_px * (gx + 0.5 + 0.5 * ti.finest_offset[static_cast<std::size_t>(2 * cell)]);
        cand.y = cell_px * (gy + 0.5 + 0.5 * ti.finest_offset[static_cast<std::size_t>(2 * cell + 1)]);
        cand.feature = pool_feature(inf.query_tokens[qi], model.enc_cfg.l,
                                    static_cast<double>(model.enc_cfg.patch), cand.x, cand.y,
                                    model.head_cfg.pool_sigma);
        out[static_cast<std::size_t>(t)].push_back(std::move(cand));
      }
    }
  }
  return out;
}

std::vector<Candidate> select_top_eta(std::vector<Candidate> candidates, int eta, bool* warned) {
  if (warned) *warned = false;
  if (eta >= static_cast<int>(candidates.size())) {
    if (warned && eta > static_cast<int>(candidates.size())) *warned = true;
    std::stable_sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.query != b.query) return a.query < b.query;
      return a.rank < b.rank;
    });
    return candidates;
  }
  std::stable_sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.query != b.query) return a.query < b.query;
    return a.rank < b.rank;
  });
  candidates.resize(static_cast<std::size_t>(eta));
  return candidates;
}

std::vector<double> assign_prob(const Tensor& phi, const std::vector<Tensor>& prototypes,
                                double sigma) {
  if (sigma <= 0.0) throw std::invalid_argument("assign_prob: sigma must be positive");
  if (prototypes.empty()) throw std::invalid_argument("assign_prob: no prototypes");
  std::vector<double> logits(prototypes.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < prototypes.size(); ++i) {
    logits[i] = -norm_dist(phi, prototypes[i]) / (2.0 * sigma * sigma);
    mx = std::max(mx, logits[i]);
  }
  double z = 0.0;
  for (double& v : logits) {
    v = std::exp(v - mx);
    z += v;
  }
  for (double& v : logits) v /= z;
  return logits;
}

std::vector<Tensor> refine(const std::vector<Tensor>& prototypes,
                           const std::vector<std::vector<Tensor>>& skrs,
                           const std::vector<std::vector<Candidate>>& selected,
                           const TransductiveConfig& cfg) {
  cfg.validate();
  if (prototypes.size() != skrs.size() || prototypes.size() != selected.size())
    throw std::invalid_argument("refine: per-type list sizes disagree");

  // assignment probabilities use the pre-refinement prototypes, optionally
  // on unit-normalized copies so sigma has a consistent scale
  std::vector<Tensor> protos_cmp;
  protos_cmp.reserve(prototypes.size());
  for (const Tensor& c : prototypes)
    protos_cmp.push_back(cfg.normalize ? unit_normalized(c) : c);

  std::vector<Tensor> out;
  out.reserve(prototypes.size());
  for (std::size_t t = 0; t < prototypes.size(); ++t) {
    if (skrs[t].empty()) throw std::invalid_argument("refine: type has no support SKRs");
    const std::size_t d = prototypes[t].size();
    if (selected[t].empty()) {
      // no pseudo labels: the refinement reduces to the support mean
      Tensor c(prototypes[t].shape());
      for (const Tensor& phi : skrs[t])
        for (std::size_t i = 0; i < d; ++i) c[i] += phi[i];
      for (std::size_t i = 0; i < d; ++i) c[i] /= static_cast<double>(skrs[t].size());
      out.push_back(std::move(c));
      continue;
    }
    Tensor num(prototypes[t].shape());
    Tensor sum_skr(prototypes[t].shape());
    for (const Tensor& phi : skrs[t])
      for (std::size_t i = 0; i < d; ++i) sum_skr[i] += phi[i];
    double denom = cfg.kappa * static_cast<double>(skrs[t].size());
    for (std::size_t i = 0; i < d; ++i) num[i] = cfg.kappa * sum_skr[i];
    for (const Candidate& cand : selected[t]) {
      const Tensor phi_cmp = cfg.normalize ? unit_normalized(cand.feature) : cand.feature;
      const double p = assign_prob(phi_cmp, protos_cmp, cfg.sigma)[t];
      denom += (1.0 - cfg.kappa) * p;
      for (std::size_t i = 0; i < d; ++i) num[i] += (1.0 - cfg.kappa) * p * cand.feature[i];
    }
    Tensor c(prototypes[t].shape());
    for (std::size_t i = 0; i < d; ++i) c[i] = num[i] / denom;
    out.push_back(std::move(c));
  }
  return out;
}

std::vector<Tensor> refine_avg_baseline(const std::vector<std::vector<Tensor>>& skrs,
                                        const std::vector<std::vector<Candidate>>& selected) {
  if (skrs.size() != selected.size())
    throw std::invalid_argument("refine_avg: per-type list sizes disagree");
  std::vector<Tensor> out;
  out.reserve(skrs.size());
  for (std::size_t t = 0; t < skrs.size(); ++t) {
    if (skrs[t].empty()) throw std::invalid_argument("refine_avg: type has no support SKRs");
    Tensor acc(skrs[t][0].shape());
    std::size_t count = 0;
    for (const Tensor& phi : skrs[t]) {
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += phi[i];
      ++count;
    }
    for (const Candidate& cand : selected[t]) {
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += cand.feature[i];
      ++count;
    }
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] /= static_cast<double>(count);
    out.push_back(std::move(acc));
  }
  return out;
}

std::vector<Tensor> refine_gt_oracle(const std::vector<Tensor>& prototypes,
                                     const std::vector<std::vector<Tensor>>& skrs,
                                     const std::vector<std::vector<Candidate>>& selected,
                                     const ep::Episode& episode,
                                     const std::vector<int>& type_ids, double pck_tau,
                                     const TransductiveConfig& cfg) {
  std::vector<std::vector<Candidate>> kept(selected.size());
  for (std::size_t t = 0; t < selected.size(); ++t) {
    const int type = type_ids[t];
    for (const Candidate& cand : selected[t]) {
      const ep::AnnotatedImage& q = episode.queries[static_cast<std::size_t>(cand.query)];
      const fskd::Keypoint& gt = q.keypoints[static_cast<std::size_t>(type)];
      if (!gt.visible) continue;
      if (ep::pck_correct(cand.x, cand.y, gt.x, gt.y, q.object_box, pck_tau))
        kept[t].push_back(cand);
    }
  }
  return refine(prototypes, skrs, kept, cfg);
}

}  // namespace salvit::td
