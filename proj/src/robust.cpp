#include "salvit/robust.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <stdexcept>

#include "salvit/graph.hpp"
#include "salvit/saliency.hpp"

namespace salvit::occ {

using nc::Tensor;
using nc::Var;

BoxType box_type_from_string(const std::string& s) {
  if (s == "gray_box") return BoxType::kGray;
  if (s == "avg_pixel_box") return BoxType::kAvgPixel;
  if (s == "background_crop") return BoxType::kBackgroundCrop;
  throw std::invalid_argument("unknown occlusion type: " + s);
}

void OcclusionSpec::validate() const {
  if (!(area_lo > 0.0 && area_lo <= area_hi)) throw std::invalid_argument("occlusion: bad area range");
  if (!(aspect_lo > 0.0 && aspect_lo <= aspect_hi))
    throw std::invalid_argument("occlusion: bad aspect range");
  if (!(prob >= 0.0 && prob <= 1.0)) throw std::invalid_argument("occlusion: bad probability");
}

void MaskStrategy::validate() const {
  if (min_patches < 0 || max_patches < min_patches)
    throw std::invalid_argument("mask strategy: bad patch count range");
}

AlignMode align_mode_from_string(const std::string& s) {
  if (s == "none") return AlignMode::kNone;
  if (s == "prob_kl") return AlignMode::kProbKl;
  if (s == "feat_l1") return AlignMode::kFeatL1;
  if (s == "feat_l2") return AlignMode::kFeatL2;
  if (s == "feat_mmd") return AlignMode::kFeatMmd;
  if (s == "recon") return AlignMode::kRecon;
  if (s == "non_occl_loss") return AlignMode::kNonOcclLoss;
  throw std::invalid_argument("unknown align mode: " + s);
}

std::string to_string(AlignMode m) {
  switch (m) {
    case AlignMode::kNone: return "none";
    case AlignMode::kProbKl: return "prob_kl";
    case AlignMode::kFeatL1: return "feat_l1";
    case AlignMode::kFeatL2: return "feat_l2";
    case AlignMode::kFeatMmd: return "feat_mmd";
    case AlignMode::kRecon: return "recon";
    case AlignMode::kNonOcclLoss: return "non_occl_loss";
  }
  return "?";
}

namespace {

struct Window {
  int x0, y0, w, h;
};

// Largest background (saliency < 0.5) connected component, 4-connectivity.
// Returns component labels and the label of the largest one (-1 if none).
int largest_background_component(const sal::SaliencyMap& salm, std::vector<int>& labels) {
  const int w = salm.width, h = salm.height;
  labels.assign(static_cast<std::size_t>(w) * h, -1);
  int next = 0, best = -1;
  std::size_t best_size = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (salm.at(y, x) >= 0.5 || labels[static_cast<std::size_t>(y) * w + x] >= 0) continue;
      std::size_t size = 0;
      std::queue<std::pair<int, int>> bfs;
      bfs.emplace(y, x);
      labels[static_cast<std::size_t>(y) * w + x] = next;
      while (!bfs.empty()) {
        auto [cy, cx] = bfs.front();
        bfs.pop();
        ++size;
        const int dy[4] = {1, -1, 0, 0}, dx[4] = {0, 0, 1, -1};
        for (int k = 0; k < 4; ++k) {
          const int ny = cy + dy[k], nx = cx + dx[k];
          if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
          if (salm.at(ny, nx) >= 0.5) continue;
          if (labels[static_cast<std::size_t>(ny) * w + nx] >= 0) continue;
          labels[static_cast<std::size_t>(ny) * w + nx] = next;
          bfs.emplace(ny, nx);
        }
      }
      if (size > best_size) {
        best_size = size;
        best = next;
      }
      ++next;
    }
  return best;
}

bool window_in_component(const std::vector<int>& labels, int img_w, const Window& win, int label) {
  for (int y = win.y0; y < win.y0 + win.h; ++y)
    for (int x = win.x0; x < win.x0 + win.w; ++x)
      if (labels[static_cast<std::size_t>(y) * img_w + x] != label) return false;
  return true;
}

}  // namespace

void occlude_test(ep::AnnotatedImage& img, const fskd::Keypoint& kp, const OcclusionSpec& spec,
                  nc::Rng& rng, bool* fell_back) {
  spec.validate();
  if (fell_back) *fell_back = false;
  if (!kp.visible) throw std::invalid_argument("occlude_test: keypoint not visible");
  const int w = img.saliency.width, h = img.saliency.height;

  const double box_area = img.object_box.width() * img.object_box.height();
  const double area = rng.uniform(spec.area_lo, spec.area_hi) * box_area;
  const double aspect = rng.uniform(spec.aspect_lo, spec.aspect_hi);
  int bw = std::max(1, static_cast<int>(std::lround(std::sqrt(area * aspect))));
  int bh = std::max(1, static_cast<int>(std::lround(area / std::max(1.0, std::sqrt(area * aspect)))));
  bw = std::min(bw, w);
  bh = std::min(bh, h);
  const int x0 = std::clamp(static_cast<int>(std::lround(kp.x)) - bw / 2, 0, w - bw);
  const int y0 = std::clamp(static_cast<int>(std::lround(kp.y)) - bh / 2, 0, h - bh);

  auto fill_rgb = [&](int y, int x, double r, double g, double b) {
    const std::size_t plane = static_cast<std::size_t>(w) * h;
    const std::size_t at = static_cast<std::size_t>(y) * w + x;
    img.rgb[at] = r;
    img.rgb[plane + at] = g;
    img.rgb[2 * plane + at] = b;
  };

  BoxType type = spec.type;
  Window source{0, 0, bw, bh};
  if (type == BoxType::kBackgroundCrop) {
    std::vector<int> labels;
    const int label = largest_background_component(img.saliency, labels);
    bool found = false;
    if (label >= 0) {
      for (int attempt = 0; attempt < 64 && !found; ++attempt) {
        source.x0 = rng.uniform_int(0, w - bw);
        source.y0 = rng.uniform_int(0, h - bh);
        found = window_in_component(labels, w, source, label);
      }
    }
    if (!found) {
      type = BoxType::kGray;  // no usable background region
      if (fell_back) *fell_back = true;
    }
  }

  double avg[3] = {0, 0, 0};
  if (type == BoxType::kAvgPixel) {
    const std::size_t plane = static_cast<std::size_t>(w) * h;
    for (std::size_t i = 0; i < plane; ++i) {
      avg[0] += img.rgb[i];
      avg[1] += img.rgb[plane + i];
      avg[2] += img.rgb[2 * plane + i];
    }
    for (double& c : avg) c /= static_cast<double>(plane);
  }

  const std::size_t plane = static_cast<std::size_t>(w) * h;
  for (int y = y0; y < y0 + bh; ++y)
    for (int x = x0; x < x0 + bw; ++x) {
      switch (type) {
        case BoxType::kGray:
          fill_rgb(y, x, spec.gray, spec.gray, spec.gray);
          img.saliency.at(y, x) = 0.0;
          break;
        case BoxType::kAvgPixel:
          fill_rgb(y, x, avg[0], avg[1], avg[2]);
          img.saliency.at(y, x) = 0.0;
          break;
        case BoxType::kBackgroundCrop: {
          const int sy = source.y0 + (y - y0), sx = source.x0 + (x - x0);
          const std::size_t sat = static_cast<std::size_t>(sy) * w + sx;
          fill_rgb(y, x, img.rgb[sat], img.rgb[plane + sat], img.rgb[2 * plane + sat]);
          img.saliency.at(y, x) = img.saliency.at(sy, sx);
          break;
        }
      }
    }
  img.saliency_pre = sal::preprocess(img.saliency, img.sal_diffusion, img.sal_blur, true);
}

MaskedView mask_train(const ep::AnnotatedImage& img, const MaskStrategy& strategy, int l,
                      int patch, nc::Rng& rng) {
  strategy.validate();
  MaskedView view;
  view.rgb = img.rgb;
  view.saliency_pre = img.saliency_pre;
  if (!strategy.any()) return view;

  // candidate cells: token-resolution foreground
  const Tensor m_down = sal::downscale(img.saliency_pre, l);
  std::vector<int> fg;
  for (std::size_t i = 0; i < m_down.size(); ++i)
    if (m_down[i] >= 0.5) fg.push_back(static_cast<int>(i));

  int count = rng.uniform_int(strategy.min_patches, strategy.max_patches);
  count = std::min<int>(count, static_cast<int>(fg.size()));
  // partial Fisher-Yates draw without replacement
  for (int i = 0; i < count; ++i) {
    const int j = rng.uniform_int(i, static_cast<int>(fg.size()) - 1);
    std::swap(fg[static_cast<std::size_t>(i)], fg[static_cast<std::size_t>(j)]);
  }
  fg.resize(static_cast<std::size_t>(count));
  view.cells = fg;

  const int w = img.saliency_pre.width, h = img.saliency_pre.height;
  const std::size_t plane = static_cast<std::size_t>(w) * h;
  for (int cell : fg) {
    const int cy = cell / l, cx = cell % l;
    for (int y = cy * patch; y < std::min((cy + 1) * patch, h); ++y)
      for (int x = cx * patch; x < std::min((cx + 1) * patch, w); ++x) {
        const std::size_t at = static_cast<std::size_t>(y) * w + x;
        if (strategy.rgb) {
          view.rgb[at] = strategy.gray;
          view.rgb[plane + at] = strategy.gray;
          view.rgb[2 * plane + at] = strategy.gray;
        }
        if (strategy.sal) view.saliency_pre.values[at] = 0.0;
      }
  }
  return view;
}

namespace {

Var kl_term(Var p, Var p_occ) {
  Var pc = nc::clamp_min(p, 1e-12);
  Var qc = nc::clamp_min(p_occ, 1e-12);
  return nc::sum(p * (nc::log(pc) - nc::log(qc)));
}

double median_pairwise_distance(const Tensor& a, const Tensor& b) {
  std::vector<double> dists;
  const int n = a.dim(0), m = b.dim(0), d = a.dim(1);
  dists.reserve(static_cast<std::size_t>(n) * m);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      double s = 0.0;
      for (int c = 0; c < d; ++c) {
        const double diff = a.at(i, c) - b.at(j, c);
        s += diff * diff;
      }
      dists.push_back(std::sqrt(s));
    }
  std::nth_element(dists.begin(), dists.begin() + dists.size() / 2, dists.end());
  const double med = dists[dists.size() / 2];
  return med > 1e-12 ? med : 1.0;
}

Var mmd_sq(Var x, Var y, double bandwidth) {
  const double bw = bandwidth > 0.0 ? bandwidth : median_pairwise_distance(x.val(), y.val());
  const double gamma = 1.0 / (2.0 * bw * bw);
  Var kxx = nc::exp(nc::square(nc::pairwise_l2(x, x)) * -gamma);
  Var kyy = nc::exp(nc::square(nc::pairwise_l2(y, y)) * -gamma);
  Var kxy = nc::exp(nc::square(nc::pairwise_l2(x, y)) * -gamma);
  return nc::mean(kxx) + nc::mean(kyy) - nc::mean(kxy) * 2.0;
}

}  // namespace

Var align_loss(AlignMode mode, const AlignArtifacts& art) {
  switch (mode) {
    case AlignMode::kNone:
      return Var{};
    case AlignMode::kProbKl: {
      if (art.prob_pairs.empty()) throw std::invalid_argument("align: no probability pairs");
      Var acc;
      for (const auto& [p, p_occ] : art.prob_pairs) {
        Var clean = art.detach_clean ? nc::detach(p) : p;
        Var term = kl_term(clean, p_occ);
        acc = acc.valid() ? acc + term : term;
      }
      return acc * (1.0 / static_cast<double>(art.prob_pairs.size()));
    }
    case AlignMode::kFeatL1:
    case AlignMode::kFeatL2: {
      if (art.feat_pairs.empty()) throw std::invalid_argument("align: no feature pairs");
      Var acc;
      for (const auto& [f, f_occ] : art.feat_pairs) {
        Var clean = art.detach_clean ? nc::detach(f) : f;
        Var diff = clean - f_occ;
        Var term = mode == AlignMode::kFeatL1 ? nc::mean(nc::abs(diff)) : nc::mean(nc::square(diff));
        acc = acc.valid() ? acc + term : term;
      }
      return acc * (1.0 / static_cast<double>(art.feat_pairs.size()));
    }
    case AlignMode::kFeatMmd: {
      if (art.feat_pairs.empty()) throw std::invalid_argument("align: no feature pairs");
      Var acc;
      for (const auto& [f, f_occ] : art.feat_pairs) {
        Var clean = art.detach_clean ? nc::detach(f) : f;
        Var term = mmd_sq(clean, f_occ, art.mmd_bandwidth);
        acc = acc.valid() ? acc + term : term;
      }
      return acc * (1.0 / static_cast<double>(art.feat_pairs.size()));
    }
    case AlignMode::kRecon: {
      if (!art.recon_pred.valid()) throw std::invalid_argument("align: no reconstruction pair");
      return nc::mean(nc::abs(art.recon_pred - art.recon_target));
    }
    case AlignMode::kNonOcclLoss: {
      if (!art.clean_ms.valid()) throw std::invalid_argument("align: no clean-view loss");
      return art.clean_ms;
    }
  }
  throw std::invalid_argument("unknown align mode");
}

void init_recon_params(nc::ParamStore& ps, const std::string& prefix, int enc_dim, int patch,
                       nc::Rng& rng) {
  Tensor w({enc_dim, 3 * patch * patch});
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.trunc_normal(0.02);
  ps.create(prefix + ".w", std::move(w));
  ps.create(prefix + ".b", Tensor({3 * patch * patch}));
}

Var total_loss(Var ms_occ, Var reg, Var aln, double lambda1, double lambda2, double lambda3) {
  Var acc;
  auto add = [&acc](Var v, double scale) {
    if (!v.valid() || scale == 0.0) return;
    Var term = v * scale;
    acc = acc.valid() ? acc + term : term;
  };
  add(ms_occ, lambda1);
  add(reg, lambda2);
  add(aln, lambda3);
  if (!acc.valid()) throw std::invalid_argument("total_loss: no loss component provided");
  return acc;
}

}  // namespace salvit::occ
