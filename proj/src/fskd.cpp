#include "salvit/fskd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "salvit/checkpoint.hpp"

namespace salvit::fskd {

using nc::Tensor;
using nc::Var;

void HeadConfig::validate() const {
  if (scales.empty()) throw std::invalid_argument("head: need at least one scale");
  for (int s : scales)
    if (s < 1) throw std::invalid_argument("head: scales must be positive");
  if (d_v < 1) throw std::invalid_argument("head: d_v must be >= 1");
  if (d_desc < 1 || desc_min_side < 1) throw std::invalid_argument("head: bad descriptor sizes");
  if (omega_eps <= 0.0) throw std::invalid_argument("head: omega_eps must be positive");
  if (pool_sigma < 0.0) throw std::invalid_argument("head: pool_sigma must be >= 0");
}

int HeadConfig::finest_scale() const {
  int best = scales.front();
  for (int s : scales) best = std::max(best, s);
  return best;
}

int HeadConfig::descriptor_side(int l) const {
  int side = l;
  while (side > desc_min_side) side = (side - 1) / 2 + 1;  // 3x3, stride 2, pad 1
  return side;
}

Var skr(Var tokens, int l, double px_per_cell, const Keypoint& kp, double pool_sigma) {
  if (!kp.visible) throw std::invalid_argument("skr: keypoint is not visible");
  const Tensor& tv = tokens.val();
  if (tv.rank() != 2 || tv.dim(0) != l * l)
    throw std::invalid_argument("skr: token grid shape mismatch");
  const int n = l * l;
  const double gx = kp.x / px_per_cell;
  const double gy = kp.y / px_per_cell;

  Tensor w({1, n});
  if (pool_sigma <= 1e-12) {
    const int cx = std::clamp(static_cast<int>(std::floor(gx)), 0, l - 1);
    const int cy = std::clamp(static_cast<int>(std::floor(gy)), 0, l - 1);
    w.at(0, cy * l + cx) = 1.0;
  } else {
    double total = 0.0;
    for (int r = 0; r < l; ++r)
      for (int c = 0; c < l; ++c) {
        const double dx = (c + 0.5) - gx;
        const double dy = (r + 0.5) - gy;
        const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * pool_sigma * pool_sigma));
        w.at(0, r * l + c) = v;
        total += v;
      }
    for (std::size_t i = 0; i < w.size(); ++i) w[i] /= total;
  }
  return nc::matmul(tokens.g->input(std::move(w)), tokens);  // [1, d]
}

Var prototype_mean(const std::vector<Var>& skrs) {
  if (skrs.empty()) throw std::invalid_argument("prototype: no visible representations");
  Var acc = skrs[0];
  for (std::size_t i = 1; i < skrs.size(); ++i) acc = acc + skrs[i];
  return acc * (1.0 / static_cast<double>(skrs.size()));
}

Var modulate(Var tokens, Var proto) {
  const Tensor& tv = tokens.val();
  const Tensor& pv = proto.val();
  if (tv.rank() != 2 || static_cast<int>(pv.size()) != tv.dim(1))
    throw std::invalid_argument("modulate: prototype dimension mismatch");
  return nc::mul_rowvec(tokens, proto);
}

namespace {

Tensor he_conv_init(int oc, int ic, int kh, int kw, nc::Rng& rng) {
  Tensor w({oc, ic, kh, kw});
  const double stddev = std::sqrt(2.0 / (ic * kh * kw));
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.trunc_normal(stddev);
  return w;
}

}  // namespace

void init_head_params(nc::ParamStore& ps, const std::string& prefix, const HeadConfig& cfg,
                      int enc_dim, int l, nc::Rng& rng) {
  cfg.validate();
  ps.create(prefix + ".desc.conv0.w", he_conv_init(cfg.d_desc, enc_dim, 1, 1, rng));
  ps.create(prefix + ".desc.conv0.b", Tensor({cfg.d_desc}));
  int side = l, idx = 1;
  while (side > cfg.desc_min_side) {
    ps.create(prefix + ".desc.conv" + std::to_string(idx) + ".w",
              he_conv_init(cfg.d_desc, cfg.d_desc, 3, 3, rng));
    ps.create(prefix + ".desc.conv" + std::to_string(idx) + ".b", Tensor({cfg.d_desc}));
    side = (side - 1) / 2 + 1;
    ++idx;
  }
  const int psi = cfg.psi_len(l);
  for (int s : cfg.scales) {
    const std::string sp = prefix + ".s" + std::to_string(s);
    auto init_linear = [&](const std::string& name, int dout) {
      Tensor w({psi, dout});
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.trunc_normal(0.02);
      ps.create(sp + "." + name + ".w", std::move(w));
      ps.create(sp + "." + name + ".b", Tensor({dout}));
    };
    init_linear("cls", s * s);
    init_linear("os", 2 * s * s);
    init_linear("cov", 2 * cfg.d_v * s * s);
  }
}

Var descriptor(Var fatt, int l, nc::Binder& params, const std::string& prefix,
               const HeadConfig& cfg) {
  const Tensor& fv = fatt.val();
  if (fv.rank() != 2 || fv.dim(0) != l * l)
    throw std::invalid_argument("descriptor: token grid shape mismatch");
  const int d = fv.dim(1);
  Var img = nc::reshape(nc::transpose(fatt), {d, l, l});
  Var y = nc::relu(nc::conv2d(img, params(prefix + ".desc.conv0.w"),
                              params(prefix + ".desc.conv0.b"), 1, 0));
  int side = l, idx = 1;
  while (side > cfg.desc_min_side) {
    const std::string base = prefix + ".desc.conv" + std::to_string(idx);
    const bool last = ((side - 1) / 2 + 1) <= cfg.desc_min_side;
    Var c = nc::conv2d(y, params(base + ".w"), params(base + ".b"), 2, 1);
    y = last ? c : nc::relu(c);
    side = (side - 1) / 2 + 1;
    ++idx;
  }
  return nc::reshape(y, {1, cfg.d_desc * side * side});
}

std::vector<ScaleOutput> localize(Var psi, nc::Binder& params, const std::string& prefix,
                                  const HeadConfig& cfg) {
  cfg.validate();
  std::vector<ScaleOutput> outs;
  outs.reserve(cfg.scales.size());
  for (int s : cfg.scales) {
    const std::string sp = prefix + ".s" + std::to_string(s);
    ScaleOutput o;
    o.scale = s;
    o.prob = nc::softmax_rows(nc::linear(psi, params(sp + ".cls.w"), params(sp + ".cls.b")));
    o.offset = nc::tanh(nc::linear(psi, params(sp + ".os.w"), params(sp + ".os.b")));
    o.latent = nc::linear(psi, params(sp + ".cov.w"), params(sp + ".cov.b"));
    outs.push_back(o);
  }
  return outs;
}

Var precision_at(const ScaleOutput& out, int cell, int d_v, double eps) {
  const int stride = 2 * d_v;
  std::vector<std::size_t> idx(static_cast<std::size_t>(stride));
  for (int i = 0; i < stride; ++i)
    idx[static_cast<std::size_t>(i)] = static_cast<std::size_t>(cell * stride + i);
  Var q = nc::gather(out.latent, idx, {2, d_v});
  Var omega = nc::matmul(q, nc::transpose(q)) * (1.0 / static_cast<double>(d_v));
  if (eps > 0.0) omega = omega + out.latent.g->input(nc::scale(Tensor::identity(2), eps));
  return omega;
}

TargetEncoding encode_target(double x, double y, int scale, double l0) {
  TargetEncoding t;
  const double sx = x * scale / l0;
  const double sy = y * scale / l0;
  t.gx = std::clamp(static_cast<int>(std::floor(sx)), 0, scale - 1);
  t.gy = std::clamp(static_cast<int>(std::floor(sy)), 0, scale - 1);
  t.ox = 2.0 * (sx - t.gx - 0.5);
  t.oy = 2.0 * (sy - t.gy - 0.5);
  return t;
}

LossPair losses_at_scale(const ScaleOutput& out, const Keypoint& gt, double l0,
                         const HeadConfig& cfg) {
  if (!gt.visible) throw std::invalid_argument("losses: ground truth is not visible");
  const int s = out.scale;
  const TargetEncoding enc = encode_target(gt.x, gt.y, s, l0);
  const int cell = enc.cell(s);

  Var p_at = nc::gather(out.prob, {static_cast<std::size_t>(cell)}, {1});
  Var cls = nc::neg(nc::log(nc::clamp_min(p_at, 1e-300)));

  // decoded position from the predicted offset at the ground-truth cell
  Var o_cell = nc::gather(out.offset,
                          {static_cast<std::size_t>(2 * cell), static_cast<std::size_t>(2 * cell + 1)},
                          {1, 2});
  const double cell_px = l0 / static_cast<double>(s);
  Tensor base({1, 2}, {cell_px * (enc.gx + 0.5), cell_px * (enc.gy + 0.5)});
  Var x_pred = out.offset.g->input(std::move(base)) + o_cell * (0.5 * cell_px);
  Var delta = x_pred - out.offset.g->input(Tensor({1, 2}, {gt.x, gt.y}));

  Var omega = precision_at(out, cell, cfg.d_v, cfg.omega_eps);
  Var mahal = nc::matmul(nc::matmul(delta, omega), nc::transpose(delta));  // [1,1]
  Var a = nc::gather(omega, {0}, {1});
  Var b = nc::gather(omega, {1}, {1});
  Var c = nc::gather(omega, {2}, {1});
  Var d = nc::gather(omega, {3}, {1});
  Var det = a * d - b * c;
  Var logdet = nc::log(nc::clamp_min(det, 1e-300));
  Var os = (nc::reshape(mahal, {1}) - logdet) * 0.5;
  return LossPair{nc::reshape(cls, {1}), os};
}

Var multi_scale_loss(const std::vector<ScaleOutput>& outs, const Keypoint& gt, double l0,
                     const HeadConfig& cfg) {
  if (outs.empty()) throw std::invalid_argument("multi_scale_loss: no scales");
  Var acc;
  for (const ScaleOutput& o : outs) {
    LossPair lp = losses_at_scale(o, gt, l0, cfg);
    Var term = lp.cls + lp.os;
    acc = acc.valid() ? acc + term : term;
  }
  return acc * (1.0 / static_cast<double>(outs.size()));
}

namespace {

int argmax_cell(const Tensor& prob) {
  int best = 0;
  double bv = prob[0];
  for (std::size_t i = 1; i < prob.size(); ++i)
    if (prob[i] > bv) {  // strict: ties keep the lowest row-major index
      bv = prob[i];
      best = static_cast<int>(i);
    }
  return best;
}

}  // namespace

KeypointPrediction decode(const std::vector<ScaleOutput>& outs, double l0,
                          const HeadConfig& cfg) {
  if (outs.empty()) throw std::invalid_argument("decode: no scales");
  const double ns = static_cast<double>(outs.size());
  KeypointPrediction pred;
  double cov[4] = {0, 0, 0, 0};
  bool any_valid_cov = false;
  int finest = 0;
  for (const ScaleOutput& o : outs) finest = std::max(finest, o.scale);

  for (const ScaleOutput& o : outs) {
    const Tensor& p = o.prob.val();
    const Tensor& off = o.offset.val();
    const int s = o.scale;
    const int cell = argmax_cell(p);
    const int gx = cell % s, gy = cell / s;
    const double cell_px = l0 / static_cast<double>(s);
    pred.x += cell_px * (gx + 0.5 + 0.5 * off[static_cast<std::size_t>(2 * cell)]);
    pred.y += cell_px * (gy + 0.5 + 0.5 * off[static_cast<std::size_t>(2 * cell + 1)]);
    if (s == finest) pred.score = p[static_cast<std::size_t>(cell)];

    // sigma_s = inverse of the stabilized precision at the argmax cell
    const Tensor& v = o.latent.val();
    const int stride = 2 * cfg.d_v;
    double om00 = cfg.omega_eps, om01 = 0.0, om11 = cfg.omega_eps;
    for (int k = 0; k < cfg.d_v; ++k) {
      const double q0 = v[static_cast<std::size_t>(cell * stride + k)];
      const double q1 = v[static_cast<std::size_t>(cell * stride + cfg.d_v + k)];
      om00 += q0 * q0 / cfg.d_v;
      om01 += q0 * q1 / cfg.d_v;
      om11 += q1 * q1 / cfg.d_v;
    }
    const double det = om00 * om11 - om01 * om01;
    const double w = cell_px * cell_px / (4.0 * ns);
    if (det > 1e-300 && std::isfinite(det)) {
      cov[0] += w * om11 / det;
      cov[1] += w * -om01 / det;
      cov[2] += w * -om01 / det;
      cov[3] += w * om00 / det;
      any_valid_cov = true;
    }
  }
  pred.x /= ns;
  pred.y /= ns;
  if (!any_valid_cov) {
    // every scale degenerate: max-uncertainty sentinel
    pred.cov = {kMaxUncertainty, 0.0, 0.0, kMaxUncertainty};
  } else {
    pred.cov = {cov[0], cov[1], cov[2], cov[3]};
  }
  return pred;
}

FskdModel make_model(const enc::EncoderConfig& ecfg, const HeadConfig& hcfg, nc::Rng& rng) {
  FskdModel m;
  m.enc_cfg = ecfg;
  m.head_cfg = hcfg;
  enc::init_encoder_params(m.params, FskdModel::kEncPrefix, ecfg, rng);
  init_head_params(m.params, FskdModel::kHeadPrefix, hcfg, ecfg.out_dim(), ecfg.l, rng);
  return m;
}

namespace {

std::string join_scales(const std::vector<int>& scales) {
  std::string s;
  for (std::size_t i = 0; i < scales.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(scales[i]);
  }
  return s;
}

std::vector<int> parse_scales(const std::string& s) {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos < s.size()) {
    std::size_t comma = s.find(',', pos);
    if (comma == std::string::npos) comma = s.size();
    out.push_back(std::stoi(s.substr(pos, comma - pos)));
    pos = comma + 1;
  }
  return out;
}

}  // namespace

void save_model(const std::string& path, const FskdModel& model,
                const std::map<std::string, std::string>& extra_meta) {
  std::map<std::string, std::string> meta = extra_meta;
  meta["gelu"] = "exact";
  const enc::EncoderConfig& e = model.enc_cfg;
  meta["encoder.image_size"] = std::to_string(e.image_size);
  meta["encoder.patch"] = std::to_string(e.patch);
  meta["encoder.l"] = std::to_string(e.l);
  meta["encoder.d_raw"] = std::to_string(e.d_raw);
  meta["encoder.d_vit"] = std::to_string(e.d_vit);
  meta["encoder.blocks"] = std::to_string(e.blocks);
  meta["encoder.ffn_mult"] = std::to_string(e.ffn_mult);
  meta["encoder.ablation"] = enc::to_string(e.ablation);
  meta["encoder.norm_raw"] = e.norm_raw ? "1" : "0";
  meta["encoder.sal_diffusion"] = std::to_string(e.sal_diffusion);
  meta["encoder.sal_blur"] = std::to_string(e.sal_blur);
  meta["attn.kernel"] = e.attn.kernel == msa::AttnKernel::kSoftmax ? "softmax" : "rbf";
  meta["attn.heads"] = std::to_string(e.attn.heads);
  meta["attn.head_dim"] = std::to_string(e.attn.head_dim);
  meta["attn.beta"] = std::to_string(e.attn.beta);
  meta["attn.masking_j"] = std::to_string(e.attn.masking_j);
  meta["attn.use_pe"] = e.attn.use_pe ? "1" : "0";
  meta["attn.sim"] = e.attn.sim == msa::SimVariant::kDot
                         ? "dot"
                         : (e.attn.sim == msa::SimVariant::kHarmonic ? "harmonic" : "arithmetic");
  meta["morph.d_e"] = std::to_string(e.morph.d_e);
  meta["morph.mpg_hidden"] = std::to_string(e.morph.mpg_hidden);
  meta["morph.rho1"] = std::to_string(e.morph.rho1);
  meta["morph.rho2"] = std::to_string(e.morph.rho2);
  meta["morph.rho3"] = std::to_string(e.morph.rho3);
  const HeadConfig& h = model.head_cfg;
  meta["head.scales"] = join_scales(h.scales);
  meta["head.d_v"] = std::to_string(h.d_v);
  meta["head.d_desc"] = std::to_string(h.d_desc);
  meta["head.desc_min_side"] = std::to_string(h.desc_min_side);
  meta["head.pool_sigma"] = std::to_string(h.pool_sigma);
  nc::save_checkpoint(path, model.params, meta);
}

FskdModel load_model(const std::string& path) {
  nc::LoadedCheckpoint lc = nc::load_checkpoint(path);
  FskdModel m;
  auto req = [&](const std::string& key) {
    auto it = lc.meta.find(key);
    if (it == lc.meta.end()) throw std::runtime_error("checkpoint missing meta key: " + key);
    return it->second;
  };
  enc::EncoderConfig& e = m.enc_cfg;
  e.image_size = std::stoi(req("encoder.image_size"));
  e.patch = std::stoi(req("encoder.patch"));
  e.l = std::stoi(req("encoder.l"));
  e.d_raw = std::stoi(req("encoder.d_raw"));
  e.d_vit = std::stoi(req("encoder.d_vit"));
  e.blocks = std::stoi(req("encoder.blocks"));
  e.ffn_mult = std::stoi(req("encoder.ffn_mult"));
  e.ablation = enc::ablation_from_string(req("encoder.ablation"));
  e.norm_raw = req("encoder.norm_raw") == "1";
  e.sal_diffusion = std::stod(req("encoder.sal_diffusion"));
  e.sal_blur = std::stod(req("encoder.sal_blur"));
  e.attn.kernel = req("attn.kernel") == "rbf" ? msa::AttnKernel::kRbf : msa::AttnKernel::kSoftmax;
  e.attn.heads = std::stoi(req("attn.heads"));
  e.attn.head_dim = std::stoi(req("attn.head_dim"));
  e.attn.beta = std::stod(req("attn.beta"));
  e.attn.masking_j = std::stod(req("attn.masking_j"));
  e.attn.use_pe = req("attn.use_pe") == "1";
  const std::string sim = req("attn.sim");
  e.attn.sim = sim == "dot" ? msa::SimVariant::kDot
                            : (sim == "harmonic" ? msa::SimVariant::kHarmonic
                                                 : msa::SimVariant::kArithmetic);
  e.morph.d_e = std::stoi(req("morph.d_e"));
  e.morph.mpg_hidden = std::stoi(req("morph.mpg_hidden"));
  e.morph.rho1 = std::stod(req("morph.rho1"));
  e.morph.rho2 = std::stod(req("morph.rho2"));
  e.morph.rho3 = std::stod(req("morph.rho3"));
  e.morph.patch = e.patch;
  HeadConfig& h = m.head_cfg;
  h.scales = parse_scales(req("head.scales"));
  h.d_v = std::stoi(req("head.d_v"));
  h.d_desc = std::stoi(req("head.d_desc"));
  h.desc_min_side = std::stoi(req("head.desc_min_side"));
  h.pool_sigma = std::stod(req("head.pool_sigma"));
  m.params = std::move(lc.params);
  return m;
}

namespace {

// Shared query-side pass: modulate, describe, localize, decode.
void run_queries(const ep::Episode& episode, const FskdModel& model,
                 const std::vector<Tensor>& prototypes, EpisodeInference& out) {
  const enc::EncoderConfig& ecfg = model.enc_cfg;
  const HeadConfig& hcfg = model.head_cfg;
  const double l0 = static_cast<double>(ecfg.image_size);
  const int finest = hcfg.finest_scale();

  out.queries.assign(episode.queries.size(), {});
  out.query_tokens.clear();
  for (std::size_t qi = 0; qi < episode.queries.size(); ++qi) {
    nc::Graph g;
    nc::Binder bind(g, model.params);
    enc::EncodeOutput eq = enc::encode(g, episode.queries[qi].rgb,
                                       episode.queries[qi].saliency_pre, bind,
                                       FskdModel::kEncPrefix, ecfg);
    out.query_tokens.push_back(eq.tokens.val());
    out.queries[qi].reserve(prototypes.size());
    for (const Tensor& proto : prototypes) {
      Var fatt = modulate(eq.tokens, g.input(proto));
      Var psi = descriptor(fatt, ecfg.l, bind, FskdModel::kHeadPrefix, hcfg);
      std::vector<ScaleOutput> scales = localize(psi, bind, FskdModel::kHeadPrefix, hcfg);
      TypeInference ti;
      ti.prediction = decode(scales, l0, hcfg);
      for (const ScaleOutput& so : scales)
        if (so.scale == finest) {
          ti.finest_prob = so.prob.val();
          ti.finest_offset = so.offset.val();
        }
      out.queries[qi].push_back(std::move(ti));
    }
  }
}

}  // namespace

EpisodeInference detect_episode(const ep::Episode& episode, const FskdModel& model) {
  const enc::EncoderConfig& ecfg = model.enc_cfg;
  const HeadConfig& hcfg = model.head_cfg;
  if (episode.support.empty()) throw std::invalid_argument("detect: episode has no support");

  std::vector<std::vector<Tensor>> skrs_all(episode.type_ids.size());

  // support pass: SKRs and prototypes
  for (const ep::AnnotatedImage& img : episode.support) {
    nc::Graph g;
    nc::Binder bind(g, model.params);
    enc::EncodeOutput es =
        enc::encode(g, img.rgb, img.saliency_pre, bind, FskdModel::kEncPrefix, ecfg);
    for (std::size_t t = 0; t < episode.type_ids.size(); ++t) {
      const int type = episode.type_ids[t];
      if (type < 0 || type >= static_cast<int>(img.keypoints.size()))
        throw std::invalid_argument("detect: type id outside schema");
      const Keypoint& kp = img.keypoints[static_cast<std::size_t>(type)];
      if (!kp.visible) continue;
      Var phi = skr(es.tokens, ecfg.l, static_cast<double>(ecfg.patch), kp, hcfg.pool_sigma);
      skrs_all[t].push_back(phi.val());
    }
  }

  // types with no visible support shot are dropped for this episode
  EpisodeInference out;
  for (std::size_t t = 0; t < episode.type_ids.size(); ++t) {
    if (skrs_all[t].empty()) continue;
    Tensor acc = skrs_all[t][0];
    for (std::size_t k = 1; k < skrs_all[t].size(); ++k)
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += skrs_all[t][k][i];
    for (std::size_t i = 0; i < acc.size(); ++i)
      acc[i] /= static_cast<double>(skrs_all[t].size());
    out.type_ids.push_back(episode.type_ids[t]);
    out.skrs.push_back(std::move(skrs_all[t]));
    out.prototypes.push_back(std::move(acc));
  }
  if (out.type_ids.empty())
    throw std::invalid_argument("detect: no keypoint type has a visible support shot");

  run_queries(episode, model, out.prototypes, out);
  return out;
}

EpisodeInference redetect_with_prototypes(const ep::Episode& episode, const FskdModel& model,
                                          const std::vector<Tensor>& prototypes) {
  EpisodeInference out;
  out.type_ids = episode.type_ids;
  out.prototypes = prototypes;
  run_queries(episode, model, prototypes, out);
  return out;
}

}  // namespace salvit::fskd
