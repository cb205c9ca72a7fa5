#include "salvit/encoder.hpp"

#include <cmath>
#include <stdexcept>

namespace salvit::enc {

using nc::Tensor;
using nc::Var;

namespace {

constexpr double kLnEps = 1e-6;

Tensor he_conv_init(int oc, int ic, int kh, int kw, nc::Rng& rng) {
  Tensor w({oc, ic, kh, kw});
  const double stddev = std::sqrt(2.0 / (ic * kh * kw));
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.trunc_normal(stddev);
  return w;
}

Tensor trunc_normal_init(std::vector<int> shape, double stddev, nc::Rng& rng) {
  Tensor w(std::move(shape));
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.trunc_normal(stddev);
  return w;
}

}  // namespace

Ablation ablation_from_string(const std::string& s) {
  if (s == "full") return Ablation::kFull;
  if (s == "no_ml") return Ablation::kNoMl;
  if (s == "no_pe") return Ablation::kNoPe;
  if (s == "vit_only") return Ablation::kVitOnly;
  if (s == "cnn_only") return Ablation::kCnnOnly;
  if (s == "vanilla_vit") return Ablation::kVanillaVit;
  throw std::invalid_argument("unknown ablation: " + s);
}

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::kFull: return "full";
    case Ablation::kNoMl: return "no_ml";
    case Ablation::kNoPe: return "no_pe";
    case Ablation::kVitOnly: return "vit_only";
    case Ablation::kCnnOnly: return "cnn_only";
    case Ablation::kVanillaVit: return "vanilla_vit";
  }
  return "?";
}

int EncoderConfig::out_dim() const {
  switch (ablation) {
    case Ablation::kCnnOnly: return d_raw;
    case Ablation::kVitOnly: return d_vit;
    default: return d_raw + d_vit;
  }
}

void EncoderConfig::validate() const {
  if (l * patch != image_size)
    throw std::invalid_argument("encoder: l * patch must equal image_size");
  if (d_vit % blocks != 0) throw std::invalid_argument("encoder: d_vit must divide by blocks");
  if (attn.model_dim() != d_raw)
    throw std::invalid_argument("encoder: attention heads*head_dim must equal d_raw");
  if (ffn_mult < 1) throw std::invalid_argument("encoder: ffn_mult must be >= 1");
  attn.validate();
  morph.validate();
  if (morph.patch != patch)
    throw std::invalid_argument("encoder: SEM stride must equal the patch size");
}

void init_encoder_params(nc::ParamStore& ps, const std::string& prefix, const EncoderConfig& cfg,
                         nc::Rng& rng) {
  cfg.validate();
  // backbone: patch-stride embed + 3x3 refinement
  ps.create(prefix + ".backbone.conv0.w", he_conv_init(cfg.d_raw, 3, cfg.patch, cfg.patch, rng));
  ps.create(prefix + ".backbone.conv0.b", Tensor({cfg.d_raw}));
  ps.create(prefix + ".backbone.conv1.w", he_conv_init(cfg.d_raw, cfg.d_raw, 3, 3, rng));
  ps.create(prefix + ".backbone.conv1.b", Tensor({cfg.d_raw}));

  morph::init_sem_params(ps, prefix + ".sem", cfg.morph, rng);  // shared by all blocks

  const int d = cfg.d_raw;
  const int hidden = cfg.ffn_mult * d;
  const int d_block_out = cfg.d_vit / cfg.blocks;
  for (int t = 0; t < cfg.blocks; ++t) {
    const std::string bp = prefix + ".block" + std::to_string(t);
    ps.create(bp + ".ln1.gain", Tensor::ones({d}));
    ps.create(bp + ".ln1.bias", Tensor({d}));
    msa::init_attention_params(ps, bp + ".attn", d, cfg.attn, cfg.l, rng);
    ps.create(bp + ".ln2.gain", Tensor::ones({d}));
    ps.create(bp + ".ln2.bias", Tensor({d}));
    ps.create(bp + ".ffn.w1", trunc_normal_init({d, hidden}, 0.02, rng));
    ps.create(bp + ".ffn.b1", Tensor({hidden}));
    ps.create(bp + ".ffn.w2", Tensor({hidden, d}));  // zero: block starts as identity
    ps.create(bp + ".ffn.b2", Tensor({d}));
    morph::init_mpg_params(ps, bp + ".mpg", cfg.morph.d_e + d, cfg.morph, rng);
    ps.create(bp + ".out.ln.gain", Tensor::ones({d}));
    ps.create(bp + ".out.ln.bias", Tensor({d}));
    ps.create(bp + ".out.proj.w", trunc_normal_init({d, d_block_out}, 0.02, rng));
    ps.create(bp + ".out.proj.b", Tensor({d_block_out}));
  }
  if (cfg.norm_raw) {
    ps.create(prefix + ".rawln.gain", Tensor::ones({cfg.d_raw}));
    ps.create(prefix + ".rawln.bias", Tensor({cfg.d_raw}));
  }
}

Var backbone(Var rgb, nc::Binder& params, const std::string& prefix, const EncoderConfig& cfg) {
  const Tensor& rv = rgb.val();
  if (rv.rank() != 3 || rv.dim(0) != 3 || rv.dim(1) != cfg.image_size ||
      rv.dim(2) != cfg.image_size)
    throw std::invalid_argument("backbone: rgb must be [3," + std::to_string(cfg.image_size) +
                                "," + std::to_string(cfg.image_size) + "]");
  Var y = nc::relu(nc::conv2d(rgb, params(prefix + ".backbone.conv0.w"),
                              params(prefix + ".backbone.conv0.b"), cfg.patch, 0));
  y = nc::relu(nc::conv2d(y, params(prefix + ".backbone.conv1.w"),
                          params(prefix + ".backbone.conv1.b"), 1, 1));
  // [d_raw, l, l] -> [n, d_raw]
  return nc::transpose(nc::reshape(y, {cfg.d_raw, cfg.tokens()}));
}

namespace {

Var block_forward(Var z_in, Var m, const EncoderConfig& cfg, nc::Binder& params,
                  const std::string& prefix, std::vector<Var>* attn_out) {
  msa::AttentionConfig attn_cfg = cfg.attn;
  if (cfg.ablation == Ablation::kNoPe) attn_cfg.use_pe = false;
  Var normed = nc::layer_norm(z_in, params(prefix + ".ln1.gain"), params(prefix + ".ln1.bias"),
                              kLnEps);
  msa::MsaOutput msa_out = msa::soft_msa(normed, m, attn_cfg, params, prefix + ".attn");
  if (attn_out) *attn_out = msa_out.attn;
  Var z1 = msa_out.z + z_in;
  Var f_in = nc::layer_norm(z1, params(prefix + ".ln2.gain"), params(prefix + ".ln2.bias"),
                            kLnEps);
  Var h = nc::gelu(nc::linear(f_in, params(prefix + ".ffn.w1"), params(prefix + ".ffn.b1")));
  Var z2 = nc::linear(h, params(prefix + ".ffn.w2"), params(prefix + ".ffn.b2")) + z1;
  return z2;
}

}  // namespace

Var salvit_block(Var z_in, Var m, const EncoderConfig& cfg, nc::Binder& params,
                 const std::string& prefix) {
  return block_forward(z_in, m, cfg, params, prefix, nullptr);
}

EncodeOutput encode(nc::Graph& g, const Tensor& rgb, const sal::SaliencyMap& saliency_pre,
                    nc::Binder& params, const std::string& prefix, const EncoderConfig& cfg,
                    const std::vector<int>* masked_cells) {
  cfg.validate();
  const int n = cfg.tokens();

  Var rgb_in = g.input(rgb);
  Var raw = backbone(rgb_in, params, prefix, cfg);

  if (masked_cells && !masked_cells->empty()) {
    Tensor keep = Tensor::ones({n, cfg.d_raw});
    for (int c : *masked_cells) {
      if (c < 0 || c >= n) throw std::invalid_argument("encode: masked cell out of range");
      for (int j = 0; j < cfg.d_raw; ++j) keep.at(c, j) = 0.0;
    }
    raw = raw * g.input(std::move(keep));
  }

  EncodeOutput out;
  if (cfg.ablation == Ablation::kCnnOnly) {
    out.tokens = raw;
    return out;
  }

  const bool use_ml =
      cfg.ablation != Ablation::kVanillaVit && cfg.ablation != Ablation::kNoMl;

  Var m_down;  // downscaled saliency; unused by the vanilla-ViT ablation
  if (cfg.ablation != Ablation::kVanillaVit) {
    if (saliency_pre.width != cfg.image_size || saliency_pre.height != cfg.image_size)
      throw std::invalid_argument("encode: saliency size mismatch");
    m_down = g.input(sal::downscale(saliency_pre, cfg.l));
  }

  Var f_sal;  // shared SEM embeddings
  if (use_ml) {
    Tensor sal_img({1, cfg.image_size, cfg.image_size});
    for (std::size_t i = 0; i < saliency_pre.values.size(); ++i)
      sal_img[i] = saliency_pre.values[i];
    f_sal = morph::sem_embed(rgb_in, g.input(std::move(sal_img)), params, prefix + ".sem",
                             cfg.morph);
  }

  Var z = raw;
  std::vector<Var> block_outs;
  for (int t = 0; t < cfg.blocks; ++t) {
    const std::string bp = prefix + ".block" + std::to_string(t);
    Var m;
    if (cfg.ablation == Ablation::kVanillaVit) {
      m = g.input(Tensor::ones({n}));
    } else if (cfg.ablation == Ablation::kNoMl) {
      m = m_down;
    } else {
      Var theta = morph::mpg_theta(z, f_sal, params, bp + ".mpg");
      morph::McmOutput mcm = morph::mcm_power(m_down, theta, cfg.morph);
      m = mcm.m;
      out.theta_tilde.push_back(mcm.theta_tilde);
    }
    out.masks.push_back(m);
    std::vector<Var> attn;
    z = block_forward(z, m, cfg, params, bp, &attn);
    out.attention.push_back(std::move(attn));
    Var ln = nc::layer_norm(z, params(bp + ".out.ln.gain"), params(bp + ".out.ln.bias"), kLnEps);
    block_outs.push_back(
        nc::linear(ln, params(bp + ".out.proj.w"), params(bp + ".out.proj.b")));
  }
  Var f_vit = block_outs.size() == 1 ? block_outs[0] : nc::concat_cols(block_outs);

  if (cfg.ablation == Ablation::kVitOnly) {
    out.tokens = f_vit;
    return out;
  }
  Var raw_branch = raw;
  if (cfg.norm_raw)
    raw_branch = nc::layer_norm(raw, params(prefix + ".rawln.gain"),
                                params(prefix + ".rawln.bias"), kLnEps);
  out.tokens = nc::concat_cols({raw_branch, f_vit});
  return out;
}

}  // namespace salvit::enc
