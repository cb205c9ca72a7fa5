#pragma once

#include <string>
#include <vector>

#include "salvit/morph.hpp"
#include "salvit/msa.hpp"
#include "salvit/saliency.hpp"

namespace salvit::enc {

enum class Ablation { kFull, kNoMl, kNoPe, kVitOnly, kCnnOnly, kVanillaVit };

Ablation ablation_from_string(const std::string& s);
std::string to_string(Ablation a);

struct EncoderConfig {
  int image_size = 96;
  int patch = 16;
  int l = 6;        // token grid side; l * patch == image_size
  int d_raw = 64;   // backbone channels
  int d_vit = 64;   // transformer ensemble channels
  int blocks = 1;   // number of cascaded SalViT blocks (T)
  int ffn_mult = 2;
  msa::AttentionConfig attn;     // attn.model_dim() must equal d_raw
  morph::MorphConfig morph;
  Ablation ablation = Ablation::kFull;
  bool norm_raw = false;  // layer-normalize F_raw before concatenation
  double sal_diffusion = 8.0;
  double sal_blur = 2.0;

  int tokens() const { return l * l; }
  int out_dim() const;
  void validate() const;
};

void init_encoder_params(nc::ParamStore& ps, const std::string& prefix, const EncoderConfig& cfg,
                         nc::Rng& rng);

/// Raw-token backbone: a patch-stride convolution plus a 3x3 refinement,
/// both ReLU. Output is the [n, d_raw] token grid.
nc::Var backbone(nc::Var rgb, nc::Binder& params, const std::string& prefix,
                 const EncoderConfig& cfg);

/// One SalViT block: z' = MSA(LN(z)) + z, out = FFN(LN(z')) + z'.
nc::Var salvit_block(nc::Var z_in, nc::Var m, const EncoderConfig& cfg, nc::Binder& params,
                     const std::string& prefix);

struct EncodeOutput {
  nc::Var tokens;                      // [n, out_dim]
  std::vector<nc::Var> theta_tilde;    // per block; empty when ML is off
  std::vector<nc::Var> masks;          // saliency vector fed to each block
  std::vector<std::vector<nc::Var>> attention;  // per block, per head
};

/// Full ensemble encoder: backbone tokens feed `blocks` cascaded SalViT
/// blocks sharing one SEM; each block output passes LN + linear to
/// d_vit/blocks channels; everything is concatenated with the raw tokens.
/// `masked_cells`, when given, zeroes those raw-token rows (feature-space
/// masking for occlusion training).
EncodeOutput encode(nc::Graph& g, const nc::Tensor& rgb, const sal::SaliencyMap& saliency_pre,
                    nc::Binder& params, const std::string& prefix, const EncoderConfig& cfg,
                    const std::vector<int>* masked_cells = nullptr);

}  // namespace salvit::enc
