#pragma once

#include <string>

#include "salvit/params.hpp"
#include "salvit/rng.hpp"

namespace salvit::morph {

struct MorphConfig {
  double rho1 = 2.0;   // bound of the learned exponent
  double rho2 = 0.7;   // desired morphology center
  double rho3 = 0.05;  // dead-zone interval
  int d_e = 24;        // saliency embedding channels
  int mpg_hidden = 32;
  int patch = 16;      // stride of the large first convolution

  void validate() const;
};

/// Saliency embedding module: one large-stride convolution aligning the
/// output with the token grid, three 3x3 stride-1 convolutions, and a final
/// 1x1 convolution. ReLU after every layer except the last.
void init_sem_params(nc::ParamStore& ps, const std::string& prefix, const MorphConfig& cfg,
                     nc::Rng& rng);

/// rgb: [3,H,W], saliency: [1,H,W]; stacked to 4 channels. Returns the
/// l x l x d_e grid flattened row-major as [n, d_e].
nc::Var sem_embed(nc::Var rgb, nc::Var saliency, nc::Binder& params, const std::string& prefix,
                  const MorphConfig& cfg);

/// Morphology parameter generator (two-layer GELU MLP on the pooled
/// concatenation [F_sal ; P]); d_in = d_e + token dim.
void init_mpg_params(nc::ParamStore& ps, const std::string& prefix, int d_in,
                     const MorphConfig& cfg, nc::Rng& rng);

/// theta = w2 * gelu(w1 * GAP([F_sal ; P]) + b1) + b2, a scalar per image.
nc::Var mpg_theta(nc::Var patch_feats, nc::Var f_sal, nc::Binder& params,
                  const std::string& prefix);

struct McmOutput {
  nc::Var m;            // power-normalized saliency vector
  nc::Var theta_tilde;  // bounded exponent, in [0, rho1]
};

/// Morphology changing module: theta_tilde = rho1 * sigmoid(theta) and
/// m = m_down ^ theta_tilde elementwise. Zero cells stay zero.
McmOutput mcm_power(nc::Var m_down, nc::Var theta, const MorphConfig& cfg);

/// Regularizer max((theta_tilde - rho2)^2 - rho3, 0); averaging over a batch
/// is the caller's reduction.
nc::Var morph_reg(nc::Var theta_tilde, const MorphConfig& cfg);
double morph_reg_value(double theta_tilde, const MorphConfig& cfg);

}  // namespace salvit::morph
