#include "salvit/morph.hpp"

#include <cmath>
#include <stdexcept>

namespace salvit::morph {

using nc::Tensor;
using nc::Var;

void MorphConfig::validate() const {
  if (rho1 <= 0.0) throw std::invalid_argument("morph: rho1 must be positive");
  if (!(rho2 > 0.0 && rho2 < rho1)) throw std::invalid_argument("morph: need 0 < rho2 < rho1");
  if (rho3 < 0.0) throw std::invalid_argument("morph: rho3 must be >= 0");
  if (d_e < 1 || mpg_hidden < 1 || patch < 1) throw std::invalid_argument("morph: bad sizes");
}

namespace {

Tensor he_conv_init(int oc, int ic, int kh, int kw, nc::Rng& rng) {
  Tensor w({oc, ic, kh, kw});
  const double stddev = std::sqrt(2.0 / (ic * kh * kw));
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.trunc_normal(stddev);
  return w;
}

}  // namespace

void init_sem_params(nc::ParamStore& ps, const std::string& prefix, const MorphConfig& cfg,
                     nc::Rng& rng) {
  cfg.validate();
  ps.create(prefix + ".conv0.w", he_conv_init(cfg.d_e, 4, cfg.patch, cfg.patch, rng));
  ps.create(prefix + ".conv0.b", Tensor({cfg.d_e}));
  for (int i = 1; i <= 3; ++i) {
    ps.create(prefix + ".conv" + std::to_string(i) + ".w",
              he_conv_init(cfg.d_e, cfg.d_e, 3, 3, rng));
    ps.create(prefix + ".conv" + std::to_string(i) + ".b", Tensor({cfg.d_e}));
  }
  ps.create(prefix + ".conv4.w", he_conv_init(cfg.d_e, cfg.d_e, 1, 1, rng));
  ps.create(prefix + ".conv4.b", Tensor({cfg.d_e}));
}

Var sem_embed(Var rgb, Var saliency, nc::Binder& params, const std::string& prefix,
              const MorphConfig& cfg) {
  cfg.validate();
  const Tensor& rv = rgb.val();
  const Tensor& sv = saliency.val();
  if (rv.rank() != 3 || rv.dim(0) != 3) throw std::invalid_argument("sem_embed: rgb must be [3,H,W]");
  if (sv.rank() != 3 || sv.dim(0) != 1 || sv.dim(1) != rv.dim(1) || sv.dim(2) != rv.dim(2))
    throw std::invalid_argument("sem_embed: saliency must be [1,H,W] matching rgb");

  // channel stack [sal; rgb] -> [4,H,W]
  const int h = rv.dim(1), w = rv.dim(2);
  Var x = nc::reshape(
      nc::concat_rows({nc::reshape(saliency, {1, h * w}), nc::reshape(rgb, {3, h * w})}),
      {4, h, w});

  Var y = nc::relu(nc::conv2d(x, params(prefix + ".conv0.w"), params(prefix + ".conv0.b"),
                              cfg.patch, 0));
  for (int i = 1; i <= 3; ++i) {
    const std::string base = prefix + ".conv" + std::to_string(i);
    y = nc::relu(nc::conv2d(y, params(base + ".w"), params(base + ".b"), 1, 1));
  }
  y = nc::conv2d(y, params(prefix + ".conv4.w"), params(prefix + ".conv4.b"), 1, 0);

  // [d_e, l, l] -> row-major token rows [n, d_e]
  const int l = y.dim(1);
  return nc::transpose(nc::reshape(y, {cfg.d_e, l * l}));
}

void init_mpg_params(nc::ParamStore& ps, const std::string& prefix, int d_in,
                     const MorphConfig& cfg, nc::Rng& rng) {
  cfg.validate();
  Tensor w1({d_in, cfg.mpg_hidden});
  for (std::size_t i = 0; i < w1.size(); ++i) w1[i] = rng.trunc_normal(0.02);
  Tensor w2({cfg.mpg_hidden, 1});
  for (std::size_t i = 0; i < w2.size(); ++i) w2[i] = rng.trunc_normal(0.02);
  ps.create(prefix + ".w1", std::move(w1));
  ps.create(prefix + ".b1", Tensor({cfg.mpg_hidden}));
  ps.create(prefix + ".w2", std::move(w2));
  ps.create(prefix + ".b2", Tensor({1}));
}

Var mpg_theta(Var patch_feats, Var f_sal, nc::Binder& params, const std::string& prefix) {
  const Tensor& pv = patch_feats.val();
  const Tensor& fv = f_sal.val();
  if (pv.rank() != 2 || fv.rank() != 2 || pv.dim(0) != fv.dim(0))
    throw std::invalid_argument("mpg_theta: row counts must match");
  Var pooled = nc::mean_rows(nc::concat_cols({f_sal, patch_feats}));  // [1, d_e + d]
  Var hidden = nc::gelu(nc::linear(pooled, params(prefix + ".w1"), params(prefix + ".b1")));
  Var theta = nc::linear(hidden, params(prefix + ".w2"), params(prefix + ".b2"));
  return nc::reshape(theta, {1});
}

McmOutput mcm_power(Var m_down, Var theta, const MorphConfig& cfg) {
  cfg.validate();
  const Tensor& mv = m_down.val();
  for (std::size_t i = 0; i < mv.size(); ++i)
    if (!(mv[i] >= 0.0 && mv[i] <= 1.0))
      throw std::invalid_argument("mcm_power: saliency outside [0,1]");
  Var theta_tilde = nc::sigmoid(theta) * cfg.rho1;
  Var m = nc::pow_elem(m_down, theta_tilde);
  return McmOutput{m, theta_tilde};
}

Var morph_reg(Var theta_tilde, const MorphConfig& cfg) {
  cfg.validate();
  Var centered = theta_tilde - cfg.rho2;
  return nc::clamp_min(nc::square(centered) - cfg.rho3, 0.0);
}

double morph_reg_value(double theta_tilde, const MorphConfig& cfg) {
  const double t = theta_tilde - cfg.rho2;
  return std::max(t * t - cfg.rho3, 0.0);
}

}  // namespace salvit::morph
