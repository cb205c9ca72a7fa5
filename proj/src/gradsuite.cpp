#include "salvit/gradsuite.hpp"

#include <algorithm>

#include "salvit/encoder.hpp"
#include "salvit/fskd.hpp"
#include "salvit/gradcheck.hpp"
#include "salvit/robust.hpp"

namespace salvit::ep {

using nc::Tensor;
using nc::Var;

namespace {

void randomize(nc::ParamStore& ps, nc::Rng& rng, double scale) {
  for (auto& [name, t] : ps.all())
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * scale;
}

Tensor random_tensor(std::vector<int> shape, nc::Rng& rng, double scale = 0.5) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * scale;
  return t;
}

Tensor random_unit(std::vector<int> shape, nc::Rng& rng, double lo = 0.05, double hi = 0.95) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

double repeat_check(int points, nc::Rng& rng, nc::ParamStore& ps, const nc::LossFn& fn,
                    double scale = 0.3) {
  double worst = 0.0;
  for (int rep = 0; rep < points; ++rep) {
    nc::Rng local = rng.fork(static_cast<std::uint64_t>(rep) * 7919 + 101);
    randomize(ps, local, scale);
    worst = std::max(worst, nc::grad_check(fn, ps, 1e-6));
  }
  return worst;
}

}  // namespace

std::vector<GradSuiteEntry> run_gradient_suite(int points, std::uint64_t seed) {
  std::vector<GradSuiteEntry> out;
  nc::Rng root(seed);

  // --- soft masked self-attention, both kernels, PE table and m included
  for (auto kernel : {msa::AttnKernel::kSoftmax, msa::AttnKernel::kRbf}) {
    msa::AttentionConfig acfg;
    acfg.kernel = kernel;
    acfg.heads = 2;
    acfg.head_dim = 4;
    acfg.use_pe = true;
    const int l = 3, n = l * l, d = acfg.model_dim();
    nc::ParamStore ps;
    nc::Rng rng = root.fork(kernel == msa::AttnKernel::kSoftmax ? 1 : 2);
    msa::init_attention_params(ps, "attn", d, acfg, l, rng);
    ps.create("m_raw", Tensor({n}));
    Tensor x = random_tensor({n, d}, rng);
    const double err = repeat_check(points, rng, ps, [&](nc::Graph& g, nc::Binder& bind) {
      Var m = nc::sigmoid(bind("m_raw"));  // keeps the saliency inside (0,1)
      msa::MsaOutput mo = msa::soft_msa(g.input(x), m, acfg, bind, "attn");
      return nc::mean(nc::square(mo.z));
    });
    out.push_back({std::string("soft_msa_") +
                       (kernel == msa::AttnKernel::kSoftmax ? "softmax" : "rbf"),
                   err});
  }

  // --- SEM -> MPG -> MCM chain through the masked attention
  {
    morph::MorphConfig mcfg;
    mcfg.d_e = 5;
    mcfg.mpg_hidden = 4;
    mcfg.patch = 4;
    msa::AttentionConfig acfg;
    acfg.heads = 2;
    acfg.head_dim = 4;
    acfg.use_pe = false;
    const int l = 3, n = l * l, d = acfg.model_dim();
    nc::ParamStore ps;
    nc::Rng rng = root.fork(3);
    morph::init_sem_params(ps, "sem", mcfg, rng);
    morph::init_mpg_params(ps, "mpg", mcfg.d_e + d, mcfg, rng);
    msa::init_attention_params(ps, "attn", d, acfg, l, rng);
    Tensor rgb = random_unit({3, l * mcfg.patch, l * mcfg.patch}, rng, 0.0, 1.0);
    Tensor salm = random_unit({1, l * mcfg.patch, l * mcfg.patch}, rng, 0.0, 1.0);
    Tensor m_down = random_unit({n}, rng);
    Tensor x = random_tensor({n, d}, rng);
    const double err = repeat_check(points, rng, ps, [&](nc::Graph& g, nc::Binder& bind) {
      Var f_sal = morph::sem_embed(g.input(rgb), g.input(salm), bind, "sem", mcfg);
      Var theta = morph::mpg_theta(g.input(x), f_sal, bind, "mpg");
      morph::McmOutput mcm = morph::mcm_power(g.input(m_down), theta, mcfg);
      msa::MsaOutput mo = msa::soft_msa(g.input(x), mcm.m, acfg, bind, "attn");
      return nc::mean(nc::square(mo.z)) + morph::morph_reg(mcm.theta_tilde, mcfg);
    });
    out.push_back({"sem_mpg_mcm_chain", err});
  }

  // --- full SalViT block
  {
    enc::EncoderConfig cfg;
    cfg.image_size = 12;
    cfg.patch = 4;
    cfg.l = 3;
    cfg.d_raw = 8;
    cfg.d_vit = 8;
    cfg.attn.heads = 2;
    cfg.attn.head_dim = 4;
    cfg.morph.d_e = 5;
    cfg.morph.mpg_hidden = 4;
    cfg.morph.patch = 4;
    nc::ParamStore ps;
    nc::Rng rng = root.fork(4);
    enc::init_encoder_params(ps, "enc", cfg, rng);
    Tensor z = random_tensor({cfg.tokens(), cfg.d_raw}, rng);
    Tensor m = random_unit({cfg.tokens()}, rng);
    const double err = repeat_check(points, rng, ps, [&](nc::Graph& g, nc::Binder& bind) {
      Var o = enc::salvit_block(g.input(z), g.input(m), cfg, bind, "enc.block0");
      return nc::mean(nc::square(o));
    });
    out.push_back({"salvit_block", err});
  }

  // --- descriptor net
  {
    fskd::HeadConfig hcfg;
    hcfg.scales = {3};
    hcfg.d_v = 2;
    hcfg.d_desc = 6;
    const int l = 6, d = 8;
    nc::ParamStore ps;
    nc::Rng rng = root.fork(5);
    fskd::init_head_params(ps, "head", hcfg, d, l, rng);
    Tensor fatt = random_tensor({l * l, d}, rng);
    const double err = repeat_check(points, rng, ps, [&](nc::Graph& g, nc::Binder& bind) {
      Var psi = fskd::descriptor(g.input(fatt), l, bind, "head", hcfg);
      return nc::mean(nc::square(psi));
    });
    out.push_back({"descriptor", err});
  }

  // --- grid classification and offset losses (through offsets and latents)
  {
    fskd::HeadConfig hcfg;
    hcfg.scales = {3};
    hcfg.d_v = 3;
    nc::ParamStore ps;
    nc::Rng rng = root.fork(6);
    ps.create("cls_raw", Tensor({1, 9}));
    ps.create("off_raw", Tensor({1, 18}));
    ps.create("lat_raw", Tensor({1, 2 * 3 * 9}));
    const fskd::Keypoint gt{40.0, 70.0, true, 0};
    const double err_cls = repeat_check(points, rng, ps, [&](nc::Graph&, nc::Binder& bind) {
      fskd::ScaleOutput so;
      so.scale = 3;
      so.prob = nc::softmax_rows(bind("cls_raw"));
      so.offset = nc::tanh(bind("off_raw"));
      so.latent = bind("lat_raw");
      return fskd::losses_at_scale(so, gt, 96.0, hcfg).cls;
    });
    out.push_back({"loss_cls", err_cls});
    const double err_os = repeat_check(points, rng, ps, [&](nc::Graph&, nc::Binder& bind) {
      fskd::ScaleOutput so;
      so.scale = 3;
      so.prob = nc::softmax_rows(bind("cls_raw"));
      so.offset = nc::tanh(bind("off_raw"));
      so.latent = bind("lat_raw");
      return fskd::losses_at_scale(so, gt, 96.0, hcfg).os;
    });
    out.push_back({"loss_os", err_os});
  }

  // --- alignment losses
  {
    const struct {
      occ::AlignMode mode;
      const char* name;
    } modes[] = {{occ::AlignMode::kProbKl, "align_prob_kl"},
                 {occ::AlignMode::kFeatL1, "align_feat_l1"},
                 {occ::AlignMode::kFeatL2, "align_feat_l2"},
                 {occ::AlignMode::kFeatMmd, "align_feat_mmd"},
                 {occ::AlignMode::kRecon, "align_recon"},
                 {occ::AlignMode::kNonOcclLoss, "align_non_occl"}};
    int fork_id = 7;
    for (const auto& mc : modes) {
      nc::ParamStore ps;
      nc::Rng rng = root.fork(static_cast<std::uint64_t>(fork_id++));
      ps.create("a", Tensor({3, 5}));
      ps.create("b", Tensor({3, 5}));
      const double err = repeat_check(points, rng, ps, [&](nc::Graph&, nc::Binder& bind) {
        occ::AlignArtifacts art;
        switch (mc.mode) {
          case occ::AlignMode::kProbKl:
            art.prob_pairs.emplace_back(nc::softmax_rows(nc::reshape(bind("a"), {1, 15})),
                                        nc::softmax_rows(nc::reshape(bind("b"), {1, 15})));
            break;
          case occ::AlignMode::kRecon:
            art.recon_pred = bind("a");
            art.recon_target = bind("b");
            break;
          case occ::AlignMode::kNonOcclLoss:
            art.clean_ms = nc::mean(nc::square(bind("a") - bind("b")));
            break;
          default:
            art.feat_pairs.emplace_back(bind("a"), bind("b"));
            art.mmd_bandwidth = 1.1;  // the median heuristic is held constant
        }
        return occ::align_loss(mc.mode, art);
      });
      out.push_back({mc.name, err});
    }
  }

  return out;
}

}  // namespace salvit::ep
