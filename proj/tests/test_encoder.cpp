#include <cmath>

#include "doctest.h"
#include "salvit/encoder.hpp"
#include "salvit/gradcheck.hpp"

using namespace salvit;
using nc::Tensor;
using nc::Var;

namespace {

enc::EncoderConfig tiny_cfg() {
  enc::EncoderConfig cfg;
  cfg.image_size = 24;
  cfg.patch = 4;
  cfg.l = 6;
  cfg.d_raw = 8;
  cfg.d_vit = 8;
  cfg.blocks = 1;
  cfg.ffn_mult = 2;
  cfg.attn.heads = 2;
  cfg.attn.head_dim = 4;
  cfg.morph.d_e = 5;
  cfg.morph.mpg_hidden = 4;
  cfg.morph.patch = 4;
  return cfg;
}

Tensor random_image(int c, int side, nc::Rng& rng) {
  Tensor t({c, side, side});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform();
  return t;
}

sal::SaliencyMap random_sal(int side, nc::Rng& rng) {
  sal::SaliencyMap m(side, side);
  for (double& v : m.values) v = rng.uniform();
  return m;
}

void randomize(nc::ParamStore& ps, nc::Rng& rng, double scale = 0.25) {
  for (auto& [name, t] : ps.all())
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * scale;
}

// Vanilla transformer block in plain tensor math (the m = 1 reference).
Tensor vanilla_block_reference(const Tensor& z_in, const enc::EncoderConfig& cfg,
                               const nc::ParamStore& ps, const std::string& bp) {
  const int n = z_in.dim(0), d = z_in.dim(1);
  auto layer_norm_ref = [&](const Tensor& x, const Tensor& gain, const Tensor& bias) {
    Tensor y({x.dim(0), x.dim(1)});
    for (int i = 0; i < x.dim(0); ++i) {
      double mu = 0;
      for (int j = 0; j < x.dim(1); ++j) mu += x.at(i, j);
      mu /= x.dim(1);
      double var = 0;
      for (int j = 0; j < x.dim(1); ++j) var += (x.at(i, j) - mu) * (x.at(i, j) - mu);
      var /= x.dim(1);
      const double inv = 1.0 / std::sqrt(var + 1e-6);
      for (int j = 0; j < x.dim(1); ++j)
        y.at(i, j) = gain[static_cast<std::size_t>(j)] * (x.at(i, j) - mu) * inv +
                     bias[static_cast<std::size_t>(j)];
    }
    return y;
  };
  Tensor a_in = layer_norm_ref(z_in, ps.get(bp + ".ln1.gain"), ps.get(bp + ".ln1.bias"));
  const Tensor q = nc::matmul(a_in, ps.get(bp + ".attn.wq"));
  const Tensor k = nc::matmul(a_in, ps.get(bp + ".attn.wk"));
  const Tensor v = nc::matmul(a_in, ps.get(bp + ".attn.wv"));
  Tensor vt({n, d});
  const int hd = cfg.attn.head_dim;
  for (int h = 0; h < cfg.attn.heads; ++h) {
    const int c0 = h * hd;
    Tensor logits({n, n});
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        double acc = 0;
        for (int c = 0; c < hd; ++c) acc += q.at(i, c0 + c) * k.at(j, c0 + c);
        logits.at(i, j) = acc / (cfg.attn.beta * std::sqrt(static_cast<double>(hd)));
      }
    Tensor a = nc::softmax_rows(logits);
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < hd; ++c) {
        double acc = 0;
        for (int j = 0; j < n; ++j) acc += a.at(i, j) * v.at(j, c0 + c);
        vt.at(i, c0 + c) = acc;
      }
  }
  Tensor z1 = nc::add(nc::matmul(vt, ps.get(bp + ".attn.wo")), z_in);
  Tensor f_in = layer_norm_ref(z1, ps.get(bp + ".ln2.gain"), ps.get(bp + ".ln2.bias"));
  Tensor h1 = nc::matmul(f_in, ps.get(bp + ".ffn.w1"));
  const Tensor& b1 = ps.get(bp + ".ffn.b1");
  for (int i = 0; i < h1.dim(0); ++i)
    for (int j = 0; j < h1.dim(1); ++j) {
      const double x = h1.at(i, j) + b1[static_cast<std::size_t>(j)];
      h1.at(i, j) = 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440));
    }
  Tensor h2 = nc::matmul(h1, ps.get(bp + ".ffn.w2"));
  const Tensor& b2 = ps.get(bp + ".ffn.b2");
  for (int i = 0; i < h2.dim(0); ++i)
    for (int j = 0; j < h2.dim(1); ++j) h2.at(i, j) += b2[static_cast<std::size_t>(j)];
  return nc::add(h2, z1);
}

}  // namespace

TEST_CASE("salvit block is the identity at initialization") {
  enc::EncoderConfig cfg = tiny_cfg();
  nc::ParamStore ps;
  nc::Rng rng(1);
  enc::init_encoder_params(ps, "enc", cfg, rng);  // wo and ffn.w2 start zero

  nc::Graph g;
  nc::Binder bind(g, ps);
  Tensor z({cfg.tokens(), cfg.d_raw});
  nc::Rng zr(2);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = zr.normal();
  Tensor m({cfg.tokens()});
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = zr.uniform();
  Var out = enc::salvit_block(g.input(z), g.input(m), cfg, bind, "enc.block0");
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(out.val()[i] == z[i]);
}

TEST_CASE("salvit block with m=1 equals a vanilla transformer block") {
  enc::EncoderConfig cfg = tiny_cfg();
  cfg.attn.use_pe = false;
  nc::ParamStore ps;
  nc::Rng rng(3);
  enc::init_encoder_params(ps, "enc", cfg, rng);
  randomize(ps, rng);
  nc::Tensor& pe = ps.get("enc.block0.attn.pe");
  for (std::size_t i = 0; i < pe.size(); ++i) pe[i] = 0.0;

  nc::Graph g;
  nc::Binder bind(g, ps);
  Tensor z({cfg.tokens(), cfg.d_raw});
  nc::Rng zr(4);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = zr.normal() * 0.5;
  Var out = enc::salvit_block(g.input(z), g.input(Tensor::ones({cfg.tokens()})), cfg, bind,
                              "enc.block0");
  Tensor ref = vanilla_block_reference(z, cfg, ps, "enc.block0");
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(out.val()[i] - ref[i]) < 1e-12);
}

TEST_CASE("salvit block gradient check") {
  enc::EncoderConfig cfg = tiny_cfg();
  cfg.image_size = 12;
  cfg.l = 3;
  nc::ParamStore ps;
  nc::Rng rng(5);
  enc::init_encoder_params(ps, "enc", cfg, rng);
  randomize(ps, rng, 0.2);
  Tensor z({cfg.tokens(), cfg.d_raw});
  Tensor m({cfg.tokens()});
  nc::Rng zr(6);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = zr.normal() * 0.4;
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = zr.uniform(0.05, 0.95);
  const double err = nc::grad_check(
      [&](nc::Graph& g, nc::Binder& bind) {
        Var out = enc::salvit_block(g.input(z), g.input(m), cfg, bind, "enc.block0");
        return nc::mean(nc::square(out));
      },
      ps, 1e-5);
  CHECK(err < 1e-4);
}

TEST_CASE("encode output dimensions and ablations") {
  enc::EncoderConfig cfg = tiny_cfg();
  nc::ParamStore ps;
  nc::Rng rng(7);
  enc::init_encoder_params(ps, "enc", cfg, rng);
  randomize(ps, rng, 0.15);

  nc::Rng ir(8);
  Tensor rgb = random_image(3, cfg.image_size, ir);
  sal::SaliencyMap salm = random_sal(cfg.image_size, ir);

  // T = 1, d_vit = d_raw: full output has 2 * d_raw channels
  nc::Graph g;
  nc::Binder bind(g, ps);
  enc::EncodeOutput full = enc::encode(g, rgb, salm, bind, "enc", cfg);
  CHECK(full.tokens.dim(0) == cfg.tokens());
  CHECK(full.tokens.dim(1) == 2 * cfg.d_raw);
  CHECK(full.theta_tilde.size() == 1);

  // cnn_only equals the backbone exactly
  enc::EncoderConfig cnn = cfg;
  cnn.ablation = enc::Ablation::kCnnOnly;
  nc::Graph g2;
  nc::Binder bind2(g2, ps);
  enc::EncodeOutput strip = enc::encode(g2, rgb, salm, bind2, "enc", cnn);
  Var raw = enc::backbone(g2.input(rgb), bind2, "enc", cfg);
  CHECK(strip.tokens.dim(1) == cfg.d_raw);
  for (std::size_t i = 0; i < raw.size(); ++i) CHECK(strip.tokens.val()[i] == raw.val()[i]);

  // determinism: two encodes agree bitwise
  nc::Graph g3;
  nc::Binder bind3(g3, ps);
  enc::EncodeOutput again = enc::encode(g3, rgb, salm, bind3, "enc", cfg);
  for (std::size_t i = 0; i < again.tokens.size(); ++i)
    CHECK(again.tokens.val()[i] == full.tokens.val()[i]);
}

TEST_CASE("vanilla-vit ablation ignores the saliency input") {
  enc::EncoderConfig cfg = tiny_cfg();
  cfg.ablation = enc::Ablation::kVanillaVit;
  nc::ParamStore ps;
  nc::Rng rng(9);
  enc::init_encoder_params(ps, "enc", cfg, rng);
  randomize(ps, rng, 0.15);

  nc::Rng ir(10);
  Tensor rgb = random_image(3, cfg.image_size, ir);
  sal::SaliencyMap sal_a = random_sal(cfg.image_size, ir);
  sal::SaliencyMap sal_b = random_sal(cfg.image_size, ir);

  nc::Graph g;
  nc::Binder bind(g, ps);
  enc::EncodeOutput a = enc::encode(g, rgb, sal_a, bind, "enc", cfg);
  enc::EncodeOutput b = enc::encode(g, rgb, sal_b, bind, "enc", cfg);
  for (std::size_t i = 0; i < a.tokens.size(); ++i)
    CHECK(std::abs(a.tokens.val()[i] - b.tokens.val()[i]) < 1e-12);
}

TEST_CASE("backbone zero weights and grid arithmetic") {
  enc::EncoderConfig cfg = tiny_cfg();
  nc::ParamStore ps;
  nc::Rng rng(11);
  enc::init_encoder_params(ps, "enc", cfg, rng);
  for (auto& [name, t] : ps.all())
    if (name.rfind("enc.backbone", 0) == 0)
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.0;

  nc::Graph g;
  nc::Binder bind(g, ps);
  nc::Rng ir(12);
  Var out = enc::backbone(g.input(random_image(3, cfg.image_size, ir)), bind, "enc", cfg);
  CHECK(out.dim(0) == (cfg.image_size / cfg.patch) * (cfg.image_size / cfg.patch));
  CHECK(out.val().max_abs() == 0.0);
}

TEST_CASE("backbone gradient check") {
  enc::EncoderConfig cfg = tiny_cfg();
  nc::ParamStore ps_all;
  nc::Rng r2(14);
  enc::init_encoder_params(ps_all, "enc", cfg, r2);
  nc::ParamStore ps;  // backbone subset only
  for (auto& [name, t] : ps_all.all())
    if (name.rfind("enc.backbone", 0) == 0) ps.create(name, t);
  nc::Rng ir(13);
  Tensor rgb = random_image(3, cfg.image_size, ir);
  const double err = nc::grad_check(
      [&](nc::Graph& g, nc::Binder& bind) {
        Var y = enc::backbone(g.input(rgb), bind, "enc", cfg);
        return nc::mean(nc::square(y));
      },
      ps, 1e-5);
  CHECK(err < 1e-4);
}

TEST_CASE("encode is equivariant to full-patch translations with PE off") {
  enc::EncoderConfig cfg = tiny_cfg();
  cfg.image_size = 40;
  cfg.l = 10;
  cfg.attn.use_pe = false;
  nc::ParamStore ps;
  nc::Rng rng(15);
  enc::init_encoder_params(ps, "enc", cfg, rng);
  randomize(ps, rng, 0.15);
  // zero conv biases keep the zero background exactly zero, which the
  // exact-translation property needs (biased borders break it through the
  // global attention)
  for (auto& [name, t] : ps.all())
    if ((name.rfind("enc.backbone", 0) == 0 || name.rfind("enc.sem", 0) == 0) &&
        name.size() > 2 && name.compare(name.size() - 2, 2, ".b") == 0)
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.0;

  // content at least 4 cells from every border in both positions; zero
  // background elsewhere
  const int s = cfg.image_size, p = cfg.patch;
  Tensor rgb({3, s, s}), rgb_s({3, s, s});
  sal::SaliencyMap m(s, s, 0.0), m_s(s, s, 0.0);
  nc::Rng cr(16);
  for (int y = 4 * p; y < 6 * p; ++y)
    for (int x = 4 * p; x < 5 * p; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = cr.uniform();
        rgb[static_cast<std::size_t>((c * s + y)) * s + x] = v;
        rgb_s[static_cast<std::size_t>((c * s + y)) * s + x + p] = v;
      }
      const double sv = cr.uniform();
      m.at(y, x) = sv;
      m_s.at(y, x + p) = sv;
    }

  nc::Graph g;
  nc::Binder bind(g, ps);
  enc::EncodeOutput e0 = enc::encode(g, rgb, m, bind, "enc", cfg);
  enc::EncodeOutput e1 = enc::encode(g, rgb_s, m_s, bind, "enc", cfg);
  const int l = cfg.l, d = e0.tokens.dim(1);
  for (int r = 0; r < l; ++r)
    for (int c = 1; c < l; ++c)
      for (int ch = 0; ch < d; ++ch)
        CHECK(e1.tokens.val().at(r * l + c, ch) ==
              doctest::Approx(e0.tokens.val().at(r * l + c - 1, ch)).epsilon(1e-9));
}

TEST_CASE("encode gradient check through the full morphology path") {
  enc::EncoderConfig cfg = tiny_cfg();
  cfg.image_size = 12;
  cfg.l = 3;
  nc::ParamStore ps;
  nc::Rng rng(17);
  enc::init_encoder_params(ps, "enc", cfg, rng);
  randomize(ps, rng, 0.2);
  nc::Rng ir(18);
  Tensor rgb = random_image(3, cfg.image_size, ir);
  sal::SaliencyMap salm = random_sal(cfg.image_size, ir);
  const double err = nc::grad_check(
      [&](nc::Graph& g, nc::Binder& bind) {
        enc::EncodeOutput eo = enc::encode(g, rgb, salm, bind, "enc", cfg);
        return nc::mean(nc::square(eo.tokens));
      },
      ps, 1e-5);
  CHECK(err < 1e-4);
}
