#include <cmath>

#include "doctest.h"
#include "salvit/gradcheck.hpp"
#include "salvit/msa.hpp"
#include "salvit/rng.hpp"

using namespace salvit;
using nc::Tensor;
using nc::Var;

namespace {

Tensor random_mask_vec(int n, nc::Rng& rng) {
  Tensor m({n});
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.uniform();
  return m;
}

Tensor random_tokens(int n, int d, nc::Rng& rng) {
  Tensor x({n, d});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal() * 0.7;
  return x;
}

msa::AttentionConfig small_cfg() {
  msa::AttentionConfig cfg;
  cfg.heads = 2;
  cfg.head_dim = 4;
  cfg.use_pe = false;
  return cfg;
}

// Vanilla multi-head SA reference written with plain tensor math only.
Tensor vanilla_sa_reference(const Tensor& x, const msa::AttentionConfig& cfg,
                            const nc::ParamStore& ps, const std::string& prefix) {
  const int n = x.dim(0), d = x.dim(1);
  const Tensor q_all = nc::matmul(x, ps.get(prefix + ".wq"));
  const Tensor k_all = nc::matmul(x, ps.get(prefix + ".wk"));
  const Tensor v_all = nc::matmul(x, ps.get(prefix + ".wv"));
  Tensor vt({n, d});
  const double scale = 1.0 / (cfg.beta * std::sqrt(static_cast<double>(cfg.head_dim)));
  for (int h = 0; h < cfg.heads; ++h) {
    const int c0 = h * cfg.head_dim;
    Tensor logits({n, n});
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int c = 0; c < cfg.head_dim; ++c) acc += q_all.at(i, c0 + c) * k_all.at(j, c0 + c);
        logits.at(i, j) = acc * scale;
      }
    Tensor a = cfg.kernel == msa::AttnKernel::kSoftmax ? nc::softmax_rows(logits) : logits;
    if (cfg.kernel == msa::AttnKernel::kRbf) {
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          double s = 0.0;
          for (int c = 0; c < cfg.head_dim; ++c) {
            const double diff = q_all.at(i, c0 + c) - k_all.at(j, c0 + c);
            s += diff * diff;
          }
          a.at(i, j) = std::exp(-std::sqrt(s) /
                                (2.0 * cfg.beta * std::sqrt(static_cast<double>(cfg.head_dim))));
        }
    }
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < cfg.head_dim; ++c) {
        double acc = 0.0;
        for (int j = 0; j < n; ++j) acc += a.at(i, j) * v_all.at(j, c0 + c);
        vt.at(i, c0 + c) = acc;
      }
  }
  return nc::matmul(vt, ps.get(prefix + ".wo"));
}

}  // namespace

TEST_CASE("sim matrix worked examples") {
  Tensor ones2({2}, {1, 1});
  for (auto v : {msa::SimVariant::kDot, msa::SimVariant::kHarmonic, msa::SimVariant::kArithmetic}) {
    Tensor s = msa::sim_matrix(ones2, v);
    for (std::size_t i = 0; i < s.size(); ++i) CHECK(s[i] == doctest::Approx(1.0).epsilon(1e-12));
  }

  Tensor m10({2}, {1, 0});
  Tensor h = msa::sim_matrix(m10, msa::SimVariant::kHarmonic);
  CHECK(h.at(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(h.at(0, 1) == doctest::Approx(0.0).epsilon(1e-7));
  CHECK(h.at(1, 0) == doctest::Approx(0.0).epsilon(1e-7));
  CHECK(h.at(1, 1) == 0.0);

  Tensor half({2}, {0.5, 0.5});
  CHECK(msa::sim_matrix(half, msa::SimVariant::kDot).at(0, 1) == doctest::Approx(0.25));
  CHECK(msa::sim_matrix(half, msa::SimVariant::kHarmonic).at(0, 1) == doctest::Approx(0.5));
  CHECK(msa::sim_matrix(half, msa::SimVariant::kArithmetic).at(0, 1) == doctest::Approx(0.5));

  Tensor bad({2}, {1.0, 1.2});
  CHECK_THROWS_AS(msa::sim_matrix(bad, msa::SimVariant::kDot), std::invalid_argument);
}

TEST_CASE("sim matrix symmetry and permutation equivariance") {
  nc::Rng rng(3);
  const int n = 7;
  for (auto v : {msa::SimVariant::kDot, msa::SimVariant::kHarmonic, msa::SimVariant::kArithmetic}) {
    Tensor m = random_mask_vec(n, rng);
    Tensor s = msa::sim_matrix(m, v);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        CHECK(s.at(i, j) == doctest::Approx(s.at(j, i)).epsilon(1e-15));
        CHECK(s.at(i, j) >= 0.0);
        CHECK(s.at(i, j) <= 1.0);
      }
    // apply a random permutation
    std::vector<int> perm(n);
    for (int i = 0; i < n; ++i) perm[i] = i;
    for (int i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(0, i)]);
    Tensor pm({n});
    for (int i = 0; i < n; ++i) pm[static_cast<std::size_t>(i)] = m[static_cast<std::size_t>(perm[i])];
    Tensor sp = msa::sim_matrix(pm, v);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        CHECK(sp.at(i, j) == doctest::Approx(s.at(perm[i], perm[j])).epsilon(1e-15));
  }
}

TEST_CASE("attention mask worked examples and invariants") {
  // m = 1 -> all-ones
  Tensor ones3({3}, {1, 1, 1});
  Tensor m1 = msa::attention_mask(ones3, msa::SimVariant::kHarmonic);
  for (std::size_t i = 0; i < m1.size(); ++i) CHECK(m1[i] == doctest::Approx(1.0).epsilon(1e-12));

  // m = 0 -> identity
  Tensor zeros3({3});
  Tensor m0 = msa::attention_mask(zeros3, msa::SimVariant::kHarmonic);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(m0.at(i, j) == (i == j ? 1.0 : 0.0));

  // m = [1,0] harmonic -> identity
  Tensor m10({2}, {1, 0});
  Tensor mm = msa::attention_mask(m10, msa::SimVariant::kHarmonic);
  CHECK(mm.at(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(mm.at(1, 1) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(mm.at(0, 1) == doctest::Approx(0.0).epsilon(1e-7));
  CHECK(mm.at(1, 0) == doctest::Approx(0.0).epsilon(1e-7));

  nc::Rng rng(8);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor m = random_mask_vec(6, rng);
    for (auto v :
         {msa::SimVariant::kDot, msa::SimVariant::kHarmonic, msa::SimVariant::kArithmetic}) {
      Tensor mk = msa::attention_mask(m, v);
      for (int i = 0; i < 6; ++i) {
        for (int j = 0; j < 6; ++j) {
          CHECK(mk.at(i, j) >= 0.0);
          CHECK(mk.at(i, j) <= 1.0 + 1e-15);
          CHECK(mk.at(i, j) == doctest::Approx(mk.at(j, i)).epsilon(1e-15));
        }
        if (v == msa::SimVariant::kDot) {
          CHECK(mk.at(i, i) >= 0.75);
          CHECK(mk.at(i, i) <= 1.0);
        } else {
          CHECK(mk.at(i, i) == 1.0);  // exactly unit diagonal
        }
      }
    }
  }
}

TEST_CASE("graph-built mask agrees with the plain construction") {
  nc::Rng rng(15);
  Tensor m = random_mask_vec(5, rng);
  for (auto v : {msa::SimVariant::kDot, msa::SimVariant::kHarmonic, msa::SimVariant::kArithmetic}) {
    nc::Graph g;
    Var vm = g.input(m);
    const Tensor& built = msa::attention_mask(vm, v).val();
    Tensor plain = msa::attention_mask(m, v);
    for (std::size_t i = 0; i < plain.size(); ++i)
      CHECK(built[i] == doctest::Approx(plain[i]).epsilon(1e-15));
  }
}

TEST_CASE("soft_msa recovers vanilla attention at m=1") {
  nc::Rng rng(23);
  for (auto kernel : {msa::AttnKernel::kSoftmax, msa::AttnKernel::kRbf}) {
    msa::AttentionConfig cfg = small_cfg();
    cfg.kernel = kernel;
    const int n = 9, d = cfg.model_dim();
    nc::ParamStore ps;
    msa::init_attention_params(ps, "attn", d, cfg, 3, rng);
    // randomize the zero-initialized output projection too
    for (auto& [k, t] : ps.all())
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * 0.3;

    Tensor x = random_tokens(n, d, rng);
    nc::Graph g;
    nc::Binder bind(g, ps);
    Var vx = g.input(x);
    Var vm = g.input(Tensor::ones({n}));
    msa::MsaOutput out = msa::soft_msa(vx, vm, cfg, bind, "attn");
    Tensor ref = vanilla_sa_reference(x, cfg, ps, "attn");
    // cfg.use_pe=false so the reference need not model the bias table
    for (std::size_t i = 0; i < ref.size(); ++i)
      CHECK(std::abs(out.z.val()[i] - ref[i]) < 1e-12);
  }
}

TEST_CASE("soft_msa identity limit at m=0 and monotone masking") {
  nc::Rng rng(29);
  msa::AttentionConfig cfg = small_cfg();
  const int n = 9, d = cfg.model_dim();
  nc::ParamStore ps;
  msa::init_attention_params(ps, "attn", d, cfg, 3, rng);
  for (auto& [k, t] : ps.all())
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * 0.3;
  Tensor x = random_tokens(n, d, rng);

  double prev_mass = 2.0;
  for (double j : {0.0, 1.0, 10.0, 100.0, 1e4}) {
    cfg.masking_j = j;
    nc::Graph g;
    nc::Binder bind(g, ps);
    Var vx = g.input(x);
    Var vm = g.input(Tensor({n}));
    msa::MsaOutput out = msa::soft_msa(vx, vm, cfg, bind, "attn");
    double worst = 0.0;
    for (const Var& a : out.attn)
      for (int r = 0; r < n; ++r) {
        double off = 0.0;
        for (int c = 0; c < n; ++c)
          if (c != r) off += a.val().at(r, c);
        worst = std::max(worst, off);
      }
    CHECK(worst <= prev_mass + 1e-12);
    prev_mass = worst;
    if (j == 1e4) {
      CHECK(worst < 1e-3);
      // Z_i is then V_i Wo
      Tensor v_all = nc::matmul(x, ps.get("attn.wv"));
      Tensor zref = nc::matmul(v_all, ps.get("attn.wo"));
      for (std::size_t i = 0; i < zref.size(); ++i)
        CHECK(out.z.val()[i] == doctest::Approx(zref[i]).epsilon(1e-6));
    }
  }
}

TEST_CASE("soft_msa with zero projections reproduces the softmax([0,-1]) row") {
  msa::AttentionConfig cfg;
  cfg.heads = 1;
  cfg.head_dim = 4;
  cfg.use_pe = false;
  cfg.masking_j = 1.0;
  nc::ParamStore ps;
  ps.create("attn.wq", Tensor({4, 4}));
  ps.create("attn.wk", Tensor({4, 4}));
  ps.create("attn.wv", Tensor({4, 4}));
  ps.create("attn.wo", Tensor({4, 4}));
  nc::Rng rng(5);
  Tensor x = random_tokens(4, 4, rng);
  nc::Graph g;
  nc::Binder bind(g, ps);
  // m = 0 gives mask = I, so logits are 0 on the diagonal and -J elsewhere
  msa::MsaOutput out = msa::soft_msa(g.input(x), g.input(Tensor({4})), cfg, bind, "attn");
  const Tensor& a = out.attn[0].val();
  const double diag = std::exp(0.0) / (std::exp(0.0) + 3.0 * std::exp(-1.0));
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      CHECK(a.at(i, j) == doctest::Approx(i == j ? diag : (1.0 - diag) / 3.0).epsilon(1e-9));
}

TEST_CASE("two-token zero-projection attention matches softmax([0,-1]) exactly") {
  msa::AttentionConfig cfg;
  cfg.heads = 1;
  cfg.head_dim = 2;
  cfg.use_pe = false;
  cfg.masking_j = 1.0;
  nc::ParamStore ps;
  ps.create("a.wq", Tensor({2, 2}));
  ps.create("a.wk", Tensor({2, 2}));
  ps.create("a.wv", Tensor({2, 2}));
  ps.create("a.wo", Tensor({2, 2}));
  nc::Graph g;
  nc::Binder bind(g, ps);
  Tensor x({2, 2}, {0.3, -0.4, 0.9, 0.1});
  msa::MsaOutput out = msa::soft_msa(g.input(x), g.input(Tensor({2})), cfg, bind, "a");
  const Tensor& a = out.attn[0].val();
  CHECK(a.at(0, 0) == doctest::Approx(0.7311).epsilon(1e-4));
  CHECK(a.at(0, 1) == doctest::Approx(0.2689).epsilon(1e-4));
  CHECK(a.at(1, 1) == doctest::Approx(0.7311).epsilon(1e-4));
}

TEST_CASE("hard mask oracle") {
  nc::Rng rng(31);
  msa::AttentionConfig cfg = small_cfg();
  cfg.masking_j = 1e4;
  const int n = 9, d = cfg.model_dim();
  nc::ParamStore ps;
  msa::init_attention_params(ps, "attn", d, cfg, 3, rng);
  for (auto& [k, t] : ps.all())
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * 0.3;

  // m = 1 -> vanilla
  Tensor x = random_tokens(n, d, rng);
  Tensor oracle1 = msa::hard_msa_oracle(x, Tensor::ones({n}), cfg, ps, "attn");
  Tensor ref = vanilla_sa_reference(x, cfg, ps, "attn");
  for (std::size_t i = 0; i < ref.size(); ++i)
    CHECK(oracle1[i] == doctest::Approx(ref[i]).epsilon(1e-12));

  // m = 0 -> V Wo
  Tensor oracle0 = msa::hard_msa_oracle(x, Tensor({n}), cfg, ps, "attn");
  Tensor vwo = nc::matmul(nc::matmul(x, ps.get("attn.wv")), ps.get("attn.wo"));
  for (std::size_t i = 0; i < vwo.size(); ++i)
    CHECK(oracle0[i] == doctest::Approx(vwo[i]).epsilon(1e-12));

  // non-binary mask rejected
  Tensor frac({n});
  frac[0] = 0.5;
  CHECK_THROWS_AS(msa::hard_msa_oracle(x, frac, cfg, ps, "attn"), std::invalid_argument);

  // saturated soft masking matches the oracle for random binary masks
  for (int rep = 0; rep < 10; ++rep) {
    Tensor m({n});
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
    Tensor xr = random_tokens(n, d, rng);
    Tensor hard = msa::hard_msa_oracle(xr, m, cfg, ps, "attn");
    nc::Graph g;
    nc::Binder bind(g, ps);
    msa::MsaOutput soft = msa::soft_msa(g.input(xr), g.input(m), cfg, bind, "attn");
    for (std::size_t i = 0; i < hard.size(); ++i)
      CHECK(std::abs(soft.z.val()[i] - hard[i]) < 1e-3);
  }
}

TEST_CASE("rbf attention entries lie in (0,1]") {
  nc::Rng rng(37);
  msa::AttentionConfig cfg = small_cfg();
  cfg.kernel = msa::AttnKernel::kRbf;
  const int n = 9, d = cfg.model_dim();
  nc::ParamStore ps;
  msa::init_attention_params(ps, "attn", d, cfg, 3, rng);
  for (auto& [k, t] : ps.all())
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * 0.4;
  for (int rep = 0; rep < 5; ++rep) {
    nc::Graph g;
    nc::Binder bind(g, ps);
    msa::MsaOutput out =
        msa::soft_msa(g.input(random_tokens(n, d, rng)), g.input(random_mask_vec(n, rng)), cfg,
                      bind, "attn");
    for (const Var& a : out.attn)
      for (std::size_t i = 0; i < a.val().size(); ++i) {
        CHECK(a.val()[i] > 0.0);
        CHECK(a.val()[i] <= 1.0);
      }
  }
}

TEST_CASE("soft_msa is continuous in the saliency vector") {
  nc::Rng rng(41);
  msa::AttentionConfig cfg = small_cfg();
  const int n = 9, d = cfg.model_dim();
  nc::ParamStore ps;
  msa::init_attention_params(ps, "attn", d, cfg, 3, rng);
  for (auto& [k, t] : ps.all())
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * 0.3;
  Tensor x = random_tokens(n, d, rng);
  Tensor m = random_mask_vec(n, rng);
  Tensor m2 = m;
  for (std::size_t i = 0; i < m2.size(); ++i)
    m2[i] = std::clamp(m2[i] + (rng.uniform() - 0.5) * 2e-6, 0.0, 1.0);

  nc::Graph g;
  nc::Binder bind(g, ps);
  msa::MsaOutput o1 = msa::soft_msa(g.input(x), g.input(m), cfg, bind, "attn");
  msa::MsaOutput o2 = msa::soft_msa(g.input(x), g.input(m2), cfg, bind, "attn");
  for (std::size_t h = 0; h < o1.attn.size(); ++h)
    for (std::size_t i = 0; i < o1.attn[h].val().size(); ++i)
      CHECK(std::abs(o1.attn[h].val()[i] - o2.attn[h].val()[i]) < 1e-3);
}

TEST_CASE("positional bias structure and gradients") {
  const int l = 3, n = l * l;
  nc::Rng rng(47);

  // zero table leaves soft_msa unchanged vs use_pe = false
  msa::AttentionConfig cfg = small_cfg();
  nc::ParamStore ps;
  msa::init_attention_params(ps, "attn", cfg.model_dim(), cfg, l, rng);
  Tensor x = random_tokens(n, cfg.model_dim(), rng);
  Tensor m = random_mask_vec(n, rng);
  {
    nc::Graph g;
    nc::Binder bind(g, ps);
    msa::AttentionConfig with_pe = cfg;
    with_pe.use_pe = true;
    msa::MsaOutput a = msa::soft_msa(g.input(x), g.input(m), with_pe, bind, "attn");
    msa::MsaOutput b = msa::soft_msa(g.input(x), g.input(m), cfg, bind, "attn");
    for (std::size_t i = 0; i < a.z.val().size(); ++i)
      CHECK(a.z.val()[i] == doctest::Approx(b.z.val()[i]).epsilon(1e-15));
  }

  // equal displacements share the bias entry
  {
    nc::Graph g;
    Tensor table({(2 * l - 1) * (2 * l - 1)});
    for (std::size_t i = 0; i < table.size(); ++i) table[i] = rng.normal();
    Var b = msa::positional_bias(g.input(table), l);
    auto disp = [&](int i, int j) {
      return std::pair<int, int>{j % l - i % l, j / l - i / l};
    };
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        for (int k = 0; k < n; ++k)
          for (int q = 0; q < n; ++q)
            if (disp(i, j) == disp(k, q))
              CHECK(b.val().at(i, j) == b.val().at(k, q));
  }

  // gradient through the table
  {
    nc::ParamStore ps2;
    msa::init_attention_params(ps2, "attn", cfg.model_dim(), cfg, l, rng);
    for (auto& [k, t] : ps2.all())
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * 0.2;
    msa::AttentionConfig with_pe = cfg;
    with_pe.use_pe = true;
    const double err = nc::grad_check(
        [&](nc::Graph& g, nc::Binder& bind) {
          msa::MsaOutput out =
              msa::soft_msa(g.input(x), g.input(m), with_pe, bind, "attn");
          return nc::mean(nc::square(out.z));
        },
        ps2, 1e-5);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("soft_msa gradients flow through the saliency vector") {
  nc::Rng rng(53);
  msa::AttentionConfig cfg = small_cfg();
  cfg.use_pe = true;
  const int l = 3, n = l * l;
  nc::ParamStore ps;
  msa::init_attention_params(ps, "attn", cfg.model_dim(), cfg, l, rng);
  for (auto& [k, t] : ps.all())
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * 0.2;
  // bind m as a pseudo-parameter so grad_check perturbs it
  ps.create("m", Tensor({n}));
  for (int i = 0; i < n; ++i) ps.get("m")[static_cast<std::size_t>(i)] = rng.uniform(0.05, 0.95);
  Tensor x = random_tokens(n, cfg.model_dim(), rng);
  const double err = nc::grad_check(
      [&](nc::Graph& g, nc::Binder& bind) {
        msa::MsaOutput out = msa::soft_msa(g.input(x), bind("m"), cfg, bind, "attn");
        return nc::mean(nc::square(out.z));
      },
      ps, 1e-6);
  CHECK(err < 1e-4);
}

TEST_CASE("non-finite logits raise a numeric error naming the head") {
  msa::AttentionConfig cfg;
  cfg.heads = 1;
  cfg.head_dim = 2;
  cfg.use_pe = false;
  nc::ParamStore ps;
  ps.create("a.wq", Tensor::full({2, 2}, 1e200));
  ps.create("a.wk", Tensor::full({2, 2}, 1e200));
  ps.create("a.wv", Tensor({2, 2}));
  ps.create("a.wo", Tensor({2, 2}));
  nc::Graph g;
  nc::Binder bind(g, ps);
  Tensor x({2, 2}, {1e5, 1e5, 1e5, 1e5});
  try {
    msa::soft_msa(g.input(x), g.input(Tensor::ones({2})), cfg, bind, "a");
    FAIL("expected NumericError");
  } catch (const nc::NumericError& e) {
    CHECK(std::string(e.what()).find("head 0") != std::string::npos);
  }
}
