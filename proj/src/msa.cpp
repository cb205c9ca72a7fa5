#include "salvit/msa.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace salvit::msa {

using nc::Tensor;
using nc::Var;

void AttentionConfig::validate() const {
  if (heads < 1 || head_dim < 1) throw std::invalid_argument("attention: bad head geometry");
  if (beta <= 0.0) throw std::invalid_argument("attention: temperature must be positive");
  if (masking_j < 0.0) throw std::invalid_argument("attention: masking degree must be >= 0");
  if (!(sim_eps > 0.0 && sim_eps <= 1e-6))
    throw std::invalid_argument("attention: sim epsilon out of range");
}

namespace {

void check_mask_vector(const Tensor& m) {
  if (m.rank() != 1) throw std::invalid_argument("saliency vector must be rank-1");
  for (std::size_t i = 0; i < m.size(); ++i)
    if (!(m[i] >= 0.0 && m[i] <= 1.0))
      throw std::invalid_argument("saliency vector entry outside [0,1]");
}

int grid_side_of(int n) {
  const int l = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
  if (l * l != n)
    throw std::invalid_argument("token count " + std::to_string(n) + " is not a perfect square");
  return l;
}

// Displacement-indexed gather pattern for the relative-position bias.
std::vector<std::size_t> pe_indices(int l) {
  const int n = l * l;
  const int span = 2 * l - 1;
  std::vector<std::size_t> idx(static_cast<std::size_t>(n) * n);
  for (int i = 0; i < n; ++i) {
    const int iy = i / l, ix = i % l;
    for (int j = 0; j < n; ++j) {
      const int jy = j / l, jx = j % l;
      const int dy = jy - iy + l - 1, dx = jx - ix + l - 1;
      idx[static_cast<std::size_t>(i) * n + j] = static_cast<std::size_t>(dy) * span + dx;
    }
  }
  return idx;
}

}  // namespace

Tensor sim_matrix(const Tensor& m, SimVariant v, double eps) {
  check_mask_vector(m);
  const int n = static_cast<int>(m.size());
  Tensor out({n, n});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double mi = m[static_cast<std::size_t>(i)], mj = m[static_cast<std::size_t>(j)];
      double s = 0.0;
      switch (v) {
        case SimVariant::kDot: s = mi * mj; break;
        case SimVariant::kHarmonic: s = 2.0 * mi * mj / std::max(mi + mj, eps); break;
        case SimVariant::kArithmetic: s = 0.5 * (mi + mj); break;
      }
      out.at(i, j) = s;
    }
  return out;
}

Var sim_matrix(Var m, SimVariant v, double eps) {
  check_mask_vector(m.val());
  const int n = static_cast<int>(m.size());
  Var col = nc::reshape(m, {n, 1});
  Var row = nc::reshape(m, {1, n});
  nc::Graph& g = *m.g;
  Var ones_col = g.input(Tensor::ones({n, 1}));
  Var ones_row = g.input(Tensor::ones({1, n}));
  switch (v) {
    case SimVariant::kDot:
      return nc::matmul(col, row);
    case SimVariant::kArithmetic:
      return (nc::matmul(col, ones_row) + nc::matmul(ones_col, row)) * 0.5;
    case SimVariant::kHarmonic: {
      Var prod = nc::matmul(col, row);
      Var sums = nc::matmul(col, ones_row) + nc::matmul(ones_col, row);
      return (prod * 2.0) / nc::clamp_min(sums, eps);
    }
  }
  throw std::invalid_argument("unknown SIM variant");
}

Tensor attention_mask(const Tensor& m, SimVariant v, double eps) {
  Tensor out = sim_matrix(m, v, eps);
  const int n = static_cast<int>(m.size());
  for (int i = 0; i < n; ++i) out.at(i, i) += 1.0 - m[static_cast<std::size_t>(i)];
  return out;
}

Var attention_mask(Var m, SimVariant v, double eps) {
  const int n = static_cast<int>(m.size());
  Var sim = sim_matrix(m, v, eps);
  Var eye = m.g->input(Tensor::identity(n));
  return sim + (eye - nc::diag(m));
}

Var positional_bias(Var table, int grid_side) {
  const int span = 2 * grid_side - 1;
  if (static_cast<int>(table.size()) != span * span)
    throw std::invalid_argument("positional bias table has wrong size");
  const int n = grid_side * grid_side;
  return nc::gather(table, pe_indices(grid_side), {n, n});
}

void init_attention_params(nc::ParamStore& ps, const std::string& prefix, int dim,
                           const AttentionConfig& cfg, int grid_side, nc::Rng& rng) {
  cfg.validate();
  if (cfg.model_dim() != dim)
    throw std::invalid_argument("attention: heads*head_dim != token dim");
  auto make_proj = [&](const std::string& name, bool zero) {
    Tensor w({dim, dim});
    if (!zero)
      for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.trunc_normal(0.02);
    ps.create(prefix + "." + name, std::move(w));
  };
  make_proj("wq", false);
  make_proj("wk", false);
  make_proj("wv", false);
  make_proj("wo", true);  // zero-init output projection: block starts as identity
  const int span = 2 * grid_side - 1;
  ps.create(prefix + ".pe", Tensor({span * span}));
}

MsaOutput soft_msa(Var x, Var m, const AttentionConfig& cfg, nc::Binder& params,
                   const std::string& prefix) {
  cfg.validate();
  const Tensor& xv = x.val();
  if (xv.rank() != 2) throw std::invalid_argument("soft_msa: x must be [n,d]");
  if (!xv.all_finite()) throw nc::NumericError("soft_msa: non-finite input");
  const int n = xv.dim(0), d = xv.dim(1);
  if (cfg.model_dim() != d) throw std::invalid_argument("soft_msa: heads*head_dim != token dim");
  if (static_cast<int>(m.size()) != n)
    throw std::invalid_argument("soft_msa: saliency vector length mismatch");

  nc::Graph& g = *x.g;
  Var mask = attention_mask(m, cfg.sim, cfg.sim_eps);
  Var ones = g.input(Tensor::ones({n, n}));
  Var bias = (ones - mask) * cfg.masking_j;  // entrywise >= 0 for m in [0,1]^n

  Var q_all = nc::matmul(x, params(prefix + ".wq"));
  Var k_all = nc::matmul(x, params(prefix + ".wk"));
  Var v_all = nc::matmul(x, params(prefix + ".wv"));

  Var pe;  // invalid when disabled
  if (cfg.use_pe) pe = positional_bias(params(prefix + ".pe"), grid_side_of(n));

  const double dh = static_cast<double>(cfg.head_dim);
  std::vector<Var> head_outs;
  std::vector<Var> attns;
  for (int h = 0; h < cfg.heads; ++h) {
    const int c0 = h * cfg.head_dim, c1 = (h + 1) * cfg.head_dim;
    Var q = nc::slice_cols(q_all, c0, c1);
    Var k = nc::slice_cols(k_all, c0, c1);
    Var v = nc::slice_cols(v_all, c0, c1);

    Var phi;
    if (cfg.kernel == AttnKernel::kSoftmax) {
      phi = nc::matmul(q, nc::transpose(k)) * (1.0 / (cfg.beta * std::sqrt(dh)));
    } else {
      phi = nc::pairwise_l2(q, k) * (-1.0 / (2.0 * cfg.beta * std::sqrt(dh)));
    }
    if (cfg.use_pe) phi = phi + pe;
    Var logits = phi - bias;
    if (!logits.val().all_finite())
      throw nc::NumericError("soft_msa: non-finite logits in head " + std::to_string(h));

    Var a;
    if (cfg.kernel == AttnKernel::kSoftmax) {
      a = nc::softmax_rows(logits);
    } else {
      a = nc::exp(logits);
      if (cfg.rbf_normalize) {
        Var rowsum = nc::matmul(a, g.input(Tensor::ones({n, 1})));  // [n,1]
        Var denom = nc::matmul(nc::clamp_min(rowsum, 1e-12), g.input(Tensor::ones({1, n})));
        a = a / denom;
      }
    }
    attns.push_back(a);
    head_outs.push_back(nc::matmul(a, v));
  }
  Var vt = cfg.heads == 1 ? head_outs[0] : nc::concat_cols(head_outs);
  Var z = nc::matmul(vt, params(prefix + ".wo"));
  return MsaOutput{z, std::move(attns)};
}

Tensor hard_msa_oracle(const Tensor& x, const Tensor& m_binary, const AttentionConfig& cfg,
                       const nc::ParamStore& ps, const std::string& prefix) {
  cfg.validate();
  if (cfg.kernel != AttnKernel::kSoftmax)
    throw std::invalid_argument("hard_msa_oracle: softmax kernel only");
  const int n = x.dim(0), d = x.dim(1);
  for (std::size_t i = 0; i < m_binary.size(); ++i)
    if (m_binary[i] != 0.0 && m_binary[i] != 1.0)
      throw std::invalid_argument("hard_msa_oracle: mask must be binary");
  if (static_cast<int>(m_binary.size()) != n)
    throw std::invalid_argument("hard_msa_oracle: mask length mismatch");

  const Tensor q_all = nc::matmul(x, ps.get(prefix + ".wq"));
  const Tensor k_all = nc::matmul(x, ps.get(prefix + ".wk"));
  const Tensor v_all = nc::matmul(x, ps.get(prefix + ".wv"));
  const double dh = static_cast<double>(cfg.head_dim);

  // Relative-position bias, when enabled, applies inside the foreground
  // rows exactly like the soft path.
  Tensor pe_bias;
  if (cfg.use_pe) {
    const int l = grid_side_of(n);
    const auto idx = pe_indices(l);
    const Tensor& table = ps.get(prefix + ".pe");
    pe_bias = Tensor({n, n});
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        pe_bias.at(i, j) = table[idx[static_cast<std::size_t>(i) * n + j]];
  }

  Tensor vt({n, d});
  for (int h = 0; h < cfg.heads; ++h) {
    const int c0 = h * cfg.head_dim;
    for (int i = 0; i < n; ++i) {
      if (m_binary[static_cast<std::size_t>(i)] < 0.5) {
        // background row: self copy
        for (int c = 0; c < cfg.head_dim; ++c) vt.at(i, c0 + c) = v_all.at(i, c0 + c);
        continue;
      }
      // softmax over foreground columns only
      double mx = -std::numeric_limits<double>::infinity();
      std::vector<double> logits(static_cast<std::size_t>(n), 0.0);
      for (int j = 0; j < n; ++j) {
        if (m_binary[static_cast<std::size_t>(j)] < 0.5) continue;
        double dot = 0.0;
        for (int c = 0; c < cfg.head_dim; ++c) dot += q_all.at(i, c0 + c) * k_all.at(j, c0 + c);
        double lg = dot / (cfg.beta * std::sqrt(dh));
        if (cfg.use_pe) lg += pe_bias.at(i, j);
        logits[static_cast<std::size_t>(j)] = lg;
        mx = std::max(mx, lg);
      }
      double zsum = 0.0;
      for (int j = 0; j < n; ++j)
        if (m_binary[static_cast<std::size_t>(j)] >= 0.5)
          zsum += std::exp(logits[static_cast<std::size_t>(j)] - mx);
      for (int c = 0; c < cfg.head_dim; ++c) {
        double acc = 0.0;
        for (int j = 0; j < n; ++j) {
          if (m_binary[static_cast<std::size_t>(j)] < 0.5) continue;
          const double a = std::exp(logits[static_cast<std::size_t>(j)] - mx) / zsum;
          acc += a * v_all.at(j, c0 + c);
        }
        vt.at(i, c0 + c) = acc;
      }
    }
  }
  return nc::matmul(vt, ps.get(prefix + ".wo"));
}

void write_attention_csv(const std::string& path, const std::vector<Tensor>& heads) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write attention csv: " + path);
  os << "head,row,col,value\n";
  for (std::size_t h = 0; h < heads.size(); ++h) {
    const Tensor& a = heads[h];
    for (int i = 0; i < a.dim(0); ++i)
      for (int j = 0; j < a.dim(1); ++j)
        os << h << "," << i << "," << j << "," << a.at(i, j) << "\n";
  }
}

}  // namespace salvit::msa
