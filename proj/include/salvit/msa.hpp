#pragma once

#include <string>
#include <vector>

#include "salvit/params.hpp"
#include "salvit/rng.hpp"

namespace salvit::msa {

/// Pairwise saliency combination used to build the interaction matrix.
/// Harmonic is the default; its epsilon only guards 0/0 cells.
enum class SimVariant { kDot, kHarmonic, kArithmetic };

enum class AttnKernel { kSoftmax, kRbf };

struct AttentionConfig {
  AttnKernel kernel = AttnKernel::kSoftmax;
  int heads = 4;
  int head_dim = 16;
  double beta = 1.0;       // temperature
  double masking_j = 1.0;  // degree of masking J
  bool use_pe = true;
  bool rbf_normalize = false;  // off: the RBF kernel stays unnormalized
  SimVariant sim = SimVariant::kHarmonic;
  double sim_eps = 1e-8;

  int model_dim() const { return heads * head_dim; }
  void validate() const;
};

// Saliency interaction matrix. m must lie in [0,1]^n.
//   dot:        m m^T
//   harmonic:   2 m_i m_j / max(m_i + m_j, eps)
//   arithmetic: (m_i + m_j) / 2
nc::Tensor sim_matrix(const nc::Tensor& m, SimVariant v, double eps = 1e-8);
nc::Var sim_matrix(nc::Var m, SimVariant v, double eps = 1e-8);

/// Attention mask of the soft M-SA: sim(m) + I - Diag(m). Diagonal is one
/// for the harmonic and arithmetic variants; symmetric; entries in [0,1].
nc::Tensor attention_mask(const nc::Tensor& m, SimVariant v, double eps = 1e-8);
nc::Var attention_mask(nc::Var m, SimVariant v, double eps = 1e-8);

/// Learnable relative-position bias over an l x l grid: table has
/// (2l-1)^2 entries indexed by displacement, expanded to [n,n].
nc::Var positional_bias(nc::Var table, int grid_side);

/// Creates wq/wk/wv/wo (dim x dim, with the per-head split along columns)
/// and the zero-initialized relative-position table under `prefix`.
void init_attention_params(nc::ParamStore& ps, const std::string& prefix, int dim,
                           const AttentionConfig& cfg, int grid_side, nc::Rng& rng);

struct MsaOutput {
  nc::Var z;                   // [n, dim]
  std::vector<nc::Var> attn;   // per head, [n, n]
};

/// Soft masked self-attention: per head the logits are
///   phi(Q,K) (+ PE bias) - (11^T - attention_mask(m)) * J,
/// with phi the scaled dot product (softmax kernel) or the negated pairwise
/// distance -|Q_i - K_j| / (2 beta sqrt(d_h)) (RBF kernel, unnormalized).
/// Throws NumericError naming the head if logits go non-finite.
MsaOutput soft_msa(nc::Var x, nc::Var m, const AttentionConfig& cfg, nc::Binder& params,
                   const std::string& prefix);

/// Hard-masking reference with binary m (softmax kernel): rows in the
/// foreground set are vanilla attention restricted and renormalized over the
/// foreground; background rows copy their own value vector. Test oracle.
nc::Tensor hard_msa_oracle(const nc::Tensor& x, const nc::Tensor& m_binary,
                           const AttentionConfig& cfg, const nc::ParamStore& ps,
                           const std::string& prefix);

void write_attention_csv(const std::string& path, const std::vector<nc::Tensor>& heads);

}  // namespace salvit::msa
