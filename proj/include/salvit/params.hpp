#pragma once

#include <map>
#include <string>

#include "salvit/graph.hpp"
#include "salvit/tensor.hpp"

namespace salvit::nc {

/// Named parameter tensors that persist across training steps. Iteration
/// order is the sorted name order, which keeps updates and checkpoints
/// deterministic.
class ParamStore {
 public:
  Tensor& create(const std::string& name, Tensor init);
  bool has(const std::string& name) const { return params_.count(name) != 0; }
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;

  std::map<std::string, Tensor>& all() { return params_; }
  const std::map<std::string, Tensor>& all() const { return params_; }
  std::size_t count() const { return params_.size(); }

 private:
  std::map<std::string, Tensor> params_;
};

/// Binds store parameters into one graph as named leaves. Repeated use of a
/// name returns the same leaf, so modules shared across the forward pass
/// (e.g. one saliency embedder feeding several transformer blocks)
/// accumulate their gradients on a single node.
class Binder {
 public:
  Binder(Graph& g, const ParamStore& ps) : g_(&g), ps_(&ps) {}

  Var operator()(const std::string& name);

  Graph& graph() { return *g_; }
  const ParamStore& store() const { return *ps_; }

 private:
  Graph* g_;
  const ParamStore* ps_;
  std::map<std::string, Var> bound_;
};

/// Adaptive first-order optimizer (Adam). Moment decay defaults 0.9/0.999,
/// no weight decay.
class Adam {
 public:
  explicit Adam(double lr = 1e-4, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamStore& params, const GradientMap& grads);

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  long steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::map<std::string, std::pair<Tensor, Tensor>> moments_;
};

}  // namespace salvit::nc
