#include "salvit/graph.hpp"

#include <cmath>
#include <cstddef>
#include <utility>

namespace salvit::nc {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + " shape mismatch " + a.shape_str() + " vs " +
                                b.shape_str());
}

Graph* common_graph(Var a, Var b, const char* op) {
  if (!a.valid() || !b.valid() || a.g != b.g)
    throw std::invalid_argument(std::string(op) + ": operands from different graphs");
  return a.g;
}

}  // namespace

const Tensor& Var::val() const {
  if (!valid()) throw std::invalid_argument("use of invalid Var");
  return g->value(*this);
}

double Var::item() const {
  const Tensor& t = val();
  if (t.size() != 1) throw std::invalid_argument("item() on non-scalar " + t.shape_str());
  return t[0];
}

Var Graph::make(Tensor value, std::vector<int> parents, std::function<void(Graph&, int)> back,
                std::string name) {
  nodes_.push_back(Node{std::move(value), Tensor{}, std::move(parents), std::move(back),
                        std::move(name)});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::input(Tensor t) { return make(std::move(t), {}, nullptr); }

Var Graph::param(const std::string& name, Tensor t) {
  if (name.empty()) throw std::invalid_argument("parameter name must be non-empty");
  return make(std::move(t), {}, nullptr, name);
}

Tensor& Graph::grad_buf(int id) {
  Node& n = node(id);
  if (n.grad.size() == 0 && n.value.size() != 0) n.grad = Tensor(n.value.shape());
  return n.grad;
}

const Tensor& Graph::grad(Var v) const {
  static const Tensor empty;
  const Node& n = node(v.id);
  return n.grad.size() ? n.grad : empty;
}

void Graph::backward(Var root) {
  if (!root.valid() || root.g != this) throw std::invalid_argument("backward: foreign root");
  if (node(root.id).value.size() != 1)
    throw std::invalid_argument("backward: root must be scalar, got " +
                                node(root.id).value.shape_str());
  grad_buf(root.id)[0] = 1.0;
  for (int i = root.id; i >= 0; --i) {
    Node& n = node(i);
    if (n.back && n.grad.size() != 0) n.back(*this, i);
  }
  ran_backward_ = true;
}

GradientMap Graph::named_grads() const {
  GradientMap out;
  for (const Node& n : nodes_) {
    if (n.name.empty()) continue;
    if (n.grad.size() == 0) continue;
    auto it = out.find(n.name);
    if (it == out.end()) {
      out.emplace(n.name, n.grad);
    } else {
      for (std::size_t i = 0; i < n.grad.size(); ++i) it->second[i] += n.grad[i];
    }
  }
  return out;
}

// ---- elementwise arithmetic ----------------------------------------------

Var operator+(Var a, Var b) {
  Graph* g = common_graph(a, b, "add");
  check_same_shape(a.val(), b.val(), "add");
  Tensor out = a.val();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.val()[i];
  const int pa = a.id, pb = b.id;
  return g->make(std::move(out), {pa, pb}, [pa, pb](Graph& gr, int self) {
    const Tensor& gy = gr.node(self).grad;
    Tensor& ga = gr.grad_buf(pa);
    Tensor& gb = gr.grad_buf(pb);
    for (std::size_t i = 0; i < gy.size(); ++i) {
      ga[i] += gy[i];
      gb[i] += gy[i];
    }
  });
}

Var operator-(Var a, Var b) {
  Graph* g = common_graph(a, b, "sub");
  check_same_shape(a.val(), b.val(), "sub");
  Tensor out = a.val();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.val()[i];
  const int pa = a.id, pb = b.id;
  return g->make(std::move(out), {pa, pb}, [pa, pb](Graph& gr, int self) {
    const Tensor& gy = gr.node(self).grad;
    Tensor& ga = gr.grad_buf(pa);
    Tensor& gb = gr.grad_buf(pb);
    for (std::size_t i = 0; i < gy.size(); ++i) {
      ga[i] += gy[i];
      gb[i] -= gy[i];
    }
  });
}

Var operator*(Var a, Var b) {
  Graph* g = common_graph(a, b, "mul");
  check_same_shape(a.val(), b.val(), "mul");
  Tensor out = a.val();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.val()[i];
  const int pa = a.id, pb = b.id;
  return g->make(std::move(out), {pa, pb}, [pa, pb](Graph& gr, int self) {
    const Tensor& gy = gr.node(self).grad;
    const Tensor& av = gr.node(pa).value;
    const Tensor& bv = gr.node(pb).value;
    Tensor& ga = gr.grad_buf(pa);
    Tensor& gb = gr.grad_buf(pb);
    for (std::size_t i = 0; i < gy.size(); ++i) {
      ga[i] += gy[i] * bv[i];
      gb[i] += gy[i] * av[i];
    }
  });
}

Var operator/(Var a, Var b) {
  Graph* g = common_graph(a, b, "div");
  check_same_shape(a.val(), b.val(), "div");
  Tensor out = a.val();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= b.val()[i];
  const int pa = a.id, pb = b.id;
  return g->make(std::move(out), {pa, pb}, [pa, pb](Graph& gr, int self) {
    const Tensor& gy = gr.node(self).grad;
    const Tensor& av = gr.node(pa).value;
    const Tensor& bv = gr.node(pb).value;
    Tensor& ga = gr.grad_buf(pa);
    Tensor& gb = gr.grad_buf(pb);
    for (std::size_t i = 0; i < gy.size(); ++i) {
      ga[i] += gy[i] / bv[i];
      gb[i] -= gy[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

Var operator*(Var a, double s) {
  Tensor out = a.val();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
  const int pa = a.id;
  return a.g->make(std::move(out), {pa}, [pa, s](Graph& gr, int self) {
    const Tensor& gy = gr.node(self).grad;
    Tensor& ga = gr.grad_buf(pa);
    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * s;
  });
}

Var operator*(double s, Var a) { return a * s; }

Var operator+(Var a, double s) {
  Tensor out = a.val();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += s;
  const int pa = a.id;
  return a.g->make(std::move(out), {pa}, [pa](Graph& gr, int self) {
    const Tensor& gy = gr.node(self).grad;
    Tensor& ga = gr.grad_buf(pa);
    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
  });
}

Var operator-(Var a, double s) { return a + (-s); }

Var neg(Var a) { return a * -1.0; }

// ---- structural ops -------------------------------------------------------

Var matmul(Var a, Var b) {
  Graph* g = common_graph(a, b, "matmul");
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw std::invalid_argument("matmul shape mismatch " + av.shape_str() + " * " + bv.shape_str());
  Tensor out({av.dim(0), bv.dim(1)});
  gemm_nn_acc(av.data(), bv.data(), out.data(), av.dim(0), av.dim(1), bv.dim(1));
  const int pa = a.id, pb = b.id;
  return g->make(std::move(out), {pa, pb}, [pa, pb](Graph& gr, int self) {
    const Tensor& gy = gr.node(self).grad;
    const Tensor& av2 = gr.node(pa).value;
    const Tensor& bv2 = gr.node(pb).value;
    const int n = av2.dim(0), k = av2.dim(1), m = bv2.dim(1);
    // dA += gY * B^T ; dB += A^T * gY
    gemm_nt_acc(gy.data(), bv2.data(), gr.grad_buf(pa).data(), n, m, k);
    gemm_tn_acc(av2.data(), gy.data(), gr.grad_buf(pb).data(), n, k, m);
  });
}

Var transpose(Var a) {
  const Tensor& av = a.val();
  if (av.rank() != 2) throw std::invalid_argument("transpose expects rank-2");
  Tensor out = nc::transpose(av);
  const int pa = a.id;
  return a.g->make(std::move(out), {pa}, [pa](Graph& gr, int self) {
    const Tensor& gy = gr.node(self).grad;
    Tensor& ga = gr.grad_buf(pa);
    const int r = gy.dim(0), c = gy.dim(1);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) ga.at(j, i) += gy.at(i, j);
  });
}

Var reshape(Var a, std::vector<int> shape) {
  Tensor out(std::move(shape));
  const Tensor& av = a.val();
  if (out.size() != av.size())
    throw std::invalid_argument("reshape size mismatch " + av.shape_str());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i];
  const int pa = a.id;
  return a.g->make(std::move(out), {pa}, [pa](Graph& gr, int self) {
    const Tensor& gy = gr.node(self).grad;
    Tensor& ga = gr.grad_buf(pa);
    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
  });
}

Var concat_cols(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_cols: empty list");
  Graph* g = xs[0].g;
  const int n = xs[0].val().dim(0);
  int dtot = 0;
  std::vector<int> parents;
  for (Var x : xs) {
    if (x.g != g) throw std::invalid_argument("concat_cols: mixed graphs");
    if (x.val().rank() != 2 || x.val().dim(0) != n)
      throw std::invalid_argument("concat_cols: row mismatch");
    dtot += x.val().dim(1);
    parents.push_back(x.id);
  }
  Tensor out({n, dtot});
  int c0 = 0;
  for (Var x : xs) {
    const Tensor& xv = x.val();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < xv.dim(1); ++j) out.at(i, c0 + j) = xv.at(i, j);
    c0 += xv.dim(1);
  }
  return g->make(std::move(out), parents, [parents](Graph& gr, int self) {
    const Tensor& gy = gr.node(self).grad;
    const int rows = gy.dim(0);
    int col = 0;
    for (int p : parents) {
      Tensor& gp = gr.grad_buf(p);
      const int d = gp.dim(1);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < d; ++j) gp.at(i, j) += gy.at(i, col + j);
      col += d;
    }
  });
}

Var slice_cols(Var a, int c0, int c1) {
  const Tensor& av = a.val();
  if (av.rank() != 2 || c0 < 0 || c1 > av.dim(1) || c0 >= c1)
    throw std::invalid_argument("slice_cols: bad range");
  Tensor out({av.dim(0), c1 - c0});
  for (int i = 0; i < av.dim(0); ++i)
    for (int j = c0; j < c1; ++j) out.at(i, j - c0) = av.at(i, j);
  const int pa = a.id;
  return a.g->make(std::move(out), {pa}, [pa, c0](Graph& gr, int self) {
    const Tensor& gy = gr.node(self).grad;
    Tensor& ga = gr.grad_buf(pa);
    for (int i = 0; i < gy.dim(0); ++i)
      for (int j = 0; j < gy.dim(1); ++j) ga.at(i, c0 + j) += gy.at(i, j);
  });
}

Var concat_rows(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_rows: empty list");
  Graph* g = xs[0].g;
  const int d = xs[0].val().dim(1);
  int ntot = 0;
  std::vector<int> parents;
  for (Var x : xs) {
    if (x.g != g) throw std::invalid_argument("concat_rows: mixed graphs");
    if (x.val().rank() != 2 || x.val().dim(1) != d)
      throw std::invalid_argument("concat_rows: column mismatch");
    ntot += x.val().dim(0);
    parents.push_back(x.id);
  }
  Tensor out({ntot, d});
  int r0 = 0;
  for (Var x : xs) {
    const Tensor& xv = x.val();
    for (int i = 0; i < xv.dim(0); ++i)
      for (int j = 0; j < d; ++j) out.at(r0 + i, j) = xv.at(i, j);
    r0 += xv.dim(0);
  }
  return g->make(std::move(out), parents, [parents](Graph& gr, int self) {
    const Tensor& gy = gr.node(self).grad;
    int row = 0;
    for (int p : parents) {
      Tensor& gp = gr.grad_buf(p);
      for (int i = 0; i < gp.dim(0); ++i)
        for (int j = 0; j < gp.dim(1); ++j) gp.at(i, j) += gy.at(row + i, j);
      row += gp.dim(0);
    }
  });
}

Var slice_rows(Var a, int r0, int r1) {
  const Tensor& av = a.val();
  if (av.rank() != 2 || r0 < 0 || r1 > av.dim(0) || r0 >= r1)
    throw std::invalid_argument("slice_rows: bad range");
  Tensor out({r1 - r0, av.dim(1)});
  for (int i = r0; i < r1; ++i)
    for (int j = 0; j < av.dim(1); ++j) out.at(i - r0, j) = av.at(i, j);
  const int pa = a.id;
  return a.g->make(std::move(out), {pa}, [pa, r0](Graph& gr, int self) {
    const Tensor& gy = gr.node(self).grad;
    Tensor& ga = gr.grad_buf(pa);
    for (int i = 0; i < gy.dim(0); ++i)
      for (int j = 0; j < gy.dim(1); ++j) ga.at(r0 + i, j) += gy.at(i, j);
  });
}

Var gather(Var a, std::vector<std::size_t> idx, std::vector<int> out_shape) {
  const Tensor& av = a.val();
  Tensor out(std::move(out_shape));
  if (out.size() != idx.size()) throw std::invalid_argument("gather: index/shape mismatch");
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= av.size()) throw std::invalid_argument("gather: index out of range");
    out[k] = av[idx[k]];
  }
  const int pa = a.id;
  return a.g->make(std::move(out), {pa}, [pa, idx = std::move(idx)](Graph& gr, int self) {
    const Tensor& gy = gr.node(self).grad;
    Tensor& ga = gr.grad_buf(pa);
    for (std::size_t k = 0; k < idx.size(); ++k) ga[idx[k]] += gy[k];
  });
}

Var diag(Var v) {
  const Tensor& vv = v.val();
  const int n = static_cast<int>(vv.size());
  Tensor out({n, n});
  for (int i = 0; i < n; ++i) out.at(i, i) = vv[i];
  const int pv = v.id;
  return v.g->make(std::move(out), {pv}, [pv, n](Graph& gr, int self) {
    const Tensor& gy = gr.node(self).grad;
    Tensor& gv = gr.grad_buf(pv);
    for (int i = 0; i < n; ++i) gv[i] += gy.at(i, i);
  });
}

// ---- reductions -----------------------------------------------------------

Var sum(Var a) {
  const Tensor& av = a.val();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i];
  const int pa = a.id;
  return a.g->make(Tensor::scalar(s), {pa}, [pa](Graph& gr, int self) {
    const double gy = gr.node(self).grad[0];
    Tensor& ga = gr.grad_buf(pa);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy;
  });
}

Var mean(Var a) {
  const double inv = 1.0 / static_cast<double>(a.val().size());
  return sum(a) * inv;
}

Var mean_rows(Var a) {
  const Tensor& av = a.val();
  if (av.rank() != 2) throw std::invalid_argument("mean_rows expects rank-2");
  const int n = av.dim(0), d = av.dim(1);
  Tensor out({1, d});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(j)] += av.at(i, j);
  const double inv = 1.0 / n;
  for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(j)] *= inv;
  const int pa = a.id;
  return a.g->make(std::move(out), {pa}, [pa, n, d, inv](Graph& gr, int self) {
    const Tensor& gy = gr.node(self).grad;
    Tensor& ga = gr.grad_buf(pa);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) ga.at(i, j) += gy[static_cast<std::size_t>(j)] * inv;
  });
}

Var add_rowvec(Var x, Var row) {
  Graph* g = common_graph(x, row, "add_rowvec");
  const Tensor& xv = x.val();
  const Tensor& rv = row.val();
  if (xv.rank() != 2 || static_cast<int>(rv.size()) != xv.dim(1))
    throw std::invalid_argument("add_rowvec shape mismatch");
  Tensor out = xv;
  const int n = xv.dim(0), d = xv.dim(1);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out.at(i, j) += rv[static_cast<std::size_t>(j)];
  const int px = x.id, pr = row.id;
  return g->make(std::move(out), {px, pr}, [px, pr, n, d](Graph& gr, int self) {
    const Tensor& gy = gr.node(self).grad;
    Tensor& gx = gr.grad_buf(px);
    Tensor& grow = gr.grad_buf(pr);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) {
        gx.at(i, j) += gy.at(i, j);
        grow[static_cast<std::size_t>(j)] += gy.at(i, j);
      }
  });
}

Var mul_rowvec(Var x, Var row) {
  Graph* g = common_graph(x, row, "mul_rowvec");
  const Tensor& xv = x.val();
  const Tensor& rv = row.val();
  if (xv.rank() != 2 || static_cast<int>(rv.size()) != xv.dim(1))
    throw std::invalid_argument("mul_rowvec shape mismatch");
  Tensor out = xv;
  const int n = xv.dim(0), d = xv.dim(1);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out.at(i, j) *= rv[static_cast<std::size_t>(j)];
  const int px = x.id, pr = row.id;
  return g->make(std::move(out), {px, pr}, [px, pr, n, d](Graph& gr, int self) {
    const Tensor& gy = gr.node(self).grad;
    const Tensor& xv2 = gr.node(px).value;
    const Tensor& rv2 = gr.node(pr).value;
    Tensor& gx = gr.grad_buf(px);
    Tensor& grow = gr.grad_buf(pr);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) {
        gx.at(i, j) += gy.at(i, j) * rv2[static_cast<std::size_t>(j)];
        grow[static_cast<std::size_t>(j)] += gy.at(i, j) * xv2.at(i, j);
      }
  });
}

// ---- pointwise nonlinearities ----------------------------------------------

namespace {

template <typename F, typename DF>
Var unary_op(Var a, F f, DF df) {
  Tensor out = a.val();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(out[i]);
  const int pa = a.id;
  return a.g->make(std::move(out), {pa}, [pa, df](Graph& gr, int self) {
    const Tensor& gy = gr.node(self).grad;
    const Tensor& av = gr.node(pa).value;
    const Tensor& yv = gr.node(self).value;
    Tensor& ga = gr.grad_buf(pa);
    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * df(av[i], yv[i]);
  });
}

}  // namespace

Var exp(Var a) {
  return unary_op(a, [](double x) { return std::exp(x); },
                  [](double, double y) { return y; });
}

Var log(Var a) {
  return unary_op(a, [](double x) { return std::log(x); },
                  [](double x, double) { return 1.0 / x; });
}

Var sqrt(Var a) {
  return unary_op(a, [](double x) { return std::sqrt(x); },
                  [](double, double y) { return 0.5 / y; });
}

Var tanh(Var a) {
  return unary_op(a, [](double x) { return std::tanh(x); },
                  [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var a) {
  return unary_op(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                  [](double, double y) { return y * (1.0 - y); });
}

Var relu(Var a) {
  return unary_op(a, [](double x) { return x > 0.0 ? x : 0.0; },
                  [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var gelu(Var a) {
  return unary_op(a,
                  [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
                  [](double x, double) {
                    const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                    return cdf + x * pdf;
                  });
}

Var abs(Var a) {
  return unary_op(a, [](double x) { return std::abs(x); },
                  [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var square(Var a) {
  return unary_op(a, [](double x) { return x * x; },
                  [](double x, double) { return 2.0 * x; });
}

Var clamp_min(Var a, double c) {
  return unary_op(a, [c](double x) { return x > c ? x : c; },
                  [c](double x, double) { return x > c ? 1.0 : 0.0; });
}

Var pow_elem(Var base, Var exponent) {
  Graph* g = common_graph(base, exponent, "pow_elem");
  const Tensor& bv = base.val();
  if (exponent.size() != 1) throw std::invalid_argument("pow_elem: exponent must be scalar");
  const double e = exponent.val()[0];
  Tensor out = bv;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (bv[i] < 0.0) throw std::invalid_argument("pow_elem: negative base");
    out[i] = bv[i] == 0.0 ? 0.0 : std::pow(bv[i], e);
  }
  const int pb = base.id, pe = exponent.id;
  return g->make(std::move(out), {pb, pe}, [pb, pe](Graph& gr, int self) {
    const Tensor& gy = gr.node(self).grad;
    const Tensor& bv2 = gr.node(pb).value;
    const Tensor& yv = gr.node(self).value;
    const double e2 = gr.node(pe).value[0];
    Tensor& gb = gr.grad_buf(pb);
    Tensor& ge = gr.grad_buf(pe);
    for (std::size_t i = 0; i < gy.size(); ++i) {
      if (bv2[i] == 0.0) continue;
      gb[i] += gy[i] * e2 * std::pow(bv2[i], e2 - 1.0);
      ge[0] += gy[i] * yv[i] * std::log(bv2[i]);
    }
  });
}

// ---- composite numeric ops --------------------------------------------------

Var softmax_rows(Var a) {
  const Tensor& av = a.val();
  if (av.rank() != 2) throw std::invalid_argument("softmax_rows expects rank-2");
  Tensor out = nc::softmax_rows(av);
  const int pa = a.id;
  const int n = av.dim(0), m = av.dim(1);
  return a.g->make(std::move(out), {pa}, [pa, n, m](Graph& gr, int self) {
    const Tensor& gy = gr.node(self).grad;
    const Tensor& y = gr.node(self).value;
    Tensor& ga = gr.grad_buf(pa);
    for (int i = 0; i < n; ++i) {
      double dot = 0.0;
      for (int j = 0; j < m; ++j) dot += gy.at(i, j) * y.at(i, j);
      for (int j = 0; j < m; ++j) ga.at(i, j) += y.at(i, j) * (gy.at(i, j) - dot);
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Graph* g = common_graph(x, gain, "layer_norm");
  common_graph(x, bias, "layer_norm");
  const Tensor& xv = x.val();
  if (xv.rank() != 2 || xv.dim(1) < 2)
    throw std::invalid_argument("layer_norm expects [n,d] with d >= 2");
  const int n = xv.dim(0), d = xv.dim(1);
  if (static_cast<int>(gain.size()) != d || static_cast<int>(bias.size()) != d)
    throw std::invalid_argument("layer_norm: gain/bias size mismatch");
  Tensor out({n, d});
  Tensor xhat({n, d});
  Tensor inv_std({n});
  const Tensor& gv = gain.val();
  const Tensor& bv = bias.val();
  for (int i = 0; i < n; ++i) {
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += xv.at(i, j);
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = xv.at(i, j) - mu;
      var += c * c;
    }
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = is;
    for (int j = 0; j < d; ++j) {
      const double h = (xv.at(i, j) - mu) * is;
      xhat.at(i, j) = h;
      out.at(i, j) = gv[static_cast<std::size_t>(j)] * h + bv[static_cast<std::size_t>(j)];
    }
  }
  const int px = x.id, pg = gain.id, pb = bias.id;
  return g->make(std::move(out), {px, pg, pb},
                 [px, pg, pb, n, d, xhat = std::move(xhat),
                  inv_std = std::move(inv_std)](Graph& gr, int self) {
    const Tensor& gy = gr.node(self).grad;
    const Tensor& gv2 = gr.node(pg).value;
    Tensor& gx = gr.grad_buf(px);
    Tensor& gg = gr.grad_buf(pg);
    Tensor& gb = gr.grad_buf(pb);
    for (int i = 0; i < n; ++i) {
      double s1 = 0.0, s2 = 0.0;  // sums of gh and gh*xhat over the row
      for (int j = 0; j < d; ++j) {
        const double gyij = gy.at(i, j);
        gg[static_cast<std::size_t>(j)] += gyij * xhat.at(i, j);
        gb[static_cast<std::size_t>(j)] += gyij;
        const double gh = gyij * gv2[static_cast<std::size_t>(j)];
        s1 += gh;
        s2 += gh * xhat.at(i, j);
      }
      const double is = inv_std[static_cast<std::size_t>(i)];
      for (int j = 0; j < d; ++j) {
        const double gh = gy.at(i, j) * gv2[static_cast<std::size_t>(j)];
        gx.at(i, j) += is * (gh - (s1 + xhat.at(i, j) * s2) / d);
      }
    }
  });
}

Var pairwise_l2(Var q, Var k) {
  Graph* g = common_graph(q, k, "pairwise_l2");
  const Tensor& qv = q.val();
  const Tensor& kv = k.val();
  if (qv.rank() != 2 || kv.rank() != 2 || qv.dim(1) != kv.dim(1))
    throw std::invalid_argument("pairwise_l2 shape mismatch");
  const int n = qv.dim(0), m = kv.dim(0), d = qv.dim(1);
  Tensor out({n, m});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      double s = 0.0;
      for (int c = 0; c < d; ++c) {
        const double diff = qv.at(i, c) - kv.at(j, c);
        s += diff * diff;
      }
      out.at(i, j) = std::sqrt(s);
    }
  const int pq = q.id, pk = k.id;
  return g->make(std::move(out), {pq, pk}, [pq, pk, n, m, d](Graph& gr, int self) {
    const Tensor& gy = gr.node(self).grad;
    const Tensor& yv = gr.node(self).value;
    const Tensor& qv2 = gr.node(pq).value;
    const Tensor& kv2 = gr.node(pk).value;
    Tensor& gq = gr.grad_buf(pq);
    Tensor& gk = gr.grad_buf(pk);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) {
        const double dist = yv.at(i, j);
        if (dist == 0.0) continue;
        const double w = gy.at(i, j) / dist;
        if (w == 0.0) continue;
        for (int c = 0; c < d; ++c) {
          const double diff = qv2.at(i, c) - kv2.at(j, c);
          gq.at(i, c) += w * diff;
          gk.at(j, c) -= w * diff;
        }
      }
  });
}

Var conv2d(Var x, Var w, Var b, int stride, int pad) {
  Graph* g = common_graph(x, w, "conv2d");
  const Tensor& xv = x.val();
  const Tensor& wv = w.val();
  if (xv.rank() != 3 || wv.rank() != 4 || xv.dim(0) != wv.dim(1))
    throw std::invalid_argument("conv2d shape mismatch x" + xv.shape_str() + " w" + wv.shape_str());
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be positive");
  const int ci = xv.dim(0), h = xv.dim(1), ww = xv.dim(2);
  const int co = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (ww + 2 * pad - kw) / stride + 1;
  if (oh < 1 || ow < 1) throw std::invalid_argument("conv2d: output would be empty");
  const bool has_bias = b.valid();
  if (has_bias) {
    common_graph(x, b, "conv2d");
    if (static_cast<int>(b.size()) != co) throw std::invalid_argument("conv2d: bias size");
  }
  Tensor out({co, oh, ow});
  const double* xd = xv.data();
  const double* wd = wv.data();
  double* od = out.data();
  for (int oc = 0; oc < co; ++oc) {
    const double bias_v = has_bias ? b.val()[static_cast<std::size_t>(oc)] : 0.0;
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double acc = bias_v;
        const int iy0 = oy * stride - pad, ix0 = ox * stride - pad;
        for (int ic = 0; ic < ci; ++ic)
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = iy0 + ky;
            if (iy < 0 || iy >= h) continue;
            const double* xrow = xd + (static_cast<std::size_t>(ic) * h + iy) * ww;
            const double* wrow =
                wd + ((static_cast<std::size_t>(oc) * ci + ic) * kh + ky) * kw;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ix0 + kx;
              if (ix < 0 || ix >= ww) continue;
              acc += xrow[ix] * wrow[kx];
            }
          }
        od[(static_cast<std::size_t>(oc) * oh + oy) * ow + ox] = acc;
      }
  }
  std::vector<int> parents{x.id, w.id};
  if (has_bias) parents.push_back(b.id);
  const int px = x.id, pw = w.id, pb = has_bias ? b.id : -1;
  return g->make(std::move(out), std::move(parents),
                 [px, pw, pb, stride, pad, ci, h, ww, co, kh, kw, oh, ow](Graph& gr, int self) {
    const Tensor& gy = gr.node(self).grad;
    const Tensor& xv2 = gr.node(px).value;
    const Tensor& wv2 = gr.node(pw).value;
    Tensor& gx = gr.grad_buf(px);
    Tensor& gw = gr.grad_buf(pw);
    for (int oc = 0; oc < co; ++oc)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          const double gyv = gy[(static_cast<std::size_t>(oc) * oh + oy) * ow + ox];
          if (gyv == 0.0) continue;
          if (pb >= 0) gr.grad_buf(pb)[static_cast<std::size_t>(oc)] += gyv;
          const int iy0 = oy * stride - pad, ix0 = ox * stride - pad;
          for (int ic = 0; ic < ci; ++ic)
            for (int ky = 0; ky < kh; ++ky) {
              const int iy = iy0 + ky;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < kw; ++kx) {
                const int ix = ix0 + kx;
                if (ix < 0 || ix >= ww) continue;
                const std::size_t xi = (static_cast<std::size_t>(ic) * h + iy) * ww + ix;
                const std::size_t wi =
                    ((static_cast<std::size_t>(oc) * ci + ic) * kh + ky) * kw + kx;
                gx[xi] += gyv * wv2[wi];
                gw[wi] += gyv * xv2[xi];
              }
            }
        }
  });
}

Var detach(Var a) { return a.g->input(a.val()); }

Var linear(Var x, Var w) {
  const Tensor& xv = x.val();
  const Tensor& wv = w.val();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(0))
    throw std::invalid_argument("linear: inner dimensions disagree, x" + xv.shape_str() + " w" +
                                wv.shape_str());
  return matmul(x, w);
}

Var linear(Var x, Var w, Var b) { return add_rowvec(linear(x, w), b); }

}  // namespace salvit::nc
