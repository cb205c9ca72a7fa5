#pragma once

#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "salvit/tensor.hpp"

namespace salvit::nc {

class Graph;

/// Handle to a node of a Graph; valid for the graph's lifetime.
struct Var {
  Graph* g = nullptr;
  int id = -1;

  bool valid() const { return g != nullptr && id >= 0; }
  const Tensor& val() const;
  const std::vector<int>& shape() const { return val().shape(); }
  int dim(int i) const { return val().dim(i); }
  std::size_t size() const { return val().size(); }
  /// Value of a one-element node.
  double item() const;
};

/// Parameter name -> gradient of the same shape. Missing entries mean zero.
using GradientMap = std::map<std::string, Tensor>;

/// Numeric error raised when an operation produces non-finite values where
/// the contract forbids them.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Define-by-run reverse-mode tape. Nodes are appended in evaluation order,
/// so parents always precede children and the reverse sweep is a simple
/// backward walk. A graph is built per step and discarded; tensors inside
/// are immutable once created.
class Graph {
 public:
  struct Node {
    Tensor value;
    Tensor grad;  // allocated during backward()
    std::vector<int> parents;
    std::function<void(Graph&, int)> back;  // accumulates into parent grads
    std::string name;                       // non-empty for named parameters
  };

  /// Unnamed leaf (inputs, constants). Gradients are still tracked so tests
  /// can differentiate with respect to inputs.
  Var input(Tensor t);

  /// Named leaf; its gradient is reported by named_grads().
  Var param(const std::string& name, Tensor t);

  /// Reverse sweep from a scalar root. Throws std::invalid_argument when the
  /// root is not one-element.
  void backward(Var root);

  const Tensor& value(Var v) const { return node(v.id).value; }
  const Tensor& grad(Var v) const;

  /// Gradients of all named leaves, summed per name.
  GradientMap named_grads() const;

  std::size_t node_count() const { return nodes_.size(); }

  // Builder used by the op implementations.
  Var make(Tensor value, std::vector<int> parents,
           std::function<void(Graph&, int)> back, std::string name = {});

  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  /// Gradient buffer of a node, allocating zeros on first use.
  Tensor& grad_buf(int id);

 private:
  std::vector<Node> nodes_;
  bool ran_backward_ = false;
};

// ---- Operations ----------------------------------------------------------
// All ops run in double precision, are deterministic, and register an exact
// reverse-mode rule on the tape.

Var operator+(Var a, Var b);  // same shape
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);  // elementwise
Var operator/(Var a, Var b);  // elementwise
Var operator*(Var a, double s);
Var operator*(double s, Var a);
Var operator+(Var a, double s);
Var operator-(Var a, double s);
Var neg(Var a);

Var matmul(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, std::vector<int> shape);
Var concat_cols(const std::vector<Var>& xs);
Var slice_cols(Var a, int c0, int c1);  // half-open column range
Var concat_rows(const std::vector<Var>& xs);
Var slice_rows(Var a, int r0, int r1);
/// Gather from the flattened tensor; indices may repeat (backward scatter-adds).
Var gather(Var a, std::vector<std::size_t> idx, std::vector<int> out_shape);
Var diag(Var v);  // vector -> diagonal matrix

Var sum(Var a);   // -> [1]
Var mean(Var a);  // -> [1]
Var mean_rows(Var a);  // [n,d] -> [1,d]; the global average pool over tokens

Var add_rowvec(Var x, Var row);  // [n,d] + [1,d]
Var mul_rowvec(Var x, Var row);  // [n,d] * [1,d] elementwise

Var exp(Var a);
Var log(Var a);
Var sqrt(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var relu(Var a);
Var gelu(Var a);  // exact erf form
Var abs(Var a);
Var square(Var a);
Var clamp_min(Var a, double c);  // max(a, c); gradient passes where a > c

/// Elementwise base^e with a scalar exponent. Base entries must be >= 0;
/// zero entries stay zero for any positive exponent and contribute no
/// gradient (0^e has derivative 0 in e for e > 0).
Var pow_elem(Var base, Var exponent);

Var softmax_rows(Var a);
Var layer_norm(Var x, Var gain, Var bias, double eps);

/// Pairwise Euclidean distances between row sets: [n,d],[m,d] -> [n,m].
/// Zero distances receive zero gradient (subgradient choice).
Var pairwise_l2(Var q, Var k);

/// x: [C,H,W], w: [OC,C,kh,kw], b: [OC] (pass invalid Var for no bias).
Var conv2d(Var x, Var w, Var b, int stride, int pad);

/// Copies the value into a fresh leaf; gradients do not flow past it.
Var detach(Var a);

/// x @ w (+ b per row). x: [n,din], w: [din,dout], b: [1,dout] or [dout].
Var linear(Var x, Var w);
Var linear(Var x, Var w, Var b);

}  // namespace salvit::nc
