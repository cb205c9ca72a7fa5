#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace salvit::nc {

/// Dense row-major tensor of 64-bit floats. Immutable by convention once it
/// enters a graph; training math is double throughout, 32-bit floats appear
/// only at checkpoint serialization.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);
  Tensor(std::vector<int> shape, std::vector<double> data);

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, double v);
  static Tensor ones(std::vector<int> shape) { return full(std::move(shape), 1.0); }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor identity(int n);

  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return data_.size(); }
  const std::vector<int>& shape() const { return shape_; }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Rank-2 element access.
  double& at(int r, int c) { return data_[static_cast<std::size_t>(r) * dim(1) + c]; }
  double at(int r, int c) const { return data_[static_cast<std::size_t>(r) * dim(1) + c]; }

  bool all_finite() const;
  double max_abs() const;
  std::string shape_str() const;

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

// Plain (non-differentiating) helpers shared by oracles and inference paths.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

// C(n x m) += A(n x k) * B(k x m); nt/tn variants take B or A transposed.
void gemm_nn_acc(const double* a, const double* b, double* c, int n, int k, int m);
void gemm_nt_acc(const double* a, const double* b, double* c, int n, int k, int m);
void gemm_tn_acc(const double* a, const double* b, double* c, int n, int k, int m);

}  // namespace salvit::nc
