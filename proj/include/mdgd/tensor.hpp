#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace mdgd {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Dense row-major array of doubles. Plain value type: copies are deep.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor vector(std::initializer_list<double> values);
  // Nested initializer for small literal matrices in tests and fixtures.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  double item() const;
  Tensor reshaped(Shape shape) const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

enum class ReduceKind { kSum, kMean, kFrobenius };
enum class ElementwiseOp { kAdd, kSub, kMul, kSign, kAbs, kScale };

// Product of two matrices, accumulated left to right over the inner index.
Tensor matmul(const Tensor& a, const Tensor& b);
// a^T b and a b^T without materializing the transpose.
Tensor matmul_tn(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor softmax_rows(const Tensor& a);

// Reduce over the given axes (empty list = all axes). Reduced axes are
// dropped; a full reduction yields shape {1}.
Tensor reduce(const Tensor& a, ReduceKind kind, std::vector<std::size_t> axes = {});

// Binary ops read both operands; unary ops (sign, abs) ignore b; scale
// multiplies a by the single element of b.
Tensor elementwise(const Tensor& a, const Tensor& b, ElementwiseOp op);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor sign(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor scale(const Tensor& a, double c);

double sign_of(double x);
double sum(const Tensor& a);
double frobenius(const Tensor& a);
double dot(std::span<const double> a, std::span<const double> b);

void require_same_shape(const Tensor& a, const Tensor& b, const char* what);
bool all_finite(const Tensor& a);

}  // namespace mdgd
