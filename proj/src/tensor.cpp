#include "mdgd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mdgd/errors.hpp"

namespace mdgd {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("tensor shape " + shape_string(shape_) + " holds " +
                         std::to_string(shape_numel(shape_)) + " values, got " +
                         std::to_string(data_.size()));
  }
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_string(shape_));
  }
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

namespace {

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + ": expected a matrix, got " +
                         shape_string(t.shape()));
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_string(a.shape()) +
                         " x " + shape_string(b.shape()));
  }
  Tensor out({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  // i-p-j loop: each output element still accumulates p = 0..k-1 in order.
  for (std::size_t i = 0; i < m; ++i) {
    double* row = po + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  const std::size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul_tn: leading dimensions differ, " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
  Tensor out({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = pa + p * m;
    const double* brow = pb + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* row = po + i * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: trailing dimensions differ, " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a.data().data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b.data().data() + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      out.at(i, j) = acc;
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  Tensor out({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) out.at(j, i) = a.at(i, j);
  return out;
}

Tensor softmax_rows(const Tensor& a) {
  require_matrix(a, "softmax_rows");
  Tensor out = a;
  const std::size_t n = a.dim(1);
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    double* row = out.data().data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - mx);
      total += row[j];
    }
    for (std::size_t j = 0; j < n; ++j) row[j] /= total;
  }
  return out;
}

Tensor reduce(const Tensor& a, ReduceKind kind, std::vector<std::size_t> axes) {
  if (axes.empty()) {
    for (std::size_t i = 0; i < a.rank(); ++i) axes.push_back(i);
  }
  std::vector<bool> reduced(a.rank(), false);
  for (auto ax : axes) {
    if (ax >= a.rank()) {
      throw DimensionError("reduce: axis " + std::to_string(ax) + " invalid for shape " +
                           shape_string(a.shape()));
    }
    reduced[ax] = true;
  }
  Shape out_shape;
  for (std::size_t i = 0; i < a.rank(); ++i)
    if (!reduced[i]) out_shape.push_back(a.dim(i));
  if (out_shape.empty()) out_shape.push_back(1);

  Tensor acc(out_shape);
  std::size_t count = 1;
  for (std::size_t i = 0; i < a.rank(); ++i)
    if (reduced[i]) count *= a.dim(i);

  // Walk the source in row-major order; each output slot sees its inputs in
  // increasing flat index.
  std::vector<std::size_t> idx(a.rank(), 0);
  for (std::size_t flat = 0; flat < a.size(); ++flat) {
    std::size_t out_flat = 0;
    for (std::size_t i = 0; i < a.rank(); ++i)
      if (!reduced[i]) out_flat = out_flat * a.dim(i) + idx[i];
    const double v = a[flat];
    acc[out_flat] += kind == ReduceKind::kFrobenius ? v * v : v;
    for (std::size_t i = a.rank(); i-- > 0;) {
      if (++idx[i] < a.dim(i)) break;
      idx[i] = 0;
    }
  }
  for (auto& v : acc.values()) {
    if (kind == ReduceKind::kMean) v = count ? v / static_cast<double>(count) : 0.0;
    if (kind == ReduceKind::kFrobenius) v = std::sqrt(v);
  }
  return acc;
}

double sign_of(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

Tensor elementwise(const Tensor& a, const Tensor& b, ElementwiseOp op) {
  Tensor out = a;
  auto& o = out.values();
  switch (op) {
    case ElementwiseOp::kAdd:
    case ElementwiseOp::kSub:
    case ElementwiseOp::kMul: {
      require_same_shape(a, b, "elementwise");
      const auto& bv = b.values();
      for (std::size_t i = 0; i < o.size(); ++i) {
        if (op == ElementwiseOp::kAdd) o[i] += bv[i];
        else if (op == ElementwiseOp::kSub) o[i] -= bv[i];
        else o[i] *= bv[i];
      }
      break;
    }
    case ElementwiseOp::kSign:
      for (auto& v : o) v = sign_of(v);
      break;
    case ElementwiseOp::kAbs:
      for (auto& v : o) v = std::fabs(v);
      break;
    case ElementwiseOp::kScale: {
      if (b.size() != 1) {
        throw DimensionError("elementwise scale: factor must be a scalar, got " +
                             shape_string(b.shape()));
      }
      const double c = b[0];
      for (auto& v : o) v *= c;
      break;
    }
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(a, b, ElementwiseOp::kAdd); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(a, b, ElementwiseOp::kSub); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(a, b, ElementwiseOp::kMul); }
Tensor sign(const Tensor& a) { return elementwise(a, a, ElementwiseOp::kSign); }
Tensor abs(const Tensor& a) { return elementwise(a, a, ElementwiseOp::kAbs); }
Tensor scale(const Tensor& a, double c) {
  return elementwise(a, Tensor::scalar(c), ElementwiseOp::kScale);
}

double sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return s;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("dot: lengths " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double frobenius(const Tensor& a) { return std::sqrt(dot(a.data(), a.data())); }

bool all_finite(const Tensor& a) {
  return std::all_of(a.values().begin(), a.values().end(),
                     [](double v) { return std::isfinite(v); });
}

}  // namespace mdgd
