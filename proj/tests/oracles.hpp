#pragma once

// Independent reference computations used only by the tests. Nothing here
// calls into the library's spectral or autograd code paths.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include "mdgd/rng.hpp"
#include "mdgd/tensor.hpp"

namespace oracle {

using Matrix = std::vector<std::vector<double>>;

inline Matrix to_matrix(const mdgd::Tensor& t) {
  Matrix m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t.at(i, j);
  return m;
}

// Gram matrix of the smaller side, naive triple loop.
inline Matrix small_gram(const Matrix& z) {
  const std::size_t n = z.size(), d = z[0].size();
  const bool rows = n <= d;
  const std::size_t k = rows ? n : d;
  Matrix g(k, std::vector<double>(k, 0.0));
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0.0;
      if (rows) {
        for (std::size_t c = 0; c < d; ++c) s += z[i][c] * z[j][c];
      } else {
        for (std::size_t r = 0; r < n; ++r) s += z[r][i] * z[r][j];
      }
      g[i][j] = s;
    }
  return g;
}

// Eigenvalues of a symmetric matrix of order <= 3 from the roots of its
// characteristic polynomial (closed-form trigonometric solution).
inline std::vector<double> char_poly_eigenvalues(const Matrix& a) {
  const std::size_t n = a.size();
  if (n == 1) return {a[0][0]};
  if (n == 2) {
    const double tr = a[0][0] + a[1][1];
    const double det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    const double disc = std::sqrt(std::max(0.0, tr * tr / 4.0 - det));
    return {tr / 2.0 + disc, tr / 2.0 - disc};
  }
  // lambda^3 - c2 lambda^2 + c1 lambda - c0 = 0
  const double c2 = a[0][0] + a[1][1] + a[2][2];
  const double c1 = a[0][0] * a[1][1] + a[0][0] * a[2][2] + a[1][1] * a[2][2] - a[0][1] * a[1][0] -
                    a[0][2] * a[2][0] - a[1][2] * a[2][1];
  const double c0 = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) -
                    a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0]) +
                    a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
  // Depressed cubic via lambda = t + c2/3.
  const double shift = c2 / 3.0;
  const double p = c1 - c2 * c2 / 3.0;
  const double q = -2.0 * c2 * c2 * c2 / 27.0 + c2 * c1 / 3.0 - c0;
  if (std::fabs(p) < 1e-300) return {shift, shift, shift};
  const double m = 2.0 * std::sqrt(-p / 3.0);
  const double arg = std::clamp(3.0 * q / (p * m), -1.0, 1.0);
  const double theta = std::acos(arg) / 3.0;
  std::vector<double> out;
  for (int k = 0; k < 3; ++k) out.push_back(shift + m * std::cos(theta - 2.0 * std::numbers::pi * k / 3.0));
  return out;
}

// Power iteration with Hotelling deflation.
inline std::vector<double> power_eigenvalues(Matrix a, int max_iter = 200000) {
  const std::size_t n = a.size();
  std::vector<double> eig;
  double scale = 0.0;
  for (const auto& row : a)
    for (double v : row) scale = std::max(scale, std::fabs(v));
  for (std::size_t k = 0; k < n; ++k) {
    std::vector<double> v(n), w(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = 1.0 + 0.1 * static_cast<double>((i * 7 + k * 3) % 11);
    double lambda = 0.0;
    for (int it = 0; it < max_iter; ++it) {
      double norm = 0.0;
      for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
      if (norm == 0.0) break;
      for (double& x : v) x /= norm;
      for (std::size_t i = 0; i < n; ++i) {
        w[i] = 0.0;
        for (std::size_t j = 0; j < n; ++j) w[i] += a[i][j] * v[j];
      }
      double rq = 0.0;
      for (std::size_t i = 0; i < n; ++i) rq += v[i] * w[i];
      double resid = 0.0;
      for (std::size_t i = 0; i < n; ++i) resid += (w[i] - rq * v[i]) * (w[i] - rq * v[i]);
      lambda = rq;
      v = w;
      if (std::sqrt(resid) <= 1e-14 * std::max(scale, 1e-300)) break;
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm > 0.0)
      for (double& x : v) x /= norm;
    eig.push_back(lambda);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) a[i][j] -= lambda * v[i] * v[j];
  }
  return eig;
}

// Singular values by brute force: closed form for a Gram of order <= 3,
// power iteration otherwise.
inline std::vector<double> singular_values(const mdgd::Tensor& z) {
  const Matrix g = small_gram(to_matrix(z));
  std::vector<double> eig = g.size() <= 3 ? char_poly_eigenvalues(g) : power_eigenvalues(g);
  std::vector<double> s;
  for (double e : eig) s.push_back(std::sqrt(std::max(0.0, e)));
  std::sort(s.begin(), s.end(), std::greater<>());
  return s;
}

// Direct evaluation of exp(-sum p log p) for p = sigma / sum(sigma).
inline double erank_from_sigma(const std::vector<double>& sigma) {
  double total = 0.0;
  for (double s : sigma) total += s;
  double h = 0.0;
  for (double s : sigma)
    if (s > 0.0) h -= (s / total) * std::log(s / total);
  return std::exp(h);
}

inline mdgd::Tensor random_matrix(mdgd::Rng& rng, std::size_t n, std::size_t d) {
  mdgd::Tensor t({n, d});
  for (auto& v : t.values()) v = rng.normal();
  return t;
}

}  // namespace oracle
