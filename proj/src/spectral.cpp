#include "mdgd/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mdgd/errors.hpp"

namespace mdgd {

namespace {

double max_off_diagonal(const std::vector<double>& a, std::size_t n) {
  double m = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) m = std::max(m, std::fabs(a[i * n + j]));
  return m;
}

}  // namespace

std::vector<double> symmetric_eigenvalues(const Tensor& a, const JacobiOptions& opts) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    throw DimensionError("symmetric_eigenvalues: expected square matrix, got " +
                         shape_string(a.shape()));
  }
  const std::size_t n = a.dim(0);
  std::vector<double> m = a.values();
  const double threshold = opts.tolerance * frobenius(a);

  int sweep = 0;
  for (;; ++sweep) {
    const double off = max_off_diagonal(m, n);
    if (off <= threshold) break;
    if (sweep >= opts.max_sweeps) {
      std::ostringstream os;
      os << "Jacobi eigensolver did not converge after " << opts.max_sweeps
         << " sweeps; max off-diagonal residual " << off << " > " << threshold;
      throw NumericError(os.str());
    }
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = m[p * n + q];
        if (apq == 0.0) continue;
        const double app = m[p * n + p];
        const double aqq = m[q * n + q];
        // Rotation angle that annihilates (p, q); the smaller root of
        // t^2 + 2 theta t - 1 = 0 keeps the rotation stable.
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = m[k * n + p];
          const double akq = m[k * n + q];
          m[k * n + p] = c * akp - s * akq;
          m[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = m[p * n + k];
          const double aqk = m[q * n + k];
          m[p * n + k] = c * apk - s * aqk;
          m[q * n + k] = s * apk + c * aqk;
        }
        m[p * n + q] = 0.0;
        m[q * n + p] = 0.0;
      }
    }
  }
  std::vector<double> eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = m[i * n + i];
  return eig;
}

Spectrum singular_values(const Tensor& z, const JacobiOptions& opts) {
  if (z.rank() != 2 || z.dim(0) == 0 || z.dim(1) == 0) {
    throw DimensionError("singular_values: expected non-empty matrix, got " +
                         shape_string(z.shape()));
  }
  if (!all_finite(z)) throw NumericError("singular_values: non-finite entry");
  const std::size_t n = z.dim(0), d = z.dim(1);
  // Columns of a stored as rows of cols: k vectors of length len.
  const Tensor a = d <= n ? transpose(z) : z;
  const std::size_t k = a.dim(0), len = a.dim(1);
  std::vector<double> cols = a.values();
  auto row = [&](std::size_t i) { return cols.data() + i * len; };
  // Columns below this norm are numerically zero and left alone.
  const double floor = 1e-15 * frobenius(z);

  for (int sweep = 0;; ++sweep) {
    double worst = 0.0;
    for (std::size_t p = 0; p + 1 < k; ++p) {
      for (std::size_t q = p + 1; q < k; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        const double* x = row(p);
        const double* y = row(q);
        for (std::size_t i = 0; i < len; ++i) {
          alpha += x[i] * x[i];
          beta += y[i] * y[i];
          gamma += x[i] * y[i];
        }
        if (std::sqrt(std::min(alpha, beta)) <= floor || gamma == 0.0) continue;
        const double off = std::fabs(gamma) / std::sqrt(alpha * beta);
        if (off <= opts.tolerance) continue;
        worst = std::max(worst, off);
        if (sweep >= opts.max_sweeps) continue;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::fabs(zeta) + std::sqrt(zeta * zeta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = c * t;
        double* xp = row(p);
        double* yq = row(q);
        for (std::size_t i = 0; i < len; ++i) {
          const double xi = xp[i], yi = yq[i];
          xp[i] = c * xi - s * yi;
          yq[i] = s * xi + c * yi;
        }
      }
    }
    if (worst == 0.0) break;
    if (sweep >= opts.max_sweeps) {
      std::ostringstream os;
      os << "one-sided Jacobi did not converge after " << opts.max_sweeps
         << " sweeps; max column cosine " << worst << " > " << opts.tolerance;
      throw NumericError(os.str());
    }
  }

  Spectrum s{.sigma = {}, .rows = n, .cols = d};
  s.sigma.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < len; ++j) ss += row(i)[j] * row(i)[j];
    s.sigma.push_back(std::sqrt(ss));
  }
  std::sort(s.sigma.begin(), s.sigma.end(), std::greater<>());
  return s;
}

double effective_rank(const Spectrum& s) {
  double total = 0.0;
  for (double v : s.sigma) total += v;
  if (!(total > 0.0)) throw DomainError("effective_rank: all singular values are zero");
  double entropy = 0.0;
  for (double v : s.sigma) {
    if (v <= 0.0) continue;  // 0 log 0 = 0
    const double p = v / total;
    entropy -= p * std::log(p);
  }
  return std::exp(entropy);
}

double effective_rank(const Tensor& z) { return effective_rank(singular_values(z)); }

}  // namespace mdgd
