#include <doctest.h>

#include <cmath>

#include "mdgd/errors.hpp"
#include "mdgd/rng.hpp"
#include "mdgd/spectral.hpp"
#include "oracles.hpp"

using namespace mdgd;

namespace {

Tensor identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

}  // namespace

TEST_CASE("singular values of small fixtures") {
  CHECK(singular_values(identity(3)).sigma == std::vector<double>{1, 1, 1});
  const auto rank1 = singular_values(Tensor::matrix({{3, 0}, {4, 0}})).sigma;
  CHECK(rank1[0] == doctest::Approx(5.0).epsilon(1e-15));
  CHECK(rank1[1] == 0.0);
  const auto diag = singular_values(Tensor::matrix({{2, 0, 0}, {0, 1, 0}, {0, 0, 1}})).sigma;
  CHECK(diag == std::vector<double>{2, 1, 1});
}

TEST_CASE("effective rank fixtures") {
  for (std::size_t n : {2u, 3u, 4u, 8u}) CHECK(std::fabs(effective_rank(identity(n)) - n) <= 1e-10);
  CHECK(std::fabs(effective_rank(Tensor::matrix({{1, 2, 3}, {2, 4, 6}})) - 1.0) <= 1e-10);
  // p = (1/2, 1/4, 1/4): exp(entropy) = exp(1.5 ln 2) = 2 sqrt 2.
  const double expected = oracle::erank_from_sigma({2, 1, 1});
  CHECK(std::fabs(expected - 2.0 * std::sqrt(2.0)) <= 1e-15);
  CHECK(std::fabs(effective_rank(Tensor::matrix({{2, 0, 0}, {0, 1, 0}, {0, 0, 1}})) - expected) <= 1e-9);
  CHECK_THROWS_AS(effective_rank(Tensor({3, 2})), DomainError);
}

TEST_CASE("effective rank properties") {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(8), d = 1 + rng.below(8);
    const Tensor z = oracle::random_matrix(rng, n, d);
    const double e = effective_rank(z);
    CHECK(e >= 1.0 - 1e-12);
    CHECK(e <= static_cast<double>(std::min(n, d)) + 1e-12);
    CHECK(std::fabs(effective_rank(scale(z, -3.7)) - e) <= 1e-10);

    // Reverse the row order.
    Tensor permuted({n, d});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) permuted.at(i, j) = z.at(n - 1 - i, j);
    CHECK(std::fabs(effective_rank(permuted) - e) <= 1e-10);
  }
}

TEST_CASE("orthogonal matrices have unit spectrum") {
  const double c = std::cos(0.7), s = std::sin(0.7);
  const Tensor rot = Tensor::matrix({{c, -s, 0}, {s, c, 0}, {0, 0, 1}});
  for (double v : singular_values(rot).sigma) CHECK(std::fabs(v - 1.0) <= 1e-12);
}

TEST_CASE("spectrum matches brute-force oracles and preserves energy") {
  Rng rng(23);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(8), d = 1 + rng.below(8);
    const Tensor z = oracle::random_matrix(rng, n, d);
    const auto got = singular_values(z).sigma;
    const auto want = oracle::singular_values(z);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::fabs(got[i] - want[i]) <= 1e-8);
    double energy = 0.0;
    for (double v : got) energy += v * v;
    const double fro2 = frobenius(z) * frobenius(z);
    CHECK(std::fabs(energy - fro2) <= 1e-9 * fro2);
    for (std::size_t i = 1; i < got.size(); ++i) CHECK(got[i - 1] >= got[i]);
  }
}

TEST_CASE("jacobi reports non-convergence") {
  Rng rng(1);
  Tensor a = oracle::random_matrix(rng, 5, 5);
  a = add(a, transpose(a));
  CHECK_THROWS_AS(symmetric_eigenvalues(a, JacobiOptions{.tolerance = 1e-12, .max_sweeps = 0}),
                  NumericError);
  CHECK_THROWS_AS(singular_values(Tensor({0, 3})), DimensionError);
}

TEST_CASE("one-sided jacobi reports non-convergence") {
  Rng rng(2);
  const Tensor a = oracle::random_matrix(rng, 6, 4);
  CHECK_THROWS_AS(singular_values(a, JacobiOptions{.tolerance = 1e-12, .max_sweeps = 0}), NumericError);
}

TEST_CASE("small singular values keep relative accuracy") {
  // diag(1, 1e-9) rotated by an orthogonal matrix: the Gram route would lose
  // the small value entirely.
  const double c = std::cos(0.3), s = std::sin(0.3);
  const Tensor q = Tensor::matrix({{c, -s}, {s, c}});
  const Tensor z = matmul(q, Tensor::matrix({{1.0, 0.0}, {0.0, 1e-9}}));
  const Spectrum sp = singular_values(z);
  CHECK(sp.sigma[0] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(sp.sigma[1] == doctest::Approx(1e-9).epsilon(1e-6));
}
