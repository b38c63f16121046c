#pragma once

#include <cstddef>
#include <vector>

#include "mdgd/tensor.hpp"

namespace mdgd {

struct Spectrum {
  std::vector<double> sigma;  // descending, non-negative
  std::size_t rows = 0;
  std::size_t cols = 0;
};

struct JacobiOptions {
  double tolerance = 1e-12;  // relative off-diagonal / off-orthogonality bound
  int max_sweeps = 100;
};

// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, unsorted.
// Throws NumericError if the off-diagonal mass has not dropped below
// tolerance * ||A||_F after max_sweeps sweeps.
std::vector<double> symmetric_eigenvalues(const Tensor& a, const JacobiOptions& opts = {});

// Singular values by one-sided Jacobi rotations on the columns of z (or z^T,
// whichever has fewer). Unlike eigenvalues of the Gram matrix this keeps small
// singular values accurate relative to themselves, which the entropy in
// effective_rank is sensitive to. Throws NumericError when some column pair is
// still more than tolerance from orthogonal after max_sweeps sweeps.
Spectrum singular_values(const Tensor& z, const JacobiOptions& opts = {});

// exp of the Shannon entropy (natural log) of sigma_i / sum_j sigma_j.
double effective_rank(const Spectrum& s);
double effective_rank(const Tensor& z);

}  // namespace mdgd
