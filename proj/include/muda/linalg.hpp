#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "muda/matrix.hpp"

namespace muda::linalg {

struct EigenDecomposition {
  std::vector<double> eigenvalues;  // non-increasing
  Matrix eigenvectors;              // column i pairs with eigenvalues[i]
};

struct JacobiOptions {
  double relative_tolerance = 1e-12;  // off-diagonal Frobenius norm vs ||A||_F
  int max_sweeps = 100;
};

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Throws NonSquare, NonSymmetric (beyond 1e-10 relative), NonFinite, or
/// NoConvergence when the sweep budget runs out. Eigenvectors belonging to a
/// repeated eigenvalue are an arbitrary orthonormal basis of that eigenspace.
EigenDecomposition sym_eig(const Matrix& a, const JacobiOptions& options = {});

double frobenius_norm(const Matrix& m);

/// exp of the Shannon entropy of p_i = lambda_i / sum(lambda). Entries in
/// [-1e-12, 0) are treated as zero; anything more negative is rejected.
double effective_rank(std::span<const double> eigenvalues);

/// Subspace dimension used by dimensional alignment: ceil(effective rank),
/// clamped to [1, C]. A 1e-9 slack absorbs round-off just above an integer.
std::size_t subspace_dimension(std::span<const double> eigenvalues);

/// U_k U_k^T for the leading k eigenvectors.
Matrix top_k_projector(const EigenDecomposition& decomp, std::size_t k);

}  // namespace muda::linalg
