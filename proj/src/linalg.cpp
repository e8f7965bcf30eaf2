#include "muda/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "muda/error.hpp"

namespace muda::linalg {
namespace {

double off_diagonal_norm(const Matrix& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      if (i != j) s += a(i, j) * a(i, j);
  return std::sqrt(s);
}

// A <- J^T A J and V <- V J for the rotation zeroing A(p, q).
void rotate(Matrix& a, Matrix& v, std::size_t p, std::size_t q) {
  const double apq = a(p, q);
  if (apq == 0.0) return;
  const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
  double t;
  if (std::abs(theta) > 1e150) {
    t = 0.5 / theta;
  } else {
    t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(1.0 + theta * theta));
  }
  const double c = 1.0 / std::sqrt(1.0 + t * t);
  const double s = t * c;
  const std::size_t n = a.rows();

  for (std::size_t k = 0; k < n; ++k) {
    const double akp = a(k, p), akq = a(k, q);
    a(k, p) = c * akp - s * akq;
    a(k, q) = s * akp + c * akq;
  }
  for (std::size_t k = 0; k < n; ++k) {
    const double apk = a(p, k), aqk = a(q, k);
    a(p, k) = c * apk - s * aqk;
    a(q, k) = s * apk + c * aqk;
  }
  a(p, q) = 0.0;
  a(q, p) = 0.0;

  for (std::size_t k = 0; k < n; ++k) {
    const double vkp = v(k, p), vkq = v(k, q);
    v(k, p) = c * vkp - s * vkq;
    v(k, q) = s * vkp + c * vkq;
  }
}

}  // namespace

double frobenius_norm(const Matrix& m) {
  double s = 0.0;
  for (double x : m.data()) {
    if (!std::isfinite(x)) throw Error(ErrorCode::kNonFinite, "frobenius_norm input");
    s += x * x;
  }
  return std::sqrt(s);
}

EigenDecomposition sym_eig(const Matrix& input, const JacobiOptions& options) {
  if (input.rows() != input.cols() || input.rows() == 0) {
    throw Error(ErrorCode::kNonSquare, "sym_eig expects a non-empty square matrix");
  }
  if (!input.all_finite()) throw Error(ErrorCode::kNonFinite, "sym_eig input");
  const std::size_t n = input.rows();
  const double norm = frobenius_norm(input);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(input(i, j) - input(j, i)) > 1e-10 * std::max(norm, 1e-300)) {
        throw Error(ErrorCode::kNonSymmetric, "sym_eig input is not symmetric");
      }

  Matrix a = input;
  // Exact symmetrization so rotations see a symmetric matrix.
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) a(i, j) = a(j, i) = 0.5 * (a(i, j) + a(j, i));
  Matrix v = Matrix::identity(n);

  const double threshold = options.relative_tolerance * norm;
  int sweep = 0;
  while (off_diagonal_norm(a) > threshold) {
    if (sweep++ >= options.max_sweeps) {
      throw Error(ErrorCode::kNoConvergence, "Jacobi sweep budget exhausted");
    }
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) rotate(a, v, p, q);
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });

  EigenDecomposition out;
  out.eigenvalues.resize(n);
  out.eigenvectors = Matrix(n, n);
  for (std::size_t c = 0; c < n; ++c) {
    out.eigenvalues[c] = a(order[c], order[c]);
    for (std::size_t r = 0; r < n; ++r) out.eigenvectors(r, c) = v(r, order[c]);
  }
  return out;
}

double effective_rank(std::span<const double> eigenvalues) {
  double total = 0.0;
  for (double l : eigenvalues) {
    if (!std::isfinite(l)) throw Error(ErrorCode::kNonFinite, "effective_rank input");
    if (l < -1e-12) throw Error(ErrorCode::kInvalidArgument, "negative eigenvalue below -1e-12");
    if (l > 0.0) total += l;
  }
  if (!(total > 0.0)) throw Error(ErrorCode::kAllZero, "no positive eigenvalue");
  double entropy = 0.0;
  for (double l : eigenvalues) {
    if (l <= 0.0) continue;
    const double p = l / total;
    entropy -= p * std::log(p);
  }
  return std::exp(entropy);
}

std::size_t subspace_dimension(std::span<const double> eigenvalues) {
  const double er = effective_rank(eigenvalues);
  const auto k = static_cast<std::size_t>(std::ceil(er - 1e-9));
  return std::clamp<std::size_t>(k, 1, eigenvalues.size());
}

Matrix top_k_projector(const EigenDecomposition& decomp, std::size_t k) {
  const std::size_t n = decomp.eigenvectors.rows();
  if (k < 1 || k > n) throw Error(ErrorCode::kKOutOfRange, "k must lie in [1, C]");
  Matrix p(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < k; ++c)
        s += decomp.eigenvectors(i, c) * decomp.eigenvectors(j, c);
      p(i, j) = s;
    }
  return p;
}

}  // namespace muda::linalg
