#pragma once

#include <cstddef>
#include <vector>

#include "muda/matrix.hpp"

// Dense kernels used by every forward/backward pass and by the metrics.
//
// Two implementations are kept side by side: `serial::` is the plain
// reference, the unqualified versions split the outermost loop over OpenMP
// threads. Each output element is accumulated in the same order in both, so
// the parallel kernels are bit-identical to the serial ones for any thread
// count. The tests and bench_kernels rely on that.
namespace muda::kernels {

namespace serial {

Matrix matmul(const Matrix& a, const Matrix& b);       // a * b
Matrix matmul_tn(const Matrix& a, const Matrix& b);    // a^T * b
Matrix matmul_nt(const Matrix& a, const Matrix& b);    // a * b^T
Matrix gram(const Matrix& x);                          // x^T * x

// Index of the nearest centroid (squared Euclidean, lowest index on ties)
// per row of `points`; distances written to `sq_dist`.
std::vector<std::size_t> nearest_centroid(const Matrix& points, const Matrix& centroids,
                                          std::vector<double>& sq_dist);

}  // namespace serial

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Matrix matmul_nt(const Matrix& a, const Matrix& b);
Matrix gram(const Matrix& x);
std::vector<std::size_t> nearest_centroid(const Matrix& points, const Matrix& centroids,
                                          std::vector<double>& sq_dist);

}  // namespace muda::kernels
