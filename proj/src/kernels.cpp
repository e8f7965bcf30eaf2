#include "muda/kernels.hpp"

#include <limits>

#include "muda/error.hpp"

namespace muda::kernels {
namespace {

// Below this many multiply-adds the thread fork costs more than it saves.
constexpr std::size_t kParallelWork = 1u << 15;

template <bool Parallel>
Matrix matmul_impl(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw Error(ErrorCode::kShapeMismatch, "matmul inner dimension");
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(a.rows());
  const std::size_t m = a.cols(), p = b.cols();
  Matrix out(a.rows(), p);
  const bool go_parallel = Parallel && a.rows() * m * p >= kParallelWork;
#pragma omp parallel for schedule(static) if (go_parallel)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    double* o = out.row(i).data();
    for (std::size_t k = 0; k < m; ++k) {
      const double aik = a(i, k);
      const double* brow = b.row(k).data();
      for (std::size_t j = 0; j < p; ++j) o[j] += aik * brow[j];
    }
  }
  return out;
}

template <bool Parallel>
Matrix matmul_tn_impl(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw Error(ErrorCode::kShapeMismatch, "matmul_tn row counts");
  const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(a.cols());
  const std::size_t n = a.rows(), q = b.cols();
  Matrix out(a.cols(), q);
  const bool go_parallel = Parallel && n * a.cols() * q >= kParallelWork;
#pragma omp parallel for schedule(static) if (go_parallel)
  for (std::ptrdiff_t i = 0; i < p; ++i) {
    double* o = out.row(i).data();
    for (std::size_t r = 0; r < n; ++r) {
      const double ari = a(r, i);
      const double* brow = b.row(r).data();
      for (std::size_t j = 0; j < q; ++j) o[j] += ari * brow[j];
    }
  }
  return out;
}

template <bool Parallel>
Matrix matmul_nt_impl(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw Error(ErrorCode::kShapeMismatch, "matmul_nt inner dimension");
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(a.rows());
  const std::size_t m = a.cols(), p = b.rows();
  Matrix out(a.rows(), p);
  const bool go_parallel = Parallel && a.rows() * m * p >= kParallelWork;
#pragma omp parallel for schedule(static) if (go_parallel)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const double* arow = a.row(i).data();
    for (std::size_t j = 0; j < p; ++j) {
      const double* brow = b.row(j).data();
      double s = 0.0;
      for (std::size_t k = 0; k < m; ++k) s += arow[k] * brow[k];
      out(i, j) = s;
    }
  }
  return out;
}

template <bool Parallel>
std::vector<std::size_t> nearest_centroid_impl(const Matrix& points, const Matrix& centroids,
                                               std::vector<double>& sq_dist) {
  if (points.cols() != centroids.cols()) {
    throw Error(ErrorCode::kShapeMismatch, "nearest_centroid dimension");
  }
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(points.rows());
  const std::size_t k = centroids.rows(), d = points.cols();
  std::vector<std::size_t> ids(points.rows(), 0);
  sq_dist.assign(points.rows(), 0.0);
  const bool go_parallel = Parallel && points.rows() * k * d >= kParallelWork;
#pragma omp parallel for schedule(static) if (go_parallel)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_id = 0;
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = points(i, j) - centroids(c, j);
        s += diff * diff;
      }
      if (s < best) {
        best = s;
        best_id = c;
      }
    }
    ids[i] = best_id;
    sq_dist[i] = best;
  }
  return ids;
}

}  // namespace

namespace serial {
Matrix matmul(const Matrix& a, const Matrix& b) { return matmul_impl<false>(a, b); }
Matrix matmul_tn(const Matrix& a, const Matrix& b) { return matmul_tn_impl<false>(a, b); }
Matrix matmul_nt(const Matrix& a, const Matrix& b) { return matmul_nt_impl<false>(a, b); }
Matrix gram(const Matrix& x) { return matmul_tn_impl<false>(x, x); }
std::vector<std::size_t> nearest_centroid(const Matrix& points, const Matrix& centroids,
                                          std::vector<double>& sq_dist) {
  return nearest_centroid_impl<false>(points, centroids, sq_dist);
}
}  // namespace serial

Matrix matmul(const Matrix& a, const Matrix& b) { return matmul_impl<true>(a, b); }
Matrix matmul_tn(const Matrix& a, const Matrix& b) { return matmul_tn_impl<true>(a, b); }
Matrix matmul_nt(const Matrix& a, const Matrix& b) { return matmul_nt_impl<true>(a, b); }
Matrix gram(const Matrix& x) { return matmul_tn_impl<true>(x, x); }
std::vector<std::size_t> nearest_centroid(const Matrix& points, const Matrix& centroids,
                                          std::vector<double>& sq_dist) {
  return nearest_centroid_impl<true>(points, centroids, sq_dist);
}

}  // namespace muda::kernels
