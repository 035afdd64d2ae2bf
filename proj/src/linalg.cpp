#include "nspexit/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>

#include "nspexit/error.hpp"

namespace nspexit {

namespace {

void require_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw Error(ErrorKind::kNonFinite, std::string(what) + " contains a non-finite entry");
    }
  }
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Thin Householder QR of an N x C matrix (N >= C). Q is N x C with
// orthonormal columns, R is C x C upper triangular, W = Q R.
struct ThinQr {
  std::vector<double> q;  // column-major, N x C
  std::vector<double> r;  // row-major, C x C
};

ThinQr householder_qr(const RealMatrix& w) {
  const std::size_t n = w.rows();
  const std::size_t c = w.cols();

  // Column-major working copy; reflectors are applied in place.
  std::vector<double> a(n * c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) a[j * n + i] = w(i, j);

  std::vector<std::vector<double>> reflectors(c);
  ThinQr out;
  out.r.assign(c * c, 0.0);

  for (std::size_t k = 0; k < c; ++k) {
    double* col = a.data() + k * n;
    double norm = 0.0;
    for (std::size_t i = k; i < n; ++i) norm = std::hypot(norm, col[i]);

    std::vector<double> v(n - k, 0.0);
    double diag = 0.0;
    if (norm > 0.0) {
      diag = col[k] > 0.0 ? -norm : norm;
      for (std::size_t i = k; i < n; ++i) v[i - k] = col[i];
      v[0] -= diag;
      double vnorm = 0.0;
      for (double e : v) vnorm = std::hypot(vnorm, e);
      if (vnorm > 0.0) {
        for (double& e : v) e /= vnorm;
      } else {
        std::fill(v.begin(), v.end(), 0.0);
      }
      // A[k:, k:] -= 2 v (v^T A[k:, k:])
      for (std::size_t j = k; j < c; ++j) {
        double* cj = a.data() + j * n + k;
        double s = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) s += v[i] * cj[i];
        for (std::size_t i = 0; i < v.size(); ++i) cj[i] -= 2.0 * s * v[i];
      }
    }
    for (std::size_t j = k; j < c; ++j) out.r[k * c + j] = a[j * n + k];
    out.r[k * c + k] = diag;
    reflectors[k] = std::move(v);
  }

  // Q = H_0 H_1 ... H_{C-1} applied to the first C columns of the identity.
  out.q.assign(n * c, 0.0);
  for (std::size_t j = 0; j < c; ++j) out.q[j * n + j] = 1.0;
  for (std::size_t kk = c; kk-- > 0;) {
    const auto& v = reflectors[kk];
    for (std::size_t j = 0; j < c; ++j) {
      double* qj = out.q.data() + j * n + kk;
      double s = 0.0;
      for (std::size_t i = 0; i < v.size(); ++i) s += v[i] * qj[i];
      if (s == 0.0) continue;
      for (std::size_t i = 0; i < v.size(); ++i) qj[i] -= 2.0 * s * v[i];
    }
  }
  return out;
}

void check_full_rank(const ThinQr& qr, std::size_t c, double rank_tolerance) {
  double largest = 0.0;
  double smallest = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < c; ++k) {
    const double d = std::abs(qr.r[k * c + k]);
    largest = std::max(largest, d);
    smallest = std::min(smallest, d);
  }
  if (!(largest > 0.0) || smallest < rank_tolerance * largest) {
    throw Error(ErrorKind::kRankDeficient,
                "classifier weight matrix is not of full column rank (min |R_ii| = " +
                    std::to_string(smallest) + ", max |R_ii| = " + std::to_string(largest) + ")");
  }
}

void check_shapes(const RealMatrix& weight, const RealVector& bias, double rank_tolerance) {
  if (weight.rows() == 0 || weight.cols() == 0) {
    throw Error(ErrorKind::kDimensionMismatch, "weight matrix must be non-empty");
  }
  if (bias.dim() != weight.cols()) {
    throw Error(ErrorKind::kDimensionMismatch,
                "bias has dim " + std::to_string(bias.dim()) + ", expected " +
                    std::to_string(weight.cols()));
  }
  if (!(rank_tolerance > 0.0 && rank_tolerance < 1.0)) {
    throw Error(ErrorKind::kInvalidArgument, "rank_tolerance must lie in (0, 1)");
  }
  if (weight.rows() < weight.cols()) {
    throw Error(ErrorKind::kRankDeficient, "weight matrix has fewer rows than columns");
  }
}

// o = Q R^{-T} b: the unique solution of W^T o = b inside the column space.
std::vector<double> min_norm_offset(const ThinQr& qr, std::size_t n, std::size_t c,
                                    std::span<const double> b) {
  std::vector<double> z(c, 0.0);
  for (std::size_t i = 0; i < c; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= qr.r[k * c + i] * z[k];
    z[i] = s / qr.r[i * c + i];
  }
  std::vector<double> o(n, 0.0);
  for (std::size_t j = 0; j < c; ++j) {
    const double* qj = qr.q.data() + j * n;
    for (std::size_t i = 0; i < n; ++i) o[i] += qj[i] * z[j];
  }
  return o;
}

void check_dim(const ProjectionContext& ctx, const RealVector& x) {
  if (x.dim() != ctx.feature_dim()) {
    throw Error(ErrorKind::kDimensionMismatch,
                "feature has dim " + std::to_string(x.dim()) + ", expected " +
                    std::to_string(ctx.feature_dim()));
  }
}

// Q^T x for the row-major N x C basis.
std::vector<double> basis_coefficients(const RealMatrix& q, std::span<const double> x) {
  std::vector<double> y(q.cols(), 0.0);
  for (std::size_t i = 0; i < q.rows(); ++i) {
    for (std::size_t j = 0; j < q.cols(); ++j) y[j] += q(i, j) * x[i];
  }
  return y;
}

}  // namespace

RealVector::RealVector(std::vector<double> entries) : entries_(std::move(entries)) {
  require_finite(entries_, "vector");
}

RealVector::RealVector(std::initializer_list<double> entries)
    : RealVector(std::vector<double>(entries)) {}

RealVector RealVector::zeros(std::size_t dim) { return RealVector(std::vector<double>(dim, 0.0)); }

RealMatrix::RealMatrix(std::size_t rows, std::size_t cols, std::vector<double> row_major)
    : rows_(rows), cols_(cols), entries_(std::move(row_major)) {
  if (entries_.size() != rows_ * cols_) {
    throw Error(ErrorKind::kDimensionMismatch,
                "matrix storage has " + std::to_string(entries_.size()) + " entries, expected " +
                    std::to_string(rows_ * cols_));
  }
  require_finite(entries_, "matrix");
}

RealMatrix::RealMatrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  for (const auto& row : rows) {
    if (row.size() != cols_) throw Error(ErrorKind::kDimensionMismatch, "ragged matrix literal");
    entries_.insert(entries_.end(), row.begin(), row.end());
  }
  require_finite(entries_, "matrix");
}

RealMatrix RealMatrix::zeros(std::size_t rows, std::size_t cols) {
  return RealMatrix(rows, cols, std::vector<double>(rows * cols, 0.0));
}

RealVector pinv_transpose_apply(const RealMatrix& weight, const RealVector& bias,
                                double rank_tolerance) {
  check_shapes(weight, bias, rank_tolerance);
  const ThinQr qr = householder_qr(weight);
  check_full_rank(qr, weight.cols(), rank_tolerance);
  return RealVector(min_norm_offset(qr, weight.rows(), weight.cols(), bias.values()));
}

ProjectionContext build_projection_context(const RealMatrix& weight, const RealVector& bias,
                                           double rank_tolerance) {
  check_shapes(weight, bias, rank_tolerance);
  const std::size_t n = weight.rows();
  const std::size_t c = weight.cols();
  const ThinQr qr = householder_qr(weight);
  check_full_rank(qr, c, rank_tolerance);

  std::vector<double> basis(n * c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) basis[i * c + j] = qr.q[j * n + i];

  ProjectionContext ctx;
  ctx.weight_ = weight;
  ctx.bias_ = bias;
  ctx.offset_ = RealVector(min_norm_offset(qr, n, c, bias.values()));
  ctx.basis_ = RealMatrix(n, c, std::move(basis));
  ctx.rank_tolerance_ = rank_tolerance;
  return ctx;
}

RealVector project_column_space(const ProjectionContext& ctx, const RealVector& x) {
  check_dim(ctx, x);
  const RealMatrix& q = ctx.basis();
  const std::vector<double> y = basis_coefficients(q, x.values());
  std::vector<double> out(q.rows(), 0.0);
  for (std::size_t i = 0; i < q.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < q.cols(); ++j) s += q(i, j) * y[j];
    out[i] = s;
  }
  return RealVector(std::move(out));
}

double nsp_score(const ProjectionContext& ctx, const RealVector& x_raw) {
  check_dim(ctx, x_raw);
  std::vector<double> shifted(x_raw.data());
  const auto offset = ctx.offset().values();
  for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] += offset[i];

  const double total_sq = dot(shifted, shifted);
  const double total = std::sqrt(total_sq);
  if (!(total > kNormFloor)) {
    throw Error(ErrorKind::kDegenerateFeature,
                "offset feature norm " + std::to_string(total) + " is below the floor");
  }
  // ||Q y|| = ||y|| for orthonormal Q.
  const std::vector<double> y = basis_coefficients(ctx.basis(), shifted);
  const double in_span_sq = dot(y, y);
  const double residual_sq = std::max(0.0, total_sq - in_span_sq);
  return std::min(1.0, std::sqrt(residual_sq) / total);
}

RealVector logits(const ProjectionContext& ctx, const RealVector& x_raw) {
  check_dim(ctx, x_raw);
  const RealMatrix& w = ctx.weight();
  std::vector<double> out(ctx.bias().data());
  for (std::size_t i = 0; i < w.rows(); ++i) {
    const double xi = x_raw[i];
    for (std::size_t j = 0; j < w.cols(); ++j) out[j] += w(i, j) * xi;
  }
  return RealVector(std::move(out));
}

}  // namespace nspexit
