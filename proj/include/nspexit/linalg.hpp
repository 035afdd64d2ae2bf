#pragma once

// Dense kernels behind the null-space-projection (NSP) certainty score.
//
// A linear head maps a feature x (dim N) to logits l = W^T x + b with W of
// shape N x C. Shifting the feature space by o = (W^T)^+ b folds the bias
// into the weights, l = W^T (x + o). The offset feature x' = x + o splits
// orthogonally into a part inside the column space of W (the only part the
// logits can see) and a residual in its orthogonal complement. The NSP score
// is the share of the feature norm that lives in that residual:
//
//   NSP(x') = ||x' - P x'|| / ||x'||,   P = W (W^T W)^{-1} W^T.
//
// P is never materialized. W is factored once per head with Householder QR
// and the projection is applied as Q (Q^T x).

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace nspexit {

inline constexpr double kDefaultRankTolerance = 1e-10;
inline constexpr double kNormFloor = 1e-12;

// Dense vector of finite doubles.
class RealVector {
 public:
  RealVector() = default;
  explicit RealVector(std::vector<double> entries);
  RealVector(std::initializer_list<double> entries);

  static RealVector zeros(std::size_t dim);

  std::size_t dim() const noexcept { return entries_.size(); }
  double operator[](std::size_t i) const { return entries_[i]; }
  std::span<const double> values() const noexcept { return entries_; }
  const std::vector<double>& data() const noexcept { return entries_; }

  friend bool operator==(const RealVector&, const RealVector&) = default;

 private:
  std::vector<double> entries_;
};

// Row-major dense matrix of finite doubles, rows x cols.
class RealMatrix {
 public:
  RealMatrix() = default;
  RealMatrix(std::size_t rows, std::size_t cols, std::vector<double> row_major);
  RealMatrix(std::initializer_list<std::initializer_list<double>> rows);

  static RealMatrix zeros(std::size_t rows, std::size_t cols);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  double operator()(std::size_t r, std::size_t c) const { return entries_[r * cols_ + c]; }
  std::span<const double> values() const noexcept { return entries_; }
  const std::vector<double>& data() const noexcept { return entries_; }

  friend bool operator==(const RealMatrix&, const RealMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> entries_;
};

// Per-head cache shared by every sample that passes through the head.
// Immutable after construction.
class ProjectionContext {
 public:
  const RealMatrix& weight() const noexcept { return weight_; }
  const RealVector& bias() const noexcept { return bias_; }
  const RealVector& offset() const noexcept { return offset_; }
  // Orthonormal basis of the column space of W, N x C.
  const RealMatrix& basis() const noexcept { return basis_; }
  double rank_tolerance() const noexcept { return rank_tolerance_; }

  std::size_t feature_dim() const noexcept { return weight_.rows(); }
  std::size_t num_classes() const noexcept { return weight_.cols(); }

 private:
  friend ProjectionContext build_projection_context(const RealMatrix&, const RealVector&, double);

  RealMatrix weight_;
  RealVector bias_;
  RealVector offset_;
  RealMatrix basis_;
  double rank_tolerance_ = kDefaultRankTolerance;
};

// Minimum-norm solution o of W^T o = b. Throws RankDeficient when the smallest
// |R_ii| of the QR factor of W falls below rank_tolerance times the largest.
RealVector pinv_transpose_apply(const RealMatrix& weight, const RealVector& bias,
                                double rank_tolerance = kDefaultRankTolerance);

ProjectionContext build_projection_context(const RealMatrix& weight, const RealVector& bias,
                                           double rank_tolerance = kDefaultRankTolerance);

// x^W = Q (Q^T x).
RealVector project_column_space(const ProjectionContext& ctx, const RealVector& x);

// NSP score of the offset feature x_raw + offset, in [0, 1]. Throws
// DegenerateFeature when the offset feature has norm <= kNormFloor.
double nsp_score(const ProjectionContext& ctx, const RealVector& x_raw);

// W^T x_raw + b.
RealVector logits(const ProjectionContext& ctx, const RealVector& x_raw);

}  // namespace nspexit
