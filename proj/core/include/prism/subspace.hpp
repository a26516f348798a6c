#pragma once

#include "prism/types.hpp"

#include <span>
#include <utility>
#include <vector>

namespace prism {

/// d x k matrix with orthonormal columns. k may be zero, which stands for
/// "nothing protected yet".
class OrthonormalBasis {
 public:
  OrthonormalBasis() = default;

  /// Empty basis (k = 0) in ambient dimension d.
  explicit OrthonormalBasis(Index ambient_dim);

  /// Wraps `columns` after checking columns^T columns = I within `tolerance`.
  static OrthonormalBasis from_columns(Matrix columns, double tolerance = 1e-10);

  /// Orthonormal basis for the column span of `spanning` (Householder QR).
  /// Columns of `spanning` must be linearly independent.
  static OrthonormalBasis span_of(const Matrix& spanning);

  Index dim() const { return columns_.rows(); }
  Index rank() const { return columns_.cols(); }
  bool empty() const { return columns_.cols() == 0; }
  const Matrix& columns() const { return columns_; }

  /// max |(U^T U - I)_ij|
  double orthonormality_error() const;

 private:
  Matrix columns_;
};

/// Nonnegative values sorted in descending order.
struct Spectrum {
  Vector values;

  Index size() const { return values.size(); }
  double trace() const { return values.sum(); }
};

/// Client-side low-rank factor L with L L^T approximating a covariance.
struct CovarianceFactor {
  Matrix columns;

  Index dim() const { return columns.rows(); }
  Index rank() const { return columns.cols(); }
  bool empty() const { return columns.cols() == 0; }
};

struct WeightedFactor {
  double weight = 0.0;
  CovarianceFactor factor;
};

/// Pi(alpha) = I - alpha U U^T: the identity at alpha = 0 and the orthogonal
/// complement projector at alpha = 1.
class ShrinkageProjector {
 public:
  ShrinkageProjector(OrthonormalBasis basis, double alpha);

  const OrthonormalBasis& basis() const { return basis_; }
  double alpha() const { return alpha_; }

  Vector apply(const Vector& v) const;
  /// Pi(alpha) * m, column by column.
  Matrix apply_left(const Matrix& m) const;
  /// m * Pi(alpha), row by row.
  Matrix apply_right(const Matrix& m) const;

 private:
  OrthonormalBasis basis_;
  double alpha_;
};

Vector complement_apply(const OrthonormalBasis& basis, const Vector& v, double alpha);

struct ProjectedFactorGrads {
  Matrix grad_a;  // r x d
  Matrix grad_b;  // d x r
};

/// Kronecker bilateral projection of one expert's factor gradients:
/// (gradA * Pi(alpha), Pi(alpha) * gradB).
ProjectedFactorGrads bilateral_project(const OrthonormalBasis& basis, const Matrix& grad_a,
                                       const Matrix& grad_b, double alpha);

struct UnionResult {
  OrthonormalBasis basis;
  Spectrum spectrum;
  /// Set when fewer than the requested columns were numerically available.
  bool rank_limited = false;
};

/// Top-k_out eigenpairs of  U diag(spectrum) U^T + sum_c w_c L_c L_c^T,
/// obtained from one thin SVD of [U diag(spectrum)^(1/2), sqrt(w_1) L_1, ...].
/// The d x d sum is never formed. Empty factors are skipped.
UnionResult thin_svd_union(const OrthonormalBasis& carry_basis, const Spectrum& carry_spectrum,
                           std::span<const WeightedFactor> client_factors, Index k_out);

/// Principal angles between span(a) and span(b), ascending, in [0, pi/2].
std::vector<double> principal_angles(const OrthonormalBasis& a, const OrthonormalBasis& b);

/// tr(P_a P_b) / k for equal-sized bases.
double subspace_overlap(const OrthonormalBasis& a, const OrthonormalBasis& b);

/// ||P_a - P_b||_F, formed explicitly as a d x d difference.
double projector_distance(const OrthonormalBasis& a, const OrthonormalBasis& b);

/// Lower bound max(0, 2 - r_o / k) on the overlap of two k-dimensional
/// subspaces confined to an r_o-dimensional manifold.
double entanglement_bound(Index manifold_rank, Index k);

struct BilateralRank {
  Index rank = 0;
  Index codim = 0;
};

/// Rank (d-k)^2 and codimension 2dk - k^2 of Pi (x) Pi on R^{d^2}.
BilateralRank bilateral_rank_counts(Index d, Index k);

/// Number of singular values of `samples` whose square exceeds
/// ratio_cutoff * (largest singular value)^2.
Index effective_rank(const Matrix& samples, double ratio_cutoff);

}  // namespace prism
