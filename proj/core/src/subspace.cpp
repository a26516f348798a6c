#include "prism/subspace.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <string>

namespace prism {

namespace {

// Singular values below this fraction of the leading one count as zero when
// deciding how many union columns are numerically meaningful.
constexpr double kRankCutoff = 1e-12;

void require_alpha(double alpha) {
  require(alpha >= 0.0 && alpha <= 1.0, "projection alpha must lie in [0, 1]");
}

}  // namespace

OrthonormalBasis::OrthonormalBasis(Index ambient_dim) : columns_(ambient_dim, 0) {
  require(ambient_dim >= 0, "ambient dimension must be nonnegative");
}

OrthonormalBasis OrthonormalBasis::from_columns(Matrix columns, double tolerance) {
  require(columns.cols() <= columns.rows(), "basis cannot have more columns than its dimension");
  OrthonormalBasis basis;
  basis.columns_ = std::move(columns);
  require(basis.orthonormality_error() <= tolerance, "basis columns are not orthonormal");
  return basis;
}

OrthonormalBasis OrthonormalBasis::span_of(const Matrix& spanning) {
  require(spanning.cols() <= spanning.rows(), "spanning set larger than the ambient dimension");
  OrthonormalBasis basis;
  if (spanning.cols() == 0) {
    basis.columns_ = Matrix(spanning.rows(), 0);
    return basis;
  }
  Eigen::HouseholderQR<Matrix> qr(spanning);
  basis.columns_ = qr.householderQ() * Matrix::Identity(spanning.rows(), spanning.cols());
  return basis;
}

double OrthonormalBasis::orthonormality_error() const {
  if (columns_.cols() == 0) return 0.0;
  const Matrix gram = columns_.transpose() * columns_;
  return (gram - Matrix::Identity(gram.rows(), gram.cols())).cwiseAbs().maxCoeff();
}

ShrinkageProjector::ShrinkageProjector(OrthonormalBasis basis, double alpha)
    : basis_(std::move(basis)), alpha_(alpha) {
  require_alpha(alpha);
}

Vector ShrinkageProjector::apply(const Vector& v) const {
  require(v.size() == basis_.dim(), "vector dimension does not match the basis");
  if (basis_.empty() || alpha_ == 0.0) return v;
  const Matrix& u = basis_.columns();
  return v - alpha_ * (u * (u.transpose() * v));
}

Matrix ShrinkageProjector::apply_left(const Matrix& m) const {
  require(m.rows() == basis_.dim(), "left operand rows do not match the basis dimension");
  if (basis_.empty() || alpha_ == 0.0) return m;
  const Matrix& u = basis_.columns();
  return m - alpha_ * (u * (u.transpose() * m));
}

Matrix ShrinkageProjector::apply_right(const Matrix& m) const {
  require(m.cols() == basis_.dim(), "right operand columns do not match the basis dimension");
  if (basis_.empty() || alpha_ == 0.0) return m;
  const Matrix& u = basis_.columns();
  return m - alpha_ * ((m * u) * u.transpose());
}

Vector complement_apply(const OrthonormalBasis& basis, const Vector& v, double alpha) {
  return ShrinkageProjector(basis, alpha).apply(v);
}

ProjectedFactorGrads bilateral_project(const OrthonormalBasis& basis, const Matrix& grad_a,
                                       const Matrix& grad_b, double alpha) {
  require(grad_a.cols() == basis.dim() && grad_b.rows() == basis.dim(),
          "factor gradients do not match the basis dimension");
  require(grad_a.rows() == grad_b.cols(), "A and B gradients disagree on the LoRA rank");
  const ShrinkageProjector projector(basis, alpha);
  return {projector.apply_right(grad_a), projector.apply_left(grad_b)};
}

UnionResult thin_svd_union(const OrthonormalBasis& carry_basis, const Spectrum& carry_spectrum,
                           std::span<const WeightedFactor> client_factors, Index k_out) {
  const Index d = carry_basis.dim();
  require(carry_spectrum.size() == carry_basis.rank(), "carry spectrum length differs from basis rank");
  require(k_out >= 0 && k_out <= d, "k_out must lie in [0, d]");

  double weight_sum = 0.0;
  Index columns = carry_basis.rank();
  for (const auto& wf : client_factors) {
    require(wf.weight >= 0.0, "factor weights must be nonnegative");
    require(wf.factor.empty() || wf.factor.dim() == d, "client factor dimension differs from the basis");
    weight_sum += wf.weight;
    columns += wf.factor.rank();
  }
  require(client_factors.empty() || std::abs(weight_sum - 1.0) <= 1e-9,
          "factor weights must sum to one");
  for (Index i = 0; i < carry_spectrum.size(); ++i) {
    require(carry_spectrum.values[i] >= 0.0, "carry spectrum must be nonnegative");
  }

  Matrix stacked(d, columns);
  Index offset = 0;
  if (!carry_basis.empty()) {
    stacked.leftCols(carry_basis.rank()) =
        carry_basis.columns() * carry_spectrum.values.cwiseSqrt().asDiagonal();
    offset = carry_basis.rank();
  }
  for (const auto& wf : client_factors) {
    if (wf.factor.empty()) continue;
    stacked.middleCols(offset, wf.factor.rank()) = std::sqrt(wf.weight) * wf.factor.columns;
    offset += wf.factor.rank();
  }

  UnionResult result;
  if (columns == 0) {
    result.basis = OrthonormalBasis(d);
    result.spectrum.values = Vector(0);
    result.rank_limited = k_out > 0;
    return result;
  }

  Eigen::BDCSVD<Matrix> svd(stacked, Eigen::ComputeThinU);
  const Vector& sigma = svd.singularValues();
  Index achievable = 0;
  const double leading = sigma.size() > 0 ? sigma[0] : 0.0;
  if (leading > 0.0) {
    while (achievable < sigma.size() && sigma[achievable] > kRankCutoff * leading) ++achievable;
  }
  const Index k = std::min(k_out, achievable);
  result.rank_limited = k < k_out;
  result.basis = OrthonormalBasis::from_columns(svd.matrixU().leftCols(k), 1e-9);
  result.spectrum.values = sigma.head(k).array().square().matrix();
  return result;
}

std::vector<double> principal_angles(const OrthonormalBasis& a, const OrthonormalBasis& b) {
  require(a.dim() == b.dim(), "bases live in different ambient dimensions");
  require(!a.empty() && !b.empty(), "principal angles need nonempty bases");
  const Matrix cross = a.columns().transpose() * b.columns();
  Eigen::JacobiSVD<Matrix> svd(cross);
  const Vector& sigma = svd.singularValues();
  std::vector<double> angles(static_cast<std::size_t>(sigma.size()));
  for (Index i = 0; i < sigma.size(); ++i) {
    angles[static_cast<std::size_t>(i)] = std::acos(std::clamp(sigma[i], 0.0, 1.0));
  }
  std::sort(angles.begin(), angles.end());
  return angles;
}

double subspace_overlap(const OrthonormalBasis& a, const OrthonormalBasis& b) {
  require(a.dim() == b.dim(), "bases live in different ambient dimensions");
  require(a.rank() == b.rank() && a.rank() >= 1, "overlap needs equal, nonzero column counts");
  const Matrix cross = a.columns().transpose() * b.columns();
  return cross.squaredNorm() / static_cast<double>(a.rank());
}

double projector_distance(const OrthonormalBasis& a, const OrthonormalBasis& b) {
  require(a.dim() == b.dim(), "bases live in different ambient dimensions");
  const Index d = a.dim();
  Matrix diff = Matrix::Zero(d, d);
  if (!a.empty()) diff += a.columns() * a.columns().transpose();
  if (!b.empty()) diff -= b.columns() * b.columns().transpose();
  return diff.norm();
}

double entanglement_bound(Index manifold_rank, Index k) {
  require(k >= 1, "protection budget k must be positive");
  require(k <= manifold_rank, "budget k cannot exceed the manifold rank");
  return std::max(0.0, 2.0 - static_cast<double>(manifold_rank) / static_cast<double>(k));
}

BilateralRank bilateral_rank_counts(Index d, Index k) {
  require(d >= 0 && k >= 0, "dimensions must be nonnegative");
  require(k <= d, "protected rank cannot exceed the dimension");
  return {(d - k) * (d - k), 2 * d * k - k * k};
}

Index effective_rank(const Matrix& samples, double ratio_cutoff) {
  require(samples.cols() >= 1, "effective rank needs at least one sample");
  require(ratio_cutoff > 0.0 && ratio_cutoff < 1.0, "ratio cutoff must lie in (0, 1)");
  Eigen::BDCSVD<Matrix> svd(samples);
  const Vector& sigma = svd.singularValues();
  if (sigma.size() == 0 || sigma[0] == 0.0) return 0;
  const double threshold = ratio_cutoff * sigma[0] * sigma[0];
  Index count = 0;
  for (Index i = 0; i < sigma.size(); ++i) {
    if (sigma[i] * sigma[i] > threshold) ++count;
  }
  return count;
}

}  // namespace prism
