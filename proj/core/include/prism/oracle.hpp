#pragma once

#include "prism/model.hpp"
#include "prism/subspace.hpp"
#include "prism/types.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace prism::oracle {

/// sigma^2 + sigma (|mu1| + |mu2|) < delta: the per-sample noise is too small
/// to undo the negative inner product between the two task means.
bool dominance_margin_holds(double mu1_norm, double mu2_norm, double sigma, double delta);

struct ConicConflictResult {
  double fraction_negative = 0.0;
  double max_cosine = -1.0;
  Index routings = 0;
};

/// Two task means with <mu1, mu2> = -delta and |mu1| = |mu2| = sqrt(2 delta);
/// samples mu_t + xi with |xi| <= sigma; random nonnegative routing weights.
/// Reports how often the two routed cumulative gradients have negative cosine.
/// Inputs that break the dominance margin are rejected unless
/// `enforce_margin` is false.
ConicConflictResult conic_conflict_trial(Index d, double delta, double sigma, Index n_samples,
                                         Index n_routings, std::uint64_t seed,
                                         bool enforce_margin = true);

struct ConeCeilingResult {
  double min_cosine = 1.0;
  double chi = 1.0;  // (|mu| - sigma) / (|mu| + sigma)
};

ConeCeilingResult cone_ceiling_check(const Vector& mu, double sigma, Index n_trials,
                                     Index n_samples, std::uint64_t seed);

using FactorProjection =
    std::function<ProjectedFactorGrads(const OrthonormalBasis&, const Matrix&, const Matrix&, double)>;

struct ResidualFit {
  std::vector<double> eta;
  std::vector<double> residual;
  double slope = 0.0;
  double max_residual = 0.0;
  /// All residuals at or below 1e-12; the slope is not fitted.
  bool exact_zero = false;
};

/// ||P dW h|| after one projected step of size eta, with P = U U^T, P B = 0
/// initially and h in range(U). One-sided projects only the A gradient.
/// `projection` defaults to bilateral_project; tests substitute faulty ones.
ResidualFit residual_order_fit(Index d, Index r, std::span<const double> eta_grid, bool one_sided,
                               std::uint64_t seed, FactorProjection projection = {});

/// Least-squares slope of log y against log x.
double loglog_slope(std::span<const double> x, std::span<const double> y);

/// Minimum overlap over `n_pairs` random pairs of k-dimensional subspaces of a
/// fixed random r_o-dimensional manifold in R^d.
double entanglement_sampler(Index d, Index manifold_rank, Index k, Index n_pairs, std::uint64_t seed);

double waterfill_objective(std::span<const double> gamma, std::span<const Index> k);

/// Exhaustive search over integer allocations summing to k_bar with at least
/// one unit on every layer whose gamma is positive; the first maximizer in
/// lexicographic order wins. Empty when no allocation is feasible.
std::vector<Index> waterfill_grid_search(std::span<const double> gamma, Index k_bar);

struct MaterializedUnion {
  Matrix basis;     // d x k, eigenvectors in descending eigenvalue order
  Vector spectrum;  // k
};

/// Eigendecomposition of U diag(lambda) U^T + sum_c w_c L_c L_c^T, formed
/// explicitly as a d x d matrix.
MaterializedUnion materialized_union(const Matrix& carry_basis, const Vector& carry_spectrum,
                                     std::span<const Matrix> factors, std::span<const double> weights,
                                     Index k);

struct KroneckerSpectrum {
  Index unit = 0;  // eigenvalues within 1e-9 of 1
  Index zero = 0;  // eigenvalues within 1e-9 of 0
};

/// Spectrum of the explicit d^2 x d^2 matrix (I - U U^T) (x) (I - U U^T) for a
/// random d x k orthonormal U.
KroneckerSpectrum kronecker_projector_spectrum(Index d, Index k, std::uint64_t seed);

struct GradientCheck {
  double max_relative_error = 0.0;
  Index parameters = 0;
};

/// Central finite differences of the summed cross-entropy over `n_samples`
/// random inputs against backward(), over every trainable parameter
/// including the router. B and the merged updates are randomized so every
/// term is exercised. Relative error uses max(|analytic|, |numeric|, 1e-6).
GradientCheck gradient_check(const ModelConfig& config, Index n_samples, std::uint64_t seed);

/// Random but valid model configuration with d <= 8, for gradient checks.
ModelConfig random_model_config(std::uint64_t seed);

struct OrthogonalityTrials {
  double max_b_residual = 0.0;  // ||U^T mean gradB||
  double max_a_residual = 0.0;  // ||mean gradA U||
  Index trials = 0;
};

/// Random basis, bilaterally projected client gradients, random simplex
/// weights, FedAvg; reports the worst residual of the aggregate.
OrthogonalityTrials fedavg_orthogonality_trials(Index trials, std::uint64_t seed);

/// Random d x k matrix with orthonormal columns (QR of a Gaussian draw).
Matrix random_orthonormal(Index d, Index k, std::uint64_t seed);

}  // namespace prism::oracle
