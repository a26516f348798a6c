#include "prism/oracle.hpp"

#include "prism/server.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace prism::oracle {

namespace {

Matrix gaussian(Index rows, Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = normal(rng);
  return m;
}

// Uniform point in the ball of radius `radius`; one draw in four lands on
// the sphere itself so the extreme case is exercised.
Vector ball_point(Index d, double radius, std::mt19937_64& rng) {
  Vector v = gaussian(d, 1, rng).col(0);
  const double n = v.norm();
  if (n == 0.0 || radius == 0.0) return Vector::Zero(d);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double scale = unit(rng) < 0.25 ? radius : radius * std::pow(unit(rng), 1.0 / static_cast<double>(d));
  return v * (scale / n);
}

Vector random_routing(Index n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Vector pi(n);
  do {
    for (Index i = 0; i < n; ++i) {
      // Sparse routings happen in practice, so some samples get no weight.
      pi[i] = unit(rng) < 0.3 ? 0.0 : unit(rng);
    }
  } while (pi.sum() == 0.0);
  return pi;
}

double cosine(const Vector& a, const Vector& b) { return a.dot(b) / (a.norm() * b.norm()); }

}  // namespace

Matrix random_orthonormal(Index d, Index k, std::uint64_t seed) {
  require(k >= 0 && k <= d, "k must lie in [0, d]");
  if (k == 0) return Matrix(d, 0);
  std::mt19937_64 rng(seed);
  Eigen::HouseholderQR<Matrix> qr(gaussian(d, k, rng));
  return qr.householderQ() * Matrix::Identity(d, k);
}

bool dominance_margin_holds(double mu1_norm, double mu2_norm, double sigma, double delta) {
  return sigma * sigma + sigma * (mu1_norm + mu2_norm) < delta;
}

ConicConflictResult conic_conflict_trial(Index d, double delta, double sigma, Index n_samples,
                                         Index n_routings, std::uint64_t seed, bool enforce_margin) {
  require(d >= 2, "conflict construction needs d >= 2");
  require(delta > 0.0 && sigma >= 0.0, "need delta > 0 and sigma >= 0");
  require(n_samples >= 1 && n_routings >= 1, "need samples and routings");
  const double norm = std::sqrt(2.0 * delta);
  if (enforce_margin) {
    require(dominance_margin_holds(norm, norm, sigma, delta), "inputs violate the dominance margin");
  }
  std::mt19937_64 rng(seed);
  // mu1 = |mu| e1, mu2 at 120 degrees: <mu1, mu2> = |mu|^2 cos(120) = -delta.
  Vector mu1 = Vector::Zero(d);
  Vector mu2 = Vector::Zero(d);
  mu1[0] = norm;
  mu2[0] = -0.5 * norm;
  mu2[1] = std::sqrt(3.0) / 2.0 * norm;

  Matrix g1(d, n_samples);
  Matrix g2(d, n_samples);
  for (Index i = 0; i < n_samples; ++i) {
    g1.col(i) = mu1 + ball_point(d, sigma, rng);
    g2.col(i) = mu2 + ball_point(d, sigma, rng);
  }
  ConicConflictResult result;
  result.routings = n_routings;
  Index negative = 0;
  for (Index t = 0; t < n_routings; ++t) {
    const Vector c1 = g1 * random_routing(n_samples, rng);
    const Vector c2 = g2 * random_routing(n_samples, rng);
    const double cos12 = cosine(c1, c2);
    result.max_cosine = std::max(result.max_cosine, cos12);
    if (cos12 < 0.0) ++negative;
  }
  result.fraction_negative = static_cast<double>(negative) / static_cast<double>(n_routings);
  return result;
}

ConeCeilingResult cone_ceiling_check(const Vector& mu, double sigma, Index n_trials, Index n_samples,
                                     std::uint64_t seed) {
  const double m = mu.norm();
  require(sigma >= 0.0 && m > sigma, "cone ceiling needs |mu| > sigma");
  require(n_trials >= 1 && n_samples >= 1, "need trials and samples");
  std::mt19937_64 rng(seed);
  ConeCeilingResult result;
  result.chi = (m - sigma) / (m + sigma);
  const Index d = mu.size();
  for (Index t = 0; t < n_trials; ++t) {
    Matrix g(d, n_samples);
    for (Index i = 0; i < n_samples; ++i) g.col(i) = mu + ball_point(d, sigma, rng);
    const Vector cumulative = g * random_routing(n_samples, rng);
    result.min_cosine = std::min(result.min_cosine, cosine(cumulative, mu));
  }
  return result;
}

double loglog_slope(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size() && x.size() >= 2, "slope fit needs at least two points");
  double mx = 0.0;
  double my = 0.0;
  const double n = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    require(x[i] > 0.0 && y[i] > 0.0, "log-log fit needs positive values");
    mx += std::log(x[i]) / n;
    my += std::log(y[i]) / n;
  }
  double sxy = 0.0;
  double sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  require(sxx > 0.0, "slope fit needs distinct x values");
  return sxy / sxx;
}

ResidualFit residual_order_fit(Index d, Index r, std::span<const double> eta_grid, bool one_sided,
                               std::uint64_t seed, FactorProjection projection) {
  require(d >= 3 && r >= 1 && r < d, "residual fit needs 1 <= r < d, d >= 3");
  require(eta_grid.size() >= 2, "residual fit needs at least two step sizes");
  if (!projection) projection = bilateral_project;
  const Index k = std::max<Index>(1, d / 3);
  std::mt19937_64 rng(seed);
  const Matrix u = random_orthonormal(d, k, rng());
  const OrthonormalBasis basis = OrthonormalBasis::from_columns(u, 1e-9);
  Matrix p = Matrix::Zero(d, d);  // explicit protector U U^T
  for (Index i = 0; i < d; ++i)
    for (Index j = 0; j < d; ++j)
      for (Index c = 0; c < k; ++c) p(i, j) += u(i, c) * u(j, c);
  const Matrix complement = Matrix::Identity(d, d) - p;

  const Matrix a = gaussian(r, d, rng);
  const Matrix b = complement * gaussian(d, r, rng);  // P B = 0
  const Vector h = u * gaussian(k, 1, rng).col(0);    // h in range(U)
  const Matrix grad_a = gaussian(r, d, rng);
  const Matrix grad_b = gaussian(d, r, rng);

  Matrix step_a;
  Matrix step_b;
  if (one_sided) {
    step_a = ShrinkageProjector(basis, 1.0).apply_right(grad_a);
    step_b = grad_b;
  } else {
    const auto projected = projection(basis, grad_a, grad_b, 1.0);
    step_a = projected.grad_a;
    step_b = projected.grad_b;
  }

  ResidualFit fit;
  for (double eta : eta_grid) {
    require(eta > 0.0, "step sizes must be positive");
    const Matrix delta_w = (b - eta * step_b) * (a - eta * step_a) - b * a;
    const double res = (p * (delta_w * h)).norm();
    fit.eta.push_back(eta);
    fit.residual.push_back(res);
    fit.max_residual = std::max(fit.max_residual, res);
  }
  fit.exact_zero = fit.max_residual <= 1e-12;
  if (!fit.exact_zero) {
    std::vector<double> ys;
    for (double v : fit.residual) ys.push_back(std::max(v, std::numeric_limits<double>::min()));
    fit.slope = loglog_slope(fit.eta, ys);
  }
  return fit;
}

double entanglement_sampler(Index d, Index manifold_rank, Index k, Index n_pairs, std::uint64_t seed) {
  require(k >= 1 && k <= manifold_rank && manifold_rank <= d, "need 1 <= k <= r_o <= d");
  require(n_pairs >= 1, "need at least one pair");
  std::mt19937_64 rng(seed);
  const Matrix manifold = random_orthonormal(d, manifold_rank, rng());
  double worst = std::numeric_limits<double>::infinity();
  for (Index t = 0; t < n_pairs; ++t) {
    const Matrix a = manifold * random_orthonormal(manifold_rank, k, rng());
    const Matrix b = manifold * random_orthonormal(manifold_rank, k, rng());
    double sum = 0.0;
    for (Index i = 0; i < k; ++i) {
      for (Index j = 0; j < k; ++j) {
        double dot = 0.0;
        for (Index x = 0; x < d; ++x) dot += a(x, i) * b(x, j);
        sum += dot * dot;
      }
    }
    worst = std::min(worst, sum / static_cast<double>(k));
  }
  return worst;
}

double waterfill_objective(std::span<const double> gamma, std::span<const Index> k) {
  require(gamma.size() == k.size(), "one allocation per layer");
  double total = 0.0;
  for (std::size_t l = 0; l < k.size(); ++l) total += gamma[l] * std::sqrt(static_cast<double>(k[l]));
  return total;
}

std::vector<Index> waterfill_grid_search(std::span<const double> gamma, Index k_bar) {
  const std::size_t layers = gamma.size();
  require(layers >= 1 && layers <= 4, "grid search handles 1 to 4 layers");
  require(k_bar >= 0 && k_bar <= 20, "grid search handles k_bar <= 20");
  std::vector<Index> best;
  double best_value = -1.0;
  std::vector<Index> current(layers, 0);
  // Enumerate compositions of k_bar into `layers` parts in lexicographic order,
  // keeping the allocator's floor of one unit on every conflicting layer.
  auto floor_of = [&](std::size_t l) -> Index { return gamma[l] > 0.0 ? 1 : 0; };
  auto recurse = [&](auto&& self, std::size_t layer, Index left) -> void {
    if (layer + 1 == layers) {
      if (left < floor_of(layer)) return;
      current[layer] = left;
      const double value = waterfill_objective(gamma, current);
      if (value > best_value + 1e-12) {
        best_value = value;
        best = current;
      }
      return;
    }
    for (Index k = floor_of(layer); k <= left; ++k) {
      current[layer] = k;
      self(self, layer + 1, left - k);
    }
  };
  recurse(recurse, 0, k_bar);
  return best;
}

MaterializedUnion materialized_union(const Matrix& carry_basis, const Vector& carry_spectrum,
                                     std::span<const Matrix> factors, std::span<const double> weights,
                                     Index k) {
  const Index d = carry_basis.rows();
  require(carry_basis.cols() == carry_spectrum.size(), "carry spectrum length differs from basis");
  require(factors.size() == weights.size(), "one weight per factor");
  require(k >= 0 && k <= d, "k must lie in [0, d]");
  Matrix m = Matrix::Zero(d, d);
  for (Index c = 0; c < carry_basis.cols(); ++c) {
    m += carry_spectrum[c] * carry_basis.col(c) * carry_basis.col(c).transpose();
  }
  for (std::size_t i = 0; i < factors.size(); ++i) {
    require(factors[i].rows() == d, "factor dimension differs from the basis");
    m += weights[i] * factors[i] * factors[i].transpose();
  }
  Eigen::SelfAdjointEigenSolver<Matrix> eig(m);
  require(eig.info() == Eigen::Success, "eigendecomposition failed");
  MaterializedUnion out;
  out.basis.resize(d, k);
  out.spectrum.resize(k);
  for (Index j = 0; j < k; ++j) {
    out.basis.col(j) = eig.eigenvectors().col(d - 1 - j);
    out.spectrum[j] = eig.eigenvalues()[d - 1 - j];
  }
  return out;
}

KroneckerSpectrum kronecker_projector_spectrum(Index d, Index k, std::uint64_t seed) {
  require(d >= 1 && d <= 8, "materialized Kronecker check is limited to d <= 8");
  const Matrix u = random_orthonormal(d, k, seed);
  const Matrix pi = Matrix::Identity(d, d) - u * u.transpose();
  const Index n = d * d;
  Matrix kron(n, n);
  for (Index i = 0; i < d; ++i)
    for (Index j = 0; j < d; ++j)
      for (Index p = 0; p < d; ++p)
        for (Index q = 0; q < d; ++q) kron(i * d + p, j * d + q) = pi(i, j) * pi(p, q);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(kron, Eigen::EigenvaluesOnly);
  KroneckerSpectrum out;
  for (Index i = 0; i < n; ++i) {
    const double lambda = eig.eigenvalues()[i];
    if (std::abs(lambda - 1.0) <= 1e-9) ++out.unit;
    if (std::abs(lambda) <= 1e-9) ++out.zero;
  }
  return out;
}

ModelConfig random_model_config(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto pick = [&](Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); };
  ModelConfig c;
  c.dim = pick(4, 8);
  c.classes = pick(2, 4);
  c.layers = pick(2, 3);
  c.adapted_layers.clear();
  for (Index l = 0; l < c.layers; ++l)
    if (pick(0, 1) == 1) c.adapted_layers.push_back(l);
  if (c.adapted_layers.empty()) c.adapted_layers.push_back(pick(0, c.layers - 1));
  c.experts = pick(1, 4);
  c.top_k = pick(1, c.experts);
  c.lora_rank = pick(1, 3);
  c.lora_alpha = 2.0 * static_cast<double>(c.lora_rank);
  c.seed = rng();
  return c;
}

GradientCheck gradient_check(const ModelConfig& config, Index n_samples, std::uint64_t seed) {
  require(n_samples >= 1, "gradient check needs samples");
  MoeLoraModel model(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double scale = 0.5 / std::sqrt(static_cast<double>(config.dim));
  for (auto& layer : model.adapters()) {
    for (std::size_t e = 0; e < layer.experts.size(); ++e) {
      layer.experts[e].b = scale * gaussian(config.dim, config.lora_rank, rng);
      layer.merged[e] = 0.5 * scale * gaussian(config.dim, config.dim, rng);
    }
  }
  const Matrix x = gaussian(config.dim, n_samples, rng);
  std::vector<Index> labels;
  for (Index i = 0; i < n_samples; ++i)
    labels.push_back(std::uniform_int_distribution<Index>(0, config.classes - 1)(rng));

  auto loss_of = [&](const MoeLoraModel& m) {
    double total = 0.0;
    for (Index i = 0; i < n_samples; ++i) {
      total += cross_entropy(forward(m, x.col(i)).logits, labels[static_cast<std::size_t>(i)]).loss;
    }
    return total;
  };

  ModelGrad analytic = ModelGrad::zeros_like(model);
  for (Index i = 0; i < n_samples; ++i) {
    SampleTrace trace = forward(model, x.col(i));
    analytic += backward(model, trace, cross_entropy(trace.logits, labels[static_cast<std::size_t>(i)]).grad);
  }
  // Flatten in the same order as MoeLoraModel::flatten_trainable.
  Vector flat_analytic(model.trainable_size(true));
  Index offset = 0;
  for (const auto& layer : analytic.layers) {
    for (const auto& g : layer.experts) {
      flat_analytic.segment(offset, g.a.size()) = g.a.reshaped();
      offset += g.a.size();
      flat_analytic.segment(offset, g.b.size()) = g.b.reshaped();
      offset += g.b.size();
    }
  }
  for (const auto& layer : analytic.layers) {
    flat_analytic.segment(offset, layer.router.size()) = layer.router.reshaped();
    offset += layer.router.size();
  }

  const Vector base = model.flatten_trainable(true);
  const double h = 1e-5;
  GradientCheck result;
  result.parameters = base.size();
  MoeLoraModel probe = model;
  for (Index p = 0; p < base.size(); ++p) {
    Vector shifted = base;
    shifted[p] = base[p] + h;
    probe.assign_trainable(shifted, true);
    const double up = loss_of(probe);
    shifted[p] = base[p] - h;
    probe.assign_trainable(shifted, true);
    const double down = loss_of(probe);
    const double numeric = (up - down) / (2.0 * h);
    const double a = flat_analytic[p];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
    result.max_relative_error = std::max(result.max_relative_error, std::abs(a - numeric) / denom);
  }
  return result;
}

OrthogonalityTrials fedavg_orthogonality_trials(Index trials, std::uint64_t seed) {
  require(trials >= 1, "need at least one trial");
  std::mt19937_64 rng(seed);
  auto pick = [&](Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); };
  OrthogonalityTrials out;
  out.trials = trials;
  for (Index t = 0; t < trials; ++t) {
    const Index d = pick(4, 32);
    const Index r = pick(1, 4);
    const Index k = pick(1, d - 1);
    const Index clients = pick(1, 6);
    const OrthonormalBasis basis = OrthonormalBasis::from_columns(random_orthonormal(d, k, rng()), 1e-9);
    std::vector<Vector> flat;
    for (Index c = 0; c < clients; ++c) {
      const auto projected = bilateral_project(basis, gaussian(r, d, rng), gaussian(d, r, rng), 1.0);
      Vector v(2 * r * d);
      v.head(r * d) = projected.grad_a.reshaped();
      v.tail(r * d) = projected.grad_b.reshaped();
      flat.push_back(std::move(v));
    }
    std::exponential_distribution<double> expo(1.0);
    std::vector<double> w(static_cast<std::size_t>(clients));
    double sum = 0.0;
    for (auto& x : w) sum += (x = expo(rng));
    for (auto& x : w) x /= sum;
    double fix = 1.0;
    for (std::size_t c = 1; c < w.size(); ++c) fix -= w[c];
    w[0] = fix;  // absorbs the rounding so the weights sum to one exactly enough

    const Vector mean = fedavg_aggregate(flat, w);
    const Matrix mean_a = mean.head(r * d).reshaped(r, d);
    const Matrix mean_b = mean.tail(r * d).reshaped(d, r);
    out.max_b_residual = std::max(out.max_b_residual, (basis.columns().transpose() * mean_b).norm());
    out.max_a_residual = std::max(out.max_a_residual, (mean_a * basis.columns()).norm());
  }
  return out;
}

}  // namespace prism::oracle
