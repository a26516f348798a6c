#include "prism/harness.hpp"

#include "prism/oracle.hpp"
#include "prism/scheduler.hpp"
#include "prism/subspace.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

namespace prism {

namespace {

VerifyRow at_most(std::string name, double value, double threshold) {
  return {std::move(name), value, threshold, value <= threshold};
}

VerifyRow at_least(std::string name, double value, double threshold) {
  return {std::move(name), value, threshold, value >= threshold};
}

struct UnionErrors {
  double spectrum = 0.0;
  double projector = 0.0;
};

// Three tasks of three clients at d = 16, union against the materialized
// eigendecomposition at every step. Draws whose spectrum has no clear gap at
// k_out are redrawn so the subspace is well defined.
UnionErrors union_vs_materialized(std::uint64_t seed) {
  const Index d = 16;
  const Index clients = 3;
  UnionErrors worst;
  std::mt19937_64 rng(seed);
  OrthonormalBasis carry(d);
  Spectrum spectrum{Vector(0)};
  for (Index task = 0; task < 3; ++task) {
    const Index k_out = 3 + 3 * task;
    for (int attempt = 0; attempt < 50; ++attempt) {
      std::vector<Matrix> raw;
      std::vector<WeightedFactor> factors;
      std::vector<double> w;
      double sum = 0.0;
      for (Index c = 0; c < clients; ++c) {
        const Matrix q = oracle::random_orthonormal(d, 4, rng());
        Vector s(4);
        for (Index i = 0; i < 4; ++i) s[i] = std::pow(2.0, 3 - i) * (1.0 + 0.5 * static_cast<double>(c));
        raw.push_back(q * s.asDiagonal());
        w.push_back(1.0 + static_cast<double>(c));
        sum += w.back();
      }
      for (auto& x : w) x /= sum;
      for (Index c = 0; c < clients; ++c) factors.push_back({w[static_cast<std::size_t>(c)], {raw[static_cast<std::size_t>(c)]}});

      const auto full = oracle::materialized_union(carry.columns(), spectrum.values, raw, w, std::min(d, k_out + 1));
      if (k_out < d && full.spectrum[k_out - 1] - full.spectrum[k_out] < 0.05 * full.spectrum[0]) continue;

      const UnionResult u = thin_svd_union(carry, spectrum, factors, k_out);
      for (Index i = 0; i < k_out; ++i) {
        worst.spectrum = std::max(worst.spectrum, std::abs(u.spectrum.values[i] - full.spectrum[i]) / full.spectrum[i]);
      }
      const auto oracle_basis = OrthonormalBasis::from_columns(full.basis.leftCols(k_out), 1e-9);
      worst.projector = std::max(worst.projector, projector_distance(u.basis, oracle_basis));
      carry = u.basis;
      spectrum = u.spectrum;
      break;
    }
  }
  return worst;
}

}  // namespace

std::vector<VerifyRow> run_verification(std::uint64_t seed) {
  std::vector<VerifyRow> rows;

  const auto fedavg = oracle::fedavg_orthogonality_trials(1000, derive_seed(seed, 1));
  rows.push_back(at_most("fedavg_orthogonality_b", fedavg.max_b_residual, 1e-10));
  rows.push_back(at_most("fedavg_orthogonality_a", fedavg.max_a_residual, 1e-10));

  const std::vector<double> etas{1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4};
  const auto one_sided = oracle::residual_order_fit(12, 3, etas, true, derive_seed(seed, 2));
  rows.push_back(at_most("residual_one_sided_slope_error", std::abs(one_sided.slope - 1.0), 0.1));
  const auto bilateral = oracle::residual_order_fit(12, 3, etas, false, derive_seed(seed, 2));
  rows.push_back(at_most("residual_bilateral_max", bilateral.max_residual, 1e-12));

  const double overlap = oracle::entanglement_sampler(32, 8, 6, 200, derive_seed(seed, 3));
  rows.push_back(at_least("entanglement_min_overlap", overlap, entanglement_bound(8, 6) - 1e-9));

  const auto unions = union_vs_materialized(derive_seed(seed, 4));
  rows.push_back(at_most("pefosu_spectrum_rel_error", unions.spectrum, 1e-6));
  rows.push_back(at_most("pefosu_projector_distance", unions.projector, 1e-6));

  {
    const std::vector<double> gamma{3.0, 4.0};
    const auto alloc = waterfill_budget(gamma, 25, 64);
    const bool closed = alloc.k == std::vector<Index>{9, 16};
    rows.push_back({"waterfill_closed_form", closed ? 0.0 : 1.0, 0.0, closed});
    std::mt19937_64 rng(derive_seed(seed, 5));
    std::uniform_real_distribution<double> unit(0.05, 1.0);
    Index worst = 0;
    for (Index layers = 1; layers <= 4; ++layers) {
      for (Index k_bar = layers; k_bar <= 20; ++k_bar) {
        for (int draw = 0; draw < 5; ++draw) {
          std::vector<double> g(static_cast<std::size_t>(layers));
          for (auto& x : g) x = unit(rng);
          const auto mine = waterfill_budget(g, k_bar, 64).k;
          const auto best = oracle::waterfill_grid_search(g, k_bar);
          for (std::size_t l = 0; l < g.size(); ++l) worst = std::max(worst, std::abs(mine[l] - best[l]));
        }
      }
    }
    rows.push_back(at_most("waterfill_grid_max_unit_gap", static_cast<double>(worst), 1.0));
  }

  {
    const auto conic = oracle::conic_conflict_trial(8, 4.0, 0.05, 50, 100, derive_seed(seed, 6));
    rows.push_back(at_least("conic_negative_fraction", conic.fraction_negative, 1.0));
    Vector mu = Vector::Zero(8);
    mu[0] = 2.0;
    const auto cone = oracle::cone_ceiling_check(mu, 1.0, 2000, 20, derive_seed(seed, 7));
    rows.push_back(at_least("cone_ceiling_margin", cone.min_cosine - cone.chi, -1e-9));
  }

  {
    Index mismatches = 0;
    for (Index d = 1; d <= 8; ++d) {
      for (Index k = 0; k <= d; ++k) {
        const auto spec = oracle::kronecker_projector_spectrum(d, k, derive_seed(seed, 8, static_cast<std::uint64_t>(d), static_cast<std::uint64_t>(k)));
        const auto counts = bilateral_rank_counts(d, k);
        if (spec.unit != counts.rank || spec.zero != counts.codim) ++mismatches;
      }
    }
    rows.push_back(at_most("kronecker_rank_mismatches", static_cast<double>(mismatches), 0.0));
  }

  {
    double worst = 0.0;
    for (Index i = 0; i < 20; ++i) {
      const auto cfg = oracle::random_model_config(derive_seed(seed, 9, static_cast<std::uint64_t>(i)));
      worst = std::max(worst, oracle::gradient_check(cfg, 3, derive_seed(seed, 10, static_cast<std::uint64_t>(i)))
                                  .max_relative_error);
    }
    rows.push_back(at_most("gradient_fd_max_rel_error", worst, 1e-4));
  }
  return rows;
}

void write_verification_csv(const std::filesystem::path& path, std::span<const VerifyRow> rows) {
  std::ofstream out(path);
  require(out.good(), "cannot open " + path.string());
  out << "check,value,threshold,pass\n";
  for (const auto& r : rows) {
    out << r.name << ',' << format_double(r.value) << ',' << format_double(r.threshold) << ','
        << (r.pass ? "true" : "false") << '\n';
  }
}

}  // namespace prism
