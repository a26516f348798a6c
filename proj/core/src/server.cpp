#include "prism/server.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace prism {

namespace {

void require_simplex(std::span<const double> weights, std::size_t expected) {
  require(weights.size() == expected, "one weight per client");
  double sum = 0.0;
  for (double w : weights) {
    require(w >= 0.0, "client weights must be nonnegative");
    sum += w;
  }
  require(std::abs(sum - 1.0) <= 1e-12, "client weights must sum to one");
}

}  // namespace

ProtectionTable empty_protection(const MoeLoraModel& model) {
  ProtectionTable table;
  for (Index slot = 0; slot < model.num_adapted(); ++slot) {
    table.emplace_back(static_cast<std::size_t>(model.num_experts()),
                       ExpertProtection{OrthonormalBasis(model.dim()), Spectrum{Vector(0)}});
  }
  return table;
}

ExpertBases bases_of(const ProtectionTable& table) {
  ExpertBases bases;
  for (const auto& row : table) {
    std::vector<OrthonormalBasis> out;
    for (const auto& p : row) out.push_back(p.basis);
    bases.push_back(std::move(out));
  }
  return bases;
}

Vector fedavg_aggregate(std::span<const Vector> client_params, std::span<const double> weights) {
  require(!client_params.empty(), "FedAvg needs at least one client");
  require_simplex(weights, client_params.size());
  const Index n = client_params.front().size();
  Vector out = Vector::Zero(n);
  for (std::size_t c = 0; c < client_params.size(); ++c) {
    require(client_params[c].size() == n, "client parameter shapes differ");
    out.noalias() += weights[c] * client_params[c];
  }
  return out;
}

void fedavg_models(MoeLoraModel& global, std::span<const MoeLoraModel> clients,
                   std::span<const double> weights) {
  const bool with_router = !global.router_frozen();
  std::vector<Vector> params;
  params.reserve(clients.size());
  for (const auto& c : clients) params.push_back(c.flatten_trainable(with_router));
  global.assign_trainable(fedavg_aggregate(params, weights), with_router);
}

std::vector<Index> split_layer_budget(std::span<const double> energies, Index k_layer) {
  require(k_layer >= 0, "layer budget must be nonnegative");
  const std::size_t n = energies.size();
  std::vector<Index> out(n, 0);
  double total = 0.0;
  for (double e : energies) {
    require(std::isfinite(e) && e >= 0.0, "expert energies must be finite and nonnegative");
    total += e;
  }
  if (total == 0.0 || k_layer == 0) return out;
  std::vector<double> frac(n, 0.0);
  Index assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double exact = static_cast<double>(k_layer) * energies[i] / total;
    const double whole = std::floor(exact + 1e-9);
    out[i] = static_cast<Index>(whole);
    frac[i] = std::max(exact - whole, 0.0);
    assigned += out[i];
  }
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < n; ++i)
    if (energies[i] > 0.0) order.push_back(i);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (Index left = std::max<Index>(k_layer - assigned, 0), j = 0; left > 0; --left, ++j) {
    ++out[order[static_cast<std::size_t>(j) % order.size()]];
  }
  return out;
}

std::vector<std::vector<double>> factor_energies(std::span<const ExpertFactors> uploads,
                                                 std::span<const double> weights) {
  require(!uploads.empty(), "no uploads");
  require(uploads.size() == weights.size(), "one weight per client");
  std::vector<std::vector<double>> energy;
  for (const auto& row : uploads.front()) energy.emplace_back(row.size(), 0.0);
  for (std::size_t c = 0; c < uploads.size(); ++c) {
    require(uploads[c].size() == energy.size(), "client uploads disagree on the layer count");
    for (std::size_t slot = 0; slot < energy.size(); ++slot) {
      require(uploads[c][slot].size() == energy[slot].size(), "client uploads disagree on E");
      for (std::size_t e = 0; e < energy[slot].size(); ++e) {
        energy[slot][e] += weights[c] * uploads[c][slot][e].columns.squaredNorm();
      }
    }
  }
  return energy;
}

UnionReport pefosu_update(ProtectionTable& table, std::span<const ExpertFactors> uploads,
                          std::span<const double> weights, std::span<const Index> k_layer) {
  require_simplex(weights, uploads.size());
  require(k_layer.size() == table.size(), "one k per adapted layer");
  const auto energy = factor_energies(uploads, weights);
  require(energy.size() == table.size(), "uploads do not match the protection table");

  UnionReport report;
  for (std::size_t slot = 0; slot < table.size(); ++slot) {
    require(energy[slot].size() == table[slot].size(), "uploads do not match the protection table");
    const auto growth = split_layer_budget(energy[slot], k_layer[slot]);
    for (std::size_t e = 0; e < table[slot].size(); ++e) {
      if (growth[e] == 0) continue;
      auto& p = table[slot][e];
      std::vector<WeightedFactor> factors;
      for (std::size_t c = 0; c < uploads.size(); ++c) {
        factors.push_back({weights[c], uploads[c][slot][e]});
      }
      const Index k_out = std::min(p.basis.rank() + growth[e], p.basis.dim());
      UnionResult u;
      try {
        u = thin_svd_union(p.basis, p.spectrum, factors, k_out);
      } catch (const ContractViolation& err) {
        throw ContractViolation("adapter slot " + std::to_string(slot) + ", expert " + std::to_string(e) + ": " +
                                err.what());
      }
      if (u.rank_limited) ++report.rank_limited;
      p.basis = std::move(u.basis);
      p.spectrum = std::move(u.spectrum);
    }
    std::vector<Index> added;
    for (std::size_t e = 0; e < table[slot].size(); ++e) added.push_back(growth[e]);
    report.growth.push_back(std::move(added));
  }
  return report;
}

UnionReport shared_update(ProtectionTable& table, std::span<const ExpertFactors> uploads,
                          std::span<const double> weights, std::span<const Index> k_layer) {
  require_simplex(weights, uploads.size());
  require(k_layer.size() == table.size(), "one k per adapted layer");
  UnionReport report;
  for (std::size_t slot = 0; slot < table.size(); ++slot) {
    const ExpertProtection carry = table[slot].front();
    const Index d = carry.basis.dim();
    std::vector<WeightedFactor> factors;
    bool any = false;
    for (std::size_t c = 0; c < uploads.size(); ++c) {
      require(uploads[c].size() == table.size(), "uploads do not match the protection table");
      Index cols = 0;
      for (const auto& f : uploads[c][slot]) cols += f.rank();
      CovarianceFactor pooled;
      pooled.columns.resize(d, cols);
      Index offset = 0;
      for (const auto& f : uploads[c][slot]) {
        if (f.empty()) continue;
        pooled.columns.middleCols(offset, f.rank()) = f.columns;
        offset += f.rank();
      }
      any = any || cols > 0;
      factors.push_back({weights[c], std::move(pooled)});
    }
    std::vector<Index> added(table[slot].size(), 0);
    if (any && k_layer[slot] > 0) {
      const Index k_out = std::min(carry.basis.rank() + k_layer[slot], d);
      UnionResult u = thin_svd_union(carry.basis, carry.spectrum, factors, k_out);
      if (u.rank_limited) ++report.rank_limited;
      const Index grown = u.basis.rank() - carry.basis.rank();
      for (auto& p : table[slot]) p = ExpertProtection{u.basis, u.spectrum};
      std::fill(added.begin(), added.end(), grown);
    }
    report.growth.push_back(std::move(added));
  }
  return report;
}

double max_basis_residual(const MoeLoraModel& model, const ProtectionTable& table) {
  require(static_cast<Index>(table.size()) == model.num_adapted(), "table does not match the model");
  double worst = 0.0;
  for (std::size_t slot = 0; slot < table.size(); ++slot) {
    const auto& layer = model.adapters()[slot];
    for (std::size_t e = 0; e < table[slot].size(); ++e) {
      const auto& basis = table[slot][e].basis;
      if (basis.empty()) continue;
      worst = std::max(worst, (basis.columns().transpose() * layer.experts[e].b).norm());
    }
  }
  return worst;
}

}  // namespace prism
