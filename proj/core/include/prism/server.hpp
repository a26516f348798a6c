#pragma once

#include "prism/client.hpp"
#include "prism/model.hpp"
#include "prism/subspace.hpp"
#include "prism/types.hpp"

#include <span>
#include <vector>

namespace prism {

struct ExpertProtection {
  OrthonormalBasis basis;
  Spectrum spectrum;
};

/// Indexed [adapted slot][expert].
using ProtectionTable = std::vector<std::vector<ExpertProtection>>;

ProtectionTable empty_protection(const MoeLoraModel& model);
ExpertBases bases_of(const ProtectionTable& table);

struct GlobalState {
  MoeLoraModel model;
  ProtectionTable protection;
  Index round = 0;
  /// Set by a union, cleared once the bases have gone out to the clients.
  bool broadcast_pending = false;
};

/// Weighted elementwise mean, summed in ascending client order.
Vector fedavg_aggregate(std::span<const Vector> client_params, std::span<const double> weights);

/// FedAvg over client replicas: LoRA factors always, router weights only while
/// the routers are unfrozen.
void fedavg_models(MoeLoraModel& global, std::span<const MoeLoraModel> clients,
                   std::span<const double> weights);

/// Splits one layer's per-task increment among experts in proportion to the
/// energy their new covariance carries (largest remainder, ties to the lower
/// expert). Experts with zero energy get nothing.
std::vector<Index> split_layer_budget(std::span<const double> energies, Index k_layer);

/// Sum over clients of w_c ||L_c||_F^2, per [slot][expert].
std::vector<std::vector<double>> factor_energies(std::span<const ExpertFactors> uploads,
                                                 std::span<const double> weights);

struct UnionReport {
  /// Experts whose union produced fewer columns than requested.
  Index rank_limited = 0;
  /// Columns added this task, [slot][expert].
  std::vector<std::vector<Index>> growth;
};

/// Per-expert union. Layer l's increment k_l is shared across that layer's
/// experts by split_layer_budget; expert e's basis then becomes the
/// top-(k_carry + k_e) eigenpairs of carry + sum_c w_c L_c L_c^T.
UnionReport pefosu_update(ProtectionTable& table, std::span<const ExpertFactors> uploads,
                          std::span<const double> weights, std::span<const Index> k_layer);

/// Monolithic variant: one basis per layer built from every expert's factors,
/// grown by k_l per task and copied into each expert's slot.
UnionReport shared_update(ProtectionTable& table, std::span<const ExpertFactors> uploads,
                          std::span<const double> weights, std::span<const Index> k_layer);

/// max over (slot, expert) of ||U_e^T B_e||_F.
double max_basis_residual(const MoeLoraModel& model, const ProtectionTable& table);

}  // namespace prism
