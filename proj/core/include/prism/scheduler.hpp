#pragma once

#include "prism/model.hpp"
#include "prism/tasks.hpp"
#include "prism/types.hpp"

#include <filesystem>
#include <span>
#include <vector>

namespace prism {

/// Per adapted layer conflict score in [0, 1].
struct InterferenceLandscape {
  std::vector<double> gamma;
  /// Task pairs skipped because one of the mean gradients vanished.
  Index degenerate_pairs = 0;
};

struct BudgetAllocation {
  std::vector<Index> k;
  Index k_bar = 0;
  /// Set when every gamma was zero and the budget was split evenly instead.
  bool uniform_fallback = false;

  Index total() const;
};

/// Mean over unordered task pairs of max(0, -cos(g_t1, g_t2)) for one layer.
/// Pairs where either vector is zero contribute 0 and are counted in
/// `degenerate`.
double rectified_conflict(std::span<const Vector> task_gradients, Index* degenerate = nullptr);

/// Mean routing-weighted LoRA-factor gradient per task and adapted layer
/// (experts' A and B gradients concatenated), indexed [task][slot].
std::vector<std::vector<Vector>> mean_layer_gradients(const MoeLoraModel& model,
                                                      std::span<const SampleBatch> tasks);

InterferenceLandscape measure_gamma(const MoeLoraModel& model, std::span<const SampleBatch> tasks);

/// Continuous optimum k_bar * gamma_l^2 / ||gamma||^2.
std::vector<double> waterfill_continuous(std::span<const double> gamma, Index k_bar);

/// Integer water-filling: floor, hand out the remainder by descending
/// fractional part (ties to the lower layer), guarantee one unit to every
/// layer with gamma > 0, cap each layer at d - 1 and spread the overflow by the
/// same rule.
BudgetAllocation waterfill_budget(std::span<const double> gamma, Index k_bar, Index d);

/// k_bar split as evenly as possible (earlier layers get the remainder),
/// capped at d - 1.
BudgetAllocation uniform_budget(Index layers, Index k_bar, Index d);

/// min(step / s0, 1), and 1 when s0 = 0.
double warmup_alpha(Index step, Index s0);

/// layer,gamma,k_l rows for each adapted layer.
void write_gamma_csv(const std::filesystem::path& path, std::span<const Index> layers,
                     const InterferenceLandscape& landscape, const BudgetAllocation& budget);

}  // namespace prism
