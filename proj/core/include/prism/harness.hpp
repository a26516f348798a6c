#pragma once

#include "prism/config.hpp"
#include "prism/metrics.hpp"
#include "prism/scheduler.hpp"
#include "prism/types.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace prism {

/// One checkpoint of one expert. "round" rows are written after every FedAvg
/// with the basis the round trained against; "task_end" rows after the union.
struct DiagnosticRow {
  std::string event;
  Index task = 0;
  Index round = 0;
  Index layer = 0;
  Index expert = 0;
  Index basis_rank = 0;
  double consumption = 0.0;
  double residual = 0.0;  // ||U^T B||_F
  /// Smallest principal angle between the previous basis and this task's
  /// gradient subspace; NaN when either is empty.
  double theta_min = 0.0;
};

struct RunReport {
  ExperimentConfig config;
  AccuracyMatrix accuracy;
  TransferMetrics transfer;
  InterferenceLandscape landscape;
  BudgetAllocation budget;
  std::vector<DiagnosticRow> diagnostics;
  /// Per adapted layer, tasks x experts mean routing weight under the final model.
  std::vector<Matrix> heatmaps;
  double flip_rate = 0.0;
  double routing_entropy = 0.0;
  /// Largest ||U^T B||_F seen at any round checkpoint.
  double max_basis_residual = 0.0;
  /// consumption[t][slot][expert] after task t's union.
  std::vector<std::vector<std::vector<double>>> consumption;
  std::vector<OverlapPair> overlaps;
  Index rank_limited_unions = 0;
  std::size_t max_factor_bytes = 0;
  double wall_seconds = 0.0;
};

/// Default desk-scale scenario.
ExperimentConfig standard_config();

/// Ten slowly rotating tasks; long enough for a single shared basis to fill up.
ExperimentConfig long_config();

/// Six nearly aligned tasks with activation/gradient overlap traces at k = 2.
ExperimentConfig overlap_config();

/// "standard", "long" or "overlap".
ExperimentConfig scenario_config(std::string_view name);

/// Diagnostic pass: a fresh model trained without protection on the pooled
/// tasks, then gamma per adapted layer.
InterferenceLandscape diagnose(const ExperimentConfig& config, std::span<const Task> tasks);
InterferenceLandscape diagnose(const ExperimentConfig& config);

/// The full lifecycle: gamma, budget, then per task R rounds of local training
/// and FedAvg followed by factorization and the basis union.
RunReport run_experiment(const ExperimentConfig& config);

/// run_experiment restricted to method = monolithic or activation.
RunReport run_baseline(const ExperimentConfig& config);

/// report.json, accuracy_matrix.csv, metrics.csv, heatmap.csv,
/// diagnostics.csv, gamma.csv.
void write_report(const RunReport& report, const std::filesystem::path& dir);

std::string report_json(const RunReport& report);

struct SweepPoint {
  std::string value;
  std::uint64_t seed = 0;
  TransferMetrics transfer;
};

/// One run per (value, seed), each written to <dir>/<axis>_<value>_seed<s>,
/// plus <dir>/sweep.csv with one row per run.
std::vector<SweepPoint> sweep(const ExperimentConfig& base, std::string_view axis,
                              std::span<const std::string> values, std::span<const std::uint64_t> seeds,
                              const std::filesystem::path& dir);

struct VerifyRow {
  std::string name;
  double value = 0.0;
  double threshold = 0.0;
  bool pass = false;
};

/// Runs every oracle check at its documented size.
std::vector<VerifyRow> run_verification(std::uint64_t seed);
void write_verification_csv(const std::filesystem::path& path, std::span<const VerifyRow> rows);

}  // namespace prism
