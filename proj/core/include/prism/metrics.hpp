#pragma once

#include "prism/subspace.hpp"
#include "prism/types.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace prism {

/// r(i, j): accuracy on task j after training task i. The strict upper
/// triangle holds accuracy on tasks not yet trained.
struct AccuracyMatrix {
  Matrix r;

  Index tasks() const { return r.rows(); }
};

struct TransferMetrics {
  double aa = 0.0;
  std::optional<double> bwt;
  std::optional<double> fwt;
};

TransferMetrics compute_aa_bwt_fwt(const AccuracyMatrix& acc);

/// k / d.
double nullspace_consumption(const OrthonormalBasis& basis);

/// Activations h (d x n) entering one adapted layer on one task, with the
/// per-sample loss sensitivity s (n).
struct ActivationRecord {
  Matrix h;
  Vector s;
};

struct OverlapPair {
  Index first = 0;
  Index second = 0;
  Index k = 0;
  double omega_a = 0.0;  // unweighted activation covariance
  double omega_g = 0.0;  // s-weighted covariance
  /// k was lowered to the achievable rank of one of the covariances.
  bool reduced = false;
};

/// Top-k eigenbasis of sum_i w_i h_i h_i^T from a thin SVD of the weighted
/// columns; returns fewer columns when the covariance has lower rank.
OrthonormalBasis top_k_covariance_basis(const Matrix& h, const Vector& weights, Index k);

std::vector<OverlapPair> overlap_contrast(std::span<const ActivationRecord> tasks, Index k);

/// 2r(d - k_cum) for a single basis, 2r(E d - k_cum) for per-expert bases,
/// clamped at zero.
Index plasticity_capacity(Index r, Index d, Index experts, Index k_cum, bool per_expert);

struct RoutingStats {
  Matrix heatmap;  // tasks x experts, mean pi
  double flip_rate = 0.0;
  double entropy = 0.0;
};

/// `pi_by_task[t]` holds one column of routing weights per task-t sample.
Matrix routing_heatmap(std::span<const Matrix> pi_by_task);

/// Mean Shannon entropy (nats) of the routing distributions.
double routing_entropy(std::span<const Matrix> pi_by_task);

/// Fraction of (sample, transition) pairs whose top-1 expert differs between
/// consecutive checkpoints. Every checkpoint must list the same samples.
double flip_rate(std::span<const std::vector<Index>> top1_by_checkpoint);

RoutingStats routing_stats(std::span<const Matrix> pi_by_task,
                           std::span<const std::vector<Index>> top1_by_checkpoint);

/// Shortest decimal form that reads back to the same double.
std::string format_double(double value);

void write_accuracy_csv(const std::filesystem::path& path, const AccuracyMatrix& acc);
AccuracyMatrix read_accuracy_csv(const std::filesystem::path& path);

/// task,acc_after_training,final_acc,forgetting,fwt_entry
void write_task_metrics_csv(const std::filesystem::path& path, const AccuracyMatrix& acc);

}  // namespace prism
