#pragma once

#include "prism/model.hpp"
#include "prism/types.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace prism {

/// Column-per-sample inputs with integer class labels.
struct SampleBatch {
  Matrix inputs;  // d x n
  std::vector<Index> labels;

  Index size() const { return inputs.cols(); }
  Index dim() const { return inputs.rows(); }
  Vector sample(Index i) const { return inputs.col(i); }
  SampleBatch subset(std::span<const Index> indices) const;
  static SampleBatch concat(std::span<const SampleBatch> parts);
};

struct TaskSpec {
  Index task_id = 0;
  std::vector<Vector> class_means;
  Matrix rotation;  // d x d orthogonal, applied to the task-0 class means
  double opposition_angle = 0.0;
  double noise_scale = 0.0;
};

struct Task {
  TaskSpec spec;
  SampleBatch train;
  SampleBatch test;
};

struct TaskSequenceConfig {
  Index n_tasks = 4;
  Index dim = 32;
  Index classes = 4;
  Index samples_per_task = 600;
  Index test_samples_per_task = 300;
  double opposition = 1.0;
  double mean_scale = 2.0;
  double noise_scale = 0.6;
  std::uint64_t seed = 0;

  bool operator==(const TaskSequenceConfig&) const = default;
};

/// Rotation angle of task t: opposition * pi * t / (n_tasks - 1).
double task_rotation_angle(Index task, Index n_tasks, double opposition);

/// Task 0 places class c at mean_scale * e_c. Task t rotates every class mean
/// by its angle in the plane spanned by e_c and a task-specific partner axis
/// orthogonal to all class axes, so at angle pi the means are negated and at
/// intermediate angles they pick up fresh directions. Needs d >= 2m.
std::vector<Task> generate_sequence(const TaskSequenceConfig& config);

/// Per-client index lists into one task's sample pool.
struct ClientPartition {
  std::vector<std::vector<Index>> indices;
  double beta = 0.0;

  Index clients() const { return static_cast<Index>(indices.size()); }
  std::vector<double> weights() const;
};

/// Label-skew Dirichlet(beta) split: each class's samples are divided among
/// clients by an independent Dirichlet draw. Draws that leave a client empty
/// are redrawn.
ClientPartition dirichlet_partition(std::span<const Index> labels, Index n_clients, double beta,
                                    std::uint64_t seed);

/// Fraction of columns whose argmax logit (ties to the lowest index) matches
/// the label.
double accuracy_from_logits(const Matrix& logits, std::span<const Index> labels);

double evaluate_accuracy(const MoeLoraModel& model, const SampleBatch& batch);

/// Writes <stem>_inputs.csv (one row per sample) and <stem>_labels.csv.
void export_batch_csv(const SampleBatch& batch, const std::filesystem::path& stem);

}  // namespace prism
