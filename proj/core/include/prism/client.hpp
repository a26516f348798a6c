#pragma once

#include "prism/model.hpp"
#include "prism/subspace.hpp"
#include "prism/tasks.hpp"
#include "prism/types.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace prism {

/// Which per-sample weight scales h in the covariance column stack.
enum class CovarianceRecipe {
  routing_weighted,  // sqrt(pi_e * s_e) h
  sensitivity_only,  // sqrt(s_e) h
  activation,        // h
};

enum class ProjectionMode {
  none,
  bilateral,  // gradA * Pi and Pi * gradB
  a_only,     // gradA * Pi, gradB untouched
};

/// Indexed [adapted slot][expert].
using ExpertBases = std::vector<std::vector<OrthonormalBasis>>;
using ExpertFactors = std::vector<std::vector<CovarianceFactor>>;

/// Growing d x n stack of weighted activation columns.
class CovarianceAccumulator {
 public:
  CovarianceAccumulator() = default;
  explicit CovarianceAccumulator(Index dim) : stack_(dim, 0) {}

  void append(const Vector& column);
  Index dim() const { return stack_.rows(); }
  Index count() const { return count_; }
  bool empty() const { return count_ == 0; }
  /// The used d x count() block.
  Matrix columns() const { return stack_.leftCols(count_); }
  void clear() { count_ = 0; }

 private:
  Matrix stack_;
  Index count_ = 0;
};

struct ClientConfig {
  double learning_rate = 1.0;
  Index batch_size = 16;
  /// s_0 in optimizer steps.
  Index warmup_steps = 0;
  CovarianceRecipe recipe = CovarianceRecipe::routing_weighted;
  ProjectionMode projection = ProjectionMode::bilateral;
};

struct ClientState {
  Index id = 0;
  MoeLoraModel model;
  ClientConfig config;
  std::vector<std::vector<CovarianceAccumulator>> accumulators;  // [slot][expert]
  Index step = 0;
  std::mt19937_64 rng;
};

ClientState make_client(Index id, const MoeLoraModel& global, const ClientConfig& config,
                        std::uint64_t seed);

/// Copies the global model into the client's replica; accumulators and the
/// step counter carry over.
void sync_from_global(ClientState& state, const MoeLoraModel& global);

struct EpochStats {
  double mean_loss = 0.0;
  Index steps = 0;
};

/// One shuffled pass over `data` in mini-batches. Each step projects every
/// expert's factor gradients with alpha = warmup_alpha(step, s0), takes an SGD
/// step and folds the batch into the covariance accumulators. An empty
/// `bases` (or ProjectionMode::none) trains unprotected.
EpochStats local_train_epoch(ClientState& state, const SampleBatch& data, const ExpertBases& bases);

/// Appends one weighted column per (active expert, sample) according to the
/// client's recipe. Traces must have been through backward().
void accumulate_covariance(ClientState& state, const BatchTrace& trace);

/// L = top-k singular vectors of `stack` scaled by their singular values,
/// truncated to the numerical rank.
CovarianceFactor factorize_stack(const Matrix& stack, Index k);

/// Factors every expert's accumulator with the layer's k, then clears them.
/// Experts that were never routed return an empty factor.
ExpertFactors factorize_covariance(ClientState& state, std::span<const Index> k_per_layer);

/// Flat column-major payload of a factor, as it would travel to the server.
std::vector<double> serialize_factor(const CovarianceFactor& factor);
CovarianceFactor deserialize_factor(std::span<const double> payload, Index dim);

}  // namespace prism
