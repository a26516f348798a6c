#include "prism/client.hpp"

#include "prism/scheduler.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace prism {

void CovarianceAccumulator::append(const Vector& column) {
  require(column.size() == stack_.rows(), "accumulator column has the wrong dimension");
  require(column.allFinite(), "accumulator columns must be finite");
  if (count_ == stack_.cols()) stack_.conservativeResize(Eigen::NoChange, std::max<Index>(16, 2 * count_));
  stack_.col(count_++) = column;
}

ClientState make_client(Index id, const MoeLoraModel& global, const ClientConfig& config,
                        std::uint64_t seed) {
  require(config.learning_rate > 0.0, "learning rate must be positive");
  require(config.batch_size >= 1, "batch size must be positive");
  require(config.warmup_steps >= 0, "warmup length must be nonnegative");
  ClientState state;
  state.id = id;
  state.model = global;
  state.config = config;
  state.rng.seed(seed);
  for (Index slot = 0; slot < global.num_adapted(); ++slot) {
    state.accumulators.emplace_back(static_cast<std::size_t>(global.num_experts()),
                                    CovarianceAccumulator(global.dim()));
  }
  return state;
}

void sync_from_global(ClientState& state, const MoeLoraModel& global) { state.model = global; }

void accumulate_covariance(ClientState& state, const BatchTrace& trace) {
  const auto& model = state.model;
  for (const auto& sample : trace) {
    require(sample.has_backward, "covariance needs traces that went through backward()");
    require(static_cast<Index>(sample.adapted.size()) == model.num_adapted(),
            "trace does not come from this model");
    for (std::size_t slot = 0; slot < sample.adapted.size(); ++slot) {
      const auto& lt = sample.adapted[slot];
      for (Index e : lt.active) {
        double weight = 1.0;
        switch (state.config.recipe) {
          case CovarianceRecipe::routing_weighted:
            weight = lt.pi[e] * lt.sensitivity[e];
            break;
          case CovarianceRecipe::sensitivity_only:
            weight = lt.sensitivity[e];
            break;
          case CovarianceRecipe::activation:
            break;
        }
        if (weight <= 0.0) continue;
        state.accumulators[slot][static_cast<std::size_t>(e)].append(std::sqrt(weight) * lt.input);
      }
    }
  }
}

EpochStats local_train_epoch(ClientState& state, const SampleBatch& data, const ExpertBases& bases) {
  auto& model = state.model;
  require(data.size() >= 1, "client has no training data");
  require(data.dim() == model.dim(), "training data has the wrong dimension");
  const ProjectionMode mode = state.config.projection;
  const bool project = mode != ProjectionMode::none && !bases.empty();
  if (project) {
    require(static_cast<Index>(bases.size()) == model.num_adapted(), "one basis row per adapted layer");
    for (const auto& row : bases) {
      require(static_cast<Index>(row.size()) == model.num_experts(), "one basis per expert");
      for (const auto& b : row) require(b.dim() == model.dim(), "basis dimension differs from d");
    }
  }

  std::vector<Index> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), state.rng);

  const double lr = state.config.learning_rate;
  const auto batch = static_cast<std::size_t>(state.config.batch_size);
  EpochStats stats;
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < order.size(); start += batch) {
    const std::size_t stop = std::min(order.size(), start + batch);
    ModelGrad grad = ModelGrad::zeros_like(model);
    BatchTrace traces;
    traces.reserve(stop - start);
    for (std::size_t j = start; j < stop; ++j) {
      const Index i = order[j];
      SampleTrace trace = forward(model, data.inputs.col(i));
      const auto ce = cross_entropy(trace.logits, data.labels[static_cast<std::size_t>(i)]);
      loss_sum += ce.loss;
      grad += backward(model, trace, ce.grad);
      traces.push_back(std::move(trace));
    }
    grad *= 1.0 / static_cast<double>(stop - start);

    const double alpha = warmup_alpha(state.step, state.config.warmup_steps);
    for (std::size_t slot = 0; slot < model.adapters().size(); ++slot) {
      auto& layer = model.adapters()[slot];
      auto& lg = grad.layers[slot];
      for (std::size_t e = 0; e < layer.experts.size(); ++e) {
        auto& g = lg.experts[e];
        if (project) {
          const auto& basis = bases[slot][e];
          if (mode == ProjectionMode::bilateral) {
            auto projected = bilateral_project(basis, g.a, g.b, alpha);
            g.a = std::move(projected.grad_a);
            g.b = std::move(projected.grad_b);
          } else {
            g.a = ShrinkageProjector(basis, alpha).apply_right(g.a);
          }
        }
        layer.experts[e].a.noalias() -= lr * g.a;
        layer.experts[e].b.noalias() -= lr * g.b;
      }
      if (!layer.router.frozen) layer.router.weight.noalias() -= lr * lg.router;
    }
    accumulate_covariance(state, traces);
    ++state.step;
    ++stats.steps;
  }
  stats.mean_loss = loss_sum / static_cast<double>(data.size());
  return stats;
}

CovarianceFactor factorize_stack(const Matrix& stack, Index k) {
  require(k >= 0, "factor rank must be nonnegative");
  CovarianceFactor factor;
  factor.columns = Matrix(stack.rows(), 0);
  if (stack.cols() == 0 || k == 0) return factor;
  Eigen::BDCSVD<Matrix> svd(stack, Eigen::ComputeThinU);
  const Vector& sigma = svd.singularValues();
  if (sigma.size() == 0 || sigma[0] == 0.0) return factor;
  Index achievable = 0;
  while (achievable < sigma.size() && sigma[achievable] > 1e-12 * sigma[0]) ++achievable;
  const Index keep = std::min(k, achievable);
  factor.columns = svd.matrixU().leftCols(keep) * sigma.head(keep).asDiagonal();
  return factor;
}

ExpertFactors factorize_covariance(ClientState& state, std::span<const Index> k_per_layer) {
  require(static_cast<Index>(k_per_layer.size()) == state.model.num_adapted(),
          "one k per adapted layer");
  ExpertFactors out;
  for (std::size_t slot = 0; slot < state.accumulators.size(); ++slot) {
    std::vector<CovarianceFactor> row;
    for (auto& acc : state.accumulators[slot]) {
      row.push_back(factorize_stack(acc.columns(), k_per_layer[slot]));
      acc.clear();
    }
    out.push_back(std::move(row));
  }
  return out;
}

std::vector<double> serialize_factor(const CovarianceFactor& factor) {
  const auto flat = factor.columns.reshaped();
  return {flat.begin(), flat.end()};
}

CovarianceFactor deserialize_factor(std::span<const double> payload, Index dim) {
  require(dim >= 1, "factor dimension must be positive");
  require(static_cast<Index>(payload.size()) % dim == 0, "payload is not a whole number of columns");
  CovarianceFactor factor;
  const Index cols = static_cast<Index>(payload.size()) / dim;
  factor.columns = Eigen::Map<const Matrix>(payload.data(), dim, cols);
  return factor;
}

}  // namespace prism
