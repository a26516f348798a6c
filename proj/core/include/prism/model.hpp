#pragma once

#include "prism/types.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace prism {

struct ModelConfig {
  Index dim = 32;
  Index classes = 4;
  Index layers = 4;
  std::vector<Index> adapted_layers{2, 3};
  Index experts = 4;
  Index top_k = 1;
  Index lora_rank = 4;
  double lora_alpha = 16.0;
  double backbone_gain = 1.0;
  /// 0 draws i.i.d. Gaussian layers. A positive value gives every layer the
  /// singular values exp(-decay * i) (rescaled to the same Frobenius norm), so
  /// activations concentrate on a low-dimensional manifold.
  double backbone_decay = 0.0;
  double bias_scale = 0.1;
  double router_scale = 1.0;
  double readout_gain = 1.0;
  /// Route densely over all experts while the routers train on the first
  /// task; top-K from the start otherwise.
  bool dense_router_warmup = false;
  std::uint64_t seed = 0;

  bool operator==(const ModelConfig&) const = default;
};

/// Stack of frozen random affine layers with tanh, then a linear readout.
struct FrozenBackbone {
  std::vector<Matrix> weights;  // d x d
  std::vector<Vector> biases;   // d
  Matrix readout;               // m x d
};

struct LoraExpert {
  Matrix a;  // r x d
  Matrix b;  // d x r
};

struct RouterState {
  Matrix weight;  // E x d
  bool frozen = false;

  /// One-way switch; there is no unfreeze.
  void freeze() { frozen = true; }
};

/// One adapted backbone layer: its router, E LoRA experts, and each expert's
/// merged update from previously finished tasks (d x d, frozen).
struct AdaptedLayer {
  Index layer = 0;
  RouterState router;
  std::vector<LoraExpert> experts;
  std::vector<Matrix> merged;
};

class MoeLoraModel {
 public:
  MoeLoraModel() = default;
  explicit MoeLoraModel(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  Index dim() const { return config_.dim; }
  Index classes() const { return config_.classes; }
  Index num_experts() const { return config_.experts; }
  Index lora_rank() const { return config_.lora_rank; }
  Index num_adapted() const { return static_cast<Index>(adapters_.size()); }
  double scaling() const { return config_.lora_alpha / static_cast<double>(config_.lora_rank); }

  const FrozenBackbone& backbone() const { return backbone_; }
  const std::vector<AdaptedLayer>& adapters() const { return adapters_; }
  std::vector<AdaptedLayer>& adapters() { return adapters_; }

  /// Index into adapters() for backbone layer `layer`, or -1.
  Index adapter_slot(Index layer) const;

  /// Route over all experts instead of the top-K subset.
  bool dense_routing = false;

  bool router_frozen() const;
  void freeze_routers();

  /// Trainable parameters flattened in a fixed order: per adapted layer, per
  /// expert A then B (column-major); router weights appended when requested.
  Vector flatten_trainable(bool include_router) const;
  void assign_trainable(const Vector& params, bool include_router);
  Index trainable_size(bool include_router) const;

 private:
  ModelConfig config_;
  FrozenBackbone backbone_;
  std::vector<AdaptedLayer> adapters_;
  std::vector<Index> slot_of_layer_;
};

struct AdaptedLayerTrace {
  Vector input;         // h entering the layer
  Vector router_input;  // adapter-free backbone activation at this layer
  Vector pi;            // routing weights over all experts
  std::vector<Index> active;
  std::vector<Vector> a_times_h;    // A_e h, per active expert
  std::vector<Vector> expert_out;   // (merged_e + s B_e A_e) h, per active expert
  Vector delta;                     // dl/dy at the layer's pre-activation (after backward)
  Vector sensitivity;               // ||B_e^T delta||^2 per expert, 0 when inactive
};

/// Everything forward() records for one sample; backward() fills in delta and
/// sensitivity. A batch trace is a vector of these.
struct SampleTrace {
  std::vector<Vector> layer_inputs;
  std::vector<Vector> outputs;  // post-tanh activations
  std::vector<AdaptedLayerTrace> adapted;
  Vector logits;
  bool has_backward = false;
};

using BatchTrace = std::vector<SampleTrace>;

struct ExpertGrad {
  Matrix a;
  Matrix b;
};

struct LayerGrad {
  std::vector<ExpertGrad> experts;
  Matrix router;
};

struct ModelGrad {
  std::vector<LayerGrad> layers;
  bool has_router = false;

  static ModelGrad zeros_like(const MoeLoraModel& model);
  ModelGrad& operator+=(const ModelGrad& other);
  ModelGrad& operator*=(double factor);
};

struct RoutingDecision {
  Vector pi;
  std::vector<Index> active;
};

/// softmax(W_r h) and the K largest entries, ties to the lower index.
RoutingDecision select_topk(const RouterState& router, const Vector& h, Index k);

SampleTrace forward(const MoeLoraModel& model, const Vector& x);

/// Exact gradient of a scalar loss whose gradient w.r.t. the logits is
/// `loss_grad`. Router gradients are produced only while routers are unfrozen.
ModelGrad backward(const MoeLoraModel& model, SampleTrace& trace, const Vector& loss_grad);

/// Logits of the model with every adapter removed.
Vector backbone_logits(const MoeLoraModel& model, const Vector& x);

struct LossAndGrad {
  double loss = 0.0;
  Vector grad;
};

/// Softmax cross-entropy and its gradient with respect to the logits.
LossAndGrad cross_entropy(const Vector& logits, Index label);

/// Argmax with ties to the lowest index.
Index argmax(const Vector& v);

/// Folds s * B_e A_e into each expert's merged update.
void merge_adapters(MoeLoraModel& model);

/// B <- 0 and A redrawn uniform in [-1/sqrt(d), 1/sqrt(d)]; routers untouched.
void reset_for_task(MoeLoraModel& model, std::mt19937_64& rng);

}  // namespace prism
