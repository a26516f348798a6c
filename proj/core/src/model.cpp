#include "prism/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace prism {

namespace {

Matrix gaussian(Index rows, Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = normal(rng);
  return m;
}

Matrix uniform_a(Index rank, Index d, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  std::uniform_real_distribution<double> uniform(-bound, bound);
  Matrix a(rank, d);
  for (Index j = 0; j < d; ++j)
    for (Index i = 0; i < rank; ++i) a(i, j) = uniform(rng);
  return a;
}

Vector softmax(const Vector& logits) {
  const double peak = logits.maxCoeff();
  Vector p = (logits.array() - peak).exp().matrix();
  return p / p.sum();
}

}  // namespace

MoeLoraModel::MoeLoraModel(const ModelConfig& config) : config_(config) {
  const Index d = config.dim;
  require(d >= 1 && config.classes >= 2, "model needs d >= 1 and at least two classes");
  require(config.layers >= 1, "model needs at least one layer");
  require(config.experts >= 1 && config.top_k >= 1 && config.top_k <= config.experts,
          "top_k must lie in [1, experts]");
  require(config.lora_rank >= 1 && config.lora_rank <= d, "LoRA rank must lie in [1, d]");

  std::mt19937_64 rng(derive_seed(config.seed, 0xB4CB));
  const double std_w = config.backbone_gain / std::sqrt(static_cast<double>(d));
  require(config.backbone_decay >= 0.0, "backbone decay must be nonnegative");
  for (Index l = 0; l < config.layers; ++l) {
    if (config.backbone_decay > 0.0) {
      Vector sigma(d);
      for (Index i = 0; i < d; ++i) sigma[i] = std::exp(-config.backbone_decay * static_cast<double>(i));
      sigma *= config.backbone_gain * std::sqrt(static_cast<double>(d)) / sigma.norm();
      Eigen::HouseholderQR<Matrix> left(gaussian(d, d, 1.0, rng));
      Eigen::HouseholderQR<Matrix> right(gaussian(d, d, 1.0, rng));
      const Matrix q1 = left.householderQ();
      const Matrix q2 = right.householderQ();
      backbone_.weights.push_back(q1 * sigma.asDiagonal() * q2.transpose());
    } else {
      backbone_.weights.push_back(gaussian(d, d, std_w, rng));
    }
    backbone_.biases.push_back(gaussian(d, 1, config.bias_scale, rng).col(0));
  }
  backbone_.readout =
      gaussian(config.classes, d, config.readout_gain / std::sqrt(static_cast<double>(d)), rng);

  slot_of_layer_.assign(static_cast<std::size_t>(config.layers), -1);
  std::vector<Index> layers = config.adapted_layers;
  std::sort(layers.begin(), layers.end());
  require(std::adjacent_find(layers.begin(), layers.end()) == layers.end(),
          "adapted layers must be distinct");
  std::mt19937_64 adapter_rng(derive_seed(config.seed, 0xADA9));
  for (Index layer : layers) {
    require(layer >= 0 && layer < config.layers, "adapted layer index out of range");
    AdaptedLayer adapted;
    adapted.layer = layer;
    adapted.router.weight = gaussian(config.experts, d,
                                     config.router_scale / std::sqrt(static_cast<double>(d)),
                                     adapter_rng);
    for (Index e = 0; e < config.experts; ++e) {
      adapted.experts.push_back({uniform_a(config.lora_rank, d, adapter_rng),
                                 Matrix::Zero(d, config.lora_rank)});
      adapted.merged.push_back(Matrix::Zero(d, d));
    }
    slot_of_layer_[static_cast<std::size_t>(layer)] = static_cast<Index>(adapters_.size());
    adapters_.push_back(std::move(adapted));
  }
}

Index MoeLoraModel::adapter_slot(Index layer) const {
  require(layer >= 0 && layer < config_.layers, "layer index out of range");
  return slot_of_layer_[static_cast<std::size_t>(layer)];
}

bool MoeLoraModel::router_frozen() const {
  return std::all_of(adapters_.begin(), adapters_.end(),
                     [](const AdaptedLayer& a) { return a.router.frozen; });
}

void MoeLoraModel::freeze_routers() {
  for (auto& a : adapters_) a.router.freeze();
}

Index MoeLoraModel::trainable_size(bool include_router) const {
  const Index d = config_.dim;
  const Index per_expert = 2 * config_.lora_rank * d;
  Index n = num_adapted() * config_.experts * per_expert;
  if (include_router) n += num_adapted() * config_.experts * d;
  return n;
}

Vector MoeLoraModel::flatten_trainable(bool include_router) const {
  Vector out(trainable_size(include_router));
  Index offset = 0;
  auto put = [&](const Matrix& m) {
    out.segment(offset, m.size()) = m.reshaped();
    offset += m.size();
  };
  for (const auto& layer : adapters_) {
    for (const auto& expert : layer.experts) {
      put(expert.a);
      put(expert.b);
    }
  }
  if (include_router) {
    for (const auto& layer : adapters_) put(layer.router.weight);
  }
  return out;
}

void MoeLoraModel::assign_trainable(const Vector& params, bool include_router) {
  require(params.size() == trainable_size(include_router), "parameter vector has the wrong size");
  Index offset = 0;
  auto take = [&](Matrix& m) {
    m.reshaped() = params.segment(offset, m.size());
    offset += m.size();
  };
  for (auto& layer : adapters_) {
    for (auto& expert : layer.experts) {
      take(expert.a);
      take(expert.b);
    }
  }
  if (include_router) {
    for (auto& layer : adapters_) take(layer.router.weight);
  }
}

ModelGrad ModelGrad::zeros_like(const MoeLoraModel& model) {
  ModelGrad g;
  g.has_router = !model.router_frozen();
  for (const auto& layer : model.adapters()) {
    LayerGrad lg;
    for (const auto& expert : layer.experts) {
      lg.experts.push_back({Matrix::Zero(expert.a.rows(), expert.a.cols()),
                            Matrix::Zero(expert.b.rows(), expert.b.cols())});
    }
    lg.router = Matrix::Zero(layer.router.weight.rows(), layer.router.weight.cols());
    g.layers.push_back(std::move(lg));
  }
  return g;
}

ModelGrad& ModelGrad::operator+=(const ModelGrad& other) {
  require(layers.size() == other.layers.size(), "gradient structures differ");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (std::size_t e = 0; e < layers[l].experts.size(); ++e) {
      layers[l].experts[e].a += other.layers[l].experts[e].a;
      layers[l].experts[e].b += other.layers[l].experts[e].b;
    }
    layers[l].router += other.layers[l].router;
  }
  has_router = has_router || other.has_router;
  return *this;
}

ModelGrad& ModelGrad::operator*=(double factor) {
  for (auto& layer : layers) {
    for (auto& expert : layer.experts) {
      expert.a *= factor;
      expert.b *= factor;
    }
    layer.router *= factor;
  }
  return *this;
}

RoutingDecision select_topk(const RouterState& router, const Vector& h, Index k) {
  const Index experts = router.weight.rows();
  require(k >= 1 && k <= experts, "top-K must lie in [1, E]");
  require(h.size() == router.weight.cols(), "router input has the wrong dimension");
  RoutingDecision decision;
  decision.pi = softmax(router.weight * h);
  std::vector<Index> order(static_cast<std::size_t>(experts));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return decision.pi[a] > decision.pi[b]; });
  decision.active.assign(order.begin(), order.begin() + k);
  std::sort(decision.active.begin(), decision.active.end());
  return decision;
}

SampleTrace forward(const MoeLoraModel& model, const Vector& x) {
  require(x.size() == model.dim(), "input has the wrong dimension");
  require(x.allFinite(), "input must be finite");
  const auto& bb = model.backbone();
  const Index layers = static_cast<Index>(bb.weights.size());
  const double s = model.scaling();
  const Index k = model.dense_routing ? model.num_experts() : model.config().top_k;

  SampleTrace trace;
  Vector h = x;
  Vector plain = x;  // adapter-free path, feeds the routers
  for (Index l = 0; l < layers; ++l) {
    const auto li = static_cast<std::size_t>(l);
    trace.layer_inputs.push_back(h);
    Vector z = bb.weights[li] * h + bb.biases[li];
    const Index slot = model.adapter_slot(l);
    if (slot >= 0) {
      const auto& layer = model.adapters()[static_cast<std::size_t>(slot)];
      AdaptedLayerTrace lt;
      lt.input = h;
      lt.router_input = plain;
      RoutingDecision route = select_topk(layer.router, plain, k);
      lt.pi = std::move(route.pi);
      lt.active = std::move(route.active);
      for (Index e : lt.active) {
        const auto& expert = layer.experts[static_cast<std::size_t>(e)];
        Vector ah = expert.a * h;
        Vector out = layer.merged[static_cast<std::size_t>(e)] * h + s * (expert.b * ah);
        z += lt.pi[e] * out;
        lt.a_times_h.push_back(std::move(ah));
        lt.expert_out.push_back(std::move(out));
      }
      lt.sensitivity = Vector::Zero(model.num_experts());
      trace.adapted.push_back(std::move(lt));
    }
    h = z.array().tanh().matrix();
    trace.outputs.push_back(h);
    plain = (bb.weights[li] * plain + bb.biases[li]).array().tanh().matrix();
  }
  trace.logits = bb.readout * h;
  return trace;
}

ModelGrad backward(const MoeLoraModel& model, SampleTrace& trace, const Vector& loss_grad) {
  require(loss_grad.size() == model.classes(), "loss gradient has the wrong dimension");
  const auto& bb = model.backbone();
  const Index layers = static_cast<Index>(bb.weights.size());
  require(static_cast<Index>(trace.outputs.size()) == layers &&
              static_cast<Index>(trace.adapted.size()) == model.num_adapted(),
          "trace does not come from this model");
  const double s = model.scaling();

  ModelGrad grad = ModelGrad::zeros_like(model);
  Vector g = bb.readout.transpose() * loss_grad;
  for (Index l = layers - 1; l >= 0; --l) {
    const auto li = static_cast<std::size_t>(l);
    const Vector& out = trace.outputs[li];
    const Vector gz = g.cwiseProduct((1.0 - out.array().square()).matrix());
    Vector gin = bb.weights[li].transpose() * gz;
    const Index slot = model.adapter_slot(l);
    if (slot >= 0) {
      const auto si = static_cast<std::size_t>(slot);
      const auto& layer = model.adapters()[si];
      auto& lt = trace.adapted[si];
      require(lt.input.size() == model.dim(), "trace does not come from this model");
      lt.delta = gz;
      lt.sensitivity = Vector::Zero(model.num_experts());
      auto& lg = grad.layers[si];
      Vector dpi = Vector::Zero(model.num_experts());
      for (std::size_t j = 0; j < lt.active.size(); ++j) {
        const Index e = lt.active[j];
        const auto ei = static_cast<std::size_t>(e);
        const auto& expert = layer.experts[ei];
        const double pi = lt.pi[e];
        const Vector bt_delta = expert.b.transpose() * gz;
        lt.sensitivity[e] = bt_delta.squaredNorm();
        lg.experts[ei].b.noalias() += (pi * s) * gz * lt.a_times_h[j].transpose();
        lg.experts[ei].a.noalias() += (pi * s) * bt_delta * lt.input.transpose();
        dpi[e] = gz.dot(lt.expert_out[j]);
        gin.noalias() += pi * (layer.merged[ei].transpose() * gz);
        gin.noalias() += (pi * s) * (expert.a.transpose() * bt_delta);
      }
      if (!layer.router.frozen) {
        // d pi_e / d logit_j = pi_e (1[e == j] - pi_j), summed over selected e.
        Vector dlogit = Vector::Zero(model.num_experts());
        for (Index e : lt.active) {
          for (Index j = 0; j < model.num_experts(); ++j) {
            dlogit[j] += dpi[e] * lt.pi[e] * ((e == j ? 1.0 : 0.0) - lt.pi[j]);
          }
        }
        lg.router.noalias() += dlogit * lt.router_input.transpose();
      }
    }
    g = std::move(gin);
  }
  grad.has_router = !model.router_frozen();
  trace.has_backward = true;
  return grad;
}

Vector backbone_logits(const MoeLoraModel& model, const Vector& x) {
  require(x.size() == model.dim(), "input has the wrong dimension");
  const auto& bb = model.backbone();
  Vector h = x;
  for (std::size_t l = 0; l < bb.weights.size(); ++l) {
    h = (bb.weights[l] * h + bb.biases[l]).array().tanh().matrix();
  }
  return bb.readout * h;
}

LossAndGrad cross_entropy(const Vector& logits, Index label) {
  require(label >= 0 && label < logits.size(), "label out of range");
  const double peak = logits.maxCoeff();
  const Vector shifted = (logits.array() - peak).matrix();
  const double log_z = std::log(shifted.array().exp().sum());
  LossAndGrad out;
  out.loss = log_z - shifted[label];
  out.grad = (shifted.array() - log_z).exp().matrix();
  out.grad[label] -= 1.0;
  return out;
}

Index argmax(const Vector& v) {
  require(v.size() >= 1, "argmax of an empty vector");
  Index best = 0;
  for (Index i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

void merge_adapters(MoeLoraModel& model) {
  const double s = model.scaling();
  for (auto& layer : model.adapters()) {
    for (std::size_t e = 0; e < layer.experts.size(); ++e) {
      layer.merged[e].noalias() += s * (layer.experts[e].b * layer.experts[e].a);
    }
  }
}

void reset_for_task(MoeLoraModel& model, std::mt19937_64& rng) {
  const Index d = model.dim();
  for (auto& layer : model.adapters()) {
    for (auto& expert : layer.experts) {
      expert.b.setZero();
      expert.a = uniform_a(model.lora_rank(), d, rng);
    }
  }
}

}  // namespace prism
