#pragma once

#include "prism/model.hpp"
#include "prism/tasks.hpp"
#include "prism/types.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace prism {

enum class Method { prism, none, monolithic, activation };

std::string_view method_name(Method method);
Method parse_method(std::string_view name);

struct AblationFlags {
  bool no_pefosu = false;           // per-client bases, no server union
  bool no_per_expert = false;       // one shared basis per layer
  bool no_routing_weight = false;   // sqrt(s) h columns instead of sqrt(pi s) h
  bool no_router_freeze = false;    // routers keep training after task 1
  bool no_scheduling = false;       // uniform k_bar / L instead of water-filling
  bool no_warmup = false;           // s0 = 0
  bool a_only_projection = false;   // project gradA only

  bool any() const;
  bool operator==(const AblationFlags&) const = default;
};

/// Everything a run needs. `model.dim` and `model.classes` are the single
/// source of truth for d and m; the task generator copies them.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  Method method = Method::prism;
  AblationFlags ablation;

  ModelConfig model;
  TaskSequenceConfig data;

  Index n_clients = 3;
  double beta = 0.3;
  Index rounds_per_task = 1;
  Index local_epochs = 1;
  Index batch_size = 16;
  double learning_rate = 1.0;

  Index k_bar = 12;
  /// s0 expressed in local epochs; each client converts it to its own steps.
  double warmup_epochs = 1.0;
  /// Epochs of unprotected training on the pooled tasks before gamma is read.
  Index diagnostic_epochs = 1;
  /// k for the activation/gradient overlap diagnostic; 0 turns it off.
  Index overlap_k = 0;

  bool operator==(const ExperimentConfig&) const = default;
};

/// Throws ContractViolation on out-of-range values or incompatible flags.
void validate(const ExperimentConfig& config);

/// INI text with sections [run] [model] [data] [federation] [protection]
/// [ablation]. Missing keys keep their defaults; unknown sections or keys are
/// rejected. The result is validated.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Every field, in the format parse_config reads.
std::string format_config(const ExperimentConfig& config);

/// Sets one sweepable field from its text form. Axes: beta, n_clients, s_0
/// (warmup epochs), k_bar, opposition.
void set_sweep_axis(ExperimentConfig& config, std::string_view axis, std::string_view value);
bool is_sweep_axis(std::string_view axis);

}  // namespace prism
