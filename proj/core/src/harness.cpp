#include "prism/harness.hpp"

#include "prism/client.hpp"
#include "prism/server.hpp"
#include "prism/subspace.hpp"
#include "prism/tasks.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

namespace prism {

namespace {

constexpr std::uint64_t kModelStream = 0x30DE1;
constexpr std::uint64_t kDataStream = 0xDA7A;
constexpr std::uint64_t kPartitionStream = 0x9A27;
constexpr std::uint64_t kClientStream = 0xC11E;
constexpr std::uint64_t kResetStream = 0x8E5E;
constexpr std::uint64_t kDiagnosticStream = 0xD1A6;

ModelConfig model_config_of(const ExperimentConfig& c) {
  ModelConfig m = c.model;
  m.seed = derive_seed(c.seed, kModelStream);
  return m;
}

TaskSequenceConfig data_config_of(const ExperimentConfig& c) {
  TaskSequenceConfig d = c.data;
  d.dim = c.model.dim;
  d.classes = c.model.classes;
  d.seed = derive_seed(c.seed, kDataStream);
  return d;
}

ProjectionMode projection_of(const ExperimentConfig& c) {
  if (c.method == Method::none) return ProjectionMode::none;
  return c.ablation.a_only_projection ? ProjectionMode::a_only : ProjectionMode::bilateral;
}

CovarianceRecipe recipe_of(const ExperimentConfig& c) {
  if (c.method == Method::activation) return CovarianceRecipe::activation;
  if (c.ablation.no_routing_weight) return CovarianceRecipe::sensitivity_only;
  return CovarianceRecipe::routing_weighted;
}

bool shared_basis(const ExperimentConfig& c) {
  return c.method == Method::monolithic || c.ablation.no_per_expert;
}

Index warmup_steps_for(const ExperimentConfig& c, Index n_samples) {
  if (c.ablation.no_warmup) return 0;
  const Index steps_per_epoch = (n_samples + c.batch_size - 1) / c.batch_size;
  return static_cast<Index>(std::llround(c.warmup_epochs * static_cast<double>(steps_per_epoch)));
}

struct Checkpoint {
  std::vector<double> accuracy;  // per task
  std::vector<Index> top1;       // per (test sample, adapted layer)
};

Checkpoint evaluate_checkpoint(const MoeLoraModel& model, std::span<const Task> tasks) {
  Checkpoint cp;
  for (const auto& task : tasks) {
    Index correct = 0;
    for (Index i = 0; i < task.test.size(); ++i) {
      const SampleTrace trace = forward(model, task.test.inputs.col(i));
      if (argmax(trace.logits) == task.test.labels[static_cast<std::size_t>(i)]) ++correct;
      for (const auto& lt : trace.adapted) cp.top1.push_back(argmax(lt.pi));
    }
    cp.accuracy.push_back(static_cast<double>(correct) / static_cast<double>(task.test.size()));
  }
  return cp;
}

ActivationRecord record_activations(const MoeLoraModel& model, const SampleBatch& batch, std::size_t slot) {
  ActivationRecord rec;
  rec.h.resize(model.dim(), batch.size());
  rec.s.resize(batch.size());
  for (Index i = 0; i < batch.size(); ++i) {
    SampleTrace trace = forward(model, batch.inputs.col(i));
    const auto ce = cross_entropy(trace.logits, batch.labels[static_cast<std::size_t>(i)]);
    backward(model, trace, ce.grad);
    const auto& lt = trace.adapted[slot];
    rec.h.col(i) = lt.input;
    double s = 0.0;
    for (Index e : lt.active) s += lt.pi[e] * lt.sensitivity[e];
    rec.s[i] = s;
  }
  return rec;
}

// A <- A Pi for every expert, so the fresh adapter starts inside the
// complement of its basis.
void project_fresh_adapters(MoeLoraModel& model, const ProtectionTable& table) {
  for (std::size_t slot = 0; slot < table.size(); ++slot) {
    auto& layer = model.adapters()[slot];
    for (std::size_t e = 0; e < table[slot].size(); ++e) {
      layer.experts[e].a = ShrinkageProjector(table[slot][e].basis, 1.0).apply_right(layer.experts[e].a);
    }
  }
}

// Reruns f, prefixing any contract violation with where in the lifecycle it happened.
template <typename F>
decltype(auto) at(const std::string& where, F&& f) {
  try {
    return f();
  } catch (const ContractViolation& err) {
    throw ContractViolation(where + ": " + err.what());
  }
}

std::string coordinate(Index task, Index round, Index client) {
  return "task " + std::to_string(task) + ", round " + std::to_string(round) + ", client " + std::to_string(client);
}

double min_angle(const OrthonormalBasis& a, const OrthonormalBasis& b) {
  if (a.empty() || b.empty()) return std::numeric_limits<double>::quiet_NaN();
  return principal_angles(a, b).front();
}

// A fresh model trained without protection on the pooled tasks.
MoeLoraModel diagnostic_model(const ExperimentConfig& config, std::span<const Task> tasks) {
  validate(config);
  require(tasks.size() >= 2, "the diagnostic pass needs at least two tasks");
  MoeLoraModel model(model_config_of(config));
  std::vector<SampleBatch> trains;
  for (const auto& t : tasks) trains.push_back(t.train);
  const SampleBatch pooled = SampleBatch::concat(trains);
  ClientConfig cc;
  cc.learning_rate = config.learning_rate;
  cc.batch_size = config.batch_size;
  cc.projection = ProjectionMode::none;
  ClientState state = make_client(0, model, cc, derive_seed(config.seed, kDiagnosticStream));
  for (Index e = 0; e < config.diagnostic_epochs; ++e) local_train_epoch(state, pooled, {});
  return std::move(state.model);
}

}  // namespace

ExperimentConfig standard_config() {
  ExperimentConfig c;
  c.data.dim = c.model.dim;
  c.data.classes = c.model.classes;
  return c;
}

ExperimentConfig long_config() {
  ExperimentConfig c = standard_config();
  c.data.n_tasks = 10;
  c.data.opposition = 0.25;
  return c;
}

ExperimentConfig overlap_config() {
  ExperimentConfig c = standard_config();
  c.data.n_tasks = 6;
  c.data.opposition = 0.1;
  c.diagnostic_epochs = 6;
  c.overlap_k = 2;
  return c;
}

ExperimentConfig scenario_config(std::string_view name) {
  if (name == "standard") return standard_config();
  if (name == "long") return long_config();
  if (name == "overlap") return overlap_config();
  throw ContractViolation("unknown scenario '" + std::string(name) + "'");
}

InterferenceLandscape diagnose(const ExperimentConfig& config, std::span<const Task> tasks) {
  const MoeLoraModel model = diagnostic_model(config, tasks);
  std::vector<SampleBatch> trains;
  for (const auto& t : tasks) trains.push_back(t.train);
  return measure_gamma(model, trains);
}

InterferenceLandscape diagnose(const ExperimentConfig& config) {
  validate(config);
  const auto tasks = generate_sequence(data_config_of(config));
  return diagnose(config, tasks);
}

RunReport run_experiment(const ExperimentConfig& config) {
  validate(config);
  const auto started = std::chrono::steady_clock::now();
  RunReport report;
  report.config = config;
  const auto tasks = generate_sequence(data_config_of(config));
  const Index n_tasks = static_cast<Index>(tasks.size());
  const Index layers = static_cast<Index>(config.model.adapted_layers.size());
  const Index d = config.model.dim;

  MoeLoraModel global(model_config_of(config));
  std::vector<Index> layer_ids;
  for (const auto& a : global.adapters()) layer_ids.push_back(a.layer);

  if (n_tasks >= 2) {
    const MoeLoraModel probe = diagnostic_model(config, tasks);
    std::vector<SampleBatch> trains;
    for (const auto& task : tasks) trains.push_back(task.train);
    report.landscape = measure_gamma(probe, trains);
    if (config.overlap_k > 0) {
      std::vector<ActivationRecord> records;
      for (const auto& task : tasks) records.push_back(record_activations(probe, task.train, 0));
      report.overlaps = overlap_contrast(records, config.overlap_k);
    }
  } else {
    report.landscape.gamma.assign(static_cast<std::size_t>(layers), 0.0);
  }
  report.budget = config.ablation.no_scheduling || n_tasks < 2
                      ? uniform_budget(layers, config.k_bar, d)
                      : waterfill_budget(report.landscape.gamma, config.k_bar, d);

  const bool protect = config.method != Method::none;
  const bool per_client = config.ablation.no_pefosu;
  const bool shared = shared_basis(config);
  ProtectionTable table = empty_protection(global);
  std::vector<ProtectionTable> client_tables(
      per_client ? static_cast<std::size_t>(config.n_clients) : 0, table);
  auto table_for = [&](Index client) -> const ProtectionTable& {
    return per_client ? client_tables[static_cast<std::size_t>(client)] : table;
  };

  ClientConfig base_cc;
  base_cc.learning_rate = config.learning_rate;
  base_cc.batch_size = config.batch_size;
  base_cc.recipe = recipe_of(config);
  base_cc.projection = projection_of(config);

  report.accuracy.r = Matrix::Zero(n_tasks, n_tasks);
  std::vector<std::vector<Index>> top1_checkpoints;

  for (Index t = 0; t < n_tasks; ++t) {
    const auto& task = tasks[static_cast<std::size_t>(t)];
    global.dense_routing = t == 0 && config.model.dense_router_warmup;
    if (t > 0) {
      merge_adapters(global);
      std::mt19937_64 reset_rng(derive_seed(config.seed, kResetStream, static_cast<std::uint64_t>(t)));
      reset_for_task(global, reset_rng);
      if (protect && !per_client) project_fresh_adapters(global, table);
    }

    const ClientPartition partition =
        dirichlet_partition(task.train.labels, config.n_clients,
                            config.beta, derive_seed(config.seed, kPartitionStream, static_cast<std::uint64_t>(t)));
    const std::vector<double> weights = partition.weights();
    std::vector<SampleBatch> shards;
    std::vector<ClientState> clients;
    std::vector<ExpertBases> bases;
    for (Index c = 0; c < config.n_clients; ++c) {
      shards.push_back(task.train.subset(partition.indices[static_cast<std::size_t>(c)]));
      ClientConfig cc = base_cc;
      cc.warmup_steps = warmup_steps_for(config, shards.back().size());
      clients.push_back(make_client(c, global, cc,
                                    derive_seed(config.seed, kClientStream, static_cast<std::uint64_t>(t),
                                                static_cast<std::uint64_t>(c))));
      bases.push_back(protect ? bases_of(table_for(c)) : ExpertBases{});
    }

    for (Index round = 0; round < config.rounds_per_task; ++round) {
      std::vector<MoeLoraModel> replicas;
      for (Index c = 0; c < config.n_clients; ++c) {
        auto& client = clients[static_cast<std::size_t>(c)];
        sync_from_global(client, global);
        at(coordinate(t, round, c), [&] {
          for (Index e = 0; e < config.local_epochs; ++e) {
            local_train_epoch(client, shards[static_cast<std::size_t>(c)], bases[static_cast<std::size_t>(c)]);
          }
        });
        replicas.push_back(client.model);
      }
      at(coordinate(t, round, 0) + " (aggregation)", [&] { fedavg_models(global, replicas, weights); });

      const ProtectionTable& in_force = table_for(0);
      for (std::size_t slot = 0; slot < in_force.size(); ++slot) {
        for (std::size_t e = 0; e < in_force[slot].size(); ++e) {
          const auto& basis = in_force[slot][e].basis;
          DiagnosticRow row;
          row.event = "round";
          row.task = t;
          row.round = round;
          row.layer = layer_ids[slot];
          row.expert = static_cast<Index>(e);
          row.basis_rank = basis.rank();
          row.consumption = nullspace_consumption(basis);
          row.residual = basis.empty() ? 0.0
                                       : (basis.columns().transpose() *
                                          global.adapters()[slot].experts[e].b).norm();
          row.theta_min = std::numeric_limits<double>::quiet_NaN();
          report.max_basis_residual = std::max(report.max_basis_residual, row.residual);
          report.diagnostics.push_back(std::move(row));
        }
      }
    }

    if (t == 0 && !config.ablation.no_router_freeze) global.freeze_routers();

    if (protect) {
      std::vector<ExpertFactors> uploads;
      for (auto& client : clients) {
        ExpertFactors up = at(coordinate(t, config.rounds_per_task - 1, client.id),
                              [&] { return factorize_covariance(client, report.budget.k); });
        for (std::size_t slot = 0; slot < up.size(); ++slot) {
          const std::size_t bound = static_cast<std::size_t>(d * report.budget.k[slot]) * sizeof(double);
          for (const auto& f : up[slot]) {
            const std::size_t bytes = serialize_factor(f).size() * sizeof(double);
            require(bytes <= bound, "factor payload exceeds d * k_l reals");
            report.max_factor_bytes = std::max(report.max_factor_bytes, bytes);
          }
        }
        uploads.push_back(std::move(up));
      }

      // This task's gradient subspace per expert, for theta_min.
      std::vector<std::vector<OrthonormalBasis>> current;
      for (std::size_t slot = 0; slot < table.size(); ++slot) {
        std::vector<OrthonormalBasis> row;
        for (std::size_t e = 0; e < table[slot].size(); ++e) {
          std::vector<WeightedFactor> wf;
          for (std::size_t c = 0; c < uploads.size(); ++c) wf.push_back({weights[c], uploads[c][slot][e]});
          row.push_back(thin_svd_union(OrthonormalBasis(d), Spectrum{Vector(0)}, wf, report.budget.k[slot]).basis);
        }
        current.push_back(std::move(row));
      }
      const ProtectionTable before = table_for(0);

      UnionReport union_report;
      at("task " + std::to_string(t) + " union", [&] {
        if (per_client) {
          for (std::size_t c = 0; c < uploads.size(); ++c) {
            const std::vector<double> one{1.0};
            std::span<const ExpertFactors> mine(&uploads[c], 1);
            auto r = shared ? shared_update(client_tables[c], mine, one, report.budget.k)
                            : pefosu_update(client_tables[c], mine, one, report.budget.k);
            union_report.rank_limited += r.rank_limited;
          }
        } else {
          union_report = shared ? shared_update(table, uploads, weights, report.budget.k)
                                : pefosu_update(table, uploads, weights, report.budget.k);
        }
      });
      report.rank_limited_unions += union_report.rank_limited;

      const ProtectionTable& after = table_for(0);
      std::vector<std::vector<double>> consumption;
      for (std::size_t slot = 0; slot < after.size(); ++slot) {
        std::vector<double> row_c;
        for (std::size_t e = 0; e < after[slot].size(); ++e) {
          DiagnosticRow row;
          row.event = "task_end";
          row.task = t;
          row.round = config.rounds_per_task - 1;
          row.layer = layer_ids[slot];
          row.expert = static_cast<Index>(e);
          row.basis_rank = after[slot][e].basis.rank();
          row.consumption = nullspace_consumption(after[slot][e].basis);
          row.residual = after[slot][e].basis.empty()
                             ? 0.0
                             : (after[slot][e].basis.columns().transpose() *
                                global.adapters()[slot].experts[e].b).norm();
          row.theta_min = min_angle(before[slot][e].basis, current[slot][e]);
          row_c.push_back(row.consumption);
          report.diagnostics.push_back(std::move(row));
        }
        consumption.push_back(std::move(row_c));
      }
      report.consumption.push_back(std::move(consumption));
    } else {
      report.consumption.emplace_back(static_cast<std::size_t>(layers),
                                      std::vector<double>(static_cast<std::size_t>(config.model.experts), 0.0));
    }

    const Checkpoint cp = evaluate_checkpoint(global, tasks);
    for (Index j = 0; j < n_tasks; ++j) report.accuracy.r(t, j) = cp.accuracy[static_cast<std::size_t>(j)];
    top1_checkpoints.push_back(cp.top1);
  }

  report.transfer = compute_aa_bwt_fwt(report.accuracy);
  report.flip_rate = flip_rate(top1_checkpoints);

  std::vector<std::vector<Matrix>> pi_by_slot(static_cast<std::size_t>(layers));
  for (const auto& task : tasks) {
    std::vector<Matrix> per_slot(static_cast<std::size_t>(layers),
                                 Matrix(config.model.experts, task.test.size()));
    for (Index i = 0; i < task.test.size(); ++i) {
      const SampleTrace trace = forward(global, task.test.inputs.col(i));
      for (std::size_t slot = 0; slot < trace.adapted.size(); ++slot) per_slot[slot].col(i) = trace.adapted[slot].pi;
    }
    for (std::size_t slot = 0; slot < per_slot.size(); ++slot) pi_by_slot[slot].push_back(std::move(per_slot[slot]));
  }
  double entropy = 0.0;
  for (const auto& pis : pi_by_slot) {
    report.heatmaps.push_back(routing_heatmap(pis));
    entropy += routing_entropy(pis);
  }
  report.routing_entropy = entropy / static_cast<double>(layers);

  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  spdlog::debug("run seed={} method={} AA={:.4f} in {:.2f}s", config.seed, method_name(config.method),
                report.transfer.aa, report.wall_seconds);
  return report;
}

RunReport run_baseline(const ExperimentConfig& config) {
  require(config.method == Method::monolithic || config.method == Method::activation,
          "run_baseline expects method = monolithic or activation");
  return run_experiment(config);
}

}  // namespace prism
