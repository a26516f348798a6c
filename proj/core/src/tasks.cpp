#include "prism/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

namespace prism {

SampleBatch SampleBatch::subset(std::span<const Index> indices) const {
  SampleBatch out;
  out.inputs.resize(dim(), static_cast<Index>(indices.size()));
  out.labels.reserve(indices.size());
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const Index i = indices[j];
    require(i >= 0 && i < size(), "subset index out of range");
    out.inputs.col(static_cast<Index>(j)) = inputs.col(i);
    out.labels.push_back(labels[static_cast<std::size_t>(i)]);
  }
  return out;
}

SampleBatch SampleBatch::concat(std::span<const SampleBatch> parts) {
  require(!parts.empty(), "nothing to concatenate");
  Index total = 0;
  for (const auto& p : parts) {
    require(p.dim() == parts.front().dim(), "batches disagree on the input dimension");
    total += p.size();
  }
  SampleBatch out;
  out.inputs.resize(parts.front().dim(), total);
  Index offset = 0;
  for (const auto& p : parts) {
    out.inputs.middleCols(offset, p.size()) = p.inputs;
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    offset += p.size();
  }
  return out;
}

double task_rotation_angle(Index task, Index n_tasks, double opposition) {
  if (n_tasks <= 1) return 0.0;
  return opposition * std::numbers::pi * static_cast<double>(task) /
         static_cast<double>(n_tasks - 1);
}

namespace {

SampleBatch draw_samples(const std::vector<Vector>& means, double noise, Index n,
                         std::mt19937_64& rng) {
  const Index m = static_cast<Index>(means.size());
  const Index d = means.front().size();
  std::vector<Index> labels(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = i % m;
  std::shuffle(labels.begin(), labels.end(), rng);
  std::normal_distribution<double> normal(0.0, 1.0);
  SampleBatch batch;
  batch.inputs.resize(d, n);
  for (Index i = 0; i < n; ++i) {
    const Vector& mu = means[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
    for (Index r = 0; r < d; ++r) batch.inputs(r, i) = mu[r] + noise * normal(rng);
  }
  batch.labels = std::move(labels);
  return batch;
}

}  // namespace

std::vector<Task> generate_sequence(const TaskSequenceConfig& config) {
  const Index d = config.dim;
  const Index m = config.classes;
  require(m >= 2, "need at least two classes");
  require(d >= 2 * m, "task generator needs d >= 2m for partner axes");
  require(config.n_tasks >= 1 && config.samples_per_task >= 1 && config.test_samples_per_task >= 1,
          "task counts must be positive");
  require(config.opposition >= 0.0 && config.opposition <= 1.0, "opposition must lie in [0, 1]");

  std::vector<Vector> base_means;
  for (Index c = 0; c < m; ++c) base_means.push_back(config.mean_scale * Vector::Unit(d, c));

  std::vector<Task> tasks;
  for (Index t = 0; t < config.n_tasks; ++t) {
    std::mt19937_64 rng(derive_seed(config.seed, 0x7A5C, static_cast<std::uint64_t>(t)));
    Task task;
    task.spec.task_id = t;
    task.spec.noise_scale = config.noise_scale;
    task.spec.opposition_angle = task_rotation_angle(t, config.n_tasks, config.opposition);

    // Partners: orthonormal columns inside span(e_m, ..., e_{d-1}).
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix draw(d - m, m);
    for (Index j = 0; j < m; ++j)
      for (Index i = 0; i < d - m; ++i) draw(i, j) = normal(rng);
    Eigen::HouseholderQR<Matrix> qr(draw);
    const Matrix q = qr.householderQ() * Matrix::Identity(d - m, m);
    Matrix partners = Matrix::Zero(d, m);
    partners.bottomRows(d - m) = q;

    const double theta = task.spec.opposition_angle;
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    Matrix rotation = Matrix::Identity(d, d);
    for (Index k = 0; k < m; ++k) {
      const Vector e = Vector::Unit(d, k);
      const Vector f = partners.col(k);
      rotation += (c - 1.0) * (e * e.transpose() + f * f.transpose()) +
                  s * (f * e.transpose() - e * f.transpose());
    }
    task.spec.rotation = rotation;
    for (const auto& mu : base_means) task.spec.class_means.push_back(rotation * mu);

    task.train = draw_samples(task.spec.class_means, config.noise_scale, config.samples_per_task, rng);
    task.test =
        draw_samples(task.spec.class_means, config.noise_scale, config.test_samples_per_task, rng);
    tasks.push_back(std::move(task));
  }
  return tasks;
}

std::vector<double> ClientPartition::weights() const {
  std::size_t total = 0;
  for (const auto& idx : indices) total += idx.size();
  std::vector<double> w;
  for (const auto& idx : indices) {
    w.push_back(static_cast<double>(idx.size()) / static_cast<double>(total));
  }
  return w;
}

ClientPartition dirichlet_partition(std::span<const Index> labels, Index n_clients, double beta,
                                    std::uint64_t seed) {
  const Index n = static_cast<Index>(labels.size());
  require(n_clients >= 1, "need at least one client");
  require(beta > 0.0, "Dirichlet concentration must be positive");
  require(n_clients <= n, "more clients than samples");

  Index max_label = 0;
  for (Index y : labels) {
    require(y >= 0, "labels must be nonnegative");
    max_label = std::max(max_label, y);
  }
  std::vector<std::vector<Index>> by_class(static_cast<std::size_t>(max_label + 1));
  for (Index i = 0; i < n; ++i) by_class[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])].push_back(i);

  std::mt19937_64 rng(derive_seed(seed, 0xD1C7));
  std::gamma_distribution<double> gamma(beta, 1.0);
  ClientPartition partition;
  partition.beta = beta;

  constexpr int kMaxAttempts = 1000;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    partition.indices.assign(static_cast<std::size_t>(n_clients), {});
    for (auto cls : by_class) {
      if (cls.empty()) continue;
      std::shuffle(cls.begin(), cls.end(), rng);
      std::vector<double> p(static_cast<std::size_t>(n_clients));
      double total = 0.0;
      for (auto& v : p) {
        v = gamma(rng);
        total += v;
      }
      if (total <= 0.0) {
        // Every gamma draw underflowed (tiny beta); give the class to one client.
        std::uniform_int_distribution<Index> pick(0, n_clients - 1);
        std::fill(p.begin(), p.end(), 0.0);
        p[static_cast<std::size_t>(pick(rng))] = 1.0;
        total = 1.0;
      }
      const double count = static_cast<double>(cls.size());
      double cumulative = 0.0;
      std::size_t start = 0;
      for (Index c = 0; c < n_clients; ++c) {
        cumulative += p[static_cast<std::size_t>(c)] / total;
        std::size_t stop = c + 1 == n_clients
                               ? cls.size()
                               : static_cast<std::size_t>(std::llround(cumulative * count));
        stop = std::clamp(stop, start, cls.size());
        auto& dst = partition.indices[static_cast<std::size_t>(c)];
        dst.insert(dst.end(), cls.begin() + static_cast<std::ptrdiff_t>(start),
                   cls.begin() + static_cast<std::ptrdiff_t>(stop));
        start = stop;
      }
    }
    const bool all_nonempty = std::all_of(partition.indices.begin(), partition.indices.end(),
                                          [](const auto& v) { return !v.empty(); });
    if (all_nonempty) break;
    if (attempt + 1 == kMaxAttempts) {
      // Extremely skewed draws: hand one sample from the largest client to
      // each empty one so the partition stays valid.
      for (auto& dst : partition.indices) {
        if (!dst.empty()) continue;
        auto largest = std::max_element(partition.indices.begin(), partition.indices.end(),
                                        [](const auto& a, const auto& b) { return a.size() < b.size(); });
        dst.push_back(largest->back());
        largest->pop_back();
      }
    }
  }
  for (auto& idx : partition.indices) std::sort(idx.begin(), idx.end());
  return partition;
}

double accuracy_from_logits(const Matrix& logits, std::span<const Index> labels) {
  require(logits.cols() >= 1, "accuracy of an empty batch");
  require(static_cast<std::size_t>(logits.cols()) == labels.size(), "logit and label counts differ");
  Index correct = 0;
  for (Index i = 0; i < logits.cols(); ++i) {
    if (argmax(logits.col(i)) == labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(logits.cols());
}

double evaluate_accuracy(const MoeLoraModel& model, const SampleBatch& batch) {
  require(batch.size() >= 1, "accuracy of an empty batch");
  Matrix logits(model.classes(), batch.size());
  for (Index i = 0; i < batch.size(); ++i) logits.col(i) = forward(model, batch.inputs.col(i)).logits;
  return accuracy_from_logits(logits, batch.labels);
}

void export_batch_csv(const SampleBatch& batch, const std::filesystem::path& stem) {
  std::ofstream inputs(stem.string() + "_inputs.csv");
  std::ofstream labels(stem.string() + "_labels.csv");
  require(inputs.good() && labels.good(), "cannot open CSV export files");
  inputs.precision(17);
  labels << "label\n";
  for (Index i = 0; i < batch.size(); ++i) {
    for (Index r = 0; r < batch.dim(); ++r) {
      if (r) inputs << ',';
      inputs << batch.inputs(r, i);
    }
    inputs << '\n';
    labels << batch.labels[static_cast<std::size_t>(i)] << '\n';
  }
}

}  // namespace prism
