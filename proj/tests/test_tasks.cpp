#include "prism/scheduler.hpp"
#include "prism/tasks.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

using namespace prism;

namespace {

TaskSequenceConfig small_sequence(double opposition, std::uint64_t seed) {
  TaskSequenceConfig c;
  c.n_tasks = 2;
  c.dim = 12;
  c.classes = 3;
  c.samples_per_task = 120;
  c.test_samples_per_task = 30;
  c.opposition = opposition;
  c.seed = seed;
  return c;
}

ModelConfig probe_model(std::uint64_t seed) {
  ModelConfig c;
  c.dim = 12;
  c.classes = 3;
  c.layers = 2;
  c.adapted_layers = {0, 1};
  c.experts = 2;
  c.lora_rank = 2;
  c.seed = seed;
  return c;
}

// Inner product of the two tasks' mean LoRA-factor gradients, summed over
// adapted layers, on a fresh model whose B factors are randomized so the A
// gradients are not trivially zero.
double mean_gradient_inner(double opposition, std::uint64_t seed) {
  const auto tasks = generate_sequence(small_sequence(opposition, seed));
  MoeLoraModel model(probe_model(seed + 1000));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.1);
  for (auto& layer : model.adapters())
    for (auto& e : layer.experts)
      for (Index i = 0; i < e.b.size(); ++i) e.b.data()[i] = n(rng);
  const std::vector<SampleBatch> batches{tasks[0].train, tasks[1].train};
  const auto g = mean_layer_gradients(model, batches);
  double inner = 0.0;
  for (std::size_t slot = 0; slot < g[0].size(); ++slot) inner += g[0][slot].dot(g[1][slot]);
  return inner;
}

}  // namespace

TEST(GenerateSequence, IsDeterministic) {
  const auto a = generate_sequence(small_sequence(0.7, 5));
  const auto b = generate_sequence(small_sequence(0.7, 5));
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t t = 0; t < a.size(); ++t) {
    EXPECT_EQ(a[t].train.inputs, b[t].train.inputs);
    EXPECT_EQ(a[t].train.labels, b[t].train.labels);
    EXPECT_EQ(a[t].test.inputs, b[t].test.inputs);
  }
  const auto c = generate_sequence(small_sequence(0.7, 6));
  EXPECT_NE(a[0].train.inputs, c[0].train.inputs);
}

TEST(GenerateSequence, ShapesAndLabels) {
  const auto tasks = generate_sequence(small_sequence(1.0, 1));
  for (const auto& t : tasks) {
    EXPECT_EQ(t.train.size(), 120);
    EXPECT_EQ(t.test.size(), 30);
    EXPECT_EQ(t.train.dim(), 12);
    for (Index y : t.train.labels) {
      EXPECT_GE(y, 0);
      EXPECT_LT(y, 3);
    }
  }
}

TEST(GenerateSequence, RotationsAreOrthogonal) {
  auto cfg = small_sequence(0.6, 2);
  cfg.n_tasks = 4;
  for (const auto& t : generate_sequence(cfg)) {
    const Matrix& q = t.spec.rotation;
    EXPECT_LE((q.transpose() * q - Matrix::Identity(12, 12)).cwiseAbs().maxCoeff(), 1e-10);
    for (std::size_t i = 0; i < t.spec.class_means.size(); ++i)
      for (std::size_t j = i + 1; j < t.spec.class_means.size(); ++j)
        EXPECT_GT((t.spec.class_means[i] - t.spec.class_means[j]).norm(), 1e-6);
  }
}

TEST(GenerateSequence, ZeroOppositionRepeatsTheFirstTask) {
  auto cfg = small_sequence(0.0, 3);
  cfg.n_tasks = 3;
  const auto tasks = generate_sequence(cfg);
  for (const auto& t : tasks) {
    EXPECT_EQ(t.spec.opposition_angle, 0.0);
    for (std::size_t c = 0; c < 3; ++c)
      EXPECT_LE((t.spec.class_means[c] - tasks[0].spec.class_means[c]).norm(), 1e-12);
  }
}

TEST(GenerateSequence, FullOppositionNegatesTheMeans) {
  const auto tasks = generate_sequence(small_sequence(1.0, 4));
  EXPECT_NEAR(tasks[1].spec.opposition_angle, std::numbers::pi, 1e-12);
  for (std::size_t c = 0; c < 3; ++c)
    EXPECT_LE((tasks[1].spec.class_means[c] + tasks[0].spec.class_means[c]).norm(), 1e-10);
}

TEST(GenerateSequence, RejectsTooSmallDimension) {
  auto cfg = small_sequence(1.0, 0);
  cfg.dim = 5;
  EXPECT_THROW(generate_sequence(cfg), ContractViolation);
}

TEST(TaskRotationAngle, GrowsLinearly) {
  EXPECT_NEAR(task_rotation_angle(0, 5, 1.0), 0.0, 1e-15);
  EXPECT_NEAR(task_rotation_angle(2, 5, 0.5), std::numbers::pi / 4.0, 1e-15);
  EXPECT_NEAR(task_rotation_angle(4, 5, 1.0), std::numbers::pi, 1e-15);
}

TEST(Opposition, FullOppositionGivesNegativeMeanGradientInner) {
  int negative = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed)
    if (mean_gradient_inner(1.0, seed) < 0.0) ++negative;
  EXPECT_GE(negative, 95);
}

TEST(Opposition, InnerProductIsNonIncreasingInOpposition) {
  const std::vector<double> grid{0.0, 0.25, 0.5, 0.75, 1.0};
  std::vector<double> mean(grid.size(), 0.0);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) mean[i] += mean_gradient_inner(grid[i], seed);
    mean[i] /= 20.0;
  }
  for (std::size_t i = 1; i < grid.size(); ++i) EXPECT_LE(mean[i], mean[i - 1]) << "opposition " << grid[i];
}

TEST(DirichletPartition, SingleClientOwnsEverything) {
  std::vector<Index> labels(50);
  for (Index i = 0; i < 50; ++i) labels[static_cast<std::size_t>(i)] = i % 3;
  const auto p = dirichlet_partition(labels, 1, 0.3, 1);
  ASSERT_EQ(p.clients(), 1);
  EXPECT_EQ(p.indices[0].size(), 50u);
  EXPECT_EQ(p.weights(), std::vector<double>{1.0});
}

TEST(DirichletPartition, DisjointCoveringAndNonEmpty) {
  std::vector<Index> labels(200);
  for (Index i = 0; i < 200; ++i) labels[static_cast<std::size_t>(i)] = (i * 7) % 4;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    for (double beta : {0.05, 0.3, 10.0}) {
      const auto p = dirichlet_partition(labels, 5, beta, seed);
      std::vector<Index> all;
      for (const auto& idx : p.indices) {
        EXPECT_FALSE(idx.empty());
        all.insert(all.end(), idx.begin(), idx.end());
      }
      std::sort(all.begin(), all.end());
      std::vector<Index> expected(200);
      std::iota(expected.begin(), expected.end(), Index{0});
      EXPECT_EQ(all, expected);
      const auto w = p.weights();
      EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-12);
    }
  }
}

TEST(DirichletPartition, IsDeterministic) {
  std::vector<Index> labels(100);
  for (Index i = 0; i < 100; ++i) labels[static_cast<std::size_t>(i)] = i % 4;
  EXPECT_EQ(dirichlet_partition(labels, 4, 0.3, 9).indices, dirichlet_partition(labels, 4, 0.3, 9).indices);
}

TEST(DirichletPartition, LargeBetaIsNearlyEven) {
  std::vector<Index> labels(800);
  for (Index i = 0; i < 800; ++i) labels[static_cast<std::size_t>(i)] = i % 4;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto w = dirichlet_partition(labels, 4, 1000.0, seed).weights();
    for (double x : w) EXPECT_NEAR(x, 0.25, 0.05) << "seed " << seed;
  }
}

TEST(DirichletPartition, SmallBetaIsSkewed) {
  std::vector<Index> labels(800);
  for (Index i = 0; i < 800; ++i) labels[static_cast<std::size_t>(i)] = i % 4;
  int skewed = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto w = dirichlet_partition(labels, 4, 0.1, seed).weights();
    if (*std::max_element(w.begin(), w.end()) > 0.4) ++skewed;
  }
  EXPECT_GT(skewed, 25);
}

TEST(DirichletPartition, RejectsBadArguments) {
  const std::vector<Index> labels{0, 1, 0};
  EXPECT_THROW(dirichlet_partition(labels, 4, 0.3, 0), ContractViolation);
  EXPECT_THROW(dirichlet_partition(labels, 0, 0.3, 0), ContractViolation);
  EXPECT_THROW(dirichlet_partition(labels, 2, 0.0, 0), ContractViolation);
}

TEST(Accuracy, ConstantPredictionOnBalancedBatch) {
  Matrix logits = Matrix::Zero(2, 10);
  logits.row(0).setOnes();
  std::vector<Index> labels(10);
  for (Index i = 0; i < 10; ++i) labels[static_cast<std::size_t>(i)] = i % 2;
  EXPECT_EQ(accuracy_from_logits(logits, labels), 0.5);
}

TEST(Accuracy, OneHotLabelsScorePerfectly) {
  const std::vector<Index> labels{2, 0, 1, 1, 3};
  Matrix logits = Matrix::Zero(4, 5);
  for (Index i = 0; i < 5; ++i) logits(labels[static_cast<std::size_t>(i)], i) = 1.0;
  EXPECT_EQ(accuracy_from_logits(logits, labels), 1.0);
}

TEST(Accuracy, TiesGoToLowestIndex) {
  const Matrix logits = Matrix::Zero(3, 4);
  EXPECT_EQ(accuracy_from_logits(logits, std::vector<Index>{0, 0, 1, 2}), 0.5);
}

TEST(Accuracy, RandomLogitsScoreChance) {
  std::mt19937_64 rng(50);
  std::normal_distribution<double> n(0.0, 1.0);
  const Index count = 4000;
  Matrix logits(4, count);
  std::vector<Index> labels(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) {
    for (Index c = 0; c < 4; ++c) logits(c, i) = n(rng);
    labels[static_cast<std::size_t>(i)] = static_cast<Index>(rng() % 4);
  }
  EXPECT_NEAR(accuracy_from_logits(logits, labels), 0.25, 0.05);
}

TEST(Accuracy, EmptyBatchIsRejected) {
  EXPECT_THROW(accuracy_from_logits(Matrix(3, 0), std::vector<Index>{}), ContractViolation);
}

TEST(SampleBatch, SubsetAndConcat) {
  SampleBatch b;
  b.inputs = Matrix::Zero(2, 4);
  for (Index i = 0; i < 4; ++i) b.inputs(0, i) = static_cast<double>(i);
  b.labels = {0, 1, 0, 1};
  const std::vector<Index> pick{3, 1};
  const auto s = b.subset(pick);
  EXPECT_EQ(s.size(), 2);
  EXPECT_EQ(s.inputs(0, 0), 3.0);
  EXPECT_EQ(s.labels, (std::vector<Index>{1, 1}));
  const std::vector<SampleBatch> parts{b, s};
  const auto c = SampleBatch::concat(parts);
  EXPECT_EQ(c.size(), 6);
  EXPECT_EQ(c.inputs(0, 5), 1.0);
}
