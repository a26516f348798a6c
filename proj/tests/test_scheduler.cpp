#include "prism/oracle.hpp"
#include "prism/scheduler.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

using namespace prism;

namespace {

// Unit vectors in R^3 with prescribed pairwise cosines (c01, c02, c12), from a
// Cholesky factor of the Gram matrix.
std::vector<Vector> vectors_with_cosines(double c01, double c02, double c12) {
  Matrix gram(3, 3);
  gram << 1.0, c01, c02, c01, 1.0, c12, c02, c12, 1.0;
  const Matrix l = gram.llt().matrixL();
  return {l.row(0).transpose(), l.row(1).transpose(), l.row(2).transpose()};
}

double objective(std::span<const double> gamma, std::span<const Index> k) {
  double s = 0.0;
  for (std::size_t i = 0; i < gamma.size(); ++i) s += gamma[i] * std::sqrt(static_cast<double>(k[i]));
  return s;
}

}  // namespace

TEST(RectifiedConflict, IdenticalGradientsGiveZero) {
  const Vector g = Vector::LinSpaced(4, 1.0, 2.0);
  EXPECT_EQ(rectified_conflict(std::vector<Vector>{g, g}), 0.0);
}

TEST(RectifiedConflict, NegativeHalfCosine) {
  Vector a(2);
  a << 1.0, 0.0;
  Vector b(2);
  b << -0.5, std::sqrt(3.0) / 2.0;
  EXPECT_NEAR(rectified_conflict(std::vector<Vector>{a, 3.0 * b}), 0.5, 1e-12);
}

TEST(RectifiedConflict, ThreeTaskMeanOfRectifiedCosines) {
  const auto v = vectors_with_cosines(-0.2, 0.3, -0.6);
  EXPECT_NEAR(rectified_conflict(v), 0.8 / 3.0, 1e-12);
}

TEST(RectifiedConflict, ZeroGradientPairsAreCountedAndScoreZero) {
  Vector a(2);
  a << 1.0, 0.0;
  Index degenerate = 0;
  EXPECT_EQ(rectified_conflict(std::vector<Vector>{a, -a, Vector::Zero(2)}, &degenerate), 1.0 / 3.0);
  EXPECT_EQ(degenerate, 2);
}

TEST(RectifiedConflict, StaysInUnitInterval) {
  std::mt19937_64 rng(40);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Vector> g(2 + trial % 4, Vector(5));
    for (auto& v : g)
      for (Index i = 0; i < 5; ++i) v[i] = n(rng);
    const double gamma = rectified_conflict(g);
    EXPECT_GE(gamma, 0.0);
    EXPECT_LE(gamma, 1.0);
  }
}

TEST(RectifiedConflict, NeedsTwoTasks) {
  EXPECT_THROW(rectified_conflict(std::vector<Vector>{Vector::Ones(2)}), ContractViolation);
}

TEST(Waterfill, SymmetricLayersSplitEvenly) {
  const auto a = waterfill_budget(std::vector<double>{1, 1, 1, 1}, 8, 64);
  EXPECT_EQ(a.k, (std::vector<Index>{2, 2, 2, 2}));
  EXPECT_FALSE(a.uniform_fallback);
}

TEST(Waterfill, ClosedFormSquares) {
  EXPECT_EQ(waterfill_budget(std::vector<double>{3, 4}, 25, 64).k, (std::vector<Index>{9, 16}));
}

TEST(Waterfill, ZeroInterferenceGetsNothingAndCapApplies) {
  EXPECT_EQ(waterfill_budget(std::vector<double>{0, 5}, 10, 64).k, (std::vector<Index>{0, 10}));
  EXPECT_EQ(waterfill_budget(std::vector<double>{0, 5}, 10, 8).k, (std::vector<Index>{0, 7}));
}

TEST(Waterfill, OverflowMovesToOtherLayers) {
  const auto a = waterfill_budget(std::vector<double>{1.0, 10.0}, 12, 8);
  EXPECT_EQ(a.k[1], 7);
  EXPECT_EQ(a.total(), 12);
}

TEST(Waterfill, EveryConflictedLayerGetsAUnit) {
  const auto a = waterfill_budget(std::vector<double>{0.01, 1.0, 1.0}, 6, 64);
  EXPECT_GE(a.k[0], 1);
  EXPECT_EQ(a.total(), 6);
}

TEST(Waterfill, AllZeroFallsBackToUniform) {
  const auto a = waterfill_budget(std::vector<double>{0, 0, 0}, 7, 64);
  EXPECT_TRUE(a.uniform_fallback);
  EXPECT_EQ(a.k, (std::vector<Index>{3, 2, 2}));
}

TEST(Waterfill, RejectsInfeasibleBudget) {
  EXPECT_THROW(waterfill_budget(std::vector<double>{1, 1, 1}, 2, 64), ContractViolation);
  EXPECT_THROW(waterfill_budget(std::vector<double>{-1, 1}, 4, 64), ContractViolation);
}

TEST(Waterfill, ScaleInvariant) {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> g(1 + trial % 4);
    for (auto& x : g) x = u(rng);
    std::vector<double> scaled = g;
    const double c = std::pow(2.0, trial % 9 - 4);  // exact binary scaling
    for (auto& x : scaled) x *= c;
    const Index k_bar = static_cast<Index>(g.size()) + trial % 15;
    EXPECT_EQ(waterfill_budget(g, k_bar, 64).k, waterfill_budget(scaled, k_bar, 64).k);
  }
}

TEST(Waterfill, InvariantsHoldOnRandomInputs) {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<double> g(1 + trial % 5);
    for (auto& x : g) x = u(rng) < 0.2 ? 0.0 : u(rng);
    g.back() += 0.1;
    const Index d = 4 + trial % 10;
    const Index k_bar = static_cast<Index>(g.size()) + trial % 20;
    const auto a = waterfill_budget(g, k_bar, d);
    EXPECT_LE(a.total(), k_bar);
    for (std::size_t l = 0; l < g.size(); ++l) {
      EXPECT_LE(a.k[l], d - 1);
      EXPECT_GE(a.k[l], 0);
      if (g[l] == 0.0) EXPECT_EQ(a.k[l], 0);
    }
  }
}

TEST(Waterfill, NearExhaustiveOptimum) {
  std::mt19937_64 rng(43);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  for (Index layers = 1; layers <= 4; ++layers) {
    for (Index k_bar = layers; k_bar <= 20; ++k_bar) {
      std::vector<double> g(static_cast<std::size_t>(layers));
      for (auto& x : g) x = u(rng);
      const auto mine = waterfill_budget(g, k_bar, 64).k;
      const auto best = oracle::waterfill_grid_search(g, k_bar);
      double largest_gain = 0.0;
      for (std::size_t l = 0; l < g.size(); ++l) {
        const double kl = static_cast<double>(best[l]);
        largest_gain = std::max(largest_gain, g[l] * (std::sqrt(kl + 1.0) - std::sqrt(kl)));
      }
      EXPECT_GE(objective(g, mine), objective(g, best) - largest_gain - 1e-12)
          << "layers " << layers << " k_bar " << k_bar;
    }
  }
}

TEST(WaterfillContinuous, MatchesClosedForm) {
  const auto k = waterfill_continuous(std::vector<double>{1.0, 2.0}, 10);
  EXPECT_NEAR(k[0], 2.0, 1e-12);
  EXPECT_NEAR(k[1], 8.0, 1e-12);
}

TEST(UniformBudget, EarlierLayersGetRemainder) {
  EXPECT_EQ(uniform_budget(3, 8, 64).k, (std::vector<Index>{3, 3, 2}));
  EXPECT_EQ(uniform_budget(2, 20, 5).k, (std::vector<Index>{4, 4}));
}

TEST(WarmupAlpha, Examples) {
  EXPECT_EQ(warmup_alpha(0, 10), 0.0);
  EXPECT_EQ(warmup_alpha(5, 10), 0.5);
  EXPECT_EQ(warmup_alpha(10, 10), 1.0);
  EXPECT_EQ(warmup_alpha(25, 10), 1.0);
  EXPECT_EQ(warmup_alpha(0, 0), 1.0);
  EXPECT_THROW(warmup_alpha(-1, 4), ContractViolation);
}

TEST(MeasureGamma, IdenticalTasksHaveNoConflict) {
  ModelConfig mc;
  mc.dim = 8;
  mc.classes = 3;
  mc.layers = 3;
  mc.adapted_layers = {1, 2};
  mc.experts = 2;
  mc.lora_rank = 2;
  MoeLoraModel model(mc);
  std::mt19937_64 rng(44);
  std::normal_distribution<double> n(0.0, 0.3);
  for (auto& layer : model.adapters())
    for (auto& e : layer.experts)
      for (Index i = 0; i < e.b.size(); ++i) e.b.data()[i] = n(rng);
  TaskSequenceConfig tc;
  tc.n_tasks = 1;
  tc.dim = 8;
  tc.classes = 3;
  tc.samples_per_task = 50;
  const auto task = generate_sequence(tc).front().train;
  const std::vector<SampleBatch> tasks{task, task, task};
  const auto landscape = measure_gamma(model, tasks);
  ASSERT_EQ(landscape.gamma.size(), 2u);
  for (double g : landscape.gamma) EXPECT_NEAR(g, 0.0, 1e-12);
}
