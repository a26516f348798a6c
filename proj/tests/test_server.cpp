#include "prism/oracle.hpp"
#include "prism/server.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

using namespace prism;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.dim = 8;
  c.classes = 3;
  c.layers = 2;
  c.adapted_layers = {0, 1};
  c.experts = 3;
  c.top_k = 1;
  c.lora_rank = 2;
  c.seed = 21;
  return c;
}

Matrix gaussian(Index rows, Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = n(rng);
  return m;
}

// uploads[c][slot][expert] with `rank` random columns everywhere except the
// listed idle experts.
std::vector<ExpertFactors> random_uploads(Index clients, Index slots, Index experts, Index d, Index rank,
                                          std::mt19937_64& rng, std::vector<Index> idle = {}) {
  std::vector<ExpertFactors> out;
  for (Index c = 0; c < clients; ++c) {
    ExpertFactors f;
    for (Index s = 0; s < slots; ++s) {
      std::vector<CovarianceFactor> row;
      for (Index e = 0; e < experts; ++e) {
        CovarianceFactor cf;
        const bool skip = std::find(idle.begin(), idle.end(), e) != idle.end();
        cf.columns = skip ? Matrix(d, 0) : gaussian(d, rank, rng);
        row.push_back(cf);
      }
      f.push_back(row);
    }
    out.push_back(f);
  }
  return out;
}

}  // namespace

TEST(FedAvg, SingleClientIsIdentity) {
  const std::vector<Vector> p{Vector::LinSpaced(5, -1.0, 1.0)};
  const std::vector<double> w{1.0};
  EXPECT_EQ(fedavg_aggregate(p, w), p[0]);
}

TEST(FedAvg, OppositeParametersCancel) {
  const Vector g = Vector::LinSpaced(4, 1.0, 4.0);
  const std::vector<Vector> p{g, -g};
  const std::vector<double> w{0.5, 0.5};
  EXPECT_EQ(fedavg_aggregate(p, w).norm(), 0.0);
}

TEST(FedAvg, WeightedMean) {
  Vector a(2);
  a << 1.0, 2.0;
  Vector b(2);
  b << 3.0, 6.0;
  const std::vector<Vector> p{a, b};
  const std::vector<double> w{0.25, 0.75};
  Vector expected(2);
  expected << 2.5, 5.0;
  EXPECT_LE((fedavg_aggregate(p, w) - expected).norm(), 1e-15);
}

TEST(FedAvg, RejectsBadInputs) {
  const std::vector<Vector> p{Vector::Ones(2), Vector::Ones(3)};
  EXPECT_THROW(fedavg_aggregate(p, std::vector<double>{0.5, 0.5}), ContractViolation);
  const std::vector<Vector> q{Vector::Ones(2), Vector::Ones(2)};
  EXPECT_THROW(fedavg_aggregate(q, std::vector<double>{0.5, 0.6}), ContractViolation);
  EXPECT_THROW(fedavg_aggregate(q, std::vector<double>{1.5, -0.5}), ContractViolation);
  EXPECT_THROW(fedavg_aggregate(q, std::vector<double>{1.0}), ContractViolation);
}

TEST(FedAvg, PreservesOrthogonalityOfProjectedUpdates) {
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst_b = 0.0;
  double worst_a = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const Index d = 10;
    const Index r = 3;
    const Index k = 1 + trial % 7;
    const auto basis = OrthonormalBasis::from_columns(oracle::random_orthonormal(d, k, rng()));
    const Matrix& U = basis.columns();
    const Matrix complement = Matrix::Identity(d, d) - U * U.transpose();
    const Index clients = 2 + trial % 4;
    std::vector<double> w(static_cast<std::size_t>(clients));
    double sum = 0.0;
    for (auto& x : w) sum += (x = u(rng) + 1e-3);
    for (auto& x : w) x /= sum;
    std::vector<Vector> a_params;
    std::vector<Vector> b_params;
    for (Index c = 0; c < clients; ++c) {
      const Matrix ga = gaussian(r, d, rng) * complement;
      const Matrix gb = complement * gaussian(d, r, rng);
      a_params.emplace_back(ga.reshaped());
      b_params.emplace_back(gb.reshaped());
    }
    const Matrix a_bar = fedavg_aggregate(a_params, w).reshaped(r, d);
    const Matrix b_bar = fedavg_aggregate(b_params, w).reshaped(d, r);
    worst_a = std::max(worst_a, (a_bar * U).norm());
    worst_b = std::max(worst_b, (U.transpose() * b_bar).norm());
  }
  EXPECT_LE(worst_a, 1e-12);
  EXPECT_LE(worst_b, 1e-12);
}

TEST(FedAvg, OracleTrialsStayOrthogonal) {
  const auto t = oracle::fedavg_orthogonality_trials(1000, 23);
  EXPECT_EQ(t.trials, 1000);
  EXPECT_LE(t.max_b_residual, 1e-10);
  EXPECT_LE(t.max_a_residual, 1e-10);
}

TEST(FedAvgModels, LeavesFrozenRoutersAlone) {
  MoeLoraModel global(tiny_model());
  global.freeze_routers();
  MoeLoraModel c0 = global;
  MoeLoraModel c1 = global;
  c0.adapters()[0].router.weight.array() += 1.0;
  c0.adapters()[0].experts[0].b.array() += 2.0;
  const Matrix router = global.adapters()[0].router.weight;
  const std::vector<MoeLoraModel> clients{c0, c1};
  fedavg_models(global, clients, std::vector<double>{0.5, 0.5});
  EXPECT_EQ(global.adapters()[0].router.weight, router);
  EXPECT_NEAR(global.adapters()[0].experts[0].b(0, 0), 1.0, 1e-15);
}

TEST(FedAvgModels, AveragesUnfrozenRouters) {
  MoeLoraModel global(tiny_model());
  MoeLoraModel c0 = global;
  MoeLoraModel c1 = global;
  c0.adapters()[1].router.weight.setConstant(1.0);
  c1.adapters()[1].router.weight.setConstant(3.0);
  const std::vector<MoeLoraModel> clients{c0, c1};
  fedavg_models(global, clients, std::vector<double>{0.5, 0.5});
  EXPECT_TRUE(global.adapters()[1].router.weight.isConstant(2.0));
}

TEST(SplitLayerBudget, ProportionalWithLargestRemainder) {
  EXPECT_EQ(split_layer_budget(std::vector<double>{1.0, 1.0, 0.0}, 3), (std::vector<Index>{2, 1, 0}));
  EXPECT_EQ(split_layer_budget(std::vector<double>{3.0, 1.0}, 4), (std::vector<Index>{3, 1}));
  EXPECT_EQ(split_layer_budget(std::vector<double>{0.0, 0.0}, 5), (std::vector<Index>{0, 0}));
  EXPECT_EQ(split_layer_budget(std::vector<double>{1.0, 2.0}, 0), (std::vector<Index>{0, 0}));
  EXPECT_THROW(split_layer_budget(std::vector<double>{-1.0}, 2), ContractViolation);
}

TEST(SplitLayerBudget, SumsToTheLayerBudgetWhenAnyEnergy) {
  std::mt19937_64 rng(24);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> e(1 + trial % 5);
    for (auto& x : e) x = u(rng) < 0.3 ? 0.0 : u(rng);
    e[0] += 1e-3;
    const Index k = trial % 13;
    const auto out = split_layer_budget(e, k);
    EXPECT_EQ(std::accumulate(out.begin(), out.end(), Index{0}), k);
    for (std::size_t i = 0; i < e.size(); ++i)
      if (e[i] == 0.0) EXPECT_EQ(out[i], 0);
  }
}

TEST(Pefosu, FirstTaskSingleClientTakesTopFactorDirections) {
  MoeLoraModel model(tiny_model());
  auto table = empty_protection(model);
  std::mt19937_64 rng(25);
  auto uploads = random_uploads(1, 2, 3, 8, 4, rng);
  const std::vector<Index> k{6, 3};
  pefosu_update(table, uploads, std::vector<double>{1.0}, k);
  for (std::size_t slot = 0; slot < 2; ++slot) {
    Index total = 0;
    for (std::size_t e = 0; e < 3; ++e) {
      const auto& p = table[slot][e];
      total += p.basis.rank();
      if (p.basis.empty()) continue;
      const auto f = factorize_stack(uploads[0][slot][e].columns, p.basis.rank());
      const auto expected = OrthonormalBasis::span_of(f.columns);
      EXPECT_LE(projector_distance(p.basis, expected), 1e-8);
    }
    EXPECT_EQ(total, k[slot]);
  }
}

TEST(Pefosu, IdenticalFactorsMatchOneClient) {
  MoeLoraModel model(tiny_model());
  std::mt19937_64 rng(26);
  auto one = random_uploads(1, 2, 3, 8, 3, rng);
  const std::vector<ExpertFactors> many{one[0], one[0], one[0]};
  const std::vector<Index> k{5, 4};
  auto single = empty_protection(model);
  auto triple = empty_protection(model);
  pefosu_update(single, one, std::vector<double>{1.0}, k);
  pefosu_update(triple, many, std::vector<double>{0.2, 0.5, 0.3}, k);
  for (std::size_t slot = 0; slot < 2; ++slot)
    for (std::size_t e = 0; e < 3; ++e) {
      ASSERT_EQ(single[slot][e].basis.rank(), triple[slot][e].basis.rank());
      if (single[slot][e].basis.empty()) continue;
      EXPECT_LE(projector_distance(single[slot][e].basis, triple[slot][e].basis), 1e-8);
      EXPECT_LE((single[slot][e].spectrum.values - triple[slot][e].spectrum.values).norm(), 1e-8);
    }
}

TEST(Pefosu, MatchesMaterializedEigendecomposition) {
  ModelConfig mc = tiny_model();
  mc.dim = 16;
  mc.experts = 1;
  mc.adapted_layers = {0};
  MoeLoraModel model(mc);
  auto table = empty_protection(model);
  std::mt19937_64 rng(27);
  const std::vector<double> w{0.5, 0.3, 0.2};
  for (int task = 0; task < 3; ++task) {
    auto uploads = random_uploads(3, 1, 1, 16, 2, rng);
    // Spread the spectrum so the top eigenspace is well separated.
    for (std::size_t c = 0; c < 3; ++c) uploads[c][0][0].columns.col(0) *= 4.0;
    const auto carry = table[0][0];
    std::vector<Matrix> raw;
    for (const auto& u : uploads) raw.push_back(u[0][0].columns);
    const Index k_out = carry.basis.rank() + 2;
    const auto full = oracle::materialized_union(carry.basis.columns(), carry.spectrum.values, raw, w, k_out);
    pefosu_update(table, uploads, w, std::vector<Index>{2});
    const auto& p = table[0][0];
    ASSERT_EQ(p.basis.rank(), k_out);
    EXPECT_LE((p.spectrum.values - full.spectrum).norm(), 1e-8 * full.spectrum[0]);
    EXPECT_LE(projector_distance(p.basis, OrthonormalBasis::from_columns(full.basis, 1e-9)), 1e-6);
  }
}

TEST(Pefosu, SpectrumTraceNeverDecreases) {
  MoeLoraModel model(tiny_model());
  auto table = empty_protection(model);
  std::mt19937_64 rng(28);
  std::vector<std::vector<double>> trace(2, std::vector<double>(3, 0.0));
  std::vector<std::vector<Index>> rank(2, std::vector<Index>(3, 0));
  for (int task = 0; task < 5; ++task) {
    auto uploads = random_uploads(2, 2, 3, 8, 2, rng);
    pefosu_update(table, uploads, std::vector<double>{0.4, 0.6}, std::vector<Index>{3, 2});
    for (std::size_t s = 0; s < 2; ++s)
      for (std::size_t e = 0; e < 3; ++e) {
        const auto& p = table[s][e];
        EXPECT_GE(p.spectrum.trace(), trace[s][e] - 1e-9);
        EXPECT_GE(p.basis.rank(), rank[s][e]);
        EXPECT_LE(p.basis.rank(), 8);
        EXPECT_LE(p.basis.orthonormality_error(), 1e-10);
        trace[s][e] = p.spectrum.trace();
        rank[s][e] = p.basis.rank();
      }
  }
}

TEST(Pefosu, NeverRoutedExpertKeepsItsBasis) {
  MoeLoraModel model(tiny_model());
  auto table = empty_protection(model);
  std::mt19937_64 rng(29);
  pefosu_update(table, random_uploads(2, 2, 3, 8, 2, rng), std::vector<double>{0.5, 0.5},
                std::vector<Index>{3, 3});
  const auto before = table;
  const auto report = pefosu_update(table, random_uploads(2, 2, 3, 8, 2, rng, {1}),
                                    std::vector<double>{0.5, 0.5}, std::vector<Index>{3, 3});
  for (std::size_t s = 0; s < 2; ++s) {
    EXPECT_EQ(report.growth[s][1], 0);
    EXPECT_EQ(table[s][1].basis.columns(), before[s][1].basis.columns());
    EXPECT_EQ(table[s][1].spectrum.values, before[s][1].spectrum.values);
  }
}

TEST(Pefosu, AllEmptyLeavesTableEmpty) {
  MoeLoraModel model(tiny_model());
  auto table = empty_protection(model);
  std::mt19937_64 rng(30);
  pefosu_update(table, random_uploads(2, 2, 3, 8, 2, rng, {0, 1, 2}), std::vector<double>{0.5, 0.5},
                std::vector<Index>{3, 3});
  for (const auto& row : table)
    for (const auto& p : row) EXPECT_TRUE(p.basis.empty());
}

TEST(SharedUpdate, EveryExpertGetsTheSameBasis) {
  MoeLoraModel model(tiny_model());
  auto table = empty_protection(model);
  std::mt19937_64 rng(31);
  const auto report = shared_update(table, random_uploads(2, 2, 3, 8, 2, rng), std::vector<double>{0.5, 0.5},
                                    std::vector<Index>{3, 2});
  for (std::size_t s = 0; s < 2; ++s) {
    EXPECT_EQ(table[s][0].basis.rank(), s == 0 ? 3 : 2);
    for (std::size_t e = 1; e < 3; ++e) EXPECT_EQ(table[s][e].basis.columns(), table[s][0].basis.columns());
    EXPECT_EQ(report.growth[s][0], table[s][0].basis.rank());
  }
}

TEST(MaxBasisResidual, MeasuresUTransposeB) {
  MoeLoraModel model(tiny_model());
  auto table = empty_protection(model);
  EXPECT_EQ(max_basis_residual(model, table), 0.0);
  Matrix u = Matrix::Zero(8, 1);
  u(0, 0) = 1.0;
  table[1][2].basis = OrthonormalBasis::from_columns(u);
  auto& b = model.adapters()[1].experts[2].b;
  b.setZero();
  b(0, 0) = 3.0;
  b(0, 1) = 4.0;
  b(1, 0) = 7.0;
  EXPECT_NEAR(max_basis_residual(model, table), 5.0, 1e-15);
}
