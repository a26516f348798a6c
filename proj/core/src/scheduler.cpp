#include "prism/scheduler.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace prism {

namespace {

// Largest-remainder apportionment of `total` units proportional to `weights`.
// Entries with zero weight get nothing.
std::vector<Index> apportion(std::span<const double> weights, Index total) {
  const std::size_t n = weights.size();
  std::vector<Index> out(n, 0);
  const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (total <= 0 || sum <= 0.0) return out;
  std::vector<double> frac(n, 0.0);
  Index assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (weights[i] <= 0.0) continue;
    const double exact = static_cast<double>(total) * weights[i] / sum;
    // The epsilon keeps exact integers from flooring one unit low.
    const double whole = std::floor(exact + 1e-9);
    out[i] = static_cast<Index>(whole);
    frac[i] = std::max(exact - whole, 0.0);
    assigned += out[i];
  }
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < n; ++i)
    if (weights[i] > 0.0) order.push_back(i);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  Index remainder = std::max<Index>(total - assigned, 0);
  for (std::size_t j = 0; remainder > 0; j = (j + 1) % order.size(), --remainder) {
    ++out[order[j]];
  }
  return out;
}

}  // namespace

Index BudgetAllocation::total() const { return std::accumulate(k.begin(), k.end(), Index{0}); }

double rectified_conflict(std::span<const Vector> task_gradients, Index* degenerate) {
  const std::size_t n = task_gradients.size();
  require(n >= 2, "conflict needs at least two tasks");
  double sum = 0.0;
  Index pairs = 0;
  Index skipped = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      ++pairs;
      const double ni = task_gradients[i].norm();
      const double nj = task_gradients[j].norm();
      if (ni == 0.0 || nj == 0.0) {
        ++skipped;
        continue;
      }
      const double cosine = std::clamp(task_gradients[i].dot(task_gradients[j]) / (ni * nj), -1.0, 1.0);
      sum += std::max(0.0, -cosine);
    }
  }
  if (degenerate) *degenerate += skipped;
  return sum / static_cast<double>(pairs);
}

std::vector<std::vector<Vector>> mean_layer_gradients(const MoeLoraModel& model,
                                                      std::span<const SampleBatch> tasks) {
  std::vector<std::vector<Vector>> out;
  for (const auto& batch : tasks) {
    require(batch.size() >= 1, "gradient measurement needs samples");
    ModelGrad total = ModelGrad::zeros_like(model);
    for (Index i = 0; i < batch.size(); ++i) {
      SampleTrace trace = forward(model, batch.inputs.col(i));
      const auto ce = cross_entropy(trace.logits, batch.labels[static_cast<std::size_t>(i)]);
      total += backward(model, trace, ce.grad);
    }
    total *= 1.0 / static_cast<double>(batch.size());
    std::vector<Vector> per_layer;
    for (const auto& layer : total.layers) {
      Index size = 0;
      for (const auto& g : layer.experts) size += g.a.size() + g.b.size();
      Vector flat(size);
      Index offset = 0;
      for (const auto& g : layer.experts) {
        flat.segment(offset, g.a.size()) = g.a.reshaped();
        offset += g.a.size();
        flat.segment(offset, g.b.size()) = g.b.reshaped();
        offset += g.b.size();
      }
      per_layer.push_back(std::move(flat));
    }
    out.push_back(std::move(per_layer));
  }
  return out;
}

InterferenceLandscape measure_gamma(const MoeLoraModel& model, std::span<const SampleBatch> tasks) {
  require(tasks.size() >= 2, "gamma needs at least two task batches");
  const auto grads = mean_layer_gradients(model, tasks);
  InterferenceLandscape landscape;
  for (Index slot = 0; slot < model.num_adapted(); ++slot) {
    std::vector<Vector> per_task;
    for (const auto& task : grads) per_task.push_back(task[static_cast<std::size_t>(slot)]);
    Index skipped = 0;
    landscape.gamma.push_back(rectified_conflict(per_task, &skipped));
    if (skipped > 0) {
      spdlog::warn("layer {}: {} task pair(s) with a zero mean gradient count as no conflict",
                   model.adapters()[static_cast<std::size_t>(slot)].layer, skipped);
    }
    landscape.degenerate_pairs += skipped;
  }
  return landscape;
}

std::vector<double> waterfill_continuous(std::span<const double> gamma, Index k_bar) {
  double norm2 = 0.0;
  for (double g : gamma) norm2 += g * g;
  std::vector<double> out(gamma.size(), 0.0);
  if (norm2 == 0.0) return out;
  for (std::size_t l = 0; l < gamma.size(); ++l) {
    out[l] = static_cast<double>(k_bar) * gamma[l] * gamma[l] / norm2;
  }
  return out;
}

BudgetAllocation uniform_budget(Index layers, Index k_bar, Index d) {
  require(layers >= 1, "budget needs at least one layer");
  require(k_bar >= 0 && d >= 2, "budget needs k_bar >= 0 and d >= 2");
  BudgetAllocation alloc;
  alloc.k_bar = k_bar;
  for (Index l = 0; l < layers; ++l) {
    const Index share = k_bar / layers + (l < k_bar % layers ? 1 : 0);
    alloc.k.push_back(std::min(share, d - 1));
  }
  return alloc;
}

BudgetAllocation waterfill_budget(std::span<const double> gamma, Index k_bar, Index d) {
  const Index layers = static_cast<Index>(gamma.size());
  require(layers >= 1, "budget needs at least one layer");
  require(d >= 2, "budget needs d >= 2");
  require(k_bar >= 0, "total budget must be nonnegative");
  Index positive = 0;
  for (double g : gamma) {
    require(std::isfinite(g) && g >= 0.0, "gamma must be finite and nonnegative");
    if (g > 0.0) ++positive;
  }
  if (positive == 0) {
    BudgetAllocation alloc = uniform_budget(layers, k_bar, d);
    alloc.uniform_fallback = true;
    return alloc;
  }
  require(k_bar >= positive, "k_bar must cover one unit per layer with gamma > 0");

  std::vector<double> weights(gamma.size());
  for (std::size_t l = 0; l < gamma.size(); ++l) weights[l] = gamma[l] * gamma[l];

  BudgetAllocation alloc;
  alloc.k_bar = k_bar;
  alloc.k = apportion(weights, k_bar);

  for (std::size_t l = 0; l < gamma.size(); ++l) {
    if (gamma[l] > 0.0 && alloc.k[l] == 0) {
      const auto donor = std::max_element(alloc.k.begin(), alloc.k.end()) - alloc.k.begin();
      --alloc.k[static_cast<std::size_t>(donor)];
      alloc.k[l] = 1;
    }
  }

  const Index cap = d - 1;
  while (true) {
    Index overflow = 0;
    for (auto& k : alloc.k) {
      if (k > cap) {
        overflow += k - cap;
        k = cap;
      }
    }
    if (overflow == 0) break;
    std::vector<double> open(weights.size(), 0.0);
    bool any = false;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      if (weights[l] > 0.0 && alloc.k[l] < cap) {
        open[l] = weights[l];
        any = true;
      }
    }
    if (!any) break;  // every conflicting layer is full; the rest of k_bar goes unused
    const auto extra = apportion(open, overflow);
    for (std::size_t l = 0; l < extra.size(); ++l) alloc.k[l] += extra[l];
  }
  return alloc;
}

double warmup_alpha(Index step, Index s0) {
  require(step >= 0, "step must be nonnegative");
  require(s0 >= 0, "warmup length must be nonnegative");
  if (s0 == 0) return 1.0;
  return std::min(static_cast<double>(step) / static_cast<double>(s0), 1.0);
}

void write_gamma_csv(const std::filesystem::path& path, std::span<const Index> layers,
                     const InterferenceLandscape& landscape, const BudgetAllocation& budget) {
  require(layers.size() == landscape.gamma.size() && layers.size() == budget.k.size(),
          "gamma export needs one entry per adapted layer");
  std::ofstream out(path);
  require(out.good(), "cannot open " + path.string());
  out.precision(17);
  out << "layer,gamma,k_l\n";
  for (std::size_t l = 0; l < layers.size(); ++l) {
    out << layers[l] << ',' << landscape.gamma[l] << ',' << budget.k[l] << '\n';
  }
}

}  // namespace prism
