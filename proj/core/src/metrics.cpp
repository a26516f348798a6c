#include "prism/metrics.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace prism {

TransferMetrics compute_aa_bwt_fwt(const AccuracyMatrix& acc) {
  const Index n = acc.tasks();
  require(n >= 1 && acc.r.cols() == n, "accuracy matrix must be square and nonempty");
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j)
      require(acc.r(i, j) >= 0.0 && acc.r(i, j) <= 1.0, "accuracies must lie in [0, 1]");
  TransferMetrics m;
  m.aa = acc.r.row(n - 1).mean();
  if (n < 2) return m;
  double bwt = 0.0;
  double fwt = 0.0;
  for (Index j = 0; j + 1 < n; ++j) {
    bwt += acc.r(n - 1, j) - acc.r(j, j);
    fwt += acc.r(j, j + 1);
  }
  m.bwt = bwt / static_cast<double>(n - 1);
  m.fwt = fwt / static_cast<double>(n - 1);
  return m;
}

double nullspace_consumption(const OrthonormalBasis& basis) {
  require(basis.dim() >= 1, "consumption needs a nonempty ambient space");
  return static_cast<double>(basis.rank()) / static_cast<double>(basis.dim());
}

OrthonormalBasis top_k_covariance_basis(const Matrix& h, const Vector& weights, Index k) {
  require(h.cols() == weights.size(), "one weight per activation column");
  require(k >= 0 && k <= h.rows(), "k must lie in [0, d]");
  for (Index i = 0; i < weights.size(); ++i) {
    require(std::isfinite(weights[i]) && weights[i] >= 0.0, "covariance weights must be nonnegative");
  }
  if (h.cols() == 0 || k == 0) return OrthonormalBasis(h.rows());
  const Matrix scaled = h * weights.cwiseSqrt().asDiagonal();
  Eigen::BDCSVD<Matrix> svd(scaled, Eigen::ComputeThinU);
  const Vector& sigma = svd.singularValues();
  if (sigma.size() == 0 || sigma[0] == 0.0) return OrthonormalBasis(h.rows());
  Index rank = 0;
  while (rank < sigma.size() && sigma[rank] > 1e-12 * sigma[0]) ++rank;
  return OrthonormalBasis::from_columns(svd.matrixU().leftCols(std::min(k, rank)), 1e-9);
}

std::vector<OverlapPair> overlap_contrast(std::span<const ActivationRecord> tasks, Index k) {
  require(tasks.size() >= 2, "overlap contrast needs at least two tasks");
  require(k >= 1, "overlap needs k >= 1");
  std::vector<OrthonormalBasis> act;
  std::vector<OrthonormalBasis> grad;
  for (const auto& t : tasks) {
    require(t.h.cols() == t.s.size(), "one sensitivity per activation");
    act.push_back(top_k_covariance_basis(t.h, Vector::Ones(t.h.cols()), k));
    grad.push_back(top_k_covariance_basis(t.h, t.s, k));
  }
  std::vector<OverlapPair> out;
  for (std::size_t a = 0; a < tasks.size(); ++a) {
    for (std::size_t b = a + 1; b < tasks.size(); ++b) {
      const Index kp = std::min({act[a].rank(), act[b].rank(), grad[a].rank(), grad[b].rank()});
      require(kp >= 1, "a task's covariance is identically zero");
      auto cut = [kp](const OrthonormalBasis& basis) {
        return OrthonormalBasis::from_columns(basis.columns().leftCols(kp), 1e-9);
      };
      OverlapPair p;
      p.first = static_cast<Index>(a);
      p.second = static_cast<Index>(b);
      p.k = kp;
      p.reduced = kp < k;
      p.omega_a = subspace_overlap(cut(act[a]), cut(act[b]));
      p.omega_g = subspace_overlap(cut(grad[a]), cut(grad[b]));
      out.push_back(p);
    }
  }
  return out;
}

Index plasticity_capacity(Index r, Index d, Index experts, Index k_cum, bool per_expert) {
  require(r >= 1 && d >= 1 && experts >= 1 && k_cum >= 0, "capacity arguments must be positive");
  const Index room = (per_expert ? experts * d : d) - k_cum;
  return std::max<Index>(0, 2 * r * room);
}

Matrix routing_heatmap(std::span<const Matrix> pi_by_task) {
  require(!pi_by_task.empty(), "heatmap needs at least one task");
  const Index experts = pi_by_task.front().rows();
  Matrix heat(static_cast<Index>(pi_by_task.size()), experts);
  for (std::size_t t = 0; t < pi_by_task.size(); ++t) {
    require(pi_by_task[t].rows() == experts && pi_by_task[t].cols() >= 1,
            "every task needs routing weights over the same experts");
    heat.row(static_cast<Index>(t)) = pi_by_task[t].rowwise().mean().transpose();
  }
  return heat;
}

double routing_entropy(std::span<const Matrix> pi_by_task) {
  double total = 0.0;
  Index count = 0;
  for (const auto& pi : pi_by_task) {
    for (Index i = 0; i < pi.cols(); ++i) {
      double h = 0.0;
      for (Index e = 0; e < pi.rows(); ++e) {
        const double p = pi(e, i);
        if (p > 0.0) h -= p * std::log(p);
      }
      total += h;
      ++count;
    }
  }
  require(count >= 1, "entropy needs at least one routing distribution");
  return total / static_cast<double>(count);
}

double flip_rate(std::span<const std::vector<Index>> top1_by_checkpoint) {
  if (top1_by_checkpoint.size() < 2) return 0.0;
  const std::size_t n = top1_by_checkpoint.front().size();
  std::size_t flips = 0;
  std::size_t pairs = 0;
  for (std::size_t c = 1; c < top1_by_checkpoint.size(); ++c) {
    require(top1_by_checkpoint[c].size() == n, "checkpoints must cover the same samples");
    for (std::size_t i = 0; i < n; ++i) {
      if (top1_by_checkpoint[c][i] != top1_by_checkpoint[c - 1][i]) ++flips;
      ++pairs;
    }
  }
  return pairs == 0 ? 0.0 : static_cast<double>(flips) / static_cast<double>(pairs);
}

RoutingStats routing_stats(std::span<const Matrix> pi_by_task,
                           std::span<const std::vector<Index>> top1_by_checkpoint) {
  return {routing_heatmap(pi_by_task), flip_rate(top1_by_checkpoint), routing_entropy(pi_by_task)};
}

std::string format_double(double value) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

void write_accuracy_csv(const std::filesystem::path& path, const AccuracyMatrix& acc) {
  std::ofstream out(path);
  require(out.good(), "cannot open " + path.string());
  out << "after_task";
  for (Index j = 0; j < acc.r.cols(); ++j) out << ",task_" << j;
  out << '\n';
  for (Index i = 0; i < acc.r.rows(); ++i) {
    out << i;
    for (Index j = 0; j < acc.r.cols(); ++j) out << ',' << format_double(acc.r(i, j));
    out << '\n';
  }
}

AccuracyMatrix read_accuracy_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open " + path.string());
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "accuracy CSV has no header");
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    bool first = true;
    while (std::getline(ss, cell, ',')) {
      if (first) {
        first = false;
        continue;
      }
      double v = 0.0;
      const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      require(res.ec == std::errc{} && res.ptr == cell.data() + cell.size(), "bad number in accuracy CSV");
      row.push_back(v);
    }
    rows.push_back(std::move(row));
  }
  AccuracyMatrix acc;
  const auto n = static_cast<Index>(rows.size());
  acc.r.resize(n, n);
  for (Index i = 0; i < n; ++i) {
    require(static_cast<Index>(rows[static_cast<std::size_t>(i)].size()) == n, "accuracy CSV is not square");
    for (Index j = 0; j < n; ++j) acc.r(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  return acc;
}

void write_task_metrics_csv(const std::filesystem::path& path, const AccuracyMatrix& acc) {
  std::ofstream out(path);
  require(out.good(), "cannot open " + path.string());
  const Index n = acc.tasks();
  out << "task,acc_after_training,final_acc,forgetting,fwt_entry\n";
  for (Index j = 0; j < n; ++j) {
    out << j << ',' << format_double(acc.r(j, j)) << ',' << format_double(acc.r(n - 1, j)) << ','
        << format_double(acc.r(n - 1, j) - acc.r(j, j)) << ',';
    if (j >= 1) out << format_double(acc.r(j - 1, j));
    out << '\n';
  }
}

}  // namespace prism
