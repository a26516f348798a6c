#include "prism/harness.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace prism {

namespace {

using nlohmann::ordered_json;

ordered_json config_json(const ExperimentConfig& config) {
  ordered_json out = ordered_json::object();
  std::istringstream in(format_config(config));
  std::string line;
  std::string section;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.front() == '[') {
      section = line.substr(1, line.size() - 2);
      out[section] = ordered_json::object();
      continue;
    }
    const auto eq = line.find(" = ");
    out[section][line.substr(0, eq)] = line.substr(eq + 3);
  }
  return out;
}

ordered_json optional_json(const std::optional<double>& v) {
  return v ? ordered_json(*v) : ordered_json(nullptr);
}

std::string number_or_empty(double v) { return std::isnan(v) ? std::string() : format_double(v); }

}  // namespace

std::string report_json(const RunReport& report) {
  ordered_json j;
  j["seed"] = report.config.seed;
  j["method"] = std::string(method_name(report.config.method));
  j["config"] = config_json(report.config);
  j["aa"] = report.transfer.aa;
  j["bwt"] = optional_json(report.transfer.bwt);
  j["fwt"] = optional_json(report.transfer.fwt);
  j["flip_rate"] = report.flip_rate;
  j["routing_entropy"] = report.routing_entropy;
  j["max_basis_residual"] = report.max_basis_residual;
  j["rank_limited_unions"] = report.rank_limited_unions;
  j["max_factor_bytes"] = report.max_factor_bytes;
  j["gamma"] = report.landscape.gamma;
  j["k_per_layer"] = report.budget.k;
  j["budget_uniform_fallback"] = report.budget.uniform_fallback;
  ordered_json acc = ordered_json::array();
  for (Index i = 0; i < report.accuracy.r.rows(); ++i) {
    std::vector<double> row(report.accuracy.r.cols());
    for (Index k = 0; k < report.accuracy.r.cols(); ++k) row[static_cast<std::size_t>(k)] = report.accuracy.r(i, k);
    acc.push_back(row);
  }
  j["accuracy_matrix"] = acc;
  if (!report.overlaps.empty()) {
    ordered_json pairs = ordered_json::array();
    for (const auto& p : report.overlaps) {
      pairs.push_back({{"first", p.first}, {"second", p.second}, {"k", p.k},
                       {"omega_a", p.omega_a}, {"omega_g", p.omega_g}, {"reduced", p.reduced}});
    }
    j["overlaps"] = pairs;
  }
  j["wall_seconds"] = report.wall_seconds;
  return j.dump(2);
}

void write_report(const RunReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  // Adapters are stored in ascending layer order.
  std::vector<Index> layers = report.config.model.adapted_layers;
  std::sort(layers.begin(), layers.end());
  {
    std::ofstream out(dir / "report.json");
    require(out.good(), "cannot write report.json");
    out << report_json(report) << '\n';
  }
  write_accuracy_csv(dir / "accuracy_matrix.csv", report.accuracy);
  write_task_metrics_csv(dir / "metrics.csv", report.accuracy);
  {
    std::ofstream out(dir / "heatmap.csv");
    require(out.good(), "cannot write heatmap.csv");
    out << "layer,task,expert,mean_pi\n";
    for (std::size_t slot = 0; slot < report.heatmaps.size(); ++slot) {
      const Matrix& h = report.heatmaps[slot];
      for (Index t = 0; t < h.rows(); ++t)
        for (Index e = 0; e < h.cols(); ++e)
          out << layers[slot] << ',' << t << ',' << e << ','
              << format_double(h(t, e)) << '\n';
    }
  }
  {
    std::ofstream out(dir / "diagnostics.csv");
    require(out.good(), "cannot write diagnostics.csv");
    out << "event,task,round,layer,expert,basis_rank,consumption,residual,theta_min\n";
    for (const auto& r : report.diagnostics) {
      out << r.event << ',' << r.task << ',' << r.round << ',' << r.layer << ',' << r.expert << ','
          << r.basis_rank << ',' << format_double(r.consumption) << ',' << format_double(r.residual) << ','
          << number_or_empty(r.theta_min) << '\n';
    }
  }
  write_gamma_csv(dir / "gamma.csv", layers, report.landscape, report.budget);
}

std::vector<SweepPoint> sweep(const ExperimentConfig& base, std::string_view axis,
                              std::span<const std::string> values, std::span<const std::uint64_t> seeds,
                              const std::filesystem::path& dir) {
  require(is_sweep_axis(axis), "unknown sweep axis '" + std::string(axis) + "'");
  require(!values.empty() && !seeds.empty(), "sweep needs values and seeds");
  std::filesystem::create_directories(dir);
  std::vector<SweepPoint> points;
  for (const auto& value : values) {
    for (std::uint64_t seed : seeds) {
      ExperimentConfig config = base;
      config.seed = seed;
      set_sweep_axis(config, axis, value);
      const RunReport report = run_experiment(config);
      write_report(report, dir / (std::string(axis) + "_" + value + "_seed" + std::to_string(seed)));
      points.push_back({value, seed, report.transfer});
    }
  }
  std::ofstream out(dir / "sweep.csv");
  require(out.good(), "cannot write sweep.csv");
  out << "axis,value,seed,aa,bwt,fwt\n";
  for (const auto& p : points) {
    out << axis << ',' << p.value << ',' << p.seed << ',' << format_double(p.transfer.aa) << ','
        << (p.transfer.bwt ? format_double(*p.transfer.bwt) : "") << ','
        << (p.transfer.fwt ? format_double(*p.transfer.fwt) : "") << '\n';
  }
  return points;
}

}  // namespace prism
