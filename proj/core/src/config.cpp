#include "prism/config.hpp"

#include "prism/metrics.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

namespace prism {

namespace {

template <typename T>
T parse_number(std::string_view text, std::string_view key) {
  T value{};
  const auto* first = text.data();
  const auto* last = text.data() + text.size();
  const auto res = std::from_chars(first, last, value);
  require(res.ec == std::errc{} && res.ptr == last,
          "bad value '" + std::string(text) + "' for " + std::string(key));
  return value;
}

bool parse_bool(std::string_view text, std::string_view key) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ContractViolation("bad boolean '" + std::string(text) + "' for " + std::string(key));
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<Index> parse_index_list(std::string_view text, std::string_view key) {
  std::vector<Index> out;
  std::stringstream ss{std::string(text)};
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<Index>(trim(item), key));
  require(!out.empty(), std::string(key) + " needs at least one entry");
  return out;
}

struct Field {
  const char* section;
  const char* key;
  std::function<void(ExperimentConfig&, std::string_view)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <typename T>
Field integer_field(const char* section, const char* key, T ExperimentConfig::*member) {
  return {section, key,
          [=](ExperimentConfig& c, std::string_view v) { c.*member = parse_number<T>(v, key); },
          [=](const ExperimentConfig& c) { return std::to_string(c.*member); }};
}

Field real_field(const char* section, const char* key, double ExperimentConfig::*member) {
  return {section, key,
          [=](ExperimentConfig& c, std::string_view v) { c.*member = parse_number<double>(v, key); },
          [=](const ExperimentConfig& c) { return format_double(c.*member); }};
}

template <typename Sub, typename T>
Field nested_field(const char* section, const char* key, Sub ExperimentConfig::*outer, T Sub::*member) {
  return {section, key,
          [=](ExperimentConfig& c, std::string_view v) { (c.*outer).*member = parse_number<T>(v, key); },
          [=](const ExperimentConfig& c) {
            if constexpr (std::is_floating_point_v<T>) {
              return format_double((c.*outer).*member);
            } else {
              return std::to_string((c.*outer).*member);
            }
          }};
}

Field flag_field(const char* key, bool AblationFlags::*member) {
  return {"ablation", key,
          [=](ExperimentConfig& c, std::string_view v) { c.ablation.*member = parse_bool(v, key); },
          [=](const ExperimentConfig& c) { return std::string(c.ablation.*member ? "true" : "false"); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(integer_field("run", "seed", &ExperimentConfig::seed));
    f.push_back({"run", "method",
                 [](ExperimentConfig& c, std::string_view v) { c.method = parse_method(v); },
                 [](const ExperimentConfig& c) { return std::string(method_name(c.method)); }});

    f.push_back(nested_field("model", "dim", &ExperimentConfig::model, &ModelConfig::dim));
    f.push_back(nested_field("model", "classes", &ExperimentConfig::model, &ModelConfig::classes));
    f.push_back(nested_field("model", "layers", &ExperimentConfig::model, &ModelConfig::layers));
    f.push_back({"model", "adapted_layers",
                 [](ExperimentConfig& c, std::string_view v) {
                   c.model.adapted_layers = parse_index_list(v, "adapted_layers");
                 },
                 [](const ExperimentConfig& c) {
                   std::string s;
                   for (std::size_t i = 0; i < c.model.adapted_layers.size(); ++i) {
                     if (i) s += ',';
                     s += std::to_string(c.model.adapted_layers[i]);
                   }
                   return s;
                 }});
    f.push_back(nested_field("model", "experts", &ExperimentConfig::model, &ModelConfig::experts));
    f.push_back(nested_field("model", "top_k", &ExperimentConfig::model, &ModelConfig::top_k));
    f.push_back(nested_field("model", "lora_rank", &ExperimentConfig::model, &ModelConfig::lora_rank));
    f.push_back(nested_field("model", "lora_alpha", &ExperimentConfig::model, &ModelConfig::lora_alpha));
    f.push_back(nested_field("model", "backbone_gain", &ExperimentConfig::model, &ModelConfig::backbone_gain));
    f.push_back(nested_field("model", "backbone_decay", &ExperimentConfig::model, &ModelConfig::backbone_decay));
    f.push_back(nested_field("model", "bias_scale", &ExperimentConfig::model, &ModelConfig::bias_scale));
    f.push_back(nested_field("model", "router_scale", &ExperimentConfig::model, &ModelConfig::router_scale));
    f.push_back(nested_field("model", "readout_gain", &ExperimentConfig::model, &ModelConfig::readout_gain));
    f.push_back({"model", "dense_router_warmup",
                 [](ExperimentConfig& c, std::string_view v) {
                   c.model.dense_router_warmup = parse_bool(v, "dense_router_warmup");
                 },
                 [](const ExperimentConfig& c) { return std::string(c.model.dense_router_warmup ? "true" : "false"); }});

    f.push_back(nested_field("data", "n_tasks", &ExperimentConfig::data, &TaskSequenceConfig::n_tasks));
    f.push_back(nested_field("data", "samples_per_task", &ExperimentConfig::data,
                             &TaskSequenceConfig::samples_per_task));
    f.push_back(nested_field("data", "test_samples_per_task", &ExperimentConfig::data,
                             &TaskSequenceConfig::test_samples_per_task));
    f.push_back(nested_field("data", "opposition", &ExperimentConfig::data, &TaskSequenceConfig::opposition));
    f.push_back(nested_field("data", "mean_scale", &ExperimentConfig::data, &TaskSequenceConfig::mean_scale));
    f.push_back(nested_field("data", "noise_scale", &ExperimentConfig::data, &TaskSequenceConfig::noise_scale));

    f.push_back(integer_field("federation", "n_clients", &ExperimentConfig::n_clients));
    f.push_back(real_field("federation", "beta", &ExperimentConfig::beta));
    f.push_back(integer_field("federation", "rounds_per_task", &ExperimentConfig::rounds_per_task));
    f.push_back(integer_field("federation", "local_epochs", &ExperimentConfig::local_epochs));
    f.push_back(integer_field("federation", "batch_size", &ExperimentConfig::batch_size));
    f.push_back(real_field("federation", "learning_rate", &ExperimentConfig::learning_rate));

    f.push_back(integer_field("protection", "k_bar", &ExperimentConfig::k_bar));
    f.push_back(real_field("protection", "warmup_epochs", &ExperimentConfig::warmup_epochs));
    f.push_back(integer_field("protection", "diagnostic_epochs", &ExperimentConfig::diagnostic_epochs));
    f.push_back(integer_field("protection", "overlap_k", &ExperimentConfig::overlap_k));

    f.push_back(flag_field("no_pefosu", &AblationFlags::no_pefosu));
    f.push_back(flag_field("no_per_expert", &AblationFlags::no_per_expert));
    f.push_back(flag_field("no_routing_weight", &AblationFlags::no_routing_weight));
    f.push_back(flag_field("no_router_freeze", &AblationFlags::no_router_freeze));
    f.push_back(flag_field("no_scheduling", &AblationFlags::no_scheduling));
    f.push_back(flag_field("no_warmup", &AblationFlags::no_warmup));
    f.push_back(flag_field("a_only_projection", &AblationFlags::a_only_projection));
    return f;
  }();
  return table;
}

const Field* find_field(std::string_view section, std::string_view key) {
  for (const auto& f : fields()) {
    if (section == f.section && key == f.key) return &f;
  }
  return nullptr;
}

}  // namespace

std::string_view method_name(Method method) {
  switch (method) {
    case Method::prism:
      return "prism";
    case Method::none:
      return "none";
    case Method::monolithic:
      return "monolithic";
    case Method::activation:
      return "activation";
  }
  return "prism";
}

Method parse_method(std::string_view name) {
  if (name == "prism") return Method::prism;
  if (name == "none") return Method::none;
  if (name == "monolithic") return Method::monolithic;
  if (name == "activation") return Method::activation;
  throw ContractViolation("unknown method '" + std::string(name) + "'");
}

bool AblationFlags::any() const {
  return no_pefosu || no_per_expert || no_routing_weight || no_router_freeze || no_scheduling ||
         no_warmup || a_only_projection;
}

void validate(const ExperimentConfig& c) {
  const auto& m = c.model;
  require(m.dim >= 2, "dim must be at least 2");
  require(m.classes >= 2, "classes must be at least 2");
  require(m.dim >= 2 * m.classes, "dim must be at least twice the class count");
  require(m.layers >= 1, "layers must be positive");
  require(!m.adapted_layers.empty(), "at least one adapted layer is needed");
  for (Index l : m.adapted_layers) require(l >= 0 && l < m.layers, "adapted layer index out of range");
  require(m.experts >= 1, "experts must be positive");
  require(m.top_k >= 1 && m.top_k <= m.experts, "top_k must lie in [1, experts]");
  require(m.lora_rank >= 1 && m.lora_rank <= m.dim, "lora_rank must lie in [1, dim]");
  require(m.lora_alpha > 0.0, "lora_alpha must be positive");
  require(m.backbone_gain > 0.0 && m.backbone_decay >= 0.0, "backbone gain must be positive, decay nonnegative");
  require(m.bias_scale >= 0.0 && m.router_scale >= 0.0 && m.readout_gain > 0.0,
          "scales must be nonnegative and readout_gain positive");

  const auto& d = c.data;
  require(d.n_tasks >= 1, "n_tasks must be positive");
  require(d.samples_per_task >= 1 && d.test_samples_per_task >= 1, "sample counts must be positive");
  require(d.opposition >= 0.0 && d.opposition <= 1.0, "opposition must lie in [0, 1]");
  require(d.mean_scale > 0.0 && d.noise_scale >= 0.0, "mean_scale must be positive, noise_scale nonnegative");

  require(c.n_clients >= 1, "n_clients must be positive");
  require(c.n_clients <= d.samples_per_task, "more clients than samples per task");
  require(c.beta > 0.0, "beta must be positive");
  require(c.rounds_per_task >= 1 && c.local_epochs >= 1, "rounds and local epochs must be positive");
  require(c.batch_size >= 1, "batch_size must be positive");
  require(c.learning_rate > 0.0, "learning_rate must be positive");
  require(c.k_bar >= 0, "k_bar must be nonnegative");
  require(c.warmup_epochs >= 0.0, "warmup_epochs must be nonnegative");
  require(c.diagnostic_epochs >= 1, "diagnostic_epochs must be positive");
  require(c.overlap_k >= 0 && c.overlap_k <= m.dim, "overlap_k must lie in [0, dim]");
  require(c.method == Method::prism || !c.ablation.any(), "ablation flags apply only to method=prism");
}

ExperimentConfig parse_config(std::string_view text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in{std::string(text)};
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ContractViolation(std::string("malformed config: ") + e.message());
  }
  ExperimentConfig config;
  for (const auto& [section, body] : tree) {
    require(!(body.empty() && !body.data().empty()),
            "config key '" + section + "' must sit inside a section");
    require(section == "run" || section == "model" || section == "data" || section == "federation" ||
                section == "protection" || section == "ablation",
            "unknown config section [" + section + "]");
    for (const auto& [key, value] : body) {
      const Field* f = find_field(section, key);
      require(f != nullptr, "unknown config key [" + section + "] " + key);
      f->set(config, trim(value.data()));
    }
  }
  config.data.dim = config.model.dim;
  config.data.classes = config.model.classes;
  validate(config);
  return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string format_config(const ExperimentConfig& config) {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    if (section != f.section) {
      if (!section.empty()) out += '\n';
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += std::string(f.key) + " = " + f.get(config) + "\n";
  }
  return out;
}

bool is_sweep_axis(std::string_view axis) {
  return axis == "beta" || axis == "n_clients" || axis == "s_0" || axis == "k_bar" || axis == "opposition";
}

void set_sweep_axis(ExperimentConfig& config, std::string_view axis, std::string_view value) {
  if (axis == "beta") {
    config.beta = parse_number<double>(value, axis);
  } else if (axis == "n_clients") {
    config.n_clients = parse_number<Index>(value, axis);
  } else if (axis == "s_0") {
    config.warmup_epochs = parse_number<double>(value, axis);
  } else if (axis == "k_bar") {
    config.k_bar = parse_number<Index>(value, axis);
  } else if (axis == "opposition") {
    config.data.opposition = parse_number<double>(value, axis);
  } else {
    throw ContractViolation("unknown sweep axis '" + std::string(axis) + "'");
  }
  validate(config);
}

}  // namespace prism
