#include "prism/config.hpp"
#include "prism/harness.hpp"

#include <gtest/gtest.h>

#include <string>

using namespace prism;

TEST(Config, FormatParseRoundTrip) {
  for (const char* name : {"standard", "long", "overlap"}) {
    const auto c = scenario_config(name);
    EXPECT_EQ(parse_config(format_config(c)), c) << name;
  }
}

TEST(Config, RoundTripKeepsNonDefaultValues) {
  ExperimentConfig c = standard_config();
  c.seed = 1234567890123ULL;
  c.method = Method::monolithic;
  c.model.adapted_layers = {0, 3};
  c.model.lora_alpha = 0.1;
  c.model.dense_router_warmup = true;
  c.beta = 1.0 / 3.0;
  c.warmup_epochs = 0.25;
  const auto back = parse_config(format_config(c));
  EXPECT_EQ(back, c);
}

TEST(Config, EmptyTextGivesDefaults) {
  EXPECT_EQ(parse_config(""), standard_config());
}

TEST(Config, MissingKeysKeepDefaults) {
  const auto c = parse_config("[federation]\nn_clients = 5\n");
  EXPECT_EQ(c.n_clients, 5);
  EXPECT_EQ(c.k_bar, standard_config().k_bar);
}

TEST(Config, RejectsUnknownKeysAndSections) {
  EXPECT_THROW(parse_config("[federation]\nclients = 5\n"), ContractViolation);
  EXPECT_THROW(parse_config("[optimizer]\nlr = 1\n"), ContractViolation);
  EXPECT_THROW(parse_config("[run]\nmethod = adam\n"), ContractViolation);
  EXPECT_THROW(parse_config("[ablation]\nno_warmup = maybe\n"), ContractViolation);
  EXPECT_THROW(parse_config("[federation]\nn_clients = 3x\n"), ContractViolation);
}

TEST(Config, ValidatesRanges) {
  EXPECT_THROW(parse_config("[model]\ntop_k = 9\n"), ContractViolation);
  EXPECT_THROW(parse_config("[model]\nadapted_layers = 2,7\n"), ContractViolation);
  EXPECT_THROW(parse_config("[data]\nopposition = 1.5\n"), ContractViolation);
  EXPECT_THROW(parse_config("[federation]\nbeta = 0\n"), ContractViolation);
  EXPECT_THROW(parse_config("[model]\ndim = 6\nclasses = 4\n"), ContractViolation);
}

TEST(Config, EveryAblationFlagParses) {
  const std::pair<const char*, bool AblationFlags::*> flags[] = {
      {"no_pefosu", &AblationFlags::no_pefosu},
      {"no_per_expert", &AblationFlags::no_per_expert},
      {"no_routing_weight", &AblationFlags::no_routing_weight},
      {"no_router_freeze", &AblationFlags::no_router_freeze},
      {"no_scheduling", &AblationFlags::no_scheduling},
      {"no_warmup", &AblationFlags::no_warmup},
      {"a_only_projection", &AblationFlags::a_only_projection},
  };
  for (const auto& [key, member] : flags) {
    const auto c = parse_config(std::string("[ablation]\n") + key + " = true\n");
    EXPECT_TRUE(c.ablation.*member) << key;
    EXPECT_TRUE(c.ablation.any());
    AblationFlags only;
    only.*member = true;
    EXPECT_EQ(c.ablation, only) << key;
  }
}

TEST(Config, AblationsNeedTheFullMethod) {
  EXPECT_THROW(parse_config("[run]\nmethod = none\n[ablation]\nno_warmup = true\n"), ContractViolation);
}

TEST(Config, MethodNamesRoundTrip) {
  for (Method m : {Method::prism, Method::none, Method::monolithic, Method::activation})
    EXPECT_EQ(parse_method(method_name(m)), m);
}

TEST(SweepAxis, SetsTheNamedField) {
  ExperimentConfig c = standard_config();
  set_sweep_axis(c, "beta", "0.5");
  EXPECT_EQ(c.beta, 0.5);
  set_sweep_axis(c, "n_clients", "7");
  EXPECT_EQ(c.n_clients, 7);
  set_sweep_axis(c, "s_0", "2.5");
  EXPECT_EQ(c.warmup_epochs, 2.5);
  set_sweep_axis(c, "k_bar", "20");
  EXPECT_EQ(c.k_bar, 20);
  set_sweep_axis(c, "opposition", "0.4");
  EXPECT_EQ(c.data.opposition, 0.4);
  EXPECT_THROW(set_sweep_axis(c, "seed", "1"), ContractViolation);
  EXPECT_THROW(set_sweep_axis(c, "beta", "-1"), ContractViolation);
  EXPECT_TRUE(is_sweep_axis("k_bar"));
  EXPECT_FALSE(is_sweep_axis("dim"));
}

TEST(Config, ScenarioNames) {
  EXPECT_EQ(scenario_config("long").data.n_tasks, 10);
  EXPECT_GT(scenario_config("overlap").overlap_k, 0);
  EXPECT_THROW(scenario_config("huge"), ContractViolation);
}
