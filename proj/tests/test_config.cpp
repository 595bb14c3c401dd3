#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "nhp_oam/app.hpp"
#include "nhp_oam/config.hpp"

using namespace nhp;

namespace {

struct FakeEnv {
  std::map<std::string, std::string> vars;
  const char* operator()(const char* name) const {
    auto it = vars.find(name);
    return it == vars.end() ? nullptr : it->second.c_str();
  }
};

std::filesystem::path write_tmp(const std::string& name, const std::string& text) {
  const auto p = std::filesystem::temp_directory_path() / name;
  std::ofstream(p) << text;
  return p;
}

}  // namespace

TEST(Config, DefaultsProduceValidTypedViews) {
  const auto cfg = default_app_config();
  const auto tc = train_config_of(cfg);
  EXPECT_EQ(tc.model.d, 32u);
  EXPECT_EQ(tc.model.session_layers, 2u);
  EXPECT_EQ(tc.model.history_layers, 2u);
  EXPECT_EQ(tc.model.max_sessions, 10u);
  EXPECT_EQ(tc.patience, 5u);
  EXPECT_EQ(tc.clip_norm, 5.0);
  EXPECT_EQ(cfg["ingest"]["gap_seconds"], 1800);
  EXPECT_EQ(cfg["ingest"]["window_seconds"], 30);
  EXPECT_NO_THROW(pattern_config_of(cfg));
  EXPECT_NO_THROW(downstream_config_of(cfg));
  EXPECT_EQ(grid_spec_of(cfg).loss_alphas.size(), 5u);
}

TEST(Config, UnknownKeysAndWrongTypesRejected) {
  auto cfg = default_app_config();
  EXPECT_THROW(apply_patch(cfg, {{"trian", {{"epochs", 3}}}}), ConfigError);
  EXPECT_THROW(apply_patch(cfg, {{"train", {{"epoch", 3}}}}), ConfigError);
  EXPECT_THROW(apply_patch(cfg, {{"train", {{"epochs", "three"}}}}), ConfigError);
  EXPECT_THROW(apply_patch(cfg, {{"train", {{"epochs", 2.5}}}}), ConfigError);
  EXPECT_THROW(apply_patch(cfg, {{"train", 4}}), ConfigError);
  EXPECT_NO_THROW(apply_patch(cfg, {{"train", {{"learning_rate", 1}}}}));  // integer accepted for a real
  EXPECT_EQ(train_config_of(cfg).learning_rate, 1.0);
}

TEST(Config, EnvironmentNamesAreUniqueAndPrefixed) {
  std::set<std::string> seen;
  for (const auto& k : config_keys()) {
    const auto e = env_var_for(k);
    EXPECT_EQ(e.rfind("NHP_OAM_", 0), 0u);
    EXPECT_TRUE(seen.insert(e).second) << e;
  }
  EXPECT_EQ(env_var_for("train.learning_rate"), "NHP_OAM_TRAIN_LEARNING_RATE");
  EXPECT_EQ(env_var_for("generator.n_users"), "NHP_OAM_GENERATOR_N_USERS");
}

TEST(Config, EnvironmentOverridesAndValidates) {
  auto cfg = default_app_config();
  apply_env(cfg, FakeEnv{{{"NHP_OAM_TRAIN_EPOCHS", "7"}, {"NHP_OAM_DATA_DIR", "007"}, {"NHP_OAM_TRAIN_USE_RATIO", "false"}}});
  EXPECT_EQ(cfg["train"]["epochs"], 7);
  EXPECT_EQ(cfg["data_dir"], "007");
  EXPECT_EQ(cfg["train"]["use_ratio"], false);
  auto bad = default_app_config();
  EXPECT_THROW(apply_env(bad, FakeEnv{{{"NHP_OAM_TRAIN_EPOCHS", "many"}}}), ConfigError);
}

TEST(Config, ResolutionOrder) {
  const auto file = write_tmp("nhp_oam_cfg_order.json", R"({"seed": 3, "train": {"epochs": 4, "batch_size": 8}, "out_dir": "from_file"})");
  app::Invocation inv;
  inv.config_path = file.string();
  FakeEnv env{{{"NHP_OAM_TRAIN_EPOCHS", "9"}, {"NHP_OAM_SEED", "5"}}};
  auto cfg = app::resolve_config(inv, env);
  EXPECT_EQ(cfg["train"]["batch_size"], 8);  // file over default
  EXPECT_EQ(cfg["train"]["epochs"], 9);      // env over file
  EXPECT_EQ(cfg["seed"], 5);
  EXPECT_EQ(cfg["out_dir"], "from_file");
  inv.seed = 11;
  inv.out = "from_flag";
  cfg = app::resolve_config(inv, env);
  EXPECT_EQ(cfg["seed"], 11);  // flag over env
  EXPECT_EQ(cfg["out_dir"], "from_flag");
  std::filesystem::remove(file);
}

TEST(Config, InvalidValuesCaughtByTypedViews) {
  app::Invocation inv;
  EXPECT_THROW(app::resolve_config(inv, FakeEnv{{{"NHP_OAM_TRAIN_D", "7"}}}), ConfigError);
  EXPECT_THROW(app::resolve_config(inv, FakeEnv{{{"NHP_OAM_TRAIN_PHI", "relu"}}}), std::exception);
  EXPECT_THROW(app::resolve_config(inv, FakeEnv{{{"NHP_OAM_EVALUATION_SPLIT", "dev"}}}), ConfigError);
  EXPECT_THROW(app::resolve_config(inv, FakeEnv{{{"NHP_OAM_GENERATOR_HOURLY_SEARCH_PROFILE", "[0.1, 0.2]"}}}), ConfigError);
  const auto broken = write_tmp("nhp_oam_cfg_broken.json", "{ not json");
  inv.config_path = broken.string();
  EXPECT_THROW(app::resolve_config(inv, FakeEnv{}), ConfigError);
  inv.config_path = "/nonexistent/cfg.json";
  EXPECT_THROW(app::resolve_config(inv, FakeEnv{}), ConfigError);
  std::filesystem::remove(broken);
}
