#pragma once

// Application configuration: a JSON document with documented defaults.
// Resolution order: defaults < config file < environment < command-line flags.
// Unknown keys are rejected and leaf types must match the default's type.
//
// Environment overrides use the prefix NHP_OAM_ followed by the upper-cased
// key path joined with '_', e.g. NHP_OAM_TRAIN_LEARNING_RATE=0.0001 or
// NHP_OAM_SEED=7. Values are parsed as JSON, falling back to a plain string.

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "behavior_lab.hpp"
#include "downstream.hpp"
#include "json.hpp"
#include "training.hpp"

namespace nhp {

inline constexpr const char* kEnvPrefix = "NHP_OAM_";

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline nlohmann::json default_app_config() {
  const TrainConfig tc;
  const ModelConfig& mc = tc.model;
  const lab::PatternConfig pc;
  const DownstreamConfig dc;
  nlohmann::json j;
  j["seed"] = 1;
  j["data_dir"] = "data";
  j["out_dir"] = "run";
  j["verbosity"] = "info";
  j["ingest"] = {{"input", "events.jsonl"},
                 {"gap_seconds", kDefaultGapSeconds},
                 {"window_seconds", kDefaultWindowSeconds},
                 {"history_days", 3},
                 {"tz_offset_seconds", 0},
                 {"strict", false}};
  j["generator"] = {{"n_users", pc.n_users},
                    {"days", pc.days},
                    {"hourly_search_profile", pc.hourly_search_profile},
                    {"weekend_boost", pc.weekend_boost},
                    {"repeat_query_prob", pc.repeat_query_prob},
                    {"relevance_strength", pc.relevance_strength},
                    {"base_rate", pc.base_rate},
                    {"start_time", pc.start_time},
                    {"n_items", pc.n_items},
                    {"n_words", pc.n_words}};
  j["train"] = {{"batch_size", tc.batch_size},
                {"learning_rate", tc.learning_rate},
                {"loss_alpha", tc.loss_alpha},
                {"epochs", tc.epochs},
                {"patience", tc.patience},
                {"mc_samples_per_interval", tc.mc_samples},
                {"clip_norm", tc.clip_norm},
                {"reduction", "mean"},
                {"d", mc.d},
                {"session_layers", mc.session_layers},
                {"history_layers", mc.history_layers},
                {"heads", mc.heads},
                {"ffn_mult", mc.ffn_mult},
                {"max_sessions", mc.max_sessions},
                {"max_actions", mc.max_actions},
                {"phi", "gelu"},
                {"alpha_search", mc.alpha_search},
                {"alpha_reco", mc.alpha_reco},
                {"bn_momentum", mc.bn_momentum},
                {"bn_epsilon", mc.bn_epsilon},
                {"use_ratio", mc.use_ratio},
                {"use_user_embedding", mc.use_user_embedding},
                {"use_time_gate", mc.use_time_gate},
                {"use_prediction_layer", mc.use_prediction_layer}};
  j["grid"] = {{"batch_sizes", {64, 128, 256}},
               {"learning_rates", {1e-5, 1e-4, 1e-3}},
               {"loss_alphas", {0.1, 1e-3, 1e-4, 1e-5, 1e-6}}};
  j["evaluation"] = {{"split", "test"},
                     {"checkpoint", ""},
                     {"sweep_grid", default_sweep_grid()},
                     {"sweep_mode", "reuse"},
                     {"gradcheck_tolerance", 1e-4}};
  j["downstream"] = {{"base_epochs", dc.base_epochs},
                     {"base_learning_rate", dc.base_learning_rate},
                     {"fusion_epochs", dc.fusion_epochs},
                     {"fusion_learning_rate", dc.fusion_learning_rate},
                     {"negatives", dc.negatives},
                     {"eval_negatives", dc.eval_negatives},
                     {"motivation_mixture", dc.motivation_mixture},
                     {"top_k", 10}};
  return j;
}

namespace detail {

inline bool same_kind(const nlohmann::json& def, const nlohmann::json& v) {
  if (def.is_number()) {
    if (def.is_number_integer()) return v.is_number_integer();
    return v.is_number();
  }
  return def.type() == v.type();
}

inline void merge_into(nlohmann::json& base, const nlohmann::json& patch, const std::string& path) {
  if (!patch.is_object()) throw ConfigError("config section " + (path.empty() ? "<root>" : path) + " must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key: " + key);
    auto& slot = base[it.key()];
    if (slot.is_object()) {
      merge_into(slot, it.value(), key);
    } else {
      if (!same_kind(slot, it.value()))
        throw ConfigError("config key " + key + " expects " + std::string(slot.type_name()) + ", got " + it.value().type_name());
      if (slot.is_array() && !slot.empty() && !it.value().empty() && !same_kind(slot.front(), it.value().front()) &&
          !(slot.front().is_number() && it.value().front().is_number()))
        throw ConfigError("config key " + key + " has wrong element type");
      slot = it.value();
    }
  }
}

inline std::string env_name(const std::string& path) {
  std::string out = kEnvPrefix;
  for (char c : path) out.push_back(c == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  return out;
}

inline void collect_leaves(const nlohmann::json& j, const std::string& path, std::vector<std::string>& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (it.value().is_object())
      collect_leaves(it.value(), key, out);
    else
      out.push_back(key);
  }
}

inline nlohmann::json patch_for(const std::string& path, nlohmann::json value) {
  nlohmann::json patch = std::move(value);
  std::string rest = path;
  std::vector<std::string> parts;
  std::size_t pos;
  while ((pos = rest.find('.')) != std::string::npos) {
    parts.push_back(rest.substr(0, pos));
    rest = rest.substr(pos + 1);
  }
  parts.push_back(rest);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = nlohmann::json{{*it, patch}};
  return patch;
}

}  // namespace detail

/// Every leaf key path of the default configuration.
inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  detail::collect_leaves(default_app_config(), "", out);
  return out;
}

inline std::string env_var_for(const std::string& key_path) { return detail::env_name(key_path); }

/// Applies a JSON patch (e.g. the contents of a config file) to `cfg`.
inline void apply_patch(nlohmann::json& cfg, const nlohmann::json& patch) { detail::merge_into(cfg, patch, ""); }

/// Sets one leaf by dotted path, validating the key and type.
inline void set_key(nlohmann::json& cfg, const std::string& path, const nlohmann::json& value) {
  apply_patch(cfg, detail::patch_for(path, value));
}

inline nlohmann::json parse_env_value(const std::string& raw) {
  try {
    return nlohmann::json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    return raw;
  }
}

/// Applies NHP_OAM_* overrides found through `getenv`.
template <class GetEnv>
void apply_env(nlohmann::json& cfg, GetEnv getenv_fn) {
  const auto defaults = default_app_config();
  for (const auto& key : config_keys()) {
    const char* v = getenv_fn(detail::env_name(key).c_str());
    if (!v) continue;
    // String-typed keys take the raw text, so "007" stays a string.
    std::string pointer = "/" + key;
    std::replace(pointer.begin(), pointer.end(), '.', '/');
    const bool is_string = defaults.at(nlohmann::json::json_pointer(pointer)).is_string();
    set_key(cfg, key, is_string ? nlohmann::json(v) : parse_env_value(v));
  }
}

inline nlohmann::json load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file: " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Typed views

inline TrainConfig train_config_of(const nlohmann::json& cfg) {
  const auto& t = cfg.at("train");
  TrainConfig c;
  c.seed = cfg.at("seed").get<std::uint64_t>();
  c.batch_size = t.at("batch_size").get<std::size_t>();
  c.learning_rate = t.at("learning_rate").get<double>();
  c.loss_alpha = t.at("loss_alpha").get<double>();
  c.epochs = t.at("epochs").get<std::size_t>();
  c.patience = t.at("patience").get<std::size_t>();
  c.mc_samples = t.at("mc_samples_per_interval").get<std::size_t>();
  c.clip_norm = t.at("clip_norm").get<double>();
  const auto red = t.at("reduction").get<std::string>();
  if (red != "mean" && red != "sum") throw ConfigError("train.reduction must be \"mean\" or \"sum\"");
  c.reduction = red == "mean" ? LossReduction::mean : LossReduction::sum;
  auto& m = c.model;
  m.d = t.at("d").get<std::size_t>();
  m.session_layers = t.at("session_layers").get<std::size_t>();
  m.history_layers = t.at("history_layers").get<std::size_t>();
  m.heads = t.at("heads").get<std::size_t>();
  m.ffn_mult = t.at("ffn_mult").get<std::size_t>();
  m.max_sessions = t.at("max_sessions").get<std::size_t>();
  m.max_actions = t.at("max_actions").get<std::size_t>();
  m.phi = activation_from_string(t.at("phi").get<std::string>());
  m.alpha_search = t.at("alpha_search").get<double>();
  m.alpha_reco = t.at("alpha_reco").get<double>();
  m.bn_momentum = t.at("bn_momentum").get<double>();
  m.bn_epsilon = t.at("bn_epsilon").get<double>();
  m.use_ratio = t.at("use_ratio").get<bool>();
  m.use_user_embedding = t.at("use_user_embedding").get<bool>();
  m.use_time_gate = t.at("use_time_gate").get<bool>();
  m.use_prediction_layer = t.at("use_prediction_layer").get<bool>();
  if (m.d == 0 || m.d % 2 != 0) throw ConfigError("train.d must be even and positive");
  if (m.heads == 0 || m.d % m.heads != 0) throw ConfigError("train.d must be divisible by train.heads");
  if (!(m.bn_epsilon > 0.0)) throw ConfigError("train.bn_epsilon must be positive");
  try {
    validate(c);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("train: ") + e.what());
  }
  return c;
}

inline lab::PatternConfig pattern_config_of(const nlohmann::json& cfg) {
  const auto& g = cfg.at("generator");
  lab::PatternConfig p;
  p.seed = cfg.at("seed").get<std::uint64_t>();
  p.n_users = g.at("n_users").get<int>();
  p.days = g.at("days").get<int>();
  const auto prof = g.at("hourly_search_profile").get<std::vector<double>>();
  if (prof.size() != 24) throw ConfigError("generator.hourly_search_profile must have 24 entries");
  std::copy(prof.begin(), prof.end(), p.hourly_search_profile.begin());
  p.weekend_boost = g.at("weekend_boost").get<double>();
  p.repeat_query_prob = g.at("repeat_query_prob").get<double>();
  p.relevance_strength = g.at("relevance_strength").get<double>();
  p.base_rate = g.at("base_rate").get<double>();
  p.start_time = g.at("start_time").get<Seconds>();
  p.n_items = g.at("n_items").get<int>();
  p.n_words = g.at("n_words").get<int>();
  try {
    p.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return p;
}

inline DownstreamConfig downstream_config_of(const nlohmann::json& cfg) {
  const auto& d = cfg.at("downstream");
  DownstreamConfig c;
  c.seed = cfg.at("seed").get<std::uint64_t>();
  c.base_epochs = d.at("base_epochs").get<std::size_t>();
  c.base_learning_rate = d.at("base_learning_rate").get<double>();
  c.fusion_epochs = d.at("fusion_epochs").get<std::size_t>();
  c.fusion_learning_rate = d.at("fusion_learning_rate").get<double>();
  c.negatives = d.at("negatives").get<std::size_t>();
  c.eval_negatives = d.at("eval_negatives").get<std::size_t>();
  c.motivation_mixture = d.at("motivation_mixture").get<bool>();
  return c;
}

inline GridSpec grid_spec_of(const nlohmann::json& cfg) {
  const auto& g = cfg.at("grid");
  GridSpec s;
  s.batch_sizes = g.at("batch_sizes").get<std::vector<std::size_t>>();
  s.learning_rates = g.at("learning_rates").get<std::vector<double>>();
  s.loss_alphas = g.at("loss_alphas").get<std::vector<double>>();
  return s;
}

inline SplitTag split_from_string(const std::string& s) {
  if (s == "history") return SplitTag::history;
  if (s == "train") return SplitTag::train;
  if (s == "validation") return SplitTag::validation;
  if (s == "test") return SplitTag::test;
  throw ConfigError("unknown split: " + s);
}

inline const char* to_string(SplitTag s) {
  switch (s) {
    case SplitTag::history: return "history";
    case SplitTag::train: return "train";
    case SplitTag::validation: return "validation";
    case SplitTag::test: return "test";
  }
  return "?";
}

}  // namespace nhp
