#pragma once

// Command-line front end shared by the nhp_oam tool and the tests.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "behavior_lab.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "dataset_io.hpp"
#include "downstream.hpp"
#include "json.hpp"
#include "training.hpp"

namespace nhp::app {

namespace fs = std::filesystem;
using nlohmann::json;

inline const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> s = {"ingest", "analyze", "generate", "train", "evaluate",
                                             "predict", "recommend", "sweep", "gradcheck"};
  return s;
}

struct Invocation {
  std::string subcommand;
  std::string config_path;
  std::optional<std::string> data, out, input, checkpoint, split, sweep_mode;
  std::optional<std::uint64_t> seed;
  bool dry_run = false;
  bool grid = false;
};

struct Context {
  json cfg;
  Invocation inv;
  std::ostream& out;
  std::ostream& err;
  fs::path data_dir() const { return cfg.at("data_dir").get<std::string>(); }
  fs::path out_dir() const { return cfg.at("out_dir").get<std::string>(); }
  bool verbose() const { return cfg.at("verbosity").get<std::string>() != "quiet"; }
  void info(const std::string& msg) const {
    if (verbose()) err << msg << '\n';
  }
};

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline json error_record(const std::string& subcommand, const std::string& kind, const std::string& message) {
  return {{"status", "error"}, {"subcommand", subcommand}, {"kind", kind}, {"message", message}};
}

/// Resolves the configuration: defaults, file, environment, then flags.
template <class GetEnv>
json resolve_config(const Invocation& inv, GetEnv getenv_fn) {
  json cfg = default_app_config();
  if (!inv.config_path.empty()) apply_patch(cfg, load_config_file(inv.config_path));
  apply_env(cfg, getenv_fn);
  if (inv.data) cfg["data_dir"] = *inv.data;
  if (inv.out) cfg["out_dir"] = *inv.out;
  if (inv.seed) cfg["seed"] = *inv.seed;
  if (inv.input) cfg["ingest"]["input"] = *inv.input;
  if (inv.checkpoint) cfg["evaluation"]["checkpoint"] = *inv.checkpoint;
  if (inv.split) cfg["evaluation"]["split"] = *inv.split;
  if (inv.sweep_mode) cfg["evaluation"]["sweep_mode"] = *inv.sweep_mode;
  // Typed views throw on invalid values.
  train_config_of(cfg);
  pattern_config_of(cfg);
  downstream_config_of(cfg);
  grid_spec_of(cfg);
  split_from_string(cfg["evaluation"]["split"].get<std::string>());
  const auto mode = cfg["evaluation"]["sweep_mode"].get<std::string>();
  if (mode != "reuse" && mode != "retrain") throw ConfigError("evaluation.sweep_mode must be \"reuse\" or \"retrain\"");
  const auto verb = cfg["verbosity"].get<std::string>();
  if (verb != "quiet" && verb != "info" && verb != "debug") throw ConfigError("verbosity must be quiet, info or debug");
  return cfg;
}

inline void write_json(const fs::path& p, const json& j) {
  fs::create_directories(p.parent_path().empty() ? fs::path(".") : p.parent_path());
  std::ofstream o(p);
  if (!o) throw std::runtime_error("cannot write " + p.string());
  o << j.dump(2) << '\n';
}

inline void echo_config(const Context& c) { write_json(c.out_dir() / "resolved_config.json", c.cfg); }

inline fs::path checkpoint_path(const Context& c) {
  const auto s = c.cfg["evaluation"]["checkpoint"].get<std::string>();
  return s.empty() ? c.out_dir() / "best.ckpt" : fs::path(s);
}

inline LoadedDataset load_data(const Context& c) { return read_dataset(c.data_dir()); }

/// Checks that a checkpoint was trained on this dataset's vocabulary.
inline void check_vocabulary(const Checkpoint& ck, const DatasetSplit& data) {
  if (training_vocabulary(data).fingerprint() != ck.model.vocab.fingerprint())
    throw std::runtime_error("vocabulary mismatch: the checkpoint was trained on a different dataset");
}

// ---------------------------------------------------------------------------
// Plans for --dry-run

inline json plan_of(const Context& c) {
  const auto& s = c.inv.subcommand;
  json in = json::array(), outp = json::array();
  const auto out = c.out_dir();
  if (s == "generate") {
    outp = {(out / "events.jsonl").string(), (out / "ground_truth.jsonl").string()};
  } else if (s == "ingest") {
    in = {c.cfg["ingest"]["input"]};
    outp = {(out / "history.jsonl").string(), (out / "train.jsonl").string(), (out / "validation.jsonl").string(),
            (out / "test.jsonl").string(), (out / "manifest.json").string()};
  } else if (s == "analyze") {
    in = {c.data_dir().string()};
    outp = {(out / "analysis.json").string()};
  } else if (s == "train") {
    in = {c.data_dir().string()};
    outp = {(out / "best.ckpt").string(), (out / "last.ckpt").string(), (out / "train_log.jsonl").string()};
    if (c.inv.grid) outp.push_back((out / "leaderboard.json").string());
  } else if (s == "evaluate") {
    in = {c.data_dir().string(), checkpoint_path(c).string()};
    outp = {(out / ("evaluation_" + c.cfg["evaluation"]["split"].get<std::string>() + ".json")).string()};
  } else if (s == "predict") {
    in = {c.data_dir().string(), checkpoint_path(c).string()};
    outp = {(out / "predictions.jsonl").string()};
  } else if (s == "recommend") {
    in = {c.data_dir().string(), checkpoint_path(c).string()};
    outp = {(out / "recommendations.jsonl").string(), (out / "downstream_report.json").string()};
  } else if (s == "sweep") {
    in = {c.data_dir().string()};
    if (c.cfg["evaluation"]["sweep_mode"] == "reuse") in.push_back(checkpoint_path(c).string());
    outp = {(out / "sweep.tsv").string()};
  } else if (s == "gradcheck") {
    outp = {(out / "gradcheck.json").string()};
  }
  outp.push_back((out / "resolved_config.json").string());
  return {{"subcommand", s}, {"dry_run", true}, {"inputs", in}, {"outputs", outp}, {"config", c.cfg}};
}

// ---------------------------------------------------------------------------
// Subcommands

inline int cmd_generate(const Context& c) {
  const auto pc = pattern_config_of(c.cfg);
  const auto corpus = lab::generate_corpus(pc);
  fs::create_directories(c.out_dir());
  std::ofstream ev(c.out_dir() / "events.jsonl");
  write_event_log(ev, corpus.histories);
  std::ofstream gt(c.out_dir() / "ground_truth.jsonl");
  for (const auto& g : corpus.truth)
    gt << json{{"user_id", g.user_id}, {"open_time", g.open_time}, {"motivation", g.motivation}, {"p_search", g.p_search}}.dump()
       << '\n';
  echo_config(c);
  std::size_t sessions = 0;
  for (const auto& h : corpus.histories) sessions += h.sessions.size();
  c.out << json{{"status", "ok"}, {"users", corpus.histories.size()}, {"sessions", sessions}}.dump() << '\n';
  return 0;
}

inline int cmd_ingest(const Context& c) {
  const auto& ic = c.cfg["ingest"];
  const fs::path input = ic["input"].get<std::string>();
  std::ifstream in(input, std::ios::binary);
  if (!in) throw std::runtime_error("missing input: " + input.string());
  std::ostringstream raw;
  raw << in.rdbuf();
  const std::string bytes = raw.str();
  std::istringstream stream(bytes);
  const auto parsed = parse_log(stream, ic["strict"].get<bool>());
  const Seconds gap = ic["gap_seconds"].get<Seconds>();
  const Seconds window = ic["window_seconds"].get<Seconds>();
  const int hdays = ic["history_days"].get<int>();
  const Seconds tz = ic["tz_offset_seconds"].get<Seconds>();
  const auto histories = build_histories(parsed.events_by_user, gap, window);
  const auto split = split_dataset(histories, hdays, tz);
  DatasetManifest m;
  m.gap_seconds = gap;
  m.window_seconds = window;
  m.history_days = hdays;
  m.tz_offset_seconds = tz;
  m.input_checksum = checksum_of(bytes);
  m.skipped_lines = parsed.skipped;
  write_dataset(c.out_dir(), split, m);
  echo_config(c);
  c.out << json{{"status", "ok"},
                {"lines", parsed.lines_read},
                {"skipped", parsed.skipped},
                {"users", histories.size()},
                {"dropped_users", split.dropped.size()}}
               .dump()
        << '\n';
  return 0;
}

inline std::vector<UserHistory> all_histories(const DatasetSplit& data) {
  std::vector<UserHistory> out;
  for (const auto& [user, timeline] : merged_timelines(data)) {
    UserHistory h;
    h.user_id = user;
    for (const auto& t : timeline) h.sessions.push_back(*t.session);
    out.push_back(std::move(h));
  }
  return out;
}

inline json correlation_json(const lab::Correlation& c) {
  return c.value ? json(*c.value) : json{{"value", nullptr}, {"reason", c.reason}};
}

inline int cmd_analyze(const Context& c) {
  const auto data = load_data(c);
  const auto hs = all_histories(data.split);
  const auto per = lab::periodicity_stats(hs, data.manifest.tz_offset_seconds);
  const auto rep = lab::repeat_query_ratio(hs);
  const auto cor = lab::relevance_correlations(lab::relevance_pairs(hs), derive_seed(c.cfg["seed"].get<std::uint64_t>(), "dcor"));
  json j;
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  for (int h = 0; h < 24; ++h) j["periodicity"]["hourly"].push_back({{"hour", h}, {"ratio", opt(per.hourly[h])}, {"sessions", per.hourly_sessions[h]}});
  for (int d = 0; d < 7; ++d)
    j["periodicity"]["weekday"].push_back({{"weekday", d}, {"ratio", opt(per.weekday[d])}, {"sessions", per.weekday_sessions[d]}});
  j["repeat_query"]["overall_mean"] = rep.overall_mean;
  for (const auto& b : rep.bins) j["repeat_query"]["activity_quartiles"].push_back({{"bin", b.bin_index}, {"users", b.users.size()}, {"mean_ratio", b.mean_repeat_ratio}});
  j["relevance"] = {{"n_pairs", cor.n_pairs},
                    {"spearman", correlation_json(cor.spearman)},
                    {"kendall_tau_b", correlation_json(cor.kendall)},
                    {"pearson", correlation_json(cor.pearson)},
                    {"distance", correlation_json(cor.distance)}};
  write_json(c.out_dir() / "analysis.json", j);
  echo_config(c);
  c.out << json{{"status", "ok"}, {"users", hs.size()}}.dump() << '\n';
  return 0;
}

inline int cmd_train(const Context& c) {
  const auto data = load_data(c);
  TrainConfig tc = train_config_of(c.cfg);
  fs::create_directories(c.out_dir());
  echo_config(c);
  if (c.inv.grid) {
    const auto gr = grid_search(data.split, tc, grid_spec_of(c.cfg));
    json lb = json::array();
    for (const auto& e : gr.leaderboard)
      lb.push_back({{"batch_size", e.config.batch_size},
                    {"learning_rate", e.config.learning_rate},
                    {"loss_alpha", e.config.loss_alpha},
                    {"val_f05", e.diverged ? json(nullptr) : json(e.val_f05)},
                    {"diverged", e.diverged}});
    write_json(c.out_dir() / "leaderboard.json", lb);
    tc = gr.best;
  }
  std::ofstream log(c.out_dir() / "train_log.jsonl");
  const auto result = train(data.split, tc, [&](const EpochLog& e) {
    const json rec = {{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"val_f05", e.val_f05},
                      {"val_auc", e.val_auc ? json(*e.val_auc) : json(nullptr)}};
    log << rec.dump() << '\n';
    log.flush();
    c.info(rec.dump());
  });
  save_checkpoint(c.out_dir() / "best.ckpt", result.best);
  save_checkpoint(c.out_dir() / "last.ckpt", result.last);
  c.out << json{{"status", "ok"},
                {"epochs", result.log.size()},
                {"best_epoch", result.best.epoch},
                {"early_stopped", result.early_stopped},
                {"best_val_f05", result.best.trace.empty() ? 0.0 : result.log[result.best.epoch - 1].val_f05}}
               .dump()
        << '\n';
  return 0;
}

inline int cmd_evaluate(const Context& c) {
  const auto data = load_data(c);
  const auto ck = load_checkpoint(checkpoint_path(c));
  check_vocabulary(ck, data.split);
  const auto split = split_from_string(c.cfg["evaluation"]["split"].get<std::string>());
  const auto seqs = build_sequences(data.split, ck.model.vocab);
  const auto r = evaluate(ck.model, seqs, split);
  const json j = {{"split", to_string(split)}, {"metrics", to_json(r.target)}, {"validation", to_json(r.validation)}};
  write_json(c.out_dir() / ("evaluation_" + std::string(to_string(split)) + ".json"), j);
  echo_config(c);
  c.out << j.dump() << '\n';
  return 0;
}

inline int cmd_predict(const Context& c) {
  const auto data = load_data(c);
  const auto ck = load_checkpoint(checkpoint_path(c));
  check_vocabulary(ck, data.split);
  const auto split = split_from_string(c.cfg["evaluation"]["split"].get<std::string>());
  const auto seqs = build_sequences(data.split, ck.model.vocab);
  fs::create_directories(c.out_dir());
  std::ofstream o(c.out_dir() / "predictions.jsonl");
  std::size_t n = 0;
  for (const auto& x : score_split(ck.model, seqs, split)) {
    o << json{{"user_id", x.user_id}, {"t_next", x.t_next}, {"score", x.score}, {"label", x.label}}.dump() << '\n';
    ++n;
  }
  echo_config(c);
  c.out << json{{"status", "ok"}, {"predictions", n}}.dump() << '\n';
  return 0;
}

inline int cmd_recommend(const Context& c) {
  const auto data = load_data(c);
  const auto ck = load_checkpoint(checkpoint_path(c));
  check_vocabulary(ck, data.split);
  const auto dc = downstream_config_of(c.cfg);
  const auto top_k = c.cfg["downstream"]["top_k"].get<std::size_t>();
  const auto split = split_from_string(c.cfg["evaluation"]["split"].get<std::string>());
  const auto& m = ck.model;
  const auto seqs = build_sequences(data.split, m.vocab);
  const auto br = train_base_recommender(seqs, m.vocab.users.rows(), m.vocab.items.rows(), m.cfg.d, dc);
  const auto fusion = train_fusion(m, br, seqs, dc);
  const auto report = evaluate_downstream(m, br, fusion, seqs, dc, split);
  fs::create_directories(c.out_dir());
  std::ofstream o(c.out_dir() / "recommendations.jsonl");
  for (const auto& us : seqs) {
    const auto targets = target_indices(us, split);
    if (targets.empty()) continue;
    json items = json::array();
    for (const auto& r : recommend(m, br, fusion, us, targets.front(), top_k, dc)) items.push_back({{"item_id", r.item_id}, {"score", r.score}});
    o << json{{"user_id", us.user_id}, {"t_next", us.sessions[targets.front()].open_time}, {"items", items}}.dump() << '\n';
  }
  write_json(c.out_dir() / "downstream_report.json", to_json(report));
  echo_config(c);
  c.out << to_json(report).dump() << '\n';
  return 0;
}

inline int cmd_sweep(const Context& c) {
  const auto data = load_data(c);
  const auto grid = c.cfg["evaluation"]["sweep_grid"].get<std::vector<std::size_t>>();
  const auto split = split_from_string(c.cfg["evaluation"]["split"].get<std::string>());
  std::vector<SweepPoint> pts;
  if (c.cfg["evaluation"]["sweep_mode"] == "reuse") {
    const auto ck = load_checkpoint(checkpoint_path(c));
    check_vocabulary(ck, data.split);
    pts = session_sweep(ck.model, build_sequences(data.split, ck.model.vocab), grid, split);
  } else {
    pts = session_sweep_retrain(data.split, train_config_of(c.cfg), grid, split);
  }
  fs::create_directories(c.out_dir());
  std::ofstream o(c.out_dir() / "sweep.tsv");
  o << "max_sessions\tf0_5\n";
  c.out << "max_sessions\tf0_5\n";
  for (const auto& p : pts) {
    o << p.max_sessions << '\t' << p.f0_5 << '\n';
    c.out << p.max_sessions << '\t' << p.f0_5 << '\n';
  }
  echo_config(c);
  return 0;
}

inline int cmd_gradcheck(const Context& c) {
  auto inst = make_gradcheck_instance(c.cfg["seed"].get<std::uint64_t>());
  GradCheckOptions opt;
  opt.tolerance = c.cfg["evaluation"]["gradcheck_tolerance"].get<double>();
  const auto rep = grad_check(inst.model, inst.user, inst.config, opt);
  json groups = json::array();
  for (const auto& g : rep.groups) {
    groups.push_back({{"group", g.name}, {"max_rel_err", g.max_rel_err}, {"checked", g.checked}, {"ok", g.max_rel_err <= rep.tolerance}});
    c.out << g.name << '\t' << g.max_rel_err << (g.max_rel_err <= rep.tolerance ? "\tok" : "\tFAIL") << '\n';
  }
  const json j = {{"tolerance", rep.tolerance}, {"passed", rep.passed}, {"groups", groups}, {"failing", rep.failing}};
  write_json(c.out_dir() / "gradcheck.json", j);
  echo_config(c);
  return rep.passed ? 0 : 1;
}

inline int dispatch(const Context& c) {
  const auto& s = c.inv.subcommand;
  if (s == "generate") return cmd_generate(c);
  if (s == "ingest") return cmd_ingest(c);
  if (s == "analyze") return cmd_analyze(c);
  if (s == "train") return cmd_train(c);
  if (s == "evaluate") return cmd_evaluate(c);
  if (s == "predict") return cmd_predict(c);
  if (s == "recommend") return cmd_recommend(c);
  if (s == "sweep") return cmd_sweep(c);
  if (s == "gradcheck") return cmd_gradcheck(c);
  throw UsageError("unknown subcommand: " + s);
}

// ---------------------------------------------------------------------------
// Entry point

/// Parses argv, runs the subcommand and returns the process exit status:
/// 0 on success, 1 on a runtime failure, 2 on a usage error.
template <class GetEnv>
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err, GetEnv getenv_fn) {
  CLI::App cli{"Open-app motivation prediction with a neural Hawkes process", "nhp_oam"};
  cli.require_subcommand(1, 1);
  cli.fallthrough();
  Invocation inv;
  std::string data, outd, input, ckpt, split, mode;
  std::uint64_t seed = 0;
  cli.add_option("--config", inv.config_path, "JSON configuration file");
  auto* o_data = cli.add_option("--data", data, "dataset directory");
  auto* o_out = cli.add_option("--out", outd, "output directory");
  auto* o_seed = cli.add_option("--seed", seed, "root seed");
  cli.add_flag("--dry-run", inv.dry_run, "validate the configuration and print the plan without side effects");
  std::map<std::string, CLI::App*> subs;
  const std::map<std::string, std::string> help = {
      {"ingest", "parse an event log, sessionize, label and split it"},
      {"analyze", "behavioural-pattern analyses of a dataset"},
      {"generate", "write a synthetic event log with planted patterns"},
      {"train", "train a model (optionally grid search first)"},
      {"evaluate", "metrics of a checkpoint on a split"},
      {"predict", "per-session motivation scores"},
      {"recommend", "downstream item recommendation with the fused history vector"},
      {"sweep", "F0.5 as a function of max_sessions"},
      {"gradcheck", "finite-difference gradient check on a tiny instance"}};
  for (const auto& s : subcommands()) subs[s] = cli.add_subcommand(s, help.at(s));
  auto* o_input = subs["ingest"]->add_option("--input", input, "event log (line-delimited JSON)");
  subs["train"]->add_flag("--grid", inv.grid, "grid search over batch size, learning rate and loss alpha first");
  std::vector<CLI::Option*> o_ckpt, o_split;
  for (const char* s : {"evaluate", "predict", "recommend", "sweep"}) {
    o_ckpt.push_back(subs[s]->add_option("--checkpoint", ckpt, "checkpoint file (default <out>/best.ckpt)"));
    o_split.push_back(subs[s]->add_option("--split", split, "target split (default test)"));
  }
  auto* o_mode = subs["sweep"]->add_option("--mode", mode, "reuse (one checkpoint) or retrain (one model per point)");
  try {
    cli.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << cli.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << cli.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << cli.help();
    err << error_record("", "usage", e.what()).dump() << '\n';
    return 2;
  }
  for (const auto& [name, app] : subs)
    if (app->parsed()) inv.subcommand = name;
  if (o_data->count()) inv.data = data;
  if (o_out->count()) inv.out = outd;
  if (o_seed->count()) inv.seed = seed;
  if (o_input->count()) inv.input = input;
  for (auto* o : o_ckpt)
    if (o->count()) inv.checkpoint = ckpt;
  for (auto* o : o_split)
    if (o->count()) inv.split = split;
  if (o_mode->count()) inv.sweep_mode = mode;
  try {
    Context c{resolve_config(inv, getenv_fn), inv, out, err};
    if (inv.dry_run) {
      out << plan_of(c).dump(2) << '\n';
      return 0;
    }
    return dispatch(c);
  } catch (const ConfigError& e) {
    err << error_record(inv.subcommand, "config", e.what()).dump() << '\n';
    return 2;
  } catch (const UsageError& e) {
    err << cli.help();
    err << error_record(inv.subcommand, "usage", e.what()).dump() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << error_record(inv.subcommand, "runtime", e.what()).dump() << '\n';
    return 1;
  }
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return run(argc, argv, out, err, [](const char* name) { return std::getenv(name); });
}

}  // namespace nhp::app
