#pragma once

// Joint objective (BCE + alpha * point-process NLL), the Adam training loop
// with early stopping on validation F0.5, grid search, finite-difference
// gradient checks and the max_sessions sweep.

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "evaluation.hpp"
#include "model.hpp"

namespace nhp {

enum class LossReduction { mean, sum };

struct TrainConfig {
  ModelConfig model;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  double loss_alpha = 0.1;
  std::size_t epochs = 50;
  std::size_t patience = 5;
  std::uint64_t seed = 1;
  std::size_t mc_samples = 10;
  double clip_norm = 5.0;
  LossReduction reduction = LossReduction::mean;
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"model", to_json(c.model)},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"loss_alpha", c.loss_alpha},
          {"epochs", c.epochs},
          {"patience", c.patience},
          {"seed", c.seed},
          {"mc_samples", c.mc_samples},
          {"clip_norm", c.clip_norm},
          {"reduction", c.reduction == LossReduction::mean ? "mean" : "sum"}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.model = model_config_from_json(j.at("model"));
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.loss_alpha = j.at("loss_alpha").get<double>();
  c.epochs = j.at("epochs").get<std::size_t>();
  c.patience = j.at("patience").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.mc_samples = j.at("mc_samples").get<std::size_t>();
  c.clip_norm = j.at("clip_norm").get<double>();
  const auto r = j.at("reduction").get<std::string>();
  if (r != "mean" && r != "sum") throw std::invalid_argument("reduction must be mean or sum");
  c.reduction = r == "mean" ? LossReduction::mean : LossReduction::sum;
  return c;
}

inline void validate(const TrainConfig& c) {
  if (c.batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (!(c.learning_rate >= 0.0)) throw std::invalid_argument("learning_rate must be non-negative");
  if (!(c.loss_alpha >= 0.0)) throw std::invalid_argument("loss alpha must be non-negative");
  if (c.mc_samples == 0) throw std::invalid_argument("mc_samples must be positive");
  if (c.epochs == 0) throw std::invalid_argument("epochs must be positive");
}

// ---------------------------------------------------------------------------
// Joint loss

struct BatchLoss {
  double total = 0.0;
  double bce = 0.0;  // summed over users
  double nll = 0.0;  // summed over users
  std::size_t users = 0;
};

struct LossOptions {
  NormMode mode = NormMode::train;
  RatioNormState* update_norm = nullptr;  // running stats to fold the batch into
  GradStore* grads = nullptr;             // accumulate gradients when set
  std::size_t epoch = 0;                  // MC stream index
  SplitTag split = SplitTag::train;
};

inline Rng mc_stream(std::uint64_t seed, const std::string& user_id, std::size_t epoch) {
  return Rng(derive_seed(seed, "mc:" + user_id, epoch));
}

/// sum_u (alpha * NLL_u + BCE_u), divided by the batch size in mean mode.
inline BatchLoss joint_loss(const Model& m, const std::vector<const UserSequence*>& batch, const TrainConfig& cfg,
                            const LossOptions& opt) {
  if (batch.empty()) throw std::invalid_argument("joint_loss: empty batch");
  std::vector<std::vector<std::size_t>> targets;
  std::vector<double> ratios;
  for (const auto* us : batch) {
    targets.push_back(target_indices(*us, opt.split));
    if (targets.back().empty()) throw std::invalid_argument("joint_loss: user " + us->user_id + " has no targets");
    for (double r : conditioning_ratios(m, *us, targets.back())) ratios.push_back(r);
  }
  RatioFn fn;
  ChannelStats stats;
  if (opt.mode == NormMode::train) {
    stats = batch_statistics(ratios);
    const double eps = m.norm.epsilon;
    fn = [stats, eps](double r) { return standardize(r, stats.mean, stats.var, eps); };
  } else {
    fn = eval_ratio_fn(m);
  }
  const bool with_pp = cfg.loss_alpha > 0.0;
  const double scale = cfg.reduction == LossReduction::mean ? 1.0 / static_cast<double>(batch.size()) : 1.0;
  BatchLoss out;
  out.users = batch.size();
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& us = *batch[i];
    ad::Tape t(&m.params, opt.grads != nullptr);
    Rng rng = mc_stream(cfg.seed, us.user_id, opt.epoch);
    ForwardOptions fo;
    fo.with_point_process = with_pp;
    fo.mc_samples = cfg.mc_samples;
    fo.mc_rng = &rng;
    const auto fw = forward_user(t, m, us, targets[i], fn, fo);
    ad::Var bce = ad::bce(t, ad::stack_rows(t, fw.scores), fw.labels);
    ad::Var loss = bce;
    out.bce += t.item(bce);
    if (with_pp) {
      out.nll += t.item(*fw.nll);
      loss = ad::weighted_sum(t, {bce, *fw.nll}, {1.0, cfg.loss_alpha});
    }
    out.total += scale * t.item(loss);
    if (opt.grads) t.backward(loss, *opt.grads, scale);
  }
  if (opt.update_norm && opt.mode == NormMode::train) update_running(*opt.update_norm, stats);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint contents and training

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_f05 = 0.0;
  std::optional<double> val_auc;
  double val_threshold = 0.0;
};

inline nlohmann::json to_json(const EpochLog& e) {
  return {{"epoch", e.epoch},
          {"train_loss", e.train_loss},
          {"val_f05", e.val_f05},
          {"val_auc", e.val_auc ? nlohmann::json(*e.val_auc) : nlohmann::json(nullptr)},
          {"val_threshold", e.val_threshold}};
}

inline EpochLog epoch_log_from_json(const nlohmann::json& j) {
  EpochLog e;
  e.epoch = j.at("epoch").get<std::size_t>();
  e.train_loss = j.at("train_loss").get<double>();
  e.val_f05 = j.at("val_f05").get<double>();
  if (!j.at("val_auc").is_null()) e.val_auc = j.at("val_auc").get<double>();
  e.val_threshold = j.at("val_threshold").get<double>();
  return e;
}

struct Checkpoint {
  Model model;
  TrainConfig config;
  std::size_t epoch = 0;
  std::vector<EpochLog> trace;
  std::array<std::uint64_t, 4> rng_state{};  // shuffle stream (xoshiro words)
};

struct TrainResult {
  Checkpoint best;
  Checkpoint last;
  std::vector<EpochLog> log;
  bool early_stopped = false;
};

struct TrainingDiverged : std::runtime_error {
  std::size_t epoch, batch;
  std::map<std::string, double> group_norms;
  TrainingDiverged(std::size_t e, std::size_t b, std::map<std::string, double> norms, const std::string& what)
      : std::runtime_error(what), epoch(e), batch(b), group_norms(std::move(norms)) {}
};

inline std::map<std::string, double> group_norms(const ParamStore& ps) {
  std::map<std::string, double> sq;
  for (const auto& p : ps) sq[p.group] += p.value.squared_norm();
  for (auto& [_, v] : sq) v = std::sqrt(v);
  return sq;
}

[[noreturn]] inline void throw_diverged(const ParamStore& ps, std::size_t epoch, std::size_t batch, const std::string& what) {
  auto norms = group_norms(ps);
  std::ostringstream os;
  os << "training diverged (" << what << ") at epoch " << epoch << ", batch " << batch << "; parameter norms:";
  for (const auto& [g, n] : norms) os << ' ' << g << '=' << n;
  throw TrainingDiverged(epoch, batch, std::move(norms), os.str());
}

/// Vocabulary built from the history and train splits.
inline Vocabularies training_vocabulary(const DatasetSplit& data) { return build_vocabularies({&data.history, &data.train}); }

using EpochCallback = std::function<void(const EpochLog&)>;

inline std::vector<const UserSequence*> users_with_targets(const std::vector<UserSequence>& seqs, SplitTag split) {
  std::vector<const UserSequence*> out;
  for (const auto& us : seqs)
    if (!target_indices(us, split).empty()) out.push_back(&us);
  return out;
}

/// Trains `model` in place on `seqs`; returns best (by validation F0.5) and
/// last checkpoints. Single-threaded with a fixed reduction order.
inline TrainResult train_model(Model model, const std::vector<UserSequence>& seqs, const TrainConfig& cfg,
                               const EpochCallback& on_epoch = {}) {
  validate(cfg);
  const auto train_users = users_with_targets(seqs, SplitTag::train);
  if (train_users.empty()) throw std::invalid_argument("train: empty train split");
  if (users_with_targets(seqs, SplitTag::validation).empty()) throw std::invalid_argument("train: empty validation split");
  Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
  Adam adam(model.params, {cfg.learning_rate, 0.9, 0.999, 1e-8});
  GradStore grads(model.params);
  TrainResult result;
  double best_f = -1.0;
  std::size_t bad_epochs = 0;
  auto snapshot = [&](std::size_t epoch) {
    Checkpoint c;
    c.model = model;
    c.config = cfg;
    c.epoch = epoch;
    c.trace = result.log;
    const auto st = shuffle_rng.state();
    c.rng_state = {st.s[0], st.s[1], st.s[2], st.s[3]};
    return c;
  };
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto order = train_users;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    double loss_sum = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      std::vector<const UserSequence*> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                             order.begin() + static_cast<std::ptrdiff_t>(stop));
      grads.zero();
      LossOptions lo;
      lo.mode = NormMode::train;
      lo.update_norm = &model.norm;
      lo.grads = &grads;
      lo.epoch = epoch;
      const auto bl = joint_loss(model, batch, cfg, lo);
      ++n_batches;
      if (!std::isfinite(bl.total) || !grads.all_finite()) throw_diverged(model.params, epoch, n_batches, "non-finite loss");
      clip_global_norm(grads, cfg.clip_norm);
      adam.step(model.params, grads);
      if (!model.params.all_finite()) throw_diverged(model.params, epoch, n_batches, "non-finite parameters");
      loss_sum += bl.total;
    }
    const auto val = unzip(score_split(model, seqs, SplitTag::validation));
    EpochLog e;
    e.epoch = epoch;
    e.train_loss = loss_sum / static_cast<double>(n_batches);
    e.val_threshold = select_threshold(val.labels, val.scores);
    e.val_f05 = f_beta_of(confusion(val.labels, val.scores, e.val_threshold), 0.5);
    e.val_auc = auc(val.labels, val.scores).value;
    result.log.push_back(e);
    if (on_epoch) on_epoch(e);
    if (e.val_f05 > best_f) {
      best_f = e.val_f05;
      bad_epochs = 0;
      result.best = snapshot(epoch);
    } else if (++bad_epochs >= cfg.patience) {
      result.early_stopped = true;
      break;
    }
  }
  result.last = snapshot(result.log.back().epoch);
  result.best.trace = result.log;
  return result;
}

inline TrainResult train(const DatasetSplit& data, const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  Model model = make_model(cfg.model, training_vocabulary(data), cfg.seed);
  const auto seqs = build_sequences(data, model.vocab);
  return train_model(std::move(model), seqs, cfg, on_epoch);
}

/// Copy of the dataset with motivation labels permuted across all sessions.
inline DatasetSplit permute_motivations(const DatasetSplit& data, std::uint64_t seed) {
  DatasetSplit out = data;
  std::vector<int*> slots;
  for (auto* part : {&out.history, &out.train, &out.validation, &out.test})
    for (auto& [_, ss] : *part)
      for (auto& s : ss) slots.push_back(&s.motivation);
  std::vector<int> labels;
  for (int* p : slots) labels.push_back(*p);
  Rng rng(derive_seed(seed, "label_shuffle"));
  for (std::size_t i = labels.size(); i > 1; --i) std::swap(labels[i - 1], labels[rng.below(i)]);
  for (std::size_t i = 0; i < slots.size(); ++i) *slots[i] = labels[i];
  return out;
}

// ---------------------------------------------------------------------------
// Grid search

struct GridSpec {
  std::vector<std::size_t> batch_sizes{64, 128, 256};
  std::vector<double> learning_rates{1e-5, 1e-4, 1e-3};
  std::vector<double> loss_alphas{0.1, 1e-3, 1e-4, 1e-5, 1e-6};
};

struct LeaderboardEntry {
  TrainConfig config;
  double val_f05 = 0.0;
  bool diverged = false;
  std::string error;
};

struct GridResult {
  TrainConfig best;
  std::vector<LeaderboardEntry> leaderboard;  // non-increasing val F0.5, diverged last
};

inline GridResult grid_search(const DatasetSplit& data, const TrainConfig& base, const GridSpec& grid) {
  if (grid.batch_sizes.empty() || grid.learning_rates.empty() || grid.loss_alphas.empty())
    throw std::invalid_argument("grid_search: empty grid");
  GridResult out;
  for (auto bs : grid.batch_sizes)
    for (double lr : grid.learning_rates)
      for (double a : grid.loss_alphas) {
        TrainConfig c = base;
        c.batch_size = bs;
        c.learning_rate = lr;
        c.loss_alpha = a;
        LeaderboardEntry e;
        e.config = c;
        try {
          const auto r = train(data, c);
          e.val_f05 = -1.0;
          for (const auto& l : r.log) e.val_f05 = std::max(e.val_f05, l.val_f05);
        } catch (const TrainingDiverged& ex) {
          e.diverged = true;
          e.error = ex.what();
        }
        out.leaderboard.push_back(e);
      }
  std::stable_sort(out.leaderboard.begin(), out.leaderboard.end(), [](const LeaderboardEntry& a, const LeaderboardEntry& b) {
    if (a.diverged != b.diverged) return !a.diverged;
    return a.val_f05 > b.val_f05;
  });
  out.best = out.leaderboard.front().config;
  return out;
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckReport {
  struct Group {
    std::string name;
    double max_rel_err = 0.0;
    std::size_t checked = 0;
  };
  std::vector<Group> groups;
  double tolerance = 1e-4;
  bool passed = true;
  std::vector<std::string> failing;
};

struct GradCheckOptions {
  double tolerance = 1e-4;
  double step = 1e-4;
  double denominator_floor = 1e-6;
  std::size_t max_entries_per_param = 0;  // 0 = every entry
  std::function<void(GradStore&)> corrupt;  // applied to analytic gradients (negative controls)
};

/// Central finite differences of the joint loss of one user (train-mode
/// ratio statistics from the user itself, fixed MC stream) against the
/// analytic gradient. Relative error per entry is
/// |a - n| / max(|a|, |n|, floor).
inline GradCheckReport grad_check(Model& m, const UserSequence& us, const TrainConfig& cfg, const GradCheckOptions& opt = {}) {
  const std::vector<const UserSequence*> batch{&us};
  LossOptions lo;
  lo.mode = NormMode::train;
  auto loss_value = [&] { return joint_loss(m, batch, cfg, lo).total; };
  GradStore analytic(m.params);
  {
    LossOptions lg = lo;
    lg.grads = &analytic;
    joint_loss(m, batch, cfg, lg);
  }
  if (opt.corrupt) opt.corrupt(analytic);
  GradCheckReport rep;
  rep.tolerance = opt.tolerance;
  std::map<std::string, std::size_t> group_index;
  for (std::size_t pid = 0; pid < m.params.size(); ++pid) {
    const int id = static_cast<int>(pid);
    const std::string group = m.params[id].group;
    if (!group_index.count(group)) {
      group_index[group] = rep.groups.size();
      rep.groups.push_back({group, 0.0, 0});
    }
    auto& g = rep.groups[group_index[group]];
    auto vals = m.params.value(id).flat();
    const std::size_t n = vals.size();
    const std::size_t stride =
        (opt.max_entries_per_param == 0 || n <= opt.max_entries_per_param) ? 1 : (n + opt.max_entries_per_param - 1) / opt.max_entries_per_param;
    for (std::size_t k = 0; k < n; k += stride) {
      const double orig = vals[k];
      vals[k] = orig + opt.step;
      const double up = loss_value();
      vals[k] = orig - opt.step;
      const double down = loss_value();
      vals[k] = orig;
      const double numeric = (up - down) / (2.0 * opt.step);
      const double a = analytic[id].flat()[k];
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.denominator_floor});
      g.max_rel_err = std::max(g.max_rel_err, std::abs(a - numeric) / denom);
      ++g.checked;
    }
  }
  for (const auto& g : rep.groups)
    if (!(g.max_rel_err <= opt.tolerance)) {
      rep.passed = false;
      rep.failing.push_back(g.name);
    }
  return rep;
}

struct GradCheckInstance {
  Model model;
  UserSequence user;
  TrainConfig config;
};

/// Tiny random instance: one user, three sessions of two to four actions,
/// d = 8, full architecture, the last two sessions as targets.
inline GradCheckInstance make_gradcheck_instance(std::uint64_t seed, std::size_t d = 8) {
  Rng rng(derive_seed(seed, "gradcheck_instance"));
  Vocabularies vocab;
  vocab.users.add("u0");
  for (int i = 0; i < 5; ++i) {
    vocab.items.add("i" + std::to_string(i));
    vocab.words.add("w" + std::to_string(i));
  }
  GradCheckInstance g;
  g.config.model.d = d;
  g.config.loss_alpha = 0.1;
  g.config.mc_samples = 4;
  g.config.seed = seed;
  g.model = make_model(g.config.model, vocab, seed);
  g.user.user_id = "u0";
  g.user.user_row = 1;
  g.user.origin = 1700000000;
  Seconds open = g.user.origin;
  for (int n = 0; n < 3; ++n) {
    EncodedSession s;
    s.open_time = open;
    Seconds ts = open;
    const int len = static_cast<int>(rng.between(2, 4));
    int queries = 0;
    for (int a = 0; a < len; ++a) {
      EncodedAction act;
      act.timestamp = ts;
      act.is_query = rng.bernoulli(0.5);
      if (act.is_query) {
        ++queries;
        const int nw = static_cast<int>(rng.between(1, 2));
        for (int w = 0; w < nw; ++w) act.words.push_back(1 + rng.below(5));
      } else {
        act.item = 1 + rng.below(5);
      }
      s.actions.push_back(act);
      ts += static_cast<Seconds>(rng.between(5, 60));
    }
    s.last_action_time = s.actions.back().timestamp;
    s.ratio_search = static_cast<double>(queries) / len;
    s.motivation = s.actions.front().is_query ? 1 : 0;
    g.user.sessions.push_back(s);
    g.user.tags.push_back(n == 0 ? SplitTag::history : SplitTag::train);
    open = s.last_action_time + static_cast<Seconds>(rng.between(2 * 3600, 9 * 3600));
  }
  return g;
}

// ---------------------------------------------------------------------------
// max_sessions sweep

struct SweepPoint {
  std::size_t max_sessions = 0;
  double f0_5 = 0.0;
  std::optional<double> auc;
};

/// Evaluates one trained model with the visible history truncated to each
/// grid value (threshold re-selected on validation per point).
inline std::vector<SweepPoint> session_sweep(const Model& trained, const std::vector<UserSequence>& seqs,
                                             const std::vector<std::size_t>& grid, SplitTag split = SplitTag::test) {
  std::vector<SweepPoint> out;
  for (auto L : grid) {
    Model m = trained;
    m.cfg.max_sessions = L;
    const auto r = evaluate(m, seqs, split);
    out.push_back({L, r.target.f0_5, r.target.auc});
  }
  return out;
}

/// Retrains a model per grid value and evaluates it on `split`.
inline std::vector<SweepPoint> session_sweep_retrain(const DatasetSplit& data, const TrainConfig& base,
                                                     const std::vector<std::size_t>& grid, SplitTag split = SplitTag::test) {
  std::vector<SweepPoint> out;
  for (auto L : grid) {
    TrainConfig c = base;
    c.model.max_sessions = L;
    const auto r = train(data, c);
    const auto seqs = build_sequences(data, r.best.model.vocab);
    const auto ev = evaluate(r.best.model, seqs, split);
    out.push_back({L, ev.target.f0_5, ev.target.auc});
  }
  return out;
}

inline std::vector<std::size_t> default_sweep_grid() {
  std::vector<std::size_t> g;
  for (std::size_t i = 0; i <= 12; ++i) g.push_back(i);
  return g;
}

}  // namespace nhp
