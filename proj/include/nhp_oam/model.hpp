#pragma once

// The full NHP-OAM model: embedding tables, session encoder, causal history
// decoder, intensity and prediction layer, plus the per-user forward pass
// shared by training, scoring and gradient checks.

#include <algorithm>
#include <array>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "encoder.hpp"
#include "ingestion.hpp"
#include "intensity.hpp"
#include "json.hpp"
#include "predictor.hpp"

namespace nhp {

struct ModelConfig {
  std::size_t d = 32;
  std::size_t session_layers = 2;  // L1
  std::size_t history_layers = 2;  // L2
  std::size_t heads = 2;
  std::size_t ffn_mult = 4;
  std::size_t max_sessions = 10;
  std::size_t max_actions = 20;
  ad::Activation phi = ad::Activation::gelu;
  double alpha_search = 0.1;
  double alpha_reco = 0.1;
  double bn_momentum = 0.1;
  double bn_epsilon = 1e-5;
  bool use_ratio = true;
  bool use_user_embedding = true;
  bool use_time_gate = true;
  bool use_prediction_layer = true;
};

inline std::string to_string(ad::Activation a) { return a == ad::Activation::gelu ? "gelu" : "tanh"; }

inline ad::Activation activation_from_string(const std::string& s) {
  if (s == "gelu") return ad::Activation::gelu;
  if (s == "tanh") return ad::Activation::tanh;
  throw std::invalid_argument("unknown activation: " + s + " (expected gelu or tanh)");
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"d", c.d},
          {"session_layers", c.session_layers},
          {"history_layers", c.history_layers},
          {"heads", c.heads},
          {"ffn_mult", c.ffn_mult},
          {"max_sessions", c.max_sessions},
          {"max_actions", c.max_actions},
          {"phi", to_string(c.phi)},
          {"alpha_search", c.alpha_search},
          {"alpha_reco", c.alpha_reco},
          {"bn_momentum", c.bn_momentum},
          {"bn_epsilon", c.bn_epsilon},
          {"use_ratio", c.use_ratio},
          {"use_user_embedding", c.use_user_embedding},
          {"use_time_gate", c.use_time_gate},
          {"use_prediction_layer", c.use_prediction_layer}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d = j.at("d").get<std::size_t>();
  c.session_layers = j.at("session_layers").get<std::size_t>();
  c.history_layers = j.at("history_layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.ffn_mult = j.at("ffn_mult").get<std::size_t>();
  c.max_sessions = j.at("max_sessions").get<std::size_t>();
  c.max_actions = j.at("max_actions").get<std::size_t>();
  c.phi = activation_from_string(j.at("phi").get<std::string>());
  c.alpha_search = j.at("alpha_search").get<double>();
  c.alpha_reco = j.at("alpha_reco").get<double>();
  c.bn_momentum = j.at("bn_momentum").get<double>();
  c.bn_epsilon = j.at("bn_epsilon").get<double>();
  c.use_ratio = j.at("use_ratio").get<bool>();
  c.use_user_embedding = j.at("use_user_embedding").get<bool>();
  c.use_time_gate = j.at("use_time_gate").get<bool>();
  c.use_prediction_layer = j.at("use_prediction_layer").get<bool>();
  return c;
}

struct Model {
  ModelConfig cfg;
  Vocabularies vocab;
  ParamStore params;
  EmbeddingTables tables;
  StackParams session_encoder;
  StackParams history_decoder;
  IntensityParams intensity;
  PredictorParams predictor;
  RatioNormState norm;
};

/// Registers every parameter in a fixed order; the order (and therefore
/// every initial value) depends only on cfg, vocabulary sizes and seed.
inline Model make_model(const ModelConfig& cfg, Vocabularies vocab, std::uint64_t seed) {
  if (cfg.bn_epsilon <= 0.0) throw std::invalid_argument("bn_epsilon must be positive");
  if (!std::isfinite(cfg.alpha_search) || !std::isfinite(cfg.alpha_reco)) throw std::invalid_argument("alpha must be finite");
  Model m;
  m.cfg = cfg;
  m.vocab = std::move(vocab);
  Rng rng(derive_seed(seed, "init"));
  m.tables = register_tables(m.params, m.vocab, cfg.d, rng);
  m.session_encoder =
      register_stack(m.params, "session_encoder", "session_encoder", cfg.d, cfg.session_layers, cfg.heads, cfg.ffn_mult, false, rng);
  m.history_decoder =
      register_stack(m.params, "history_decoder", "history_decoder", cfg.d, cfg.history_layers, cfg.heads, cfg.ffn_mult, true, rng);
  IntensityConfig ic;
  ic.alpha = {cfg.alpha_reco, cfg.alpha_search};
  ic.phi = cfg.phi;
  ic.use_ratio = cfg.use_ratio;
  m.intensity = register_intensity(m.params, cfg.d, ic, rng);
  PredictorConfig pc;
  pc.phi = cfg.phi;
  pc.use_time_gate = cfg.use_time_gate;
  pc.use_user_embedding = cfg.use_user_embedding;
  m.predictor = register_predictor(m.params, cfg.d, pc, rng);
  m.norm.momentum = cfg.bn_momentum;
  m.norm.epsilon = cfg.bn_epsilon;
  return m;
}

// ---------------------------------------------------------------------------
// Encoded per-user timelines

struct UserSequence {
  std::string user_id;
  std::size_t user_row = 0;
  Seconds origin = 0;  // first event of the user
  std::vector<EncodedSession> sessions;
  std::vector<SplitTag> tags;
};

/// Chronological per-user timelines over all splits, in user-id order.
inline std::vector<UserSequence> build_sequences(const DatasetSplit& split, const Vocabularies& vocab) {
  std::vector<UserSequence> out;
  for (const auto& [user, timeline] : merged_timelines(split)) {
    UserSequence us;
    us.user_id = user;
    us.user_row = vocab.users.lookup(user);
    for (const auto& ts : timeline) {
      us.sessions.push_back(encode_ids(*ts.session, vocab));
      us.tags.push_back(ts.tag);
    }
    us.origin = us.sessions.front().open_time;
    out.push_back(std::move(us));
  }
  return out;
}

/// Indices k >= 1 of sessions in the given split (the first session of a
/// user has no history and is never a target).
inline std::vector<std::size_t> target_indices(const UserSequence& us, SplitTag split) {
  std::vector<std::size_t> out;
  for (std::size_t k = 1; k < us.sessions.size(); ++k)
    if (us.tags[k] == split) out.push_back(k);
  return out;
}

// ---------------------------------------------------------------------------
// Per-user forward

struct UserForward {
  std::vector<ad::Var> scores;  // 1 x 1 each, one per target
  std::vector<double> labels;
  std::optional<ad::Var> nll;   // point-process term when requested
  std::vector<ad::Var> fused;   // z per target
};

struct ForwardOptions {
  bool with_point_process = true;
  std::size_t mc_samples = 10;
  Rng* mc_rng = nullptr;
};

/// Standardised ratio channels of a conditioning session.
using RatioFn = std::function<std::array<double, 2>(double ratio_search)>;

/// Builds scores (and optionally the point-process NLL) for the targets of
/// one user on a tape. For target k the visible history is the most recent
/// max_sessions sessions before k.
inline UserForward forward_user(ad::Tape& t, const Model& m, const UserSequence& us, const std::vector<std::size_t>& targets,
                                const RatioFn& standardize_fn, const ForwardOptions& opt) {
  UserForward out;
  if (targets.empty()) return out;
  const std::size_t ms = m.cfg.max_sessions;
  const std::size_t d = m.cfg.d;
  std::size_t lo = targets.front(), hi = targets.front();
  for (auto k : targets) {
    if (k == 0 || k >= us.sessions.size()) throw std::out_of_range("forward_user: bad target index");
    lo = std::min(lo, k);
    hi = std::max(hi, k);
  }
  const std::size_t first_needed = lo > ms ? lo - ms : 0;
  // Session vectors and decoder input rows, computed once per session.
  std::map<std::size_t, ad::Var> v_of, x_of;
  if (ms > 0)
    for (std::size_t j = first_needed; j < hi; ++j) {
      const auto& s = us.sessions[j];
      ad::Var e = assemble_session(t, m.tables, s, us.origin, m.cfg.max_actions);
      ad::Var v = encode_session(t, m.session_encoder, e);
      v_of[j] = v;
      x_of[j] = history_input_row(t, m.tables, v, s.motivation, model_time(s.open_time, us.origin));
    }
  ad::Var u = user_vector(t, m.predictor, m.tables, us.user_row);
  std::vector<ConditionedEvent> events;
  for (auto k : targets) {
    const auto& prev = us.sessions[k - 1];
    const auto& cur = us.sessions[k];
    ad::Var h, v;
    std::array<double, 2> xhat{0.0, 0.0};
    if (ms == 0) {
      h = t.param(m.intensity.h0);
      v = t.constant(Matrix(1, d));
    } else {
      const std::size_t start = k > ms ? k - ms : 0;
      std::vector<ad::Var> rows;
      for (std::size_t j = start; j < k; ++j) rows.push_back(x_of.at(j));
      ad::Var H = run_stack(t, m.history_decoder, ad::stack_rows(t, rows));
      h = ad::row(t, H, rows.size() - 1);
      v = v_of.at(k - 1);
      xhat = standardize_fn(prev.ratio_search);
    }
    Conditioning cond{h, model_time(prev.open_time, us.origin), xhat};
    const double t_k = model_time(cur.open_time, us.origin);
    ad::Var score;
    if (m.cfg.use_prediction_layer) {
      ad::Var g = gate(t, m.predictor, h, v, relative_time(cur.open_time, prev.last_action_time));
      ad::Var z = fuse(t, h, v, g);
      ad::Var logit = mlp_logit(t, m.predictor, z, u);
      if (m.cfg.use_ratio) {
        // Search channel of the shared normaliser.
        Matrix pick(1, 2);
        pick[kMarkSearch] = 1.0;
        ad::Var r = ad::sum(t, ad::mul(t, ratio_term(t, m.intensity, xhat), t.constant(std::move(pick))));
        logit = ad::add(t, logit, r);
      }
      score = ad::sigmoid(t, logit);
      out.fused.push_back(z);
    } else {
      // Without the prediction layer: lambda_search / (lambda_reco + lambda_search) at t_k.
      ad::Var logl = ad::log(t, intensities(t, m.intensity, cond, {t_k}));
      ad::Var diff = ad::sum(t, ad::mul(t, logl, t.constant(Matrix::row_vector({-1.0, 1.0}))));
      score = ad::sigmoid(t, diff);
      out.fused.push_back(h);
    }
    out.scores.push_back(score);
    out.labels.push_back(static_cast<double>(cur.motivation));
    events.push_back({cond, cur.motivation, t_k, model_time(prev.open_time, us.origin)});
  }
  if (opt.with_point_process) {
    if (!opt.mc_rng) throw std::logic_error("forward_user: point process requested without an MC stream");
    out.nll = conditioned_nll(t, m.intensity, events, opt.mc_samples, *opt.mc_rng);
  }
  return out;
}

/// Eval-mode ratio standardisation with the running statistics.
inline RatioFn eval_ratio_fn(const Model& m) {
  const RatioNormState s = m.norm;
  return [s](double r) { return standardize_eval(r, s); };
}

/// Ratios of the conditioning sessions of the given targets (for batch
/// statistics). Empty when max_sessions == 0.
inline std::vector<double> conditioning_ratios(const Model& m, const UserSequence& us, const std::vector<std::size_t>& targets) {
  std::vector<double> out;
  if (m.cfg.max_sessions == 0) return out;
  for (auto k : targets) out.push_back(us.sessions[k - 1].ratio_search);
  return out;
}

// ---------------------------------------------------------------------------
// Scoring

struct ScoredExample {
  std::string user_id;
  std::size_t session_index = 0;
  Seconds t_next = 0;
  double score = 0.0;
  int label = 0;
};

/// Scores every target of the split in eval mode (user order, then time).
inline std::vector<ScoredExample> score_split(const Model& m, const std::vector<UserSequence>& seqs, SplitTag split) {
  std::vector<ScoredExample> out;
  const RatioFn fn = eval_ratio_fn(m);
  ForwardOptions opt;
  opt.with_point_process = false;
  for (const auto& us : seqs) {
    const auto targets = target_indices(us, split);
    if (targets.empty()) continue;
    ad::Tape t(&m.params, false);
    const auto fw = forward_user(t, m, us, targets, fn, opt);
    for (std::size_t i = 0; i < targets.size(); ++i)
      out.push_back({us.user_id, targets[i], us.sessions[targets[i]].open_time, t.item(fw.scores[i]),
                     us.sessions[targets[i]].motivation});
  }
  return out;
}

/// Fused history vector z for predicting session k of a user.
inline std::vector<double> fused_vector(const Model& m, const UserSequence& us, std::size_t k) {
  ad::Tape t(&m.params, false);
  ForwardOptions opt;
  opt.with_point_process = false;
  const auto fw = forward_user(t, m, us, {k}, eval_ratio_fn(m), opt);
  const auto f = t.value(fw.fused.front()).flat();
  return {f.begin(), f.end()};
}

}  // namespace nhp
