#pragma once

// Transfer of the fused history vector z to item recommendation:
//   u = FFN([u_reco ; z]),  p(i | u) = sigmoid(i . u)
// on top of a minimal dot-product base recommender.

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "evaluation.hpp"
#include "model.hpp"

namespace nhp {

/// Single feed-forward layer [u ; z] W + b, W: (d_u + d_z) x d_out.
struct FusionLayer {
  Matrix w;
  Matrix b;
};

/// W = [I ; 0], b = 0: the fused vector equals u_reco.
inline FusionLayer identity_fusion(std::size_t d_u, std::size_t d_z) {
  FusionLayer f{Matrix(d_u + d_z, d_u), Matrix(1, d_u)};
  for (std::size_t i = 0; i < d_u; ++i) f.w(i, i) = 1.0;
  return f;
}

struct FusedUserVector {
  std::vector<double> u_reco;
  std::vector<double> z;
  std::vector<double> fused;
};

inline FusedUserVector fuse_user(const std::vector<double>& u_reco, const std::vector<double>& z, const FusionLayer& ffn) {
  if (u_reco.size() + z.size() != ffn.w.rows() || ffn.b.cols() != ffn.w.cols() || ffn.b.rows() != 1)
    throw std::invalid_argument("fuse_user: dimension mismatch");
  FusedUserVector out{u_reco, z, std::vector<double>(ffn.w.cols())};
  for (std::size_t j = 0; j < ffn.w.cols(); ++j) {
    double s = ffn.b[j];
    for (std::size_t i = 0; i < u_reco.size(); ++i) s += u_reco[i] * ffn.w(i, j);
    for (std::size_t i = 0; i < z.size(); ++i) s += z[i] * ffn.w(u_reco.size() + i, j);
    out.fused[j] = s;
  }
  return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double score_item(std::span<const double> item, std::span<const double> user) { return ad::sigmoid(dot(item, user)); }

struct UserLabelsScores {
  std::vector<int> labels;
  std::vector<double> scores;
};

/// Impression-weighted mean of per-user AUC over users with both classes.
inline std::optional<double> gauc(const std::vector<UserLabelsScores>& users) {
  double num = 0.0, den = 0.0;
  for (const auto& u : users) {
    const auto a = auc(u.labels, u.scores);
    if (!a.value) continue;
    const double w = static_cast<double>(u.labels.size());
    num += w * *a.value;
    den += w;
  }
  if (den == 0.0) return std::nullopt;
  return num / den;
}

// ---------------------------------------------------------------------------
// Base recommender

struct BaseRecommender {
  Matrix users;  // rows follow the user vocabulary
  Matrix items;  // rows follow the item vocabulary
};

struct DownstreamConfig {
  std::size_t base_epochs = 10;
  double base_learning_rate = 0.05;
  double fusion_learning_rate = 0.01;
  std::size_t fusion_epochs = 5;
  std::size_t negatives = 4;        // per positive during training
  std::size_t eval_negatives = 20;  // per evaluated user
  bool motivation_mixture = false;  // weight history items by predicted motivation
  std::uint64_t seed = 1;
};

/// Clicked item rows of a session (OOV clicks skipped).
inline std::vector<std::size_t> clicked_items(const EncodedSession& s) {
  std::vector<std::size_t> out;
  for (const auto& a : s.actions)
    if (!a.is_query && a.item != 0) out.push_back(a.item);
  return out;
}

inline std::size_t sample_negative(Rng& rng, std::size_t item_rows, const std::set<std::size_t>& exclude) {
  if (item_rows <= 1 + exclude.size()) throw std::invalid_argument("not enough items to sample negatives");
  while (true) {
    const std::size_t r = 1 + rng.below(item_rows - 1);
    if (!exclude.count(r)) return r;
  }
}

/// Logistic matrix factorisation on clicks of history and train sessions,
/// with uniformly sampled unclicked items as negatives. Plain SGD.
inline BaseRecommender train_base_recommender(const std::vector<UserSequence>& seqs, std::size_t user_rows, std::size_t item_rows,
                                              std::size_t d, const DownstreamConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, "base_recommender"));
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  BaseRecommender br{uniform_init(user_rows, d, bound, rng), uniform_init(item_rows, d, bound, rng)};
  struct Pair {
    std::size_t user, item;
  };
  std::vector<Pair> positives;
  for (const auto& us : seqs)
    for (std::size_t k = 0; k < us.sessions.size(); ++k) {
      if (us.tags[k] != SplitTag::history && us.tags[k] != SplitTag::train) continue;
      for (auto it : clicked_items(us.sessions[k])) positives.push_back({us.user_row, it});
    }
  auto step = [&](std::size_t u, std::size_t i, double y) {
    auto uv = br.users.row(u);
    auto iv = br.items.row(i);
    const double g = ad::sigmoid(dot(uv, iv)) - y;
    for (std::size_t j = 0; j < d; ++j) {
      const double gu = g * iv[j], gi = g * uv[j];
      uv[j] -= cfg.base_learning_rate * gu;
      iv[j] -= cfg.base_learning_rate * gi;
    }
  };
  for (std::size_t epoch = 0; epoch < cfg.base_epochs; ++epoch) {
    for (std::size_t i = positives.size(); i > 1; --i) std::swap(positives[i - 1], positives[rng.below(i)]);
    for (const auto& p : positives) {
      step(p.user, p.item, 1.0);
      for (std::size_t n = 0; n < cfg.negatives; ++n) step(p.user, sample_negative(rng, item_rows, {p.item}), 0.0);
    }
  }
  return br;
}

/// Base user vector; with the motivation mixture on, adds the mean of
/// history item vectors weighted by p (items from search-motivated sessions)
/// and 1 - p (the rest), p being the predicted search probability.
inline std::vector<double> base_user_vector(const BaseRecommender& br, const UserSequence& us, std::size_t k,
                                            std::optional<double> p_search) {
  auto u = br.users.row(us.user_row);
  std::vector<double> out(u.begin(), u.end());
  if (!p_search) return out;
  std::vector<double> mix(out.size(), 0.0);
  double wsum = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    const double w = us.sessions[j].motivation ? *p_search : 1.0 - *p_search;
    for (auto it : clicked_items(us.sessions[j])) {
      auto iv = br.items.row(it);
      for (std::size_t c = 0; c < mix.size(); ++c) mix[c] += w * iv[c];
      wsum += w;
    }
  }
  if (wsum > 0.0)
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += mix[c] / wsum;
  return out;
}

/// Eval-mode scores of the given targets of one user.
inline std::vector<double> score_split_user(const Model& m, const UserSequence& us, const std::vector<std::size_t>& targets) {
  ad::Tape t(&m.params, false);
  ForwardOptions opt;
  opt.with_point_process = false;
  const auto fw = forward_user(t, m, us, targets, eval_ratio_fn(m), opt);
  std::vector<double> out;
  for (auto s : fw.scores) out.push_back(t.item(s));
  return out;
}

/// z vectors for all given targets of a user in one forward pass.
inline std::vector<std::vector<double>> fused_vectors(const Model& m, const UserSequence& us, const std::vector<std::size_t>& targets) {
  ad::Tape t(&m.params, false);
  ForwardOptions opt;
  opt.with_point_process = false;
  const auto fw = forward_user(t, m, us, targets, eval_ratio_fn(m), opt);
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto f = t.value(fw.fused[i]).flat();
    out.emplace_back(f.begin(), f.end());
  }
  return out;
}

struct DownstreamExample {
  std::size_t user_index;
  std::size_t session;
  std::vector<double> u;
  std::vector<double> z;
};

/// Trains the fusion layer (item vectors frozen) on train sessions, starting
/// from the identity slice so the initial model equals the base recommender.
inline FusionLayer train_fusion(const Model& m, const BaseRecommender& br, const std::vector<UserSequence>& seqs,
                                const DownstreamConfig& cfg) {
  const std::size_t d_u = br.users.cols(), d_z = m.cfg.d;
  FusionLayer f = identity_fusion(d_u, d_z);
  Rng rng(derive_seed(cfg.seed, "fusion"));
  std::vector<DownstreamExample> ex;
  for (std::size_t ui = 0; ui < seqs.size(); ++ui) {
    const auto& us = seqs[ui];
    const auto targets = target_indices(us, SplitTag::train);
    if (targets.empty()) continue;
    const auto zs = fused_vectors(m, us, targets);
    const auto scores = cfg.motivation_mixture ? score_split_user(m, us, targets) : std::vector<double>{};
    for (std::size_t i = 0; i < targets.size(); ++i) {
      std::optional<double> p;
      if (cfg.motivation_mixture) p = scores[i];
      ex.push_back({ui, targets[i], base_user_vector(br, us, targets[i], p), zs[i]});
    }
  }
  const std::size_t item_rows = br.items.rows();
  auto sgd = [&](const std::vector<double>& u, const std::vector<double>& z, std::size_t item, double y) {
    const auto fu = fuse_user(u, z, f);
    auto iv = br.items.row(item);
    const double g = ad::sigmoid(dot(iv, fu.fused)) - y;
    for (std::size_t j = 0; j < f.w.cols(); ++j) {
      const double gj = g * iv[j];
      for (std::size_t i = 0; i < d_u; ++i) f.w(i, j) -= cfg.fusion_learning_rate * gj * u[i];
      for (std::size_t i = 0; i < d_z; ++i) f.w(d_u + i, j) -= cfg.fusion_learning_rate * gj * z[i];
      f.b[j] -= cfg.fusion_learning_rate * gj;
    }
  };
  for (std::size_t epoch = 0; epoch < cfg.fusion_epochs; ++epoch) {
    for (std::size_t i = ex.size(); i > 1; --i) std::swap(ex[i - 1], ex[rng.below(i)]);
    for (const auto& e : ex) {
      const auto clicks = clicked_items(seqs[e.user_index].sessions[e.session]);
      const std::set<std::size_t> excl(clicks.begin(), clicks.end());
      for (auto it : clicks) {
        sgd(e.u, e.z, it, 1.0);
        for (std::size_t n = 0; n < cfg.negatives; ++n) sgd(e.u, e.z, sample_negative(rng, item_rows, excl), 0.0);
      }
    }
  }
  return f;
}

struct DownstreamReport {
  double auc_base = 0.0, auc_fused = 0.0;
  std::optional<double> gauc_base, gauc_fused;
  double rela_impr_auc = 0.0;
  std::optional<double> rela_impr_gauc;
  std::size_t users = 0, impressions = 0;
};

inline nlohmann::json to_json(const DownstreamReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"auc_base", r.auc_base},         {"auc_fused", r.auc_fused},         {"gauc_base", opt(r.gauc_base)},
          {"gauc_fused", opt(r.gauc_fused)}, {"rela_impr_auc", r.rela_impr_auc}, {"rela_impr_gauc", opt(r.rela_impr_gauc)},
          {"users", r.users},               {"impressions", r.impressions}};
}

/// Evaluates on the first session of each user in `split`: its clicked items
/// are positives, uniformly sampled unclicked items are negatives.
inline DownstreamReport evaluate_downstream(const Model& m, const BaseRecommender& br, const FusionLayer& f,
                                            const std::vector<UserSequence>& seqs, const DownstreamConfig& cfg,
                                            SplitTag split = SplitTag::test) {
  Rng rng(derive_seed(cfg.seed, "downstream_eval"));
  std::vector<int> all_labels;
  std::vector<double> all_base, all_fused;
  std::vector<UserLabelsScores> per_base, per_fused;
  for (const auto& us : seqs) {
    const auto targets = target_indices(us, split);
    if (targets.empty()) continue;
    const std::size_t k = targets.front();
    const auto clicks = clicked_items(us.sessions[k]);
    if (clicks.empty()) continue;
    const std::set<std::size_t> excl(clicks.begin(), clicks.end());
    std::vector<std::size_t> items = clicks;
    std::vector<int> labels(clicks.size(), 1);
    for (std::size_t n = 0; n < cfg.eval_negatives; ++n) {
      items.push_back(sample_negative(rng, br.items.rows(), excl));
      labels.push_back(0);
    }
    const auto z = fused_vectors(m, us, {k}).front();
    std::optional<double> p;
    if (cfg.motivation_mixture) p = score_split_user(m, us, {k}).front();
    const auto u = base_user_vector(br, us, k, p);
    const auto fu = fuse_user(u, z, f);
    UserLabelsScores b{labels, {}}, fz{labels, {}};
    for (auto it : items) {
      b.scores.push_back(score_item(br.items.row(it), u));
      fz.scores.push_back(score_item(br.items.row(it), fu.fused));
    }
    all_labels.insert(all_labels.end(), labels.begin(), labels.end());
    all_base.insert(all_base.end(), b.scores.begin(), b.scores.end());
    all_fused.insert(all_fused.end(), fz.scores.begin(), fz.scores.end());
    per_base.push_back(std::move(b));
    per_fused.push_back(std::move(fz));
  }
  DownstreamReport r;
  r.users = per_base.size();
  r.impressions = all_labels.size();
  const auto ab = auc(all_labels, all_base).value;
  const auto af = auc(all_labels, all_fused).value;
  if (!ab || !af) throw std::invalid_argument("evaluate_downstream: no evaluable users");
  r.auc_base = *ab;
  r.auc_fused = *af;
  r.rela_impr_auc = rela_impr(r.auc_fused, r.auc_base);
  r.gauc_base = gauc(per_base);
  r.gauc_fused = gauc(per_fused);
  if (r.gauc_base && r.gauc_fused) r.rela_impr_gauc = rela_impr(*r.gauc_fused, *r.gauc_base);
  return r;
}

struct Recommendation {
  std::string item_id;
  double score = 0.0;
};

/// Top-k items for predicting session k of a user under the fused vector.
inline std::vector<Recommendation> recommend(const Model& m, const BaseRecommender& br, const FusionLayer& f,
                                             const UserSequence& us, std::size_t k, std::size_t top_k,
                                             const DownstreamConfig& cfg) {
  const auto z = fused_vectors(m, us, {k}).front();
  std::optional<double> p;
  if (cfg.motivation_mixture) p = score_split_user(m, us, {k}).front();
  const auto fu = fuse_user(base_user_vector(br, us, k, p), z, f);
  std::vector<Recommendation> all;
  const auto& keys = m.vocab.items.keys();
  for (std::size_t r = 1; r < br.items.rows(); ++r) all.push_back({keys[r - 1], score_item(br.items.row(r), fu.fused)});
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  if (all.size() > top_k) all.resize(top_k);
  return all;
}

}  // namespace nhp
