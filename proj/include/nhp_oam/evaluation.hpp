#pragma once

// Classification metrics, threshold selection on a 0.01 grid and split
// evaluation of a trained model.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "model.hpp"

namespace nhp {

struct Confusion {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::size_t total() const { return tp + fp + tn + fn; }
  friend bool operator==(const Confusion&, const Confusion&) = default;
};

/// Predicts 1 iff score >= threshold.
inline Confusion confusion(const std::vector<int>& labels, const std::vector<double>& scores, double threshold) {
  if (labels.size() != scores.size()) throw std::invalid_argument("confusion: length mismatch");
  Confusion c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (labels[i]) {
      pred ? ++c.tp : ++c.fn;
    } else {
      pred ? ++c.fp : ++c.tn;
    }
  }
  return c;
}

inline double f_beta(double precision, double recall, double beta) {
  const double b2 = beta * beta;
  const double den = b2 * precision + recall;
  if (den == 0.0) return 0.0;
  return (1.0 + b2) * precision * recall / den;
}

inline double safe_div(double a, double b) { return b == 0.0 ? 0.0 : a / b; }

inline double precision_of(const Confusion& c) { return safe_div(double(c.tp), double(c.tp + c.fp)); }
inline double recall_of(const Confusion& c) { return safe_div(double(c.tp), double(c.tp + c.fn)); }
inline double accuracy_of(const Confusion& c) { return safe_div(double(c.tp + c.tn), double(c.total())); }
inline double f_beta_of(const Confusion& c, double beta) { return f_beta(precision_of(c), recall_of(c), beta); }

/// Mid-ranks (1-based) with ties averaged.
inline std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

struct AucResult {
  std::optional<double> value;
  std::string reason;
};

/// Mann-Whitney AUC: P(score+ > score-) + 0.5 P(tie).
inline AucResult auc(const std::vector<int>& labels, const std::vector<double>& scores) {
  if (labels.size() != scores.size()) throw std::invalid_argument("auc: length mismatch");
  std::size_t pos = 0;
  for (int l : labels) pos += l ? 1 : 0;
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) return {std::nullopt, pos == 0 ? "no positive examples" : "no negative examples"};
  const auto r = average_ranks(scores);
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i]) rank_sum += r[i];
  const double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return {(rank_sum - p * (p + 1.0) / 2.0) / (p * n), ""};
}

inline std::vector<double> threshold_grid() {
  std::vector<double> g;
  for (int i = 0; i <= 100; ++i) g.push_back(static_cast<double>(i) / 100.0);
  return g;
}

/// Grid threshold maximising F0.5; ties go to the smallest threshold.
inline double select_threshold(const std::vector<int>& labels, const std::vector<double>& scores, double beta = 0.5) {
  if (labels.empty()) throw std::invalid_argument("select_threshold: empty validation set");
  double best_t = 0.0, best_f = -1.0;
  for (double th : threshold_grid()) {
    const double f = f_beta_of(confusion(labels, scores, th), beta);
    if (f > best_f) {
      best_f = f;
      best_t = th;
    }
  }
  return best_t;
}

struct MetricsReport {
  double accuracy = 0, precision = 0, recall = 0, f1 = 0, f0_5 = 0;
  std::optional<double> auc;
  double threshold = 0.5;
  Confusion confusion;
  std::size_t n_examples = 0;
};

inline MetricsReport metrics_at(const std::vector<int>& labels, const std::vector<double>& scores, double threshold) {
  MetricsReport r;
  r.threshold = threshold;
  r.confusion = confusion(labels, scores, threshold);
  r.n_examples = labels.size();
  r.accuracy = accuracy_of(r.confusion);
  r.precision = precision_of(r.confusion);
  r.recall = recall_of(r.confusion);
  r.f1 = f_beta_of(r.confusion, 1.0);
  r.f0_5 = f_beta_of(r.confusion, 0.5);
  r.auc = auc(labels, scores).value;
  return r;
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j = {{"accuracy", r.accuracy},
                      {"precision", r.precision},
                      {"recall", r.recall},
                      {"f1", r.f1},
                      {"f0_5", r.f0_5},
                      {"threshold", r.threshold},
                      {"n_examples", r.n_examples},
                      {"confusion", {{"tp", r.confusion.tp}, {"fp", r.confusion.fp}, {"tn", r.confusion.tn}, {"fn", r.confusion.fn}}}};
  j["auc"] = r.auc ? nlohmann::json(*r.auc) : nlohmann::json(nullptr);
  return j;
}

struct LabelsScores {
  std::vector<int> labels;
  std::vector<double> scores;
};

inline LabelsScores unzip(const std::vector<ScoredExample>& xs) {
  LabelsScores out;
  for (const auto& x : xs) {
    out.labels.push_back(x.label);
    out.scores.push_back(x.score);
  }
  return out;
}

struct EvaluationResult {
  MetricsReport validation;  // at the selected threshold
  MetricsReport target;
};

/// Selects the threshold on validation and reports metrics on `split`.
inline EvaluationResult evaluate(const Model& m, const std::vector<UserSequence>& seqs, SplitTag split) {
  const auto val = unzip(score_split(m, seqs, SplitTag::validation));
  if (val.labels.empty()) throw std::invalid_argument("evaluate: empty validation split");
  const double th = select_threshold(val.labels, val.scores);
  const auto tgt = unzip(score_split(m, seqs, split));
  if (tgt.labels.empty()) throw std::invalid_argument("evaluate: no predictable sessions in the target split");
  return {metrics_at(val.labels, val.scores, th), metrics_at(tgt.labels, tgt.scores, th)};
}

/// Relative improvement of an AUC over a base AUC, both measured above 0.5.
inline double rela_impr(double auc_model, double auc_base) { return (auc_model - 0.5) / (auc_base - 0.5) - 1.0; }

}  // namespace nhp
