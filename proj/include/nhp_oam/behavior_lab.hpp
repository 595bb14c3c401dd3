#pragma once

// Behavioral-pattern analyses (periodicity, repeat queries, relevance) and a
// synthetic corpus generator that plants those patterns.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "ingestion.hpp"
#include "rng.hpp"

namespace nhp::lab {

// ---------------------------------------------------------------------------
// Periodicity

struct PeriodicityStats {
  std::array<std::optional<double>, 24> hourly{};
  std::array<std::optional<double>, 7> weekday{};  // 0 = Monday
  std::array<std::size_t, 24> hourly_sessions{};
  std::array<std::size_t, 7> weekday_sessions{};
};

inline int hour_of_day(Seconds ts, Seconds tz_offset = 0) {
  const Seconds local = ts + tz_offset;
  const Seconds in_day = local - day_index(ts, tz_offset) * kSecondsPerDay;
  return static_cast<int>(in_day / 3600);
}

/// 0 = Monday ... 6 = Sunday. 1970-01-01 was a Thursday.
inline int weekday_of(Seconds ts, Seconds tz_offset = 0) {
  const auto d = day_index(ts, tz_offset);
  return static_cast<int>(((d + 3) % 7 + 7) % 7);
}

inline PeriodicityStats periodicity_stats(const std::vector<UserHistory>& histories, Seconds tz_offset = 0) {
  PeriodicityStats out;
  std::array<std::size_t, 24> hs{};
  std::array<std::size_t, 7> ws{};
  for (const auto& h : histories)
    for (const auto& s : h.sessions) {
      const int hr = hour_of_day(s.open_time, tz_offset);
      const int wd = weekday_of(s.open_time, tz_offset);
      ++out.hourly_sessions[hr];
      ++out.weekday_sessions[wd];
      hs[hr] += s.motivation == 1;
      ws[wd] += s.motivation == 1;
    }
  for (int b = 0; b < 24; ++b)
    if (out.hourly_sessions[b]) out.hourly[b] = static_cast<double>(hs[b]) / static_cast<double>(out.hourly_sessions[b]);
  for (int b = 0; b < 7; ++b)
    if (out.weekday_sessions[b])
      out.weekday[b] = static_cast<double>(ws[b]) / static_cast<double>(out.weekday_sessions[b]);
  return out;
}

// ---------------------------------------------------------------------------
// Repeat queries

struct ActivityBin {
  int bin_index = 0;
  std::vector<std::string> users;
  double mean_repeat_ratio = 0.0;
};

struct RepeatQueryReport {
  std::map<std::string, double> per_user;                 // users with >= 1 search-motivated session
  std::map<std::string, std::size_t> search_sessions;     // activity measure
  std::array<ActivityBin, 4> bins{};
  double overall_mean = 0.0;
};

inline std::optional<std::string> first_query_text(const Session& s) {
  for (const auto& a : s.actions)
    if (a.is_query()) return join_tokens(*a.query);
  return std::nullopt;
}

/// Fraction of a user's search-motivated sessions whose first query repeats the
/// first query of an earlier search-motivated session.
inline std::optional<double> user_repeat_ratio(const std::vector<Session>& sessions) {
  std::set<std::string> seen;
  std::size_t searches = 0, repeats = 0;
  for (const auto& s : sessions) {
    if (s.motivation != 1) continue;
    ++searches;
    const auto q = first_query_text(s);
    if (!q) continue;
    if (seen.count(*q)) ++repeats;
    seen.insert(*q);
  }
  if (searches == 0) return std::nullopt;
  return static_cast<double>(repeats) / static_cast<double>(searches);
}

inline RepeatQueryReport repeat_query_ratio(const std::vector<UserHistory>& histories) {
  RepeatQueryReport out;
  for (const auto& h : histories) {
    const auto r = user_repeat_ratio(h.sessions);
    if (!r) continue;
    out.per_user[h.user_id] = *r;
    out.search_sessions[h.user_id] =
        static_cast<std::size_t>(std::count_if(h.sessions.begin(), h.sessions.end(), [](const Session& s) { return s.motivation == 1; }));
  }
  std::vector<std::string> users;
  for (const auto& [u, _] : out.per_user) users.push_back(u);
  // Ascending activity; ties resolved by user id (map order is already by id).
  std::stable_sort(users.begin(), users.end(), [&](const std::string& a, const std::string& b) {
    return out.search_sessions.at(a) < out.search_sessions.at(b);
  });
  const std::size_t n = users.size();
  double total = 0.0;
  for (int b = 0; b < 4; ++b) {
    auto& bin = out.bins[b];
    bin.bin_index = b;
    const std::size_t lo = n * static_cast<std::size_t>(b) / 4, hi = n * static_cast<std::size_t>(b + 1) / 4;
    double s = 0.0;
    for (std::size_t i = lo; i < hi; ++i) {
      bin.users.push_back(users[i]);
      s += out.per_user.at(users[i]);
    }
    bin.mean_repeat_ratio = bin.users.empty() ? 0.0 : s / static_cast<double>(bin.users.size());
    total += s;
  }
  out.overall_mean = n ? total / static_cast<double>(n) : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Relevance correlations

struct Correlation {
  std::optional<double> value;
  std::string reason;  // set when value is empty
};

struct CorrelationReport {
  Correlation spearman, kendall, pearson, distance;
  std::size_t n_pairs = 0;
};

/// (previous session ratio_search, next session motivation) for every pair of
/// consecutive sessions.
inline std::vector<std::pair<double, double>> relevance_pairs(const std::vector<UserHistory>& histories) {
  std::vector<std::pair<double, double>> out;
  for (const auto& h : histories)
    for (std::size_t i = 1; i < h.sessions.size(); ++i)
      out.emplace_back(h.sessions[i - 1].ratio_search, static_cast<double>(h.sessions[i].motivation));
  return out;
}

namespace detail {

inline bool is_constant(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
}

inline double pearson_raw(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

/// Average ranks (1-based), ties share the mean rank.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline std::int64_t tie_pairs(const std::vector<double>& sorted) {
  std::int64_t t = 0;
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
    const auto c = static_cast<std::int64_t>(j - i);
    t += c * (c - 1) / 2;
    i = j;
  }
  return t;
}

/// Merge sort counting inversions.
inline std::int64_t count_swaps(std::vector<double>& v, std::vector<double>& buf, std::size_t lo, std::size_t hi) {
  if (hi - lo < 2) return 0;
  const std::size_t mid = lo + (hi - lo) / 2;
  std::int64_t swaps = count_swaps(v, buf, lo, mid) + count_swaps(v, buf, mid, hi);
  std::size_t i = lo, j = mid, k = lo;
  while (i < mid && j < hi) {
    if (v[j] < v[i]) {
      buf[k++] = v[j++];
      swaps += static_cast<std::int64_t>(mid - i);
    } else {
      buf[k++] = v[i++];
    }
  }
  while (i < mid) buf[k++] = v[i++];
  while (j < hi) buf[k++] = v[j++];
  std::copy(buf.begin() + static_cast<std::ptrdiff_t>(lo), buf.begin() + static_cast<std::ptrdiff_t>(hi),
            v.begin() + static_cast<std::ptrdiff_t>(lo));
  return swaps;
}

}  // namespace detail

inline std::optional<double> pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2 || detail::is_constant(x) || detail::is_constant(y)) return std::nullopt;
  return detail::pearson_raw(x, y);
}

inline std::optional<double> spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2 || detail::is_constant(x) || detail::is_constant(y)) return std::nullopt;
  return detail::pearson_raw(detail::average_ranks(x), detail::average_ranks(y));
}

/// Kendall's tau-b in O(n log n) (Knight's algorithm).
inline std::optional<double> kendall_tau_b(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2 || detail::is_constant(x) || detail::is_constant(y)) return std::nullopt;
  const std::size_t n = x.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b] || (x[a] == x[b] && y[a] < y[b]); });
  std::vector<double> xs(n), ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    xs[i] = x[idx[i]];
    ys[i] = y[idx[i]];
  }
  const auto n0 = static_cast<std::int64_t>(n) * static_cast<std::int64_t>(n - 1) / 2;
  const std::int64_t n1 = detail::tie_pairs(xs);
  std::int64_t n3 = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && xs[j] == xs[i] && ys[j] == ys[i]) ++j;
    const auto c = static_cast<std::int64_t>(j - i);
    n3 += c * (c - 1) / 2;
    i = j;
  }
  std::vector<double> buf(n);
  const std::int64_t swaps = detail::count_swaps(ys, buf, 0, n);
  const std::int64_t n2 = detail::tie_pairs(ys);
  const double num = static_cast<double>(n0 - n1 - n2 + n3 - 2 * swaps);
  return num / std::sqrt(static_cast<double>(n0 - n1) * static_cast<double>(n0 - n2));
}

/// Distance correlation with double-centred pairwise distances. O(n^2) time,
/// O(n) memory.
inline std::optional<double> distance_correlation(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  if (n != y.size() || n < 2) return std::nullopt;
  std::vector<double> ax(n, 0.0), ay(n, 0.0);
  double gx = 0.0, gy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      ax[i] += std::abs(x[i] - x[j]);
      ay[i] += std::abs(y[i] - y[j]);
    }
    gx += ax[i];
    gy += ay[i];
    ax[i] /= static_cast<double>(n);
    ay[i] /= static_cast<double>(n);
  }
  gx /= static_cast<double>(n * n);
  gy /= static_cast<double>(n * n);
  double cxy = 0.0, cxx = 0.0, cyy = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double a = std::abs(x[i] - x[j]) - ax[i] - ax[j] + gx;
      const double b = std::abs(y[i] - y[j]) - ay[i] - ay[j] + gy;
      cxy += a * b;
      cxx += a * a;
      cyy += b * b;
    }
  if (cxx <= 0.0 || cyy <= 0.0) return std::nullopt;
  return std::sqrt(std::max(0.0, cxy) / std::sqrt(cxx * cyy));
}

inline constexpr std::size_t kDistanceCorrelationMaxPairs = 5000;

inline CorrelationReport relevance_correlations(const std::vector<std::pair<double, double>>& pairs,
                                                std::uint64_t sample_seed = 0x5eed) {
  CorrelationReport out;
  out.n_pairs = pairs.size();
  auto null_all = [&](const std::string& why) {
    for (auto* c : {&out.spearman, &out.kendall, &out.pearson, &out.distance}) c->reason = why;
  };
  if (pairs.size() < 3) {
    null_all("fewer than 3 pairs");
    return out;
  }
  std::vector<double> x, y;
  for (const auto& [a, b] : pairs) {
    x.push_back(a);
    y.push_back(b);
  }
  const bool constant = detail::is_constant(x) || detail::is_constant(y);
  auto fill = [&](Correlation& c, std::optional<double> v) {
    c.value = v;
    if (!v) c.reason = constant ? "constant series" : "undefined";
  };
  fill(out.pearson, pearson(x, y));
  fill(out.spearman, spearman(x, y));
  fill(out.kendall, kendall_tau_b(x, y));

  if (pairs.size() > kDistanceCorrelationMaxPairs) {
    std::vector<std::size_t> idx(pairs.size());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(sample_seed);
    for (std::size_t i = 0; i < kDistanceCorrelationMaxPairs; ++i)
      std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
    idx.resize(kDistanceCorrelationMaxPairs);
    std::sort(idx.begin(), idx.end());
    std::vector<double> sx, sy;
    for (auto i : idx) {
      sx.push_back(x[i]);
      sy.push_back(y[i]);
    }
    fill(out.distance, distance_correlation(sx, sy));
  } else {
    fill(out.distance, distance_correlation(x, y));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ogata thinning

class BoundViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Event times of an inhomogeneous Poisson process on [0, horizon) with the
/// given rate, by thinning a homogeneous process of rate upper_bound.
inline std::vector<double> thinning_sample(const std::function<double(double)>& rate_fn, double horizon,
                                           double upper_bound, Rng& rng) {
  if (upper_bound < 0.0 || horizon < 0.0) throw std::invalid_argument("thinning_sample: negative bound or horizon");
  std::vector<double> out;
  if (upper_bound == 0.0) return out;
  double t = 0.0;
  for (;;) {
    t += rng.exponential(upper_bound);
    if (t >= horizon) break;
    const double r = rate_fn(t);
    if (r > upper_bound) throw BoundViolation("thinning_sample: rate " + std::to_string(r) + " exceeds bound " +
                                              std::to_string(upper_bound) + " at t=" + std::to_string(t));
    if (r < 0.0) throw std::invalid_argument("thinning_sample: negative rate");
    if (r == upper_bound || rng.uniform() * upper_bound < r) out.push_back(t);
  }
  return out;
}

inline std::vector<double> thinning_sample(const std::function<double(double)>& rate_fn, double horizon,
                                           double upper_bound, std::uint64_t seed) {
  Rng rng(seed);
  return thinning_sample(rate_fn, horizon, upper_bound, rng);
}

// ---------------------------------------------------------------------------
// Synthetic corpus

struct PatternConfig {
  int n_users = 200;
  int days = 14;
  std::array<double, 24> hourly_search_profile{};
  double weekend_boost = 1.0;
  double repeat_query_prob = 0.5;
  double relevance_strength = 0.5;
  double base_rate = 2.0;  // sessions per user per day
  std::uint64_t seed = 1;
  // Generator knobs beyond the pattern itself.
  Seconds start_time = 1699833600;  // Monday 2023-11-13 00:00 UTC
  int n_items = 400;
  int n_words = 200;

  PatternConfig() { hourly_search_profile.fill(0.3); }

  void validate() const {
    if (n_users <= 0 || days <= 0) throw std::invalid_argument("PatternConfig: n_users and days must be positive");
    if (!(base_rate > 0.0)) throw std::invalid_argument("PatternConfig: base_rate must be positive");
    for (double p : hourly_search_profile)
      if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("PatternConfig: hourly profile entries must be in [0,1]");
    if (!(weekend_boost >= 0.0)) throw std::invalid_argument("PatternConfig: weekend_boost must be >= 0");
    if (!(repeat_query_prob >= 0.0 && repeat_query_prob <= 1.0))
      throw std::invalid_argument("PatternConfig: repeat_query_prob must be in [0,1]");
    if (!(relevance_strength >= 0.0 && relevance_strength <= 1.0))
      throw std::invalid_argument("PatternConfig: relevance_strength must be in [0,1]");
    if (n_items < 1 || n_words < 1) throw std::invalid_argument("PatternConfig: vocabulary sizes must be positive");
  }
};

/// Search probability with a clear daily rhythm: low overnight, peaks at
/// lunch and in the evening.
inline std::array<double, 24> pronounced_hourly_profile() {
  return {0.10, 0.08, 0.06, 0.06, 0.08, 0.10, 0.15, 0.25, 0.35, 0.40, 0.45, 0.55,
          0.65, 0.60, 0.45, 0.40, 0.40, 0.45, 0.50, 0.60, 0.70, 0.65, 0.45, 0.25};
}

/// Relative session-opening activity by hour of day (normalised internally).
inline const std::array<double, 24>& diurnal_activity() {
  static const std::array<double, 24> a = {0.3, 0.2, 0.15, 0.1, 0.1, 0.2, 0.5, 0.9, 1.0, 1.0, 1.0, 1.1,
                                           1.3, 1.2, 1.0, 1.0, 1.0, 1.1, 1.3, 1.5, 1.6, 1.5, 1.1, 0.6};
  return a;
}

inline constexpr double kRelevanceGain = 6.0;

struct GroundTruth {
  std::string user_id;
  Seconds open_time = 0;
  int motivation = 0;
  double p_search = 0.0;
};

struct Corpus {
  std::vector<UserHistory> histories;
  std::vector<GroundTruth> truth;
};

/// Probability that a session opened at `ts` is search-motivated.
inline double motivation_probability(const PatternConfig& cfg, Seconds ts, std::optional<double> prev_ratio_search) {
  const double p_hour = cfg.hourly_search_profile[static_cast<std::size_t>(hour_of_day(ts))];
  const int wd = weekday_of(ts);
  const bool weekend = wd >= 5;
  if (p_hour <= 0.0) return 0.0;
  if (p_hour >= 1.0) return 1.0;
  if (weekend && cfg.weekend_boost == 0.0) return 0.0;
  double logit = std::log(p_hour / (1.0 - p_hour));
  if (weekend) logit += std::log(cfg.weekend_boost);
  if (prev_ratio_search) logit += cfg.relevance_strength * kRelevanceGain * (*prev_ratio_search - 0.5);
  return 1.0 / (1.0 + std::exp(-logit));
}

namespace detail {

inline std::vector<std::string> random_query(Rng& rng, const std::vector<int>& topic, int n_words) {
  const int len = static_cast<int>(rng.between(1, 3));
  std::vector<std::string> q;
  for (int i = 0; i < len; ++i) {
    const int w = rng.bernoulli(0.8) ? topic[rng.below(topic.size())] : static_cast<int>(rng.below(static_cast<std::uint64_t>(n_words)));
    q.push_back("w" + std::to_string(w));
  }
  return q;
}

}  // namespace detail

/// Deterministic synthetic corpus. Sessions respect the default 30-minute
/// sessionization gap and 30-second labelling window exactly, so re-ingesting
/// the emitted event log reproduces the same sessions and labels.
inline Corpus generate_corpus(const PatternConfig& cfg) {
  cfg.validate();
  Corpus out;
  const auto& activity = diurnal_activity();
  const double activity_mean = std::accumulate(activity.begin(), activity.end(), 0.0) / 24.0;
  const double horizon_hours = 24.0 * cfg.days;

  for (int u = 0; u < cfg.n_users; ++u) {
    Rng rng(derive_seed(cfg.seed, "user", static_cast<std::uint64_t>(u)));
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "u%05d", u);
    UserHistory hist{idbuf, {}};

    const double user_scale = rng.uniform(0.5, 1.5);
    const double per_hour = cfg.base_rate * user_scale / 24.0 / activity_mean;
    const double bound = per_hour * *std::max_element(activity.begin(), activity.end());
    const Seconds start = cfg.start_time;
    auto rate = [&](double t_hours) {
      const Seconds ts = start + static_cast<Seconds>(t_hours * 3600.0);
      return per_hour * activity[static_cast<std::size_t>(hour_of_day(ts))];
    };
    const auto opens = thinning_sample(rate, horizon_hours, bound, rng);

    std::vector<int> items, topic;
    for (int i = 0; i < 20; ++i) items.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.n_items))));
    for (int i = 0; i < 8; ++i) topic.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.n_words))));
    std::vector<std::vector<std::string>> first_queries;

    Seconds last_end = -1;
    const Seconds end_of_corpus = start + static_cast<Seconds>(cfg.days) * kSecondsPerDay;
    for (double t_open : opens) {
      const Seconds open = start + static_cast<Seconds>(t_open * 3600.0);
      if (last_end >= 0 && open - last_end <= kDefaultGapSeconds + 60) continue;
      std::optional<double> prev_ratio;
      if (!hist.sessions.empty()) prev_ratio = hist.sessions.back().ratio_search;
      const double p = motivation_probability(cfg, open, prev_ratio);
      const int m = rng.bernoulli(p) ? 1 : 0;

      Session s;
      const int n_actions = static_cast<int>(rng.between(2, 6));
      const double q_frac = m ? rng.uniform(0.35, 1.0) : rng.uniform(0.0, 0.45);
      Seconds ts = open;
      bool searched = false;
      for (int k = 0; k < n_actions; ++k) {
        if (k > 0) ts += m ? rng.between(5, 240) : rng.between(31, 240);
        const bool is_query = k == 0 ? m == 1 : rng.bernoulli(q_frac);
        RawEvent e;
        e.user_id = hist.user_id;
        e.timestamp = ts;
        if (is_query) {
          e.kind = EventKind::query;
          if (k == 0 && !first_queries.empty() && rng.bernoulli(cfg.repeat_query_prob))
            e.query = first_queries[rng.below(first_queries.size())];
          else
            e.query = detail::random_query(rng, topic, cfg.n_words);
          if (k == 0) first_queries.push_back(*e.query);
          searched = true;
        } else {
          e.kind = EventKind::item_click;
          const int item = rng.bernoulli(0.7) ? items[rng.below(items.size())]
                                              : static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.n_items)));
          e.item_id = "i" + std::to_string(item);
          e.source = searched ? ClickSource::search_result : ClickSource::recommendation;
        }
        s.actions.push_back(std::move(e));
      }
      if (ts >= end_of_corpus) break;
      finalize_session(s);
      if (s.motivation != m) throw std::logic_error("generate_corpus: label rule violated");
      last_end = ts;
      out.truth.push_back({hist.user_id, s.open_time, m, p});
      hist.sessions.push_back(std::move(s));
    }
    out.histories.push_back(std::move(hist));
  }
  return out;
}

}  // namespace nhp::lab
