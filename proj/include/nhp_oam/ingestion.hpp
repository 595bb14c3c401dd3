#pragma once

// Event-log ingestion: parsing, sessionization, open-app motivation labels,
// in-session ratios and the temporal dataset split.

#include <algorithm>
#include <array>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace nhp {

using Seconds = std::int64_t;

inline constexpr Seconds kDefaultGapSeconds = 1800;
inline constexpr Seconds kDefaultWindowSeconds = 30;
inline constexpr Seconds kSecondsPerDay = 86400;

enum class EventKind { query, item_click };
enum class ClickSource { search_result, recommendation };

struct RawEvent {
  std::string user_id;
  Seconds timestamp = 0;
  EventKind kind = EventKind::item_click;
  std::optional<std::string> item_id;
  std::optional<std::vector<std::string>> query;
  std::optional<ClickSource> source;

  bool is_query() const { return kind == EventKind::query; }
  friend bool operator==(const RawEvent&, const RawEvent&) = default;
};

struct Session {
  Seconds open_time = 0;
  std::vector<RawEvent> actions;
  int motivation = 0;  // 1 = search, 0 = recommendation
  double ratio_search = 0.0;
  double ratio_reco = 1.0;

  Seconds last_action_time() const { return actions.back().timestamp; }
  friend bool operator==(const Session&, const Session&) = default;
};

struct UserHistory {
  std::string user_id;
  std::vector<Session> sessions;
};

using SessionsByUser = std::map<std::string, std::vector<Session>>;

struct DatasetSplit {
  SessionsByUser history;
  SessionsByUser train;
  SessionsByUser validation;
  SessionsByUser test;
  // Users without any history-day session; kept so that sessions are
  // conserved, but they take no part in training or evaluation.
  SessionsByUser dropped;
  // train_start, validation_start, test_start, end (exclusive).
  std::array<Seconds, 4> boundaries{};
};

class IngestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public IngestError {
 public:
  ParseError(std::size_t line, const std::string& what)
      : IngestError("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

inline std::vector<std::string> tokenize(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) s += ' ';
    s += tokens[i];
  }
  return s;
}

// ---------------------------------------------------------------------------
// Record codec

inline nlohmann::json event_to_json(const RawEvent& e) {
  nlohmann::json j;
  j["user_id"] = e.user_id;
  j["ts"] = e.timestamp;
  j["kind"] = e.is_query() ? "query" : "item_click";
  if (e.item_id) j["item_id"] = *e.item_id;
  if (e.query) j["query"] = join_tokens(*e.query);
  if (e.source) j["source"] = *e.source == ClickSource::search_result ? "search" : "reco";
  return j;
}

/// Decodes one record; throws std::invalid_argument describing the violation.
inline RawEvent event_from_json(const nlohmann::json& j, const std::string* user_override = nullptr) {
  if (!j.is_object()) throw std::invalid_argument("record is not an object");
  RawEvent e;
  if (user_override) {
    e.user_id = *user_override;
  } else {
    if (!j.contains("user_id")) throw std::invalid_argument("missing user_id");
    const auto& u = j["user_id"];
    if (u.is_string())
      e.user_id = u.get<std::string>();
    else if (u.is_number_integer())
      e.user_id = std::to_string(u.get<std::int64_t>());
    else
      throw std::invalid_argument("user_id must be a string");
    if (e.user_id.empty()) throw std::invalid_argument("empty user_id");
  }
  if (!j.contains("ts")) throw std::invalid_argument("missing ts");
  if (!j["ts"].is_number_integer()) throw std::invalid_argument("ts must be an integer");
  e.timestamp = j["ts"].get<Seconds>();
  if (e.timestamp < 0) throw std::invalid_argument("ts must be non-negative");
  if (!j.contains("kind") || !j["kind"].is_string()) throw std::invalid_argument("missing kind");
  const auto kind = j["kind"].get<std::string>();
  if (kind == "query") {
    e.kind = EventKind::query;
    if (j.contains("item_id") && !j["item_id"].is_null()) throw std::invalid_argument("query record carries item_id");
    if (!j.contains("query") || !j["query"].is_string()) throw std::invalid_argument("query record without query text");
    auto tokens = tokenize(j["query"].get<std::string>());
    if (tokens.empty()) throw std::invalid_argument("empty query text");
    e.query = std::move(tokens);
    if (j.contains("source") && !j["source"].is_null()) throw std::invalid_argument("source is only valid for item_click");
  } else if (kind == "item_click") {
    e.kind = EventKind::item_click;
    if (j.contains("query") && !j["query"].is_null()) throw std::invalid_argument("item_click record carries query");
    if (!j.contains("item_id")) throw std::invalid_argument("item_click record without item_id");
    const auto& it = j["item_id"];
    if (it.is_string())
      e.item_id = it.get<std::string>();
    else if (it.is_number_integer())
      e.item_id = std::to_string(it.get<std::int64_t>());
    else
      throw std::invalid_argument("item_id must be a string");
    if (e.item_id->empty()) throw std::invalid_argument("empty item_id");
    if (j.contains("source") && !j["source"].is_null()) {
      const auto src = j["source"].get<std::string>();
      if (src == "search")
        e.source = ClickSource::search_result;
      else if (src == "reco")
        e.source = ClickSource::recommendation;
      else
        throw std::invalid_argument("unknown source '" + src + "'");
    }
  } else {
    throw std::invalid_argument("unknown kind '" + kind + "'");
  }
  return e;
}

// ---------------------------------------------------------------------------
// parse_log

struct ParsedLog {
  std::map<std::string, std::vector<RawEvent>> events_by_user;
  std::size_t lines_read = 0;
  std::size_t skipped = 0;
  std::vector<std::pair<std::size_t, std::string>> skip_reasons;  // (line, reason)

  std::size_t event_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : events_by_user) n += v.size();
    return n;
  }
};

/// Reads line-delimited JSON event records. Blank lines are ignored. In strict
/// mode the first malformed line aborts with a ParseError naming the line.
inline ParsedLog parse_log(std::istream& in, bool strict = false) {
  ParsedLog out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ++out.lines_read;
    try {
      auto j = nlohmann::json::parse(line);
      RawEvent e = event_from_json(j);
      out.events_by_user[e.user_id].push_back(std::move(e));
    } catch (const std::exception& ex) {
      if (strict) throw ParseError(lineno, ex.what());
      ++out.skipped;
      out.skip_reasons.emplace_back(lineno, ex.what());
    }
  }
  for (auto& [_, events] : out.events_by_user)
    std::stable_sort(events.begin(), events.end(),
                     [](const RawEvent& a, const RawEvent& b) { return a.timestamp < b.timestamp; });
  return out;
}

// ---------------------------------------------------------------------------
// Labels and ratios

/// 1 iff the session contains a query within window_seconds of opening.
inline int label_motivation(const Session& session, Seconds window_seconds = kDefaultWindowSeconds) {
  for (const auto& a : session.actions) {
    if (a.timestamp - session.open_time > window_seconds) break;
    if (a.is_query()) return 1;
  }
  return 0;
}

/// (ratio_search, ratio_reco) over the first upto_index actions, or the whole
/// session when upto_index is absent.
inline std::pair<double, double> session_ratio(const Session& session, std::optional<std::size_t> upto_index = {}) {
  const std::size_t n = upto_index.value_or(session.actions.size());
  if (n == 0) throw std::invalid_argument("session_ratio: prefix length must be at least 1");
  if (n > session.actions.size()) throw std::invalid_argument("session_ratio: prefix longer than session");
  std::size_t queries = 0;
  for (std::size_t i = 0; i < n; ++i) queries += session.actions[i].is_query() ? 1 : 0;
  const double rs = static_cast<double>(queries) / static_cast<double>(n);
  return {rs, 1.0 - rs};
}

/// Fills open_time, motivation and ratios from the actions.
inline void finalize_session(Session& s, Seconds window_seconds = kDefaultWindowSeconds) {
  if (s.actions.empty()) throw std::invalid_argument("session without actions");
  s.open_time = s.actions.front().timestamp;
  s.motivation = label_motivation(s, window_seconds);
  std::tie(s.ratio_search, s.ratio_reco) = session_ratio(s);
}

// ---------------------------------------------------------------------------
// sessionize

/// Cuts a sorted per-user event list into sessions: a new session starts at
/// every event more than gap_seconds after its predecessor.
inline std::vector<Session> sessionize(const std::vector<RawEvent>& events, Seconds gap_seconds = kDefaultGapSeconds,
                                       Seconds window_seconds = kDefaultWindowSeconds) {
  if (gap_seconds <= 0) throw std::invalid_argument("sessionize: gap_seconds must be positive");
  std::vector<Session> out;
  for (std::size_t i = 0; i < events.size(); ++i) {
    if (i > 0 && events[i].timestamp < events[i - 1].timestamp)
      throw IngestError("sessionize: events not sorted, first inversion at index " + std::to_string(i) + " (" +
                        std::to_string(events[i - 1].timestamp) + " > " + std::to_string(events[i].timestamp) + ")");
    if (i == 0 || events[i].timestamp - events[i - 1].timestamp > gap_seconds) out.emplace_back();
    out.back().actions.push_back(events[i]);
  }
  for (auto& s : out) finalize_session(s, window_seconds);
  return out;
}

inline std::vector<UserHistory> build_histories(const std::map<std::string, std::vector<RawEvent>>& events_by_user,
                                                Seconds gap_seconds = kDefaultGapSeconds,
                                                Seconds window_seconds = kDefaultWindowSeconds) {
  std::vector<UserHistory> out;
  out.reserve(events_by_user.size());
  for (const auto& [user, events] : events_by_user) out.push_back({user, sessionize(events, gap_seconds, window_seconds)});
  return out;
}

inline std::vector<RawEvent> flatten(const std::vector<Session>& sessions) {
  std::vector<RawEvent> out;
  for (const auto& s : sessions) out.insert(out.end(), s.actions.begin(), s.actions.end());
  return out;
}

// ---------------------------------------------------------------------------
// split_dataset

/// Calendar day index of a timestamp under a fixed UTC offset.
inline std::int64_t day_index(Seconds ts, Seconds tz_offset_seconds = 0) {
  const Seconds local = ts + tz_offset_seconds;
  return local >= 0 ? local / kSecondsPerDay : -((-local + kSecondsPerDay - 1) / kSecondsPerDay);
}

inline constexpr int kMinSplitDays = 5;

/// Temporal split by session opening day: the first history_days calendar
/// days are history, the last day is test, the one before it validation and
/// everything in between train. Users without history sessions are moved to
/// `dropped` in full.
inline DatasetSplit split_dataset(const std::vector<UserHistory>& histories, int history_days = 3,
                                  Seconds tz_offset_seconds = 0) {
  std::int64_t first_day = INT64_MAX, last_day = INT64_MIN;
  for (const auto& h : histories)
    for (const auto& s : h.sessions) {
      const auto d = day_index(s.open_time, tz_offset_seconds);
      first_day = std::min(first_day, d);
      last_day = std::max(last_day, d);
    }
  if (first_day == INT64_MAX) throw IngestError("split_dataset: corpus is empty");
  const std::int64_t span = last_day - first_day + 1;
  if (history_days < 1) throw IngestError("split_dataset: history_days must be at least 1");
  if (span < std::max<std::int64_t>(kMinSplitDays, history_days + 2))
    throw IngestError("split_dataset: corpus spans " + std::to_string(span) + " days; at least " +
                      std::to_string(std::max<std::int64_t>(kMinSplitDays, history_days + 2)) + " are required");

  const std::int64_t train_day = first_day + history_days;
  const std::int64_t val_day = last_day - 1;
  const std::int64_t test_day = last_day;
  DatasetSplit out;
  auto day_start = [&](std::int64_t d) { return d * kSecondsPerDay - tz_offset_seconds; };
  out.boundaries = {day_start(train_day), day_start(val_day), day_start(test_day), day_start(test_day + 1)};

  for (const auto& h : histories) {
    std::vector<Session> hist, train, val, test;
    for (const auto& s : h.sessions) {
      const auto d = day_index(s.open_time, tz_offset_seconds);
      if (d < train_day)
        hist.push_back(s);
      else if (d == test_day)
        test.push_back(s);
      else if (d == val_day)
        val.push_back(s);
      else
        train.push_back(s);
    }
    if (hist.empty()) {
      if (!h.sessions.empty()) out.dropped[h.user_id] = h.sessions;
      continue;
    }
    out.history[h.user_id] = std::move(hist);
    if (!train.empty()) out.train[h.user_id] = std::move(train);
    if (!val.empty()) out.validation[h.user_id] = std::move(val);
    if (!test.empty()) out.test[h.user_id] = std::move(test);
  }
  return out;
}

/// Chronological concatenation of a user's sessions across all splits, each
/// tagged with the split it came from.
enum class SplitTag { history, train, validation, test };

struct TaggedSession {
  const Session* session;
  SplitTag tag;
};

inline std::map<std::string, std::vector<TaggedSession>> merged_timelines(const DatasetSplit& split) {
  std::map<std::string, std::vector<TaggedSession>> out;
  auto add = [&](const SessionsByUser& m, SplitTag tag) {
    for (const auto& [u, ss] : m)
      for (const auto& s : ss) out[u].push_back({&s, tag});
  };
  add(split.history, SplitTag::history);
  add(split.train, SplitTag::train);
  add(split.validation, SplitTag::validation);
  add(split.test, SplitTag::test);
  for (auto& [_, v] : out)
    std::stable_sort(v.begin(), v.end(),
                     [](const TaggedSession& a, const TaggedSession& b) { return a.session->open_time < b.session->open_time; });
  return out;
}

}  // namespace nhp
