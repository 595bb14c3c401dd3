#pragma once

// On-disk layout of an ingested dataset:
//   <dir>/history.jsonl, train.jsonl, validation.jsonl, test.jsonl
//   <dir>/manifest.json
// Each split file holds one serialized Session per line, tagged with its user.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

#include "ingestion.hpp"
#include "json.hpp"
#include "rng.hpp"

namespace nhp {

struct DatasetManifest {
  Seconds gap_seconds = kDefaultGapSeconds;
  Seconds window_seconds = kDefaultWindowSeconds;
  int history_days = 3;
  Seconds tz_offset_seconds = 0;
  std::array<Seconds, 4> boundaries{};
  std::string input_checksum;
  std::size_t skipped_lines = 0;
  std::map<std::string, std::size_t> session_counts;
};

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline std::string checksum_of(std::string_view bytes) { return "fnv1a64:" + hex64(fnv1a(bytes)); }

inline nlohmann::json session_to_json(const std::string& user_id, const Session& s) {
  nlohmann::json j;
  j["user_id"] = user_id;
  j["open_time"] = s.open_time;
  j["motivation"] = s.motivation;
  j["ratio_search"] = s.ratio_search;
  j["ratio_reco"] = s.ratio_reco;
  auto& acts = j["actions"] = nlohmann::json::array();
  for (const auto& a : s.actions) {
    auto e = event_to_json(a);
    e.erase("user_id");
    acts.push_back(std::move(e));
  }
  return j;
}

inline std::pair<std::string, Session> session_from_json(const nlohmann::json& j) {
  const auto user = j.at("user_id").get<std::string>();
  Session s;
  s.open_time = j.at("open_time").get<Seconds>();
  s.motivation = j.at("motivation").get<int>();
  s.ratio_search = j.at("ratio_search").get<double>();
  s.ratio_reco = j.at("ratio_reco").get<double>();
  for (const auto& a : j.at("actions")) s.actions.push_back(event_from_json(a, &user));
  if (s.actions.empty()) throw IngestError("session for user " + user + " has no actions");
  return {user, std::move(s)};
}

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  return {{"gap_seconds", m.gap_seconds},
          {"window_seconds", m.window_seconds},
          {"history_days", m.history_days},
          {"tz_offset_seconds", m.tz_offset_seconds},
          {"boundaries",
           {{"train_start", m.boundaries[0]},
            {"validation_start", m.boundaries[1]},
            {"test_start", m.boundaries[2]},
            {"end", m.boundaries[3]}}},
          {"input_checksum", m.input_checksum},
          {"skipped_lines", m.skipped_lines},
          {"session_counts", m.session_counts}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.gap_seconds = j.at("gap_seconds").get<Seconds>();
  m.window_seconds = j.at("window_seconds").get<Seconds>();
  m.history_days = j.at("history_days").get<int>();
  m.tz_offset_seconds = j.at("tz_offset_seconds").get<Seconds>();
  const auto& b = j.at("boundaries");
  m.boundaries = {b.at("train_start").get<Seconds>(), b.at("validation_start").get<Seconds>(),
                  b.at("test_start").get<Seconds>(), b.at("end").get<Seconds>()};
  m.input_checksum = j.at("input_checksum").get<std::string>();
  m.skipped_lines = j.value("skipped_lines", std::size_t{0});
  m.session_counts = j.value("session_counts", std::map<std::string, std::size_t>{});
  return m;
}

inline const std::array<std::pair<const char*, SessionsByUser DatasetSplit::*>, 4> kSplitFiles = {{
    {"history", &DatasetSplit::history},
    {"train", &DatasetSplit::train},
    {"validation", &DatasetSplit::validation},
    {"test", &DatasetSplit::test},
}};

inline void write_dataset(const std::filesystem::path& dir, const DatasetSplit& split, DatasetManifest manifest) {
  std::filesystem::create_directories(dir);
  manifest.boundaries = split.boundaries;
  for (const auto& [name, member] : kSplitFiles) {
    std::ofstream out(dir / (std::string(name) + ".jsonl"));
    if (!out) throw IngestError("cannot write " + (dir / name).string());
    std::size_t count = 0;
    for (const auto& [user, sessions] : split.*member)
      for (const auto& s : sessions) {
        out << session_to_json(user, s).dump() << '\n';
        ++count;
      }
    manifest.session_counts[name] = count;
  }
  std::ofstream mf(dir / "manifest.json");
  mf << manifest_to_json(manifest).dump(2) << '\n';
}

struct LoadedDataset {
  DatasetSplit split;
  DatasetManifest manifest;
};

inline LoadedDataset read_dataset(const std::filesystem::path& dir) {
  LoadedDataset out;
  const auto mpath = dir / "manifest.json";
  std::ifstream mf(mpath);
  if (!mf) throw IngestError("missing dataset manifest: " + mpath.string());
  out.manifest = manifest_from_json(nlohmann::json::parse(mf));
  out.split.boundaries = out.manifest.boundaries;
  for (const auto& [name, member] : kSplitFiles) {
    const auto path = dir / (std::string(name) + ".jsonl");
    std::ifstream in(path);
    if (!in) throw IngestError("missing split file: " + path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        auto [user, s] = session_from_json(nlohmann::json::parse(line));
        (out.split.*member)[user].push_back(std::move(s));
      } catch (const std::exception& e) {
        throw ParseError(lineno, path.string() + ": " + e.what());
      }
    }
  }
  return out;
}

/// Writes sessions back out as the raw event-log format.
inline void write_event_log(std::ostream& out, const std::vector<UserHistory>& histories) {
  for (const auto& h : histories)
    for (const auto& s : h.sessions)
      for (const auto& a : s.actions) out << event_to_json(a).dump() << '\n';
}

}  // namespace nhp
