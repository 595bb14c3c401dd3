#pragma once

// Binary checkpoint container:
//   "NHPCKPT\0" | u32 version | u64 header length | JSON header | raw f64 values
// The header carries configs, vocabularies, normaliser state, epoch, the
// validation trace, RNG state and the parameter table (name, group, shape).
// Values follow in parameter order as little-endian IEEE doubles.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "training.hpp"

namespace nhp {

inline constexpr char kCheckpointMagic[8] = {'N', 'H', 'P', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint64_t get_u64(const std::string& in, std::size_t& pos) {
  if (pos + 8 > in.size()) throw CheckpointError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 8;
  return v;
}
}  // namespace detail

inline nlohmann::json norm_to_json(const RatioNormState& s) {
  auto bits = [](double x) { return std::bit_cast<std::uint64_t>(x); };
  return {{"running_mean", {bits(s.running_mean[0]), bits(s.running_mean[1])}},
          {"running_var", {bits(s.running_var[0]), bits(s.running_var[1])}},
          {"momentum", bits(s.momentum)},
          {"epsilon", bits(s.epsilon)}};
}

inline RatioNormState norm_from_json(const nlohmann::json& j) {
  auto val = [](const nlohmann::json& x) { return std::bit_cast<double>(x.get<std::uint64_t>()); };
  RatioNormState s;
  s.running_mean = {val(j.at("running_mean")[0]), val(j.at("running_mean")[1])};
  s.running_var = {val(j.at("running_var")[0]), val(j.at("running_var")[1])};
  s.momentum = val(j.at("momentum"));
  s.epsilon = val(j.at("epsilon"));
  return s;
}

inline std::string serialize_checkpoint(const Checkpoint& c) {
  nlohmann::json h;
  h["config"] = to_json(c.config);
  h["model_config"] = to_json(c.model.cfg);
  h["vocab"] = {{"users", c.model.vocab.users.keys()},
                {"items", c.model.vocab.items.keys()},
                {"words", c.model.vocab.words.keys()},
                {"fingerprint", c.model.vocab.fingerprint()}};
  h["norm"] = norm_to_json(c.model.norm);
  h["epoch"] = c.epoch;
  auto& tr = h["trace"] = nlohmann::json::array();
  for (const auto& e : c.trace) tr.push_back(to_json(e));
  h["rng_state"] = c.rng_state;
  auto& table = h["params"] = nlohmann::json::array();
  for (const auto& p : c.model.params) table.push_back({{"name", p.name}, {"group", p.group}, {"shape", {p.value.rows(), p.value.cols()}}});
  const std::string header = h.dump();
  std::string out(kCheckpointMagic, 8);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((kCheckpointVersion >> (8 * i)) & 0xff));
  detail::put_u64(out, header.size());
  out += header;
  for (const auto& p : c.model.params)
    for (double v : p.value.flat()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) throw CheckpointError("not a checkpoint file");
  std::uint32_t version = 0;
  for (int i = 0; i < 4; ++i) version |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  std::size_t pos = 12;
  const auto hlen = detail::get_u64(bytes, pos);
  if (pos + hlen > bytes.size()) throw CheckpointError("checkpoint header truncated");
  const auto h = nlohmann::json::parse(bytes.substr(pos, hlen));
  pos += hlen;
  Checkpoint c;
  c.config = train_config_from_json(h.at("config"));
  Vocabularies vocab;
  vocab.users = Vocabulary::from_keys(h.at("vocab").at("users").get<std::vector<std::string>>());
  vocab.items = Vocabulary::from_keys(h.at("vocab").at("items").get<std::vector<std::string>>());
  vocab.words = Vocabulary::from_keys(h.at("vocab").at("words").get<std::vector<std::string>>());
  if (vocab.fingerprint() != h.at("vocab").at("fingerprint").get<std::uint64_t>()) throw CheckpointError("vocabulary fingerprint mismatch");
  c.model = make_model(model_config_from_json(h.at("model_config")), std::move(vocab), c.config.seed);
  c.model.norm = norm_from_json(h.at("norm"));
  c.epoch = h.at("epoch").get<std::size_t>();
  for (const auto& e : h.at("trace")) c.trace.push_back(epoch_log_from_json(e));
  c.rng_state = h.at("rng_state").get<std::array<std::uint64_t, 4>>();
  const auto& table = h.at("params");
  if (table.size() != c.model.params.size()) throw CheckpointError("parameter count mismatch");
  for (std::size_t i = 0; i < table.size(); ++i) {
    auto& p = c.model.params[static_cast<int>(i)];
    const auto& e = table[i];
    const auto shape = e.at("shape").get<std::array<std::size_t, 2>>();
    if (e.at("name").get<std::string>() != p.name || shape[0] != p.value.rows() || shape[1] != p.value.cols())
      throw CheckpointError("parameter table mismatch at " + p.name);
    for (double& v : p.value.flat()) v = std::bit_cast<double>(detail::get_u64(bytes, pos));
  }
  if (pos != bytes.size()) throw CheckpointError("trailing bytes after checkpoint payload");
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + path.string());
  const auto bytes = serialize_checkpoint(c);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace nhp
