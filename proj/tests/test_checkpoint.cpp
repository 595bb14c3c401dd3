#include <gtest/gtest.h>

#include <filesystem>

#include "nhp_oam/checkpoint.hpp"
#include "nhp_oam/evaluation.hpp"
#include "small_corpus.hpp"

using namespace nhp;

namespace {

const TrainResult& trained() {
  static const TrainResult r = [] {
    auto cfg = nhp::testing::small_config();
    cfg.epochs = 2;
    return train(nhp::testing::small_split(), cfg);
  }();
  return r;
}

}  // namespace

TEST(Checkpoint, ByteExactRoundTrip) {
  const auto bytes = serialize_checkpoint(trained().best);
  const auto back = deserialize_checkpoint(bytes);
  EXPECT_EQ(serialize_checkpoint(back), bytes);
  for (std::size_t pid = 0; pid < back.model.params.size(); ++pid)
    EXPECT_EQ(back.model.params.value(static_cast<int>(pid)), trained().best.model.params.value(static_cast<int>(pid)));
  EXPECT_EQ(back.model.norm, trained().best.model.norm);
  EXPECT_EQ(back.epoch, trained().best.epoch);
  EXPECT_EQ(back.trace.size(), trained().log.size());
}

TEST(Checkpoint, ReloadReproducesMetrics) {
  const auto dir = std::filesystem::temp_directory_path() / "nhp_oam_checkpoint_test";
  std::filesystem::remove_all(dir);
  save_checkpoint(dir / "best.ckpt", trained().best);
  const auto back = load_checkpoint(dir / "best.ckpt");
  const auto data = nhp::testing::small_split();
  const auto seqs = build_sequences(data, back.model.vocab);
  const auto a = evaluate(trained().best.model, seqs, SplitTag::test), b = evaluate(back.model, seqs, SplitTag::test);
  EXPECT_EQ(a.target.confusion, b.target.confusion);
  EXPECT_EQ(a.target.auc, b.target.auc);
  EXPECT_EQ(a.validation.threshold, b.validation.threshold);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RejectsDamagedInput) {
  const auto bytes = serialize_checkpoint(trained().best);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), std::exception);
  EXPECT_THROW(deserialize_checkpoint(bytes + "x"), CheckpointError);
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad), CheckpointError);
  std::string version = bytes;
  version[8] = 9;
  EXPECT_THROW(deserialize_checkpoint(version), CheckpointError);
  EXPECT_THROW(deserialize_checkpoint(""), CheckpointError);
  EXPECT_THROW(load_checkpoint("/nonexistent/best.ckpt"), CheckpointError);
}
