#include <gtest/gtest.h>

#include <cmath>

#include "nhp_oam/training.hpp"
#include "small_corpus.hpp"

using namespace nhp;
using nhp::testing::small_config;
using nhp::testing::small_split;

namespace {

struct Fixture {
  DatasetSplit data = small_split();
  TrainConfig cfg = small_config();
  Model model = make_model(cfg.model, training_vocabulary(data), cfg.seed);
  std::vector<UserSequence> seqs = build_sequences(data, model.vocab);
  std::vector<const UserSequence*> batch;
  Fixture() {
    for (const auto& us : seqs)
      if (!target_indices(us, SplitTag::train).empty() && batch.size() < 6) batch.push_back(&us);
  }
  BatchLoss loss(double alpha, std::size_t epoch = 1) {
    TrainConfig c = cfg;
    c.loss_alpha = alpha;
    LossOptions lo;
    lo.epoch = epoch;
    return joint_loss(model, batch, c, lo);
  }
};

std::vector<int> all_labels(const DatasetSplit& d) {
  std::vector<int> out;
  for (const auto* part : {&d.history, &d.train, &d.validation, &d.test})
    for (const auto& [_, ss] : *part)
      for (const auto& s : ss) out.push_back(s.motivation);
  return out;
}

}  // namespace

TEST(JointLoss, AlphaZeroIsBceOnly) {
  Fixture s;
  ASSERT_GE(s.batch.size(), 2u);
  const auto zero = s.loss(0.0);
  EXPECT_EQ(zero.nll, 0.0);
  EXPECT_NEAR(zero.total, zero.bce / static_cast<double>(zero.users), 1e-12);
  EXPECT_NEAR(zero.bce, s.loss(0.1).bce, 1e-12);
}

TEST(JointLoss, ComposesSubLosses) {
  Fixture s;
  const auto l = s.loss(0.3);
  EXPECT_GT(l.nll, 0.0);
  EXPECT_NEAR(l.total, (l.bce + 0.3 * l.nll) / static_cast<double>(l.users), 1e-9);
  TrainConfig sum = s.cfg;
  sum.loss_alpha = 0.3;
  sum.reduction = LossReduction::sum;
  LossOptions lo;
  lo.epoch = 1;
  EXPECT_NEAR(joint_loss(s.model, s.batch, sum, lo).total, l.bce + 0.3 * l.nll, 1e-9);
}

TEST(JointLoss, LinearInAlphaWithFixedStream) {
  Fixture s;
  const double l0 = s.loss(0.0).total, l1 = s.loss(0.05).total, l2 = s.loss(0.1).total;
  EXPECT_NEAR(l2 - l0, 2 * (l1 - l0), 1e-9);
}

TEST(JointLoss, RejectsEmptyBatch) {
  Fixture s;
  s.batch.clear();
  EXPECT_THROW(s.loss(0.1), std::invalid_argument);
}

TEST(Train, ZeroLearningRateLeavesParametersUntouched) {
  Fixture s;
  TrainConfig c = s.cfg;
  c.learning_rate = 0.0;
  c.epochs = 2;
  const auto r = train_model(s.model, s.seqs, c);
  ASSERT_EQ(r.log.size(), 2u);
  for (std::size_t pid = 0; pid < s.model.params.size(); ++pid)
    EXPECT_EQ(r.last.model.params.value(static_cast<int>(pid)), s.model.params.value(static_cast<int>(pid)));
}

TEST(Train, DeterministicUnderFixedSeed) {
  Fixture s;
  const auto a = train(s.data, s.cfg), b = train(s.data, s.cfg);
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(a.log[i].train_loss, b.log[i].train_loss);
    EXPECT_EQ(a.log[i].val_f05, b.log[i].val_f05);
  }
  for (std::size_t pid = 0; pid < a.last.model.params.size(); ++pid)
    EXPECT_EQ(a.last.model.params.value(static_cast<int>(pid)), b.last.model.params.value(static_cast<int>(pid)));
}

TEST(Train, LossTrendsDownOverFiveEpochs) {
  Fixture s;
  TrainConfig c = s.cfg;
  c.epochs = 5;
  c.patience = 10;
  const auto r = train(s.data, c);
  ASSERT_EQ(r.log.size(), 5u);
  int rises = 0;
  for (std::size_t i = 1; i < 5; ++i) rises += r.log[i].train_loss > r.log[i - 1].train_loss;
  EXPECT_LE(rises, 1);
  EXPECT_LT(r.log.back().train_loss, r.log.front().train_loss);
}

TEST(Train, BestCheckpointHasMaximalValidationF05) {
  Fixture s;
  TrainConfig c = s.cfg;
  c.epochs = 4;
  const auto r = train(s.data, c);
  double best = -1.0;
  for (const auto& e : r.log) best = std::max(best, e.val_f05);
  EXPECT_EQ(r.log[r.best.epoch - 1].val_f05, best);
  const auto ev = evaluate(r.best.model, s.seqs, SplitTag::validation);
  EXPECT_EQ(ev.validation.f0_5, best);
}

TEST(PermuteMotivations, KeepsLabelMultisetAndMovesLabels) {
  const auto d = small_split();
  const auto p = permute_motivations(d, 3);
  auto a = all_labels(d), b = all_labels(p);
  ASSERT_EQ(a.size(), b.size());
  std::size_t moved = 0;
  for (std::size_t i = 0; i < a.size(); ++i) moved += a[i] != b[i];
  EXPECT_GT(moved, 0u);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  EXPECT_EQ(a, b);
}

TEST(GridSearch, SingletonSortedAndDivergence) {
  const auto data = small_split(24, 7);
  TrainConfig base = small_config();
  base.epochs = 1;
  GridSpec one{{16}, {3e-3}, {0.1}};
  const auto g1 = grid_search(data, base, one);
  ASSERT_EQ(g1.leaderboard.size(), 1u);
  EXPECT_EQ(g1.best.batch_size, 16u);
  EXPECT_EQ(g1.best.learning_rate, 3e-3);

  GridSpec two{{16}, {1e-3, 1e200}, {0.1}};
  const auto g2 = grid_search(data, base, two);
  ASSERT_EQ(g2.leaderboard.size(), 2u);
  EXPECT_FALSE(g2.leaderboard[0].diverged);
  EXPECT_TRUE(g2.leaderboard[1].diverged);
  EXPECT_EQ(g2.best.learning_rate, 1e-3);

  GridSpec three{{8, 16}, {1e-3, 3e-3}, {0.1}};
  const auto g3 = grid_search(data, base, three);
  for (std::size_t i = 1; i < g3.leaderboard.size(); ++i) EXPECT_GE(g3.leaderboard[i - 1].val_f05, g3.leaderboard[i].val_f05);
  EXPECT_THROW(grid_search(data, base, GridSpec{{}, {1e-3}, {0.1}}), std::invalid_argument);
}

TEST(GradCheck, FullModelPassesEveryGroup) {
  auto inst = make_gradcheck_instance(3);
  const auto rep = grad_check(inst.model, inst.user, inst.config);
  for (const auto& g : rep.groups) EXPECT_LE(g.max_rel_err, 1e-4) << g.name;
  EXPECT_TRUE(rep.passed);
}

TEST(GradCheck, ZeroSessionModelUsesInitialState) {
  auto inst = make_gradcheck_instance(5);
  inst.model.cfg.max_sessions = 0;
  const auto rep = grad_check(inst.model, inst.user, inst.config);
  EXPECT_TRUE(rep.passed);
}

TEST(GradCheck, SignFlipIsDetected) {
  auto inst = make_gradcheck_instance(3);
  GradCheckOptions opt;
  opt.corrupt = [&](GradStore& g) {
    for (auto& x : g[inst.model.predictor.w_l].flat()) x = -x;
  };
  const auto rep = grad_check(inst.model, inst.user, inst.config, opt);
  EXPECT_FALSE(rep.passed);
  ASSERT_EQ(rep.failing.size(), 1u);
  EXPECT_EQ(rep.failing.front(), "W_l");
}
