#include <gtest/gtest.h>

#include <cmath>

#include "nhp_oam/predictor.hpp"
#include "test_util.hpp"

using namespace nhp;
using nhp::testing::fd_rel_error;

namespace {

struct Fixture {
  ParamStore ps;
  PredictorParams pp;
  int h, v, u;
  explicit Fixture(std::size_t d = 4, PredictorConfig cfg = {}, std::uint64_t seed = 2) {
    Rng rng(seed);
    pp = register_predictor(ps, d, cfg, rng);
    h = ps.add("h", "input", uniform_init(1, d, 1.0, rng));
    v = ps.add("v", "input", uniform_init(1, d, 1.0, rng));
    u = ps.add("u", "input", uniform_init(1, d, 1.0, rng));
  }
};

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST(RelativeTime, Examples) {
  EXPECT_EQ(relative_time(100, 100), 0.0);
  EXPECT_DOUBLE_EQ(relative_time(7300, 100), 2.0);
  EXPECT_THROW(relative_time(99, 100), std::invalid_argument);
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const Seconds a = static_cast<Seconds>(rng.below(1000000)), b = a + static_cast<Seconds>(rng.below(1000000));
    EXPECT_DOUBLE_EQ(relative_time(b, a), static_cast<double>(b - a) / 3600.0);
  }
}

TEST(Gate, ZeroWeightsAndZeroEncodingGiveHalf) {
  Fixture f;
  f.ps.value(f.pp.w_l).zero();
  f.ps.value(f.pp.w_s).zero();
  ad::Tape t(&f.ps, false);
  const Matrix& g = t.value(gate_with_encoding(t, f.pp, t.param(f.h), t.param(f.v), Matrix(1, 4)));
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(g[j], 0.5);
}

TEST(Gate, MatchesManualAndStaysInOpenInterval) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Fixture f(4, {}, seed);
    const double dt = 0.37 * static_cast<double>(seed);
    ad::Tape t(&f.ps, false);
    const Matrix& g = t.value(gate(t, f.pp, t.param(f.h), t.param(f.v), dt));
    const auto enc = time_encoding(dt, 4);
    const Matrix &H = f.ps.value(f.h), &V = f.ps.value(f.v), &Wl = f.ps.value(f.pp.w_l), &Ws = f.ps.value(f.pp.w_s);
    for (std::size_t j = 0; j < 4; ++j) {
      double pre = enc[j];
      for (std::size_t k = 0; k < 4; ++k) pre += H[k] * Wl(k, j) + V[k] * Ws(k, j);
      EXPECT_NEAR(g[j], sigmoid(pre), 1e-12);
      EXPECT_GT(g[j], 0.0);
      EXPECT_LT(g[j], 1.0);
    }
  }
}

TEST(Gate, DisabledGateIsConstantHalf) {
  PredictorConfig cfg;
  cfg.use_time_gate = false;
  Fixture f(4, cfg);
  ad::Tape t(&f.ps, false);
  const Matrix& g = t.value(gate(t, f.pp, t.param(f.h), t.param(f.v), 3.0));
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(g[j], 0.5);
}

TEST(Gate, GradientOfSumMatchesFiniteDifferences) {
  Fixture f;
  auto fn = [&](ad::Tape& t) { return ad::sum(t, gate(t, f.pp, t.param(f.h), t.param(f.v), 1.7)); };
  for (int pid : {f.pp.w_l, f.pp.w_s, f.h, f.v}) EXPECT_LT(fd_rel_error(f.ps, pid, fn), 1e-4);
}

TEST(Fuse, Examples) {
  Fixture f;
  ad::Tape t(&f.ps, false);
  const Matrix &H = f.ps.value(f.h), &V = f.ps.value(f.v);
  const Matrix& z1 = t.value(fuse(t, t.param(f.h), t.param(f.v), t.constant(Matrix(1, 4, 1.0))));
  const Matrix& z0 = t.value(fuse(t, t.param(f.h), t.param(f.v), t.constant(Matrix(1, 4, 0.0))));
  const Matrix& zm = t.value(fuse(t, t.param(f.h), t.param(f.v), t.constant(Matrix(1, 4, 0.5))));
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_EQ(z1[j], V[j]);
    EXPECT_EQ(z0[j], H[j]);
    EXPECT_NEAR(zm[j], (H[j] + V[j]) / 2, 1e-15);
  }
}

TEST(Fuse, ConvexCombinationPerComponent) {
  Rng rng(8);
  for (int trial = 0; trial < 300; ++trial) {
    const Matrix h = uniform_init(1, 6, 5.0, rng), v = uniform_init(1, 6, 5.0, rng);
    Matrix g(1, 6);
    for (std::size_t j = 0; j < 6; ++j) g[j] = rng.uniform();
    ad::Tape t(nullptr, false);
    const Matrix& z = t.value(fuse(t, t.constant(h), t.constant(v), t.constant(g)));
    for (std::size_t j = 0; j < 6; ++j) {
      EXPECT_GE(z[j], std::min(h[j], v[j]) - 1e-12);
      EXPECT_LE(z[j], std::max(h[j], v[j]) + 1e-12);
    }
  }
}

TEST(PredictMotivation, ZeroLogitAndZeroShiftGiveHalf) {
  Fixture f;
  f.ps.value(f.pp.mlp2_w).zero();
  ad::Tape t(&f.ps, false);
  EXPECT_EQ(t.item(predict_motivation(t, f.pp, t.param(f.h), t.param(f.u), t.constant(Matrix(1, 1)))), 0.5);
}

TEST(PredictMotivation, StrictlyIncreasingInRatio) {
  Fixture f;
  ad::Tape t(&f.ps, false);
  double prev = 0.0;
  for (int k = -20; k <= 20; ++k) {
    const double s = t.item(predict_motivation(t, f.pp, t.param(f.h), t.param(f.u), t.constant(Matrix(1, 1, 0.25 * k))));
    EXPECT_GT(s, prev);
    prev = s;
  }
}

TEST(PredictMotivation, HandBuiltTwoDimensionalMlp) {
  ParamStore ps;
  Rng rng(1);
  PredictorConfig cfg;
  cfg.phi = ad::Activation::tanh;
  const auto pp = register_predictor(ps, 2, cfg, rng);
  // First layer 4 -> 2, second 2 -> 1.
  ps.value(pp.mlp1_w) = Matrix(4, 2);
  const double w1[4][2] = {{0.5, -1.0}, {0.25, 0.0}, {1.0, 0.5}, {-0.5, 2.0}};
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 2; ++j) ps.value(pp.mlp1_w)(i, j) = w1[i][j];
  ps.value(pp.mlp1_b) = Matrix::row_vector({0.1, -0.2});
  ps.value(pp.mlp2_w) = Matrix(2, 1);
  ps.value(pp.mlp2_w)(0, 0) = 1.5;
  ps.value(pp.mlp2_w)(1, 0) = -0.75;
  ps.value(pp.mlp2_b) = Matrix::row_vector({0.3});
  const double x[4] = {1.0, 2.0, -1.0, 0.5};  // z = (1, 2), u = (-1, 0.5)
  const double a0 = std::tanh(x[0] * 0.5 + x[1] * 0.25 + x[2] * 1.0 + x[3] * -0.5 + 0.1);
  const double a1 = std::tanh(x[0] * -1.0 + x[1] * 0.0 + x[2] * 0.5 + x[3] * 2.0 - 0.2);
  const double expect = sigmoid(1.5 * a0 - 0.75 * a1 + 0.3 + 0.4);
  ad::Tape t(&ps, false);
  const double got = t.item(predict_motivation(t, pp, t.constant(Matrix::row_vector({1.0, 2.0})),
                                               t.constant(Matrix::row_vector({-1.0, 0.5})), t.constant(Matrix(1, 1, 0.4))));
  EXPECT_NEAR(got, expect, 1e-6);
}

TEST(PredictMotivation, GradientMatchesFiniteDifferences) {
  Fixture f;
  auto fn = [&](ad::Tape& t) {
    ad::Var g = gate(t, f.pp, t.param(f.h), t.param(f.v), 0.8);
    ad::Var z = fuse(t, t.param(f.h), t.param(f.v), g);
    ad::Var s = predict_motivation(t, f.pp, z, t.param(f.u), t.constant(Matrix(1, 1, -0.3)));
    return ad::bce(t, s, {1.0});
  };
  for (int pid = 0; pid < static_cast<int>(f.ps.size()); ++pid) EXPECT_LT(fd_rel_error(f.ps, pid, fn), 1e-4) << f.ps[pid].name;
}

TEST(BceLoss, Examples) {
  EXPECT_NEAR(bce_loss({1}, {0.5}), std::log(2.0), 1e-15);
  EXPECT_NEAR(bce_loss({1, 0}, {1.0, 0.0}), -std::log(1 - 1e-7), 1e-15);
  EXPECT_LT(bce_loss({1, 0}, {1.0, 0.0}), 1e-6);
  EXPECT_THROW(bce_loss({1}, {0.5, 0.5}), std::invalid_argument);
  Rng rng(4);
  std::vector<int> y;
  std::vector<double> s;
  double ref = 0.0;
  for (int i = 0; i < 500; ++i) {
    y.push_back(rng.bernoulli(0.4) ? 1 : 0);
    s.push_back(0.001 + 0.998 * rng.uniform());
    ref += y.back() ? -std::log(s.back()) : -std::log(1 - s.back());
  }
  EXPECT_NEAR(bce_loss(y, s), ref / 500, 1e-9);
}
