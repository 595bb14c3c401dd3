#include <gtest/gtest.h>

#include <cmath>

#include "nhp_oam/autodiff.hpp"
#include "nhp_oam/params.hpp"
#include "test_util.hpp"

using namespace nhp;
using nhp::testing::fd_rel_error;

namespace {

struct Fixture {
  ParamStore ps;
  Rng rng{17};
  int add(const std::string& name, std::size_t r, std::size_t c) { return ps.add(name, "g", uniform_init(r, c, 1.0, rng)); }
};

}  // namespace

TEST(Matrix, MatmulAgainstLoops) {
  Rng rng(1);
  Matrix a = uniform_init(3, 4, 1.0, rng), b = uniform_init(4, 5, 1.0, rng);
  Matrix c = matmul(a, b);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 4; ++k) s += a(i, k) * b(k, j);
      EXPECT_NEAR(c(i, j), s, 1e-12);
    }
  Matrix tn(4, 5), nt(3, 4);
  gemm_tn_acc(a, matmul(a, b), tn);  // a^T (a b)
  gemm_nt_acc(c, b, nt);             // (a b) b^T
  Matrix ata = matmul(a, b);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 3; ++k) s += a(k, i) * ata(k, j);
      EXPECT_NEAR(tn(i, j), s, 1e-12);
    }
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 5; ++k) s += c(i, k) * b(j, k);
      EXPECT_NEAR(nt(i, j), s, 1e-12);
    }
}

TEST(Autodiff, ScalarFunctionsMatchReference) {
  EXPECT_NEAR(ad::softplus(0.0), std::log(2.0), 1e-15);
  EXPECT_NEAR(ad::softplus(50.0), 50.0, 1e-12);
  EXPECT_NEAR(ad::sigmoid(-800.0), 0.0, 1e-300);
  EXPECT_NEAR(ad::gelu(1.0), 0.5 * (1 + std::erf(1 / std::sqrt(2.0))), 1e-15);
  const double h = 1e-6;
  for (double x : {-2.0, -0.3, 0.0, 0.7, 3.0}) {
    EXPECT_NEAR(ad::gelu_grad(x), (ad::gelu(x + h) - ad::gelu(x - h)) / (2 * h), 1e-8);
    EXPECT_NEAR(ad::activate_grad(ad::Activation::tanh, x), 1 - std::tanh(x) * std::tanh(x), 1e-12);
  }
}

TEST(Autodiff, ElementwiseAndBroadcastGradients) {
  Fixture f;
  const int a = f.add("a", 3, 4), b = f.add("b", 1, 4), s = f.add("s", 1, 1);
  auto fn = [&](ad::Tape& t) {
    ad::Var x = ad::add(t, t.param(a), t.param(b));
    x = ad::mul(t, x, t.param(s));
    x = ad::mul(t, x, ad::sigmoid(t, t.param(a)));
    x = ad::softplus(t, ad::activation(t, x, ad::Activation::gelu));
    x = ad::log(t, ad::affine(t, x, 2.0, 0.5));
    return ad::sum(t, x);
  };
  for (int p : {a, b, s}) EXPECT_LT(fd_rel_error(f.ps, p, fn), 1e-6);
}

TEST(Autodiff, LinearLayerNormAttentionGradients) {
  Fixture f;
  const int x = f.add("x", 4, 6), w = f.add("w", 6, 18), bias = f.add("bias", 1, 18), g = f.add("g", 1, 6), lb = f.add("lb", 1, 6);
  for (bool causal : {false, true}) {
    auto fn = [&](ad::Tape& t) {
      ad::Var n = ad::layer_norm(t, t.param(x), t.param(g), t.param(lb));
      ad::Var qkv = ad::linear(t, n, t.param(w), t.param(bias));
      ad::Var y = ad::self_attention(t, qkv, 2, causal);
      ad::Var m = ad::mean_rows(t, ad::activation(t, y, ad::Activation::tanh));
      return ad::dot(t, m, m);
    };
    for (int p : {x, w, bias, g, lb}) EXPECT_LT(fd_rel_error(f.ps, p, fn), 1e-6) << "param " << p << " causal " << causal;
  }
}

TEST(Autodiff, StructuralOpsGradients) {
  Fixture f;
  const int a = f.add("a", 2, 3), b = f.add("b", 2, 2), tab = f.add("tab", 5, 3), rhs = f.add("rhs", 3, 4);
  auto fn = [&](ad::Tape& t) {
    ad::Var c = ad::concat_cols(t, t.param(a), t.param(b));
    ad::Var r = ad::row(t, c, 1);
    ad::Var gth = ad::gather(t, tab, {0, 3, 3});
    ad::Var st = ad::stack_rows(t, {t.param(a), gth});
    ad::Var mm = ad::matmul(t, ad::activation(t, st, ad::Activation::tanh), t.param(rhs));
    return ad::weighted_sum(t, {ad::sum(t, mm), ad::dot(t, r, r)}, {0.3, -1.2});
  };
  for (int p : {a, b, tab, rhs}) EXPECT_LT(fd_rel_error(f.ps, p, fn), 1e-6);
}

TEST(Autodiff, BceMatchesDirectSum) {
  Fixture f;
  const int s = f.add("s", 5, 1);
  const std::vector<double> labels{1, 0, 1, 1, 0};
  auto fn = [&](ad::Tape& t) { return ad::bce(t, ad::sigmoid(t, t.param(s)), labels); };
  ad::Tape t(&f.ps, false);
  double ref = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    const double p = ad::sigmoid(f.ps.value(s)[i]);
    ref -= labels[i] * std::log(p) + (1 - labels[i]) * std::log(1 - p);
  }
  EXPECT_NEAR(t.item(fn(t)), ref / 5, 1e-12);
  EXPECT_LT(fd_rel_error(f.ps, s, fn), 1e-6);
}

TEST(Autodiff, CausalAttentionIgnoresFutureRows) {
  Rng rng(4);
  Matrix qkv = uniform_init(4, 12, 1.0, rng);
  Matrix changed = qkv;
  for (std::size_t j = 0; j < 12; ++j) changed(3, j) += 0.5;
  ad::Tape t1(nullptr, false), t2(nullptr, false);
  const Matrix& y1 = t1.value(ad::self_attention(t1, t1.constant(qkv), 2, true));
  const Matrix& y2 = t2.value(ad::self_attention(t2, t2.constant(changed), 2, true));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(y1(i, j), y2(i, j));
}

TEST(Adam, StepMatchesReferenceFormula) {
  ParamStore ps;
  const int p = ps.add("p", "g", Matrix::row_vector({1.0, -2.0}));
  GradStore g(ps);
  Adam adam(ps, {0.01, 0.9, 0.999, 1e-8});
  double m0 = 0, v0 = 0, x0 = 1.0;
  for (int step = 1; step <= 3; ++step) {
    const double grad = 0.5 * step;
    g[p] = Matrix::row_vector({grad, -grad});
    adam.step(ps, g);
    m0 = 0.9 * m0 + 0.1 * grad;
    v0 = 0.999 * v0 + 0.001 * grad * grad;
    const double mh = m0 / (1 - std::pow(0.9, step)), vh = v0 / (1 - std::pow(0.999, step));
    x0 -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
    EXPECT_NEAR(ps.value(p)[0], x0, 1e-12);
  }
}

TEST(Adam, ZeroLearningRateLeavesParameters) {
  ParamStore ps;
  const int p = ps.add("p", "g", Matrix::row_vector({0.25, 3.0}));
  const Matrix before = ps.value(p);
  GradStore g(ps);
  g[p] = Matrix::row_vector({1.0, -4.0});
  Adam adam(ps, {0.0, 0.9, 0.999, 1e-8});
  for (int i = 0; i < 5; ++i) adam.step(ps, g);
  EXPECT_EQ(ps.value(p), before);
}

TEST(Adam, GlobalNormClipping) {
  ParamStore ps;
  const int p = ps.add("p", "g", Matrix(1, 2));
  GradStore g(ps);
  g[p] = Matrix::row_vector({30.0, 40.0});
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 5.0), 50.0);
  EXPECT_NEAR(g.norm(), 5.0, 1e-12);
  EXPECT_NEAR(g[p][0], 3.0, 1e-12);
  g[p] = Matrix::row_vector({0.3, 0.4});
  clip_global_norm(g, 5.0);
  EXPECT_DOUBLE_EQ(g[p][1], 0.4);
}
