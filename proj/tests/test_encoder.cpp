#include <gtest/gtest.h>

#include <cmath>

#include "nhp_oam/encoder.hpp"
#include "test_util.hpp"

using namespace nhp;
using nhp::testing::fd_rel_error;

namespace {

struct Fixture {
  ParamStore ps;
  Vocabularies vocab;
  EmbeddingTables tables;
  StackParams session, history;
  std::size_t d;

  explicit Fixture(std::size_t d_ = 8, std::size_t layers = 2, std::uint64_t seed = 3) : d(d_) {
    for (int i = 0; i < 4; ++i) {
      vocab.items.add("i" + std::to_string(i));
      vocab.words.add("w" + std::to_string(i));
      vocab.users.add("u" + std::to_string(i));
    }
    Rng rng(seed);
    tables = register_tables(ps, vocab, d, rng);
    session = register_stack(ps, "s", "session_encoder", d, layers, 2, 4, false, rng);
    history = register_stack(ps, "h", "history_decoder", d, layers, 2, 4, true, rng);
  }
};

EncodedSession make_session(Seconds open, std::vector<std::pair<bool, std::vector<std::size_t>>> acts) {
  EncodedSession s;
  s.open_time = open;
  Seconds t = open;
  for (auto& [q, ids] : acts) {
    EncodedAction a;
    a.is_query = q;
    a.timestamp = t;
    if (q)
      a.words = ids;
    else
      a.item = ids.front();
    s.actions.push_back(a);
    t += 20;
  }
  s.last_action_time = s.actions.back().timestamp;
  return s;
}

}  // namespace

TEST(TimeEncoding, Examples) {
  const auto e0 = time_encoding(0.0, 4);
  EXPECT_EQ(e0, (std::vector<double>{1, 0, 1, 0}));
  const auto e1 = time_encoding(1.0, 2);
  EXPECT_NEAR(e1[0], std::cos(1.0), 1e-15);
  EXPECT_NEAR(e1[1], std::sin(1.0 / 100.0), 1e-15);
  EXPECT_NEAR(e1[0], 0.5403, 1e-4);
  EXPECT_NEAR(e1[1], 0.0100, 1e-4);
  for (double t : {0.3, 17.0, 1234.5, 1e7})
    for (double v : time_encoding(t, 32)) {
      EXPECT_GE(v, -1.0);
      EXPECT_LE(v, 1.0);
    }
  EXPECT_THROW(time_encoding(1.0, 3), std::invalid_argument);
}

TEST(TimeEncoding, HoursSinceFirstEventPlusOne) {
  EXPECT_DOUBLE_EQ(model_time(1000, 1000), 1.0);
  EXPECT_DOUBLE_EQ(model_time(1000 + 7200, 1000), 3.0);
}

TEST(EmbedQuery, Examples) {
  Fixture s;
  const Matrix& W = s.ps.value(s.tables.word);
  const auto r1 = embed_query({"w1"}, W, s.vocab.words);
  for (std::size_t j = 0; j < s.d; ++j) EXPECT_EQ(r1[j], W(s.vocab.words.lookup("w1"), j));
  EXPECT_EQ(embed_query({"w2", "w2"}, W, s.vocab.words), embed_query({"w2"}, W, s.vocab.words));
  const auto r3 = embed_query({"w0", "w3", "unknown"}, W, s.vocab.words);
  for (std::size_t j = 0; j < s.d; ++j)
    EXPECT_NEAR(r3[j], (W(s.vocab.words.lookup("w0"), j) + W(s.vocab.words.lookup("w3"), j) + W(0, j)) / 3.0, 1e-12);
  EXPECT_THROW(embed_query({}, W, s.vocab.words), std::invalid_argument);
  EXPECT_EQ(s.vocab.words.lookup("unknown"), 0u);
}

TEST(AssembleSession, ZeroTablesGivePureTimeEncodings) {
  Fixture s;
  for (int id : {s.tables.item, s.tables.word, s.tables.interaction_type}) s.ps.value(id).zero();
  const auto sess = make_session(3600, {{false, {1}}, {true, {2, 3}}});
  ad::Tape t(&s.ps, false);
  const Matrix& E = t.value(assemble_session(t, s.tables, sess, 0, 20));
  ASSERT_EQ(E.rows(), 2u);
  for (std::size_t r = 0; r < 2; ++r) {
    const auto te = time_encoding(model_time(sess.actions[r].timestamp, 0), s.d);
    for (std::size_t j = 0; j < s.d; ++j) EXPECT_DOUBLE_EQ(E(r, j), te[j]);
  }
}

TEST(AssembleSession, RowIsSumOfThreeEmbeddings) {
  Fixture s;
  const auto sess = make_session(7200, {{true, {1, 2}}, {false, {3}}, {false, {4}}});
  ad::Tape t(&s.ps, false);
  const Matrix& E = t.value(assemble_session(t, s.tables, sess, 3600, 20));
  const Matrix& W = s.ps.value(s.tables.word);
  const Matrix& I = s.ps.value(s.tables.item);
  const Matrix& B = s.ps.value(s.tables.interaction_type);
  for (std::size_t r = 0; r < 3; ++r) {
    const auto& a = sess.actions[r];
    const auto te = time_encoding(model_time(a.timestamp, 3600), s.d);
    for (std::size_t j = 0; j < s.d; ++j) {
      const double content = a.is_query ? (W(1, j) + W(2, j)) / 2.0 : I(a.item, j);
      EXPECT_NEAR(E(r, j), content + te[j] + B(a.is_query ? 1 : 0, j), 1e-12);
    }
  }
  const auto one = make_session(0, {{false, {1}}});
  EXPECT_EQ(t.value(assemble_session(t, s.tables, one, 0, 20)).rows(), 1u);
}

TEST(AssembleSession, TruncatesToMostRecentActions) {
  Fixture s;
  const auto sess = make_session(0, {{false, {1}}, {false, {2}}, {false, {3}}, {true, {1}}});
  ad::Tape t(&s.ps, false);
  const Matrix& full = t.value(assemble_session(t, s.tables, sess, 0, 20));
  const Matrix& cut = t.value(assemble_session(t, s.tables, sess, 0, 2));
  ASSERT_EQ(cut.rows(), 2u);
  for (std::size_t j = 0; j < s.d; ++j) {
    EXPECT_EQ(cut(0, j), full(2, j));
    EXPECT_EQ(cut(1, j), full(3, j));
  }
}

TEST(EncodeSession, NoBlocksMeansMeanOfRows) {
  Fixture s(8, 0);
  Matrix E(3, 8);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 8; ++j) E(r, j) = 0.1 * static_cast<double>(j) - 0.2;
  ad::Tape t(&s.ps, false);
  const Matrix& v = t.value(encode_session(t, s.session, t.constant(E)));
  for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(v[j], E(0, j), 1e-15);
}

TEST(EncodeSession, PermutationInvariantForBidirectionalEncoder) {
  Fixture s;
  Rng rng(6);
  Matrix E = uniform_init(3, s.d, 1.0, rng), P = E;
  for (std::size_t j = 0; j < s.d; ++j) std::swap(P(0, j), P(2, j));
  ad::Tape t(&s.ps, false);
  const Matrix& a = t.value(encode_session(t, s.session, t.constant(E)));
  const Matrix& b = t.value(encode_session(t, s.session, t.constant(P)));
  for (std::size_t j = 0; j < s.d; ++j) EXPECT_NEAR(a[j], b[j], 1e-12);
}

TEST(EncodeSession, GradientOfSquaredNormMatchesFiniteDifferences) {
  Fixture s;
  Rng rng(7);
  const int input = s.ps.add("input", "input", uniform_init(3, s.d, 1.0, rng));
  auto f = [&](ad::Tape& t) {
    ad::Var v = encode_session(t, s.session, t.param(input));
    return ad::dot(t, v, v);
  };
  EXPECT_LT(fd_rel_error(s.ps, input, f), 1e-4);
  for (int pid = 0; pid < static_cast<int>(s.ps.size()); ++pid)
    if (s.ps[pid].group == "session_encoder") EXPECT_LT(fd_rel_error(s.ps, pid, f), 1e-4) << s.ps[pid].name;
}

namespace {

// History-level hidden states over sessions via the model-time input rows.
Matrix history_states(Fixture& s, const std::vector<EncodedSession>& ss, ad::Tape& t) {
  std::vector<ad::Var> rows;
  for (const auto& x : ss) {
    ad::Var v = encode_session(t, s.session, assemble_session(t, s.tables, x, ss.front().open_time, 20));
    rows.push_back(history_input_row(t, s.tables, v, x.motivation, model_time(x.open_time, ss.front().open_time)));
  }
  return t.value(run_stack(t, s.history, ad::stack_rows(t, rows)));
}

}  // namespace

TEST(EncodeHistory, CausalityBitExact) {
  Fixture s;
  std::vector<EncodedSession> ss = {make_session(0, {{true, {1}}, {false, {2}}}), make_session(9000, {{false, {3}}}),
                                    make_session(20000, {{false, {1}}, {false, {4}}})};
  ss[1].motivation = 1;
  ad::Tape t1(&s.ps, false);
  const Matrix H = history_states(s, ss, t1);
  auto changed = ss;
  changed[2] = make_session(30000, {{true, {2, 3}}, {true, {4}}, {false, {1}}});
  changed[2].motivation = 1;
  ad::Tape t2(&s.ps, false);
  const Matrix H2 = history_states(s, changed, t2);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t j = 0; j < s.d; ++j) EXPECT_EQ(H(r, j), H2(r, j));
  bool differs = false;
  for (std::size_t j = 0; j < s.d; ++j) differs |= H(2, j) != H2(2, j);
  EXPECT_TRUE(differs);
  ad::Tape t3(&s.ps, false);
  EXPECT_EQ(history_states(s, {ss[0]}, t3).rows(), 1u);
}

TEST(EncodeHistory, GradientCheckSmallInstance) {
  Fixture s;
  std::vector<EncodedSession> ss = {make_session(0, {{true, {1, 2}}, {false, {2}}}), make_session(9000, {{false, {3}}}),
                                    make_session(20000, {{false, {1}}, {true, {4}}, {false, {2}}})};
  ss[0].motivation = 1;
  auto f = [&](ad::Tape& t) {
    std::vector<ad::Var> rows;
    for (const auto& x : ss) {
      ad::Var v = encode_session(t, s.session, assemble_session(t, s.tables, x, 0, 20));
      rows.push_back(history_input_row(t, s.tables, v, x.motivation, model_time(x.open_time, 0)));
    }
    ad::Var H = run_stack(t, s.history, ad::stack_rows(t, rows));
    ad::Var m = ad::mean_rows(t, H);
    return ad::dot(t, m, ad::row(t, H, 2));
  };
  for (int pid = 0; pid < static_cast<int>(s.ps.size()); ++pid) EXPECT_LT(fd_rel_error(s.ps, pid, f), 1e-4) << s.ps[pid].name;
}

TEST(EncodeHistory, DeterministicAndFinite) {
  Fixture a(8, 2, 11), b(8, 2, 11);
  std::vector<EncodedSession> ss = {make_session(0, {{true, {1}}}), make_session(5000, {{false, {2}}})};
  ad::Tape t1(&a.ps, false), t2(&b.ps, false);
  const Matrix H1 = history_states(a, ss, t1), H2 = history_states(b, ss, t2);
  EXPECT_EQ(H1, H2);
  EXPECT_TRUE(H1.all_finite());
}

TEST(Vocabulary, FallbackRowAndFingerprint) {
  Vocabulary v;
  EXPECT_EQ(v.add("a"), 1u);
  EXPECT_EQ(v.add("b"), 2u);
  EXPECT_EQ(v.add("a"), 1u);
  EXPECT_EQ(v.lookup("zzz"), 0u);
  EXPECT_EQ(v.rows(), 3u);
  Vocabularies x, y;
  x.items = v;
  y.items = Vocabulary::from_keys({"a", "b"});
  EXPECT_EQ(x.fingerprint(), y.fingerprint());
  y.words.add("a");
  EXPECT_NE(x.fingerprint(), y.fingerprint());
}
