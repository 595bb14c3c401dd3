#pragma once

// Hierarchical transformer history encoder: embedding tables, the
// bidirectional session-level encoder producing one vector per session, and
// the causal history-level encoder producing one hidden state per session.

#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "ingestion.hpp"
#include "params.hpp"
#include "rng.hpp"

namespace nhp {

/// Timestamps enter the model as hours since the user's first event, shifted
/// by one hour so that they are strictly positive.
inline double model_time(Seconds ts, Seconds origin) { return static_cast<double>(ts - origin) / 3600.0 + 1.0; }

inline double seconds_to_hours(Seconds s) { return static_cast<double>(s) / 3600.0; }

/// Sinusoidal time encoding. With 1-based component index i the angle is
/// t / 10000^((i-1)/d); odd components take the cosine, even the sine.
inline std::vector<double> time_encoding(double t, std::size_t d) {
  if (d == 0 || d % 2 != 0) throw std::invalid_argument("time_encoding: dimension must be even and positive");
  std::vector<double> e(d);
  for (std::size_t i = 1; i <= d; ++i) {
    const double angle = t / std::pow(10000.0, static_cast<double>(i - 1) / static_cast<double>(d));
    e[i - 1] = (i % 2 == 1) ? std::cos(angle) : std::sin(angle);
  }
  return e;
}

// ---------------------------------------------------------------------------
// Vocabulary

/// Identifier -> row index. Row 0 is the out-of-vocabulary fallback.
class Vocabulary {
 public:
  std::size_t add(const std::string& key) {
    auto [it, inserted] = index_.try_emplace(key, index_.size() + 1);
    if (inserted) keys_.push_back(key);
    return it->second;
  }
  std::size_t lookup(const std::string& key) const {
    auto it = index_.find(key);
    return it == index_.end() ? 0 : it->second;
  }
  bool contains(const std::string& key) const { return index_.count(key) > 0; }
  /// Number of table rows including the fallback row.
  std::size_t rows() const { return keys_.size() + 1; }
  const std::vector<std::string>& keys() const { return keys_; }

  static Vocabulary from_keys(const std::vector<std::string>& keys) {
    Vocabulary v;
    for (const auto& k : keys) v.add(k);
    return v;
  }
  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.keys_ == b.keys_; }

 private:
  std::map<std::string, std::size_t> index_;
  std::vector<std::string> keys_;
};

struct Vocabularies {
  Vocabulary users, items, words;

  std::uint64_t fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto* v : {&users, &items, &words}) {
      for (const auto& k : v->keys()) h = fnv1a(k, fnv1a("\x1f", h));
      h = fnv1a("\x1e", h);
    }
    return h;
  }
  friend bool operator==(const Vocabularies&, const Vocabularies&) = default;
};

/// Builds vocabularies from the users, items and query words present in the
/// given session maps, in deterministic (sorted) order.
inline Vocabularies build_vocabularies(const std::vector<const SessionsByUser*>& sources) {
  std::set<std::string> users, items, words;
  for (const auto* m : sources)
    for (const auto& [u, sessions] : *m) {
      users.insert(u);
      for (const auto& s : sessions)
        for (const auto& a : s.actions) {
          if (a.item_id) items.insert(*a.item_id);
          if (a.query)
            for (const auto& w : *a.query) words.insert(w);
        }
    }
  Vocabularies v;
  for (const auto& u : users) v.users.add(u);
  for (const auto& i : items) v.items.add(i);
  for (const auto& w : words) v.words.add(w);
  return v;
}

// ---------------------------------------------------------------------------
// Encoded (index-resolved) sessions

struct EncodedAction {
  bool is_query = false;
  std::size_t item = 0;
  std::vector<std::size_t> words;
  Seconds timestamp = 0;
  bool from_search = false;  // item click on a search result
};

struct EncodedSession {
  Seconds open_time = 0;
  Seconds last_action_time = 0;
  int motivation = 0;
  double ratio_search = 0.0;
  std::vector<EncodedAction> actions;
};

inline EncodedSession encode_ids(const Session& s, const Vocabularies& vocab) {
  if (s.actions.empty()) throw std::invalid_argument("encode_ids: empty session");
  EncodedSession e;
  e.open_time = s.open_time;
  e.last_action_time = s.last_action_time();
  e.motivation = s.motivation;
  e.ratio_search = s.ratio_search;
  for (const auto& a : s.actions) {
    EncodedAction x;
    x.is_query = a.is_query();
    x.timestamp = a.timestamp;
    if (a.is_query()) {
      for (const auto& w : *a.query) x.words.push_back(vocab.words.lookup(w));
    } else {
      x.item = vocab.items.lookup(*a.item_id);
      x.from_search = a.source && *a.source == ClickSource::search_result;
    }
    e.actions.push_back(std::move(x));
  }
  return e;
}

// ---------------------------------------------------------------------------
// Parameters

struct EmbeddingTables {
  int user = -1, item = -1, word = -1, motivation = -1, interaction_type = -1;
  std::size_t d = 0;
};

inline EmbeddingTables register_tables(ParamStore& ps, const Vocabularies& vocab, std::size_t d, Rng& rng) {
  if (d == 0 || d % 2 != 0) throw std::invalid_argument("embedding dimension must be even and positive");
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  EmbeddingTables t;
  t.d = d;
  t.user = ps.add("emb.user", "tables", uniform_init(vocab.users.rows(), d, bound, rng));
  t.item = ps.add("emb.item", "tables", uniform_init(vocab.items.rows(), d, bound, rng));
  t.word = ps.add("emb.word", "tables", uniform_init(vocab.words.rows(), d, bound, rng));
  t.motivation = ps.add("emb.motivation", "tables", uniform_init(2, d, bound, rng));
  t.interaction_type = ps.add("emb.interaction_type", "tables", uniform_init(2, d, bound, rng));
  return t;
}

struct BlockParams {
  int ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b, ln2_g, ln2_b, ff1_w, ff1_b, ff2_w, ff2_b;
};

struct StackParams {
  std::vector<BlockParams> blocks;
  int lnf_g = -1, lnf_b = -1;
  std::size_t heads = 2;
  bool causal = false;
};

inline Matrix xavier(std::size_t in, std::size_t out, Rng& rng) {
  return uniform_init(in, out, std::sqrt(6.0 / static_cast<double>(in + out)), rng);
}

/// Pre-normalisation transformer blocks plus a final layer norm.
inline StackParams register_stack(ParamStore& ps, const std::string& prefix, const std::string& group, std::size_t d,
                                  std::size_t layers, std::size_t heads, std::size_t ffn_mult, bool causal, Rng& rng) {
  if (heads == 0 || d % heads != 0) throw std::invalid_argument(prefix + ": d must be divisible by the head count");
  StackParams sp;
  sp.heads = heads;
  sp.causal = causal;
  const std::size_t ff = ffn_mult * d;
  for (std::size_t l = 0; l < layers; ++l) {
    const std::string p = prefix + "." + std::to_string(l) + ".";
    BlockParams b{};
    b.ln1_g = ps.add(p + "ln1.g", group, Matrix(1, d, 1.0));
    b.ln1_b = ps.add(p + "ln1.b", group, Matrix(1, d));
    b.qkv_w = ps.add(p + "qkv.w", group, xavier(d, 3 * d, rng));
    b.qkv_b = ps.add(p + "qkv.b", group, Matrix(1, 3 * d));
    b.out_w = ps.add(p + "out.w", group, xavier(d, d, rng));
    b.out_b = ps.add(p + "out.b", group, Matrix(1, d));
    b.ln2_g = ps.add(p + "ln2.g", group, Matrix(1, d, 1.0));
    b.ln2_b = ps.add(p + "ln2.b", group, Matrix(1, d));
    b.ff1_w = ps.add(p + "ff1.w", group, xavier(d, ff, rng));
    b.ff1_b = ps.add(p + "ff1.b", group, Matrix(1, ff));
    b.ff2_w = ps.add(p + "ff2.w", group, xavier(ff, d, rng));
    b.ff2_b = ps.add(p + "ff2.b", group, Matrix(1, d));
    sp.blocks.push_back(b);
  }
  if (layers > 0) {
    sp.lnf_g = ps.add(prefix + ".lnf.g", group, Matrix(1, d, 1.0));
    sp.lnf_b = ps.add(prefix + ".lnf.b", group, Matrix(1, d));
  }
  return sp;
}

// ---------------------------------------------------------------------------
// Forward building blocks (tape level)

/// x -> L blocks of [x + Attn(LN(x))] and [x + FFN(LN(x))], then LN.
inline ad::Var run_stack(ad::Tape& t, const StackParams& sp, ad::Var x) {
  using namespace ad;
  for (const auto& b : sp.blocks) {
    Var a = layer_norm(t, x, t.param(b.ln1_g), t.param(b.ln1_b));
    Var qkv = linear(t, a, t.param(b.qkv_w), t.param(b.qkv_b));
    Var att = self_attention(t, qkv, sp.heads, sp.causal);
    x = add(t, x, linear(t, att, t.param(b.out_w), t.param(b.out_b)));
    Var c = layer_norm(t, x, t.param(b.ln2_g), t.param(b.ln2_b));
    Var f = activation(t, linear(t, c, t.param(b.ff1_w), t.param(b.ff1_b)), Activation::gelu);
    x = add(t, x, linear(t, f, t.param(b.ff2_w), t.param(b.ff2_b)));
  }
  if (sp.lnf_g >= 0) x = layer_norm(t, x, t.param(sp.lnf_g), t.param(sp.lnf_b));
  return x;
}

/// Session input matrix E = E^s + E^t + E^b as one fused node: content row
/// (item embedding, or mean word embedding for a query) plus time encoding
/// plus interaction-type embedding. Keeps the most recent max_actions.
inline ad::Var assemble_session(ad::Tape& t, const EmbeddingTables& tables, const EncodedSession& s, Seconds origin,
                                std::size_t max_actions) {
  const std::size_t d = tables.d;
  const std::size_t n_all = s.actions.size();
  if (n_all == 0) throw std::invalid_argument("assemble_session: empty session");
  const std::size_t first = (max_actions > 0 && n_all > max_actions) ? n_all - max_actions : 0;
  const std::size_t n = n_all - first;
  const ParamStore& ps = t.params();
  const Matrix& items = ps.value(tables.item);
  const Matrix& words = ps.value(tables.word);
  const Matrix& itype = ps.value(tables.interaction_type);
  Matrix out(n, d);
  for (std::size_t r = 0; r < n; ++r) {
    const auto& a = s.actions[first + r];
    auto row = out.row(r);
    if (a.is_query) {
      if (a.words.empty()) throw std::invalid_argument("assemble_session: query without words");
      const double inv = 1.0 / static_cast<double>(a.words.size());
      for (auto w : a.words) {
        auto src = words.row(w);
        for (std::size_t j = 0; j < d; ++j) row[j] += src[j] * inv;
      }
    } else {
      auto src = items.row(a.item);
      for (std::size_t j = 0; j < d; ++j) row[j] += src[j];
    }
    const auto te = time_encoding(model_time(a.timestamp, origin), d);
    auto b = itype.row(a.is_query ? 1 : 0);
    for (std::size_t j = 0; j < d; ++j) row[j] += te[j] + b[j];
  }
  std::vector<EncodedAction> kept(s.actions.begin() + static_cast<std::ptrdiff_t>(first), s.actions.end());
  return t.push(std::move(out), [kept = std::move(kept), n, tables](ad::Tape& tp, int self) {
    const Matrix& g = tp.grad_of(self);
    GradStore& sink = tp.sink();
    Matrix& gi = sink[tables.item];
    Matrix& gw = sink[tables.word];
    Matrix& gb = sink[tables.interaction_type];
    const std::size_t d = g.cols();
    for (std::size_t r = 0; r < n; ++r) {
      const auto& a = kept[r];
      auto gr = g.row(r);
      if (a.is_query) {
        const double inv = 1.0 / static_cast<double>(a.words.size());
        for (auto w : a.words) {
          auto dst = gw.row(w);
          for (std::size_t j = 0; j < d; ++j) dst[j] += gr[j] * inv;
        }
      } else {
        auto dst = gi.row(a.item);
        for (std::size_t j = 0; j < d; ++j) dst[j] += gr[j];
      }
      auto dst = gb.row(a.is_query ? 1 : 0);
      for (std::size_t j = 0; j < d; ++j) dst[j] += gr[j];
    }
  });
}

/// v_n = MEAN(Encoder(E_n)).
inline ad::Var encode_session(ad::Tape& t, const StackParams& sp, ad::Var session_matrix) {
  return ad::mean_rows(t, run_stack(t, sp, session_matrix));
}

/// Input row of the history-level encoder: v_n + e_{m,n} + e_{t,n}.
inline ad::Var history_input_row(ad::Tape& t, const EmbeddingTables& tables, ad::Var v, int motivation, double time) {
  ad::Var em = ad::gather(t, tables.motivation, {static_cast<std::size_t>(motivation)});
  const auto te = time_encoding(time, tables.d);
  ad::Var et = t.constant(Matrix::row_vector(te));
  return ad::add(t, ad::add(t, v, em), et);
}

// ---------------------------------------------------------------------------
// Value-level API

/// Mean of the word-embedding rows of a query; unknown tokens use row 0.
inline std::vector<double> embed_query(const std::vector<std::string>& tokens, const Matrix& word_table,
                                       const Vocabulary& words) {
  if (tokens.empty()) throw std::invalid_argument("embed_query: empty token list");
  std::vector<double> out(word_table.cols(), 0.0);
  for (const auto& tok : tokens) {
    auto r = word_table.row(words.lookup(tok));
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += r[j];
  }
  for (double& v : out) v /= static_cast<double>(tokens.size());
  return out;
}

}  // namespace nhp
