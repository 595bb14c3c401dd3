#pragma once

// Prediction layer: relative-time gate over long-term (h_N) and short-term
// (v_N) intent, fusion, and the final score sigma(MLP([z ; u]) + r_N).

#include <cmath>
#include <stdexcept>
#include <vector>

#include "autodiff.hpp"
#include "encoder.hpp"
#include "params.hpp"

namespace nhp {

struct PredictorConfig {
  ad::Activation phi = ad::Activation::gelu;
  bool use_time_gate = true;
  bool use_user_embedding = true;
};

struct PredictorParams {
  int w_l = -1, w_s = -1;
  int mlp1_w = -1, mlp1_b = -1, mlp2_w = -1, mlp2_b = -1;
  std::size_t d = 0;
  PredictorConfig cfg;
};

inline PredictorParams register_predictor(ParamStore& ps, std::size_t d, const PredictorConfig& cfg, Rng& rng) {
  PredictorParams pp;
  pp.d = d;
  pp.cfg = cfg;
  pp.w_l = ps.add("predictor.W_l", "W_l", xavier(d, d, rng));
  pp.w_s = ps.add("predictor.W_s", "W_s", xavier(d, d, rng));
  pp.mlp1_w = ps.add("predictor.mlp1.w", "mlp", xavier(2 * d, d, rng));
  pp.mlp1_b = ps.add("predictor.mlp1.b", "mlp", Matrix(1, d));
  pp.mlp2_w = ps.add("predictor.mlp2.w", "mlp", xavier(d, 1, rng));
  pp.mlp2_b = ps.add("predictor.mlp2.b", "mlp", Matrix(1, 1));
  return pp;
}

/// Gap between the last action of the final session and the prediction
/// time, in hours.
inline double relative_time(Seconds t_next, Seconds last_action_time) {
  if (t_next < last_action_time) throw std::invalid_argument("relative_time: prediction time precedes the last action");
  return seconds_to_hours(t_next - last_action_time);
}

/// g = sigmoid(h W_l + v W_s + enc), enc given explicitly.
inline ad::Var gate_with_encoding(ad::Tape& t, const PredictorParams& pp, ad::Var h, ad::Var v, const Matrix& enc) {
  ad::Var pre = ad::add(t, ad::matmul(t, h, t.param(pp.w_l)), ad::matmul(t, v, t.param(pp.w_s)));
  return ad::sigmoid(t, ad::add(t, pre, t.constant(enc)));
}

inline ad::Var gate(ad::Tape& t, const PredictorParams& pp, ad::Var h, ad::Var v, double delta_t) {
  if (!pp.cfg.use_time_gate) return t.constant(Matrix(1, pp.d, 0.5));
  return gate_with_encoding(t, pp, h, v, Matrix::row_vector(time_encoding(delta_t, pp.d)));
}

/// z = g * v + (1 - g) * h.
inline ad::Var fuse(ad::Tape& t, ad::Var h, ad::Var v, ad::Var g) {
  return ad::add(t, ad::mul(t, g, v), ad::mul(t, ad::affine(t, g, -1.0, 1.0), h));
}

inline ad::Var mlp_logit(ad::Tape& t, const PredictorParams& pp, ad::Var z, ad::Var u) {
  ad::Var x = ad::concat_cols(t, z, u);
  ad::Var hid = ad::activation(t, ad::linear(t, x, t.param(pp.mlp1_w), t.param(pp.mlp1_b)), pp.cfg.phi);
  return ad::linear(t, hid, t.param(pp.mlp2_w), t.param(pp.mlp2_b));
}

/// sigmoid(MLP([z ; u]) + r_N); r_N is a 1 x 1 node.
inline ad::Var predict_motivation(ad::Tape& t, const PredictorParams& pp, ad::Var z, ad::Var u, ad::Var r_n) {
  return ad::sigmoid(t, ad::add(t, mlp_logit(t, pp, z, u), r_n));
}

/// User row for the prediction layer (zeros when the user embedding is off).
inline ad::Var user_vector(ad::Tape& t, const PredictorParams& pp, const EmbeddingTables& tables, std::size_t user_row) {
  if (!pp.cfg.use_user_embedding) return t.constant(Matrix(1, pp.d));
  return ad::gather(t, tables.user, {user_row});
}

/// Mean binary cross-entropy with scores clamped to [1e-7, 1 - 1e-7].
inline double bce_loss(const std::vector<int>& labels, const std::vector<double>& scores, double clamp = 1e-7) {
  if (labels.size() != scores.size()) throw std::invalid_argument("bce_loss: length mismatch");
  if (labels.empty()) throw std::invalid_argument("bce_loss: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double s = std::min(std::max(scores[i], clamp), 1.0 - clamp);
    total += labels[i] ? std::log(s) : std::log(1.0 - s);
  }
  return -total / static_cast<double>(labels.size());
}

}  // namespace nhp
