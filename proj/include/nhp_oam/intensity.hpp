#pragma once

// Type-specific conditional intensity, mark density and the Monte Carlo
// integrated point-process likelihood.
//
//   lambda_m(t) = softplus( alpha_m (t - t_n) / t_n + phi(w . h(t_n)) + r_m )
//
// where r_m is the batch-normalised in-session ratio for mark m (1 = search,
// 0 = recommendation). Between events the conditioning state is frozen at the
// most recent event.

#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "params.hpp"
#include "rng.hpp"

namespace nhp {

inline constexpr int kMarkReco = 0;
inline constexpr int kMarkSearch = 1;

// ---------------------------------------------------------------------------
// Ratio normalisation

enum class NormMode { train, eval };

/// Running statistics of the two ratio channels (index = mark).
struct RatioNormState {
  std::array<double, 2> running_mean{0.0, 0.0};
  std::array<double, 2> running_var{1.0, 1.0};
  double momentum = 0.1;
  double epsilon = 1e-5;
  friend bool operator==(const RatioNormState&, const RatioNormState&) = default;
};

/// Channel values of a session ratio: {ratio_reco, ratio_search}.
inline std::array<double, 2> ratio_channels(double ratio_search) { return {1.0 - ratio_search, ratio_search}; }

struct ChannelStats {
  std::array<double, 2> mean{0.0, 0.0};
  std::array<double, 2> var{0.0, 0.0};  // biased
  std::size_t n = 0;
};

inline ChannelStats batch_statistics(const std::vector<double>& ratio_search) {
  ChannelStats st;
  st.n = ratio_search.size();
  if (st.n == 0) return st;
  for (double r : ratio_search) {
    const auto c = ratio_channels(r);
    st.mean[0] += c[0];
    st.mean[1] += c[1];
  }
  for (auto& m : st.mean) m /= static_cast<double>(st.n);
  for (double r : ratio_search) {
    const auto c = ratio_channels(r);
    for (int k = 0; k < 2; ++k) st.var[k] += (c[k] - st.mean[k]) * (c[k] - st.mean[k]);
  }
  for (auto& v : st.var) v /= static_cast<double>(st.n);
  return st;
}

/// Folds batch statistics into the running state (unbiased variance).
inline void update_running(RatioNormState& state, const ChannelStats& st) {
  if (st.n == 0) return;
  const double unbias = st.n > 1 ? static_cast<double>(st.n) / static_cast<double>(st.n - 1) : 1.0;
  for (int k = 0; k < 2; ++k) {
    state.running_mean[k] = (1.0 - state.momentum) * state.running_mean[k] + state.momentum * st.mean[k];
    state.running_var[k] = (1.0 - state.momentum) * state.running_var[k] + state.momentum * st.var[k] * unbias;
  }
}

/// Standardised (pre-affine) channels of one ratio under given statistics.
inline std::array<double, 2> standardize(double ratio_search, const std::array<double, 2>& mean,
                                         const std::array<double, 2>& var, double eps) {
  const auto c = ratio_channels(ratio_search);
  return {(c[0] - mean[0]) / std::sqrt(var[0] + eps), (c[1] - mean[1]) / std::sqrt(var[1] + eps)};
}

inline std::array<double, 2> standardize_eval(double ratio_search, const RatioNormState& s) {
  return standardize(ratio_search, s.running_mean, s.running_var, s.epsilon);
}

/// Batch normalisation of one channel of raw ratios, affine included. Train
/// mode uses the batch statistics and updates the running state; eval mode
/// uses the running state.
inline std::vector<double> normalize_ratio_batch(const std::vector<double>& raw, RatioNormState& state, NormMode mode,
                                                 int channel, double scale, double shift) {
  std::vector<double> out;
  out.reserve(raw.size());
  if (mode == NormMode::train) {
    // The batch is given as values of the requested channel; convert so the
    // two channels stay consistent.
    std::vector<double> rs;
    for (double x : raw) rs.push_back(channel == kMarkSearch ? x : 1.0 - x);
    const auto st = batch_statistics(rs);
    for (double x : rs) out.push_back(standardize(x, st.mean, st.var, state.epsilon)[channel] * scale + shift);
    update_running(state, st);
  } else {
    for (double x : raw) out.push_back(standardize_eval(channel == kMarkSearch ? x : 1.0 - x, state)[channel] * scale + shift);
  }
  return out;
}

/// Eval-mode normalisation of a single raw ratio value of the given channel.
inline double normalize_ratio(double raw, const RatioNormState& state, int channel, double scale, double shift) {
  if (!(raw >= 0.0 && raw <= 1.0)) throw std::invalid_argument("normalize_ratio: raw ratio must be in [0,1]");
  const double rs = channel == kMarkSearch ? raw : 1.0 - raw;
  return standardize_eval(rs, state)[channel] * scale + shift;
}

// ---------------------------------------------------------------------------
// Parameters

struct IntensityConfig {
  std::array<double, 2> alpha{0.1, 0.1};  // indexed by mark
  ad::Activation phi = ad::Activation::gelu;
  bool use_ratio = true;
};

struct IntensityParams {
  int w = -1;      // 1 x d
  int gamma = -1;  // 1 x 2 ratio-norm scale
  int beta = -1;   // 1 x 2 ratio-norm shift
  int h0 = -1;     // 1 x d initial state for the first event
  IntensityConfig cfg;
};

inline IntensityParams register_intensity(ParamStore& ps, std::size_t d, const IntensityConfig& cfg, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  IntensityParams ip;
  ip.cfg = cfg;
  ip.w = ps.add("intensity.w", "intensity_w", uniform_init(1, d, bound, rng));
  ip.gamma = ps.add("ratio_norm.gamma", "ratio_norm", Matrix(1, 2, 1.0));
  ip.beta = ps.add("ratio_norm.beta", "ratio_norm", Matrix(1, 2, 0.0));
  ip.h0 = ps.add("intensity.h0", "h0", uniform_init(1, d, bound, rng));
  return ip;
}

// ---------------------------------------------------------------------------
// Tape-level

/// Conditioning for intensities after an event at model time t_prev.
struct Conditioning {
  ad::Var h;
  double t_prev = 1.0;
  std::array<double, 2> xhat{0.0, 0.0};  // standardised ratio channels; zeros when no ratio is observed
};

/// Normalised ratio term r (1 x 2) = gamma * xhat + beta.
inline ad::Var ratio_term(ad::Tape& t, const IntensityParams& ip, const std::array<double, 2>& xhat) {
  return ad::add(t, ad::mul(t, t.constant(Matrix::row_vector({xhat[0], xhat[1]})), t.param(ip.gamma)), t.param(ip.beta));
}

/// K x 2 matrix of lambda_m(times[k]) for both marks.
inline ad::Var intensities(ad::Tape& t, const IntensityParams& ip, const Conditioning& c, const std::vector<double>& times) {
  if (!(c.t_prev > 0.0)) throw std::invalid_argument("intensity: conditioning time must be positive");
  Matrix interp(times.size(), 2);
  for (std::size_t k = 0; k < times.size(); ++k) {
    if (times[k] < c.t_prev) throw std::invalid_argument("intensity: query time precedes the conditioning event");
    const double frac = (times[k] - c.t_prev) / c.t_prev;
    interp(k, 0) = ip.cfg.alpha[0] * frac;
    interp(k, 1) = ip.cfg.alpha[1] * frac;
  }
  ad::Var hterm = ad::activation(t, ad::dot(t, t.param(ip.w), c.h), ip.cfg.phi);
  ad::Var x = ad::add(t, t.constant(std::move(interp)), hterm);
  if (ip.cfg.use_ratio) x = ad::add(t, x, ratio_term(t, ip, c.xhat));
  return ad::softplus(t, x);
}

/// log lambda_mark(time), 1 x 1.
inline ad::Var log_intensity(ad::Tape& t, const IntensityParams& ip, const Conditioning& c, int mark, double time) {
  ad::Var lam = intensities(t, ip, c, {time});
  // Select column `mark` with a constant one-hot mask.
  Matrix pick(1, 2);
  pick[static_cast<std::size_t>(mark)] = 1.0;
  return ad::log(t, ad::sum(t, ad::mul(t, lam, t.constant(std::move(pick)))));
}

/// Monte Carlo estimate of the integral of the total intensity over
/// (from, to]: `samples` uniform draws, averaged and scaled by the length.
inline ad::Var interval_integral(ad::Tape& t, const IntensityParams& ip, const Conditioning& c, double from, double to,
                                 std::size_t samples, Rng& rng) {
  if (samples == 0) throw std::invalid_argument("interval_integral: need at least one sample");
  std::vector<double> ts(samples);
  for (auto& x : ts) x = from + (1.0 - rng.uniform()) * (to - from);
  ad::Var lam = intensities(t, ip, c, ts);
  return ad::affine(t, ad::sum(t, lam), (to - from) / static_cast<double>(samples));
}

/// One observed event with its own conditioning and the interval whose
/// compensator it owns (integrate_from == time means no interval).
struct ConditionedEvent {
  Conditioning cond;
  int mark = 0;
  double time = 0.0;
  double integrate_from = 0.0;
};

/// -[ (1/N) sum log lambda_{m_n}(t_n) - sum of interval integrals ].
inline ad::Var conditioned_nll(ad::Tape& t, const IntensityParams& ip, const std::vector<ConditionedEvent>& events,
                               std::size_t samples, Rng& rng) {
  if (events.empty()) throw std::invalid_argument("conditioned_nll: no events");
  std::vector<ad::Var> terms;
  std::vector<double> weights;
  const double inv_n = 1.0 / static_cast<double>(events.size());
  for (const auto& e : events) {
    terms.push_back(log_intensity(t, ip, e.cond, e.mark, e.time));
    weights.push_back(-inv_n);
    if (e.time > e.integrate_from) {
      terms.push_back(interval_integral(t, ip, e.cond, e.integrate_from, e.time, samples, rng));
      weights.push_back(1.0);
    }
  }
  return ad::weighted_sum(t, terms, weights);
}

/// A user's event sequence as seen by the intensity: event n happens at
/// times[n] with mark marks[n]; xhat[n] is the standardised ratio of session n.
struct EventSequence {
  std::vector<double> times;
  std::vector<int> marks;
  std::vector<std::array<double, 2>> xhat;
};

/// Events of a sequence with piecewise conditioning: event n conditions on
/// h(t_{n-1}) (h0 for the first event) and owns the interval (t_{n-1}, t_n].
inline std::vector<ConditionedEvent> condition_sequence(ad::Tape& t, const IntensityParams& ip,
                                                        const std::vector<ad::Var>& h_rows, const EventSequence& seq) {
  const std::size_t n = seq.times.size();
  if (n == 0 || h_rows.size() < n - 1 || seq.marks.size() != n || seq.xhat.size() != n)
    throw std::invalid_argument("condition_sequence: inconsistent sequence");
  std::vector<ConditionedEvent> out;
  for (std::size_t i = 0; i < n; ++i) {
    ConditionedEvent e;
    e.mark = seq.marks[i];
    e.time = seq.times[i];
    if (i == 0) {
      e.cond = {t.param(ip.h0), seq.times[0], {0.0, 0.0}};
      e.integrate_from = seq.times[0];
    } else {
      if (!(seq.times[i] > seq.times[i - 1])) throw std::invalid_argument("condition_sequence: times must increase");
      e.cond = {h_rows[i - 1], seq.times[i - 1], seq.xhat[i - 1]};
      e.integrate_from = seq.times[i - 1];
    }
    out.push_back(e);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Value-level API

struct EventContext {
  std::vector<double> h_prev;
  double t_prev = 1.0;
  std::optional<double> raw_ratio;  // ratio_search of the last observed session
};

namespace detail {
inline Conditioning to_conditioning(ad::Tape& t, const EventContext& ctx, const RatioNormState& norm) {
  Conditioning c;
  c.h = t.constant(Matrix::row_vector(ctx.h_prev));
  c.t_prev = ctx.t_prev;
  if (ctx.raw_ratio) c.xhat = standardize_eval(*ctx.raw_ratio, norm);
  return c;
}
}  // namespace detail

inline double intensity_at(int mark, double time, const EventContext& ctx, const ParamStore& ps,
                           const IntensityParams& ip, const RatioNormState& norm) {
  if (time < ctx.t_prev) throw std::invalid_argument("intensity_at: t precedes the last event");
  ad::Tape t(&ps, false);
  return t.value(intensities(t, ip, detail::to_conditioning(t, ctx, norm), {time}))[static_cast<std::size_t>(mark)];
}

inline double total_intensity(double time, const EventContext& ctx, const ParamStore& ps, const IntensityParams& ip,
                              const RatioNormState& norm) {
  return intensity_at(kMarkReco, time, ctx, ps, ip, norm) + intensity_at(kMarkSearch, time, ctx, ps, ip, norm);
}

/// p_m(t) = lambda_m(t) exp(-int_{t_prev}^{t} lambda_m), integral by the
/// composite trapezoid rule.
inline double mark_pdf(int mark, double time, const EventContext& ctx, const ParamStore& ps, const IntensityParams& ip,
                       const RatioNormState& norm, std::size_t nodes = 256) {
  if (time < ctx.t_prev) throw std::invalid_argument("mark_pdf: t precedes the last event");
  ad::Tape t(&ps, false);
  const auto c = detail::to_conditioning(t, ctx, norm);
  std::vector<double> grid(nodes + 1);
  for (std::size_t k = 0; k <= nodes; ++k)
    grid[k] = ctx.t_prev + (time - ctx.t_prev) * static_cast<double>(k) / static_cast<double>(nodes);
  const Matrix& lam = t.value(intensities(t, ip, c, grid));
  const auto m = static_cast<std::size_t>(mark);
  double integral = 0.0;
  const double h = (time - ctx.t_prev) / static_cast<double>(nodes);
  for (std::size_t k = 0; k < nodes; ++k) integral += 0.5 * h * (lam(k, m) + lam(k + 1, m));
  return lam(nodes, m) * std::exp(-integral);
}

}  // namespace nhp
