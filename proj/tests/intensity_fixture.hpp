#pragma once

#include <cmath>

#include "nhp_oam/intensity.hpp"

namespace nhp::testing {

/// Intensity module whose rate is the constant softplus(shift) for both marks:
/// zero interpolation weight, zero w, zero ratio scale.
struct ConstantIntensity {
  ParamStore ps;
  IntensityParams ip;
  RatioNormState norm;
  std::size_t d;

  explicit ConstantIntensity(double shift = 0.0, std::size_t d_ = 4) : d(d_) {
    Rng rng(1);
    IntensityConfig cfg;
    cfg.alpha = {0.0, 0.0};
    ip = register_intensity(ps, d, cfg, rng);
    ps.value(ip.w).zero();
    ps.value(ip.gamma).zero();
    ps.value(ip.beta).fill(shift);
  }
  double rate() const { return ad::softplus(ps.value(ip.beta)[0]); }
  EventContext context(double t_prev) const { return {std::vector<double>(d, 0.3), t_prev, 0.5}; }
};

/// Shift that makes softplus(shift) == c.
inline double softplus_inverse(double c) { return std::log(std::expm1(c)); }

}  // namespace nhp::testing
