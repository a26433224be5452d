#pragma once

// Reactive capability of a round-rotor synchronous machine: armature-current
// circle, field-current circle and under-excitation (rotor angle) line.
// All quantities on the system base.

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "h2margin/error.hpp"
#include "h2margin/network.hpp"

namespace h2margin {

/// Radicands in (-kRadicandClamp, 0) are treated as zero.
inline constexpr double kRadicandClamp = 1e-10;
/// Returned by field_q_limit when the internal emf is unbounded.
inline constexpr double kUnlimitedQ = 1e20;

enum class CapabilityLimit { armature, field };

struct CapabilityEnvelope {
  double q_armature = 0.0;
  double q_field = 0.0;
  double q_min = 0.0;
  double q_max = 0.0;
  CapabilityLimit binding = CapabilityLimit::armature;
};

namespace detail {

inline double upper_root(double radicand, const char* which, double pg, double radius) {
  if (radicand < 0.0) {
    if (radicand > -kRadicandClamp) return 0.0;
    std::ostringstream os;
    os << which << " limit: active power " << pg << " exceeds circle radius " << radius;
    throw InfeasibleOperatingPoint(os.str());
  }
  return std::sqrt(radicand);
}

}  // namespace detail

/// Upper branch of the armature circle, QG^2 + PG^2 = (V IG)^2.
inline double armature_q_limit(double pg, double v, double ig_max) {
  const double radius = v * ig_max;
  return detail::upper_root(radius * radius - pg * pg, "armature", pg, radius);
}

/// Upper branch of the field circle, PG^2 + (Q + V^2/Xs)^2 = (V E / Xs)^2.
inline double field_q_limit(double pg, double v, double emf, double xs) {
  if (!std::isfinite(emf)) return kUnlimitedQ;
  const double radius = v * emf / xs;
  return detail::upper_root(radius * radius - pg * pg, "field", pg, radius) - v * v / xs;
}

inline double underexcitation_q_min(double pg, double v, double xs, double delta_max) {
  if (!(delta_max > 0.0 && delta_max <= std::numbers::pi / 2.0 + 1e-12))
    throw InfeasibleOperatingPoint("rotor angle limit must lie in (0, pi/2]");
  const double cot = std::cos(delta_max) / std::sin(delta_max);
  return pg * cot - v * v / xs;
}

/// Full envelope at (pg, v). Ties between the two circles report the armature limit.
inline CapabilityEnvelope q_envelope(double pg, double v, const GeneratorRecord& gen) {
  CapabilityEnvelope env;
  env.q_armature = armature_q_limit(pg, v, gen.stator_current_max);
  env.q_field = field_q_limit(pg, v, gen.internal_emf, gen.synchronous_reactance);
  env.q_min = underexcitation_q_min(pg, v, gen.synchronous_reactance, gen.delta_max);
  if (env.q_field < env.q_armature) {
    env.q_max = env.q_field;
    env.binding = CapabilityLimit::field;
  } else {
    env.q_max = env.q_armature;
    env.binding = CapabilityLimit::armature;
  }
  return env;
}

}  // namespace h2margin
