#include <gtest/gtest.h>

#include <random>

#include "fixtures.hpp"

using namespace h2margin;

namespace {

GeneratorRecord machine(double ig_max = 1.0) {
  GeneratorRecord g;
  g.internal_emf = 2.574;
  g.synchronous_reactance = 1.912;
  g.stator_current_max = ig_max;
  g.delta_max = std::numbers::pi / 2.0;
  return g;
}

}  // namespace

TEST(Armature, CircleValues) {
  EXPECT_DOUBLE_EQ(armature_q_limit(0.0, 1.0, 1.0), 1.0);
  EXPECT_NEAR(armature_q_limit(0.6, 1.0, 1.0), 0.8, 1e-15);
  EXPECT_THROW(armature_q_limit(1.1, 1.0, 1.0), InfeasibleOperatingPoint);
}

TEST(Armature, RadicandClampedNearBoundary) {
  EXPECT_EQ(armature_q_limit(1.0 + 1e-12, 1.0, 1.0), 0.0);
}

TEST(Field, MachineConstants) {
  // sqrt((E/Xs)^2) - 1/Xs at PG = 0, V = 1
  const double expected = 2.574 / 1.912 - 1.0 / 1.912;
  EXPECT_NEAR(field_q_limit(0.0, 1.0, 2.574, 1.912), expected, 1e-15);
  EXPECT_NEAR(field_q_limit(0.0, 1.0, 2.574, 1.912), 0.823221, 1e-6);
}

TEST(Field, UnboundedEmfAndBoundary) {
  EXPECT_GE(field_q_limit(0.5, 1.0, std::numeric_limits<double>::infinity(), 1.912), 1e19);
  const double v = 1.02, e = 2.574, xs = 1.912;
  EXPECT_NEAR(field_q_limit(v * e / xs, v, e, xs), -v * v / xs, 1e-12);
  EXPECT_THROW(field_q_limit(v * e / xs + 1e-3, v, e, xs), InfeasibleOperatingPoint);
}

TEST(Underexcitation, Values) {
  EXPECT_NEAR(underexcitation_q_min(0.7, 1.0, 1.912, std::numbers::pi / 2.0), -0.523013, 1e-6);
  EXPECT_NEAR(underexcitation_q_min(0.0, 1.1, 1.912, 0.3), -1.21 / 1.912, 1e-15);
  EXPECT_NEAR(underexcitation_q_min(0.5, 1.0, 2.0, std::numbers::pi / 4.0), 0.0, 1e-15);
  EXPECT_THROW(underexcitation_q_min(0.5, 1.0, 2.0, 0.0), InfeasibleOperatingPoint);
  EXPECT_THROW(underexcitation_q_min(0.5, 1.0, 2.0, 2.0), InfeasibleOperatingPoint);
}

TEST(Envelope, FieldBindsAtZeroLoad) {
  auto env = q_envelope(0.0, 1.0, machine());
  EXPECT_NEAR(env.q_max, 0.823221, 1e-6);
  EXPECT_EQ(env.binding, CapabilityLimit::field);
}

TEST(Envelope, ArmatureBindsWithSmallStator) {
  auto env = q_envelope(0.0, 1.0, machine(0.5));
  EXPECT_DOUBLE_EQ(env.q_max, 0.5);
  EXPECT_EQ(env.binding, CapabilityLimit::armature);
}

TEST(Envelope, CrossoverReportsArmature) {
  // find PG where the circles meet by bisection, then evaluate there
  auto g = machine();
  double lo = 0.0, hi = 1.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (armature_q_limit(mid, 1.0, 1.0) > field_q_limit(mid, 1.0, g.internal_emf, g.synchronous_reactance))
      lo = mid;
    else
      hi = mid;
  }
  auto env = q_envelope(hi, 1.0, g);
  EXPECT_NEAR(env.q_armature, env.q_field, 1e-12);
  EXPECT_DOUBLE_EQ(env.q_max, std::min(env.q_armature, env.q_field));
}

TEST(Envelope, ExactMinOnRandomSamples) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> uv(0.9, 1.1), ui(0.4, 1.5), up(0.0, 1.0);
  int checked = 0;
  for (int i = 0; i < 1000; ++i) {
    auto g = machine(ui(rng));
    const double v = uv(rng);
    const double pmax = std::min(v * g.stator_current_max, v * g.internal_emf / g.synchronous_reactance);
    const double pg = up(rng) * pmax;
    auto env = q_envelope(pg, v, g);
    const double a = armature_q_limit(pg, v, g.stator_current_max);
    const double f = field_q_limit(pg, v, g.internal_emf, g.synchronous_reactance);
    EXPECT_EQ(env.q_max, std::min(a, f));
    EXPECT_EQ(env.q_armature, a);
    EXPECT_EQ(env.q_field, f);
    ++checked;
  }
  EXPECT_EQ(checked, 1000);
}

TEST(Envelope, LimitsDecreaseInPg) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> uv(0.9, 1.1), up(0.01, 0.95);
  const double h = 1e-6;
  for (int i = 0; i < 200; ++i) {
    const double v = uv(rng);
    const double pa = up(rng) * v;
    EXPECT_LT(armature_q_limit(pa + h, v, 1.0) - armature_q_limit(pa - h, v, 1.0), 0.0);
    const double pf = up(rng) * v * 2.574 / 1.912;
    EXPECT_LT(field_q_limit(pf + h, v, 2.574, 1.912) - field_q_limit(pf - h, v, 2.574, 1.912), 0.0);
  }
}

TEST(Envelope, MinBelowMaxForFeasibleSamples) {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> uv(0.9, 1.1), up(0.0, 0.9), ui(0.4, 1.5);
  for (int i = 0; i < 1000; ++i) {
    auto g = machine(ui(rng));
    const double v = uv(rng);
    const double pg = up(rng) * std::min(v * g.stator_current_max, v * g.internal_emf / g.synchronous_reactance);
    auto env = q_envelope(pg, v, g);
    EXPECT_LE(env.q_min, env.q_max) << pg << " " << v;
  }
}
