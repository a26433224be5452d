#pragma once

// Forward-mode second-order dual numbers over a fixed number of local
// variables. Used to differentiate the small nonlinear terms of the model
// exactly (value, gradient and Hessian in one sweep).

#include <array>
#include <cmath>

namespace h2margin {

template <int N>
struct Jet {
  double v = 0.0;
  std::array<double, N> g{};
  std::array<double, N * N> h{};

  Jet() = default;
  Jet(double value) : v(value) {}  // NOLINT: constants promote implicitly

  static Jet variable(double value, int slot) {
    Jet j(value);
    j.g[slot] = 1.0;
    return j;
  }

  double hess(int i, int k) const { return h[i * N + k]; }
};

namespace detail {

// f(u) with f' and f'' given: chain rule up to second order
template <int N>
Jet<N> chain(const Jet<N>& u, double f, double df, double d2f) {
  Jet<N> r(f);
  for (int i = 0; i < N; ++i) r.g[i] = df * u.g[i];
  for (int i = 0; i < N; ++i)
    for (int k = 0; k < N; ++k) r.h[i * N + k] = df * u.h[i * N + k] + d2f * u.g[i] * u.g[k];
  return r;
}

}  // namespace detail

template <int N>
Jet<N> operator+(const Jet<N>& a, const Jet<N>& b) {
  Jet<N> r(a.v + b.v);
  for (int i = 0; i < N; ++i) r.g[i] = a.g[i] + b.g[i];
  for (int i = 0; i < N * N; ++i) r.h[i] = a.h[i] + b.h[i];
  return r;
}

template <int N>
Jet<N> operator-(const Jet<N>& a, const Jet<N>& b) {
  Jet<N> r(a.v - b.v);
  for (int i = 0; i < N; ++i) r.g[i] = a.g[i] - b.g[i];
  for (int i = 0; i < N * N; ++i) r.h[i] = a.h[i] - b.h[i];
  return r;
}

template <int N>
Jet<N> operator-(const Jet<N>& a) {
  Jet<N> r(-a.v);
  for (int i = 0; i < N; ++i) r.g[i] = -a.g[i];
  for (int i = 0; i < N * N; ++i) r.h[i] = -a.h[i];
  return r;
}

template <int N>
Jet<N> operator*(const Jet<N>& a, const Jet<N>& b) {
  Jet<N> r(a.v * b.v);
  for (int i = 0; i < N; ++i) r.g[i] = a.v * b.g[i] + b.v * a.g[i];
  for (int i = 0; i < N; ++i)
    for (int k = 0; k < N; ++k)
      r.h[i * N + k] = a.v * b.h[i * N + k] + b.v * a.h[i * N + k] + a.g[i] * b.g[k] + a.g[k] * b.g[i];
  return r;
}

template <int N>
Jet<N> operator*(double s, const Jet<N>& a) {
  Jet<N> r(s * a.v);
  for (int i = 0; i < N; ++i) r.g[i] = s * a.g[i];
  for (int i = 0; i < N * N; ++i) r.h[i] = s * a.h[i];
  return r;
}

template <int N>
Jet<N> operator*(const Jet<N>& a, double s) {
  return s * a;
}

template <int N>
Jet<N> operator+(const Jet<N>& a, double s) {
  Jet<N> r = a;
  r.v += s;
  return r;
}

template <int N>
Jet<N> operator+(double s, const Jet<N>& a) {
  return a + s;
}

template <int N>
Jet<N> operator-(const Jet<N>& a, double s) {
  return a + (-s);
}

template <int N>
Jet<N> operator-(double s, const Jet<N>& a) {
  return (-a) + s;
}

template <int N>
Jet<N> operator/(const Jet<N>& a, const Jet<N>& b) {
  const double inv = 1.0 / b.v;
  return a * detail::chain(b, inv, -inv * inv, 2.0 * inv * inv * inv);
}

template <int N>
Jet<N> sin(const Jet<N>& u) {
  const double s = std::sin(u.v), c = std::cos(u.v);
  return detail::chain(u, s, c, -s);
}

template <int N>
Jet<N> cos(const Jet<N>& u) {
  const double s = std::sin(u.v), c = std::cos(u.v);
  return detail::chain(u, c, -s, -c);
}

template <int N>
Jet<N> sqrt(const Jet<N>& u) {
  const double r = std::sqrt(u.v);
  return detail::chain(u, r, 0.5 / r, -0.25 / (r * u.v));
}

template <int N>
Jet<N> square(const Jet<N>& u) {
  return detail::chain(u, u.v * u.v, 2.0 * u.v, 2.0);
}

inline double square(double x) { return x * x; }

}  // namespace h2margin
