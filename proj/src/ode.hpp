#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>

namespace qrecon::detail {

using DynVec = Eigen::VectorXd;
using OdeRhs = std::function<void(double, const DynVec&, DynVec&)>;

// One Dormand-Prince 5(4) step. Returns the 5th-order solution and writes the scaled
// error norm (<= 1 means acceptable for the given tolerances).
inline DynVec dopri_step(const OdeRhs& f, double s, const DynVec& y, double h, double atol,
                         double rtol, double& err_norm) {
  static constexpr double a21 = 1.0 / 5.0;
  static constexpr double a31 = 3.0 / 40.0, a32 = 9.0 / 40.0;
  static constexpr double a41 = 44.0 / 45.0, a42 = -56.0 / 15.0, a43 = 32.0 / 9.0;
  static constexpr double a51 = 19372.0 / 6561.0, a52 = -25360.0 / 2187.0, a53 = 64448.0 / 6561.0,
                          a54 = -212.0 / 729.0;
  static constexpr double a61 = 9017.0 / 3168.0, a62 = -355.0 / 33.0, a63 = 46732.0 / 5247.0,
                          a64 = 49.0 / 176.0, a65 = -5103.0 / 18656.0;
  static constexpr double b1 = 35.0 / 384.0, b3 = 500.0 / 1113.0, b4 = 125.0 / 192.0,
                          b5 = -2187.0 / 6784.0, b6 = 11.0 / 84.0;
  static constexpr double e1 = 71.0 / 57600.0, e3 = -71.0 / 16695.0, e4 = 71.0 / 1920.0,
                          e5 = -17253.0 / 339200.0, e6 = 22.0 / 525.0, e7 = -1.0 / 40.0;
  const auto n = y.size();
  DynVec k1(n), k2(n), k3(n), k4(n), k5(n), k6(n), k7(n);
  f(s, y, k1);
  f(s + h / 5.0, y + h * a21 * k1, k2);
  f(s + 3.0 * h / 10.0, y + h * (a31 * k1 + a32 * k2), k3);
  f(s + 4.0 * h / 5.0, y + h * (a41 * k1 + a42 * k2 + a43 * k3), k4);
  f(s + 8.0 * h / 9.0, y + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4), k5);
  f(s + h, y + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5), k6);
  DynVec y5 = y + h * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
  f(s + h, y5, k7);
  DynVec err = h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);
  err_norm = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double sc = atol + rtol * std::max(std::abs(y(i)), std::abs(y5(i)));
    err_norm = std::max(err_norm, std::abs(err(i)) / sc);
  }
  return y5;
}

inline double next_step(double h, double err_norm) {
  double fac = err_norm == 0.0 ? 5.0 : 0.9 * std::pow(err_norm, -0.2);
  fac = std::min(5.0, std::max(0.2, fac));
  return h * fac;
}

// Adaptive integration from s0 to s1 (either direction), landing exactly on s1.
inline DynVec integrate_to(const OdeRhs& f, double s0, double s1, DynVec y, double tol,
                           double h_max = 0.1, double h_init = 1e-2) {
  const double dir = s1 >= s0 ? 1.0 : -1.0;
  double s = s0;
  double h = dir * std::min(h_init, std::abs(s1 - s0));
  int guard = 0;
  while (dir * (s1 - s) > 1e-15 * (1.0 + std::abs(s1))) {
    if (dir * (s + h - s1) > 0.0) h = s1 - s;
    double err = 0.0;
    DynVec yn = dopri_step(f, s, y, h, tol, tol, err);
    if (err <= 1.0) {
      s += h;
      y = std::move(yn);
    }
    h = next_step(h, err);
    if (std::abs(h) > h_max) h = dir * h_max;
    if (++guard > 1000000) break;
  }
  return y;
}

}  // namespace qrecon::detail
