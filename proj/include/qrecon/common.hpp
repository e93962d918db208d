#pragma once

#include <Eigen/Dense>

#include <complex>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace qrecon {

using cplx = std::complex<double>;

// Spacetime dimension is capped at 4, so small vectors and matrices live on the stack.
constexpr int kMaxDim = 4;
using Vec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxDim, 1>;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxDim, kMaxDim>;
using CVec = Eigen::Matrix<cplx, Eigen::Dynamic, 1, 0, kMaxDim, 1>;
using CMat = Eigen::Matrix<cplx, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxDim, kMaxDim>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad user input (config, arguments). Maps to CLI exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Any failure of a numerical procedure. Maps to CLI exit code 3.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class CflError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class CompatibilityError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class DivergenceError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class CausticError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class IntersectionBoundError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class OutsideDomainError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

struct Event {
  double t = 0.0;
  Vec x;

  Event() = default;
  Event(double t_, Vec x_) : t(t_), x(std::move(x_)) {}

  int spatial_dim() const { return static_cast<int>(x.size()); }
  Vec coords() const;  // (t, x^1, ..., x^n)
  static Event from_coords(const Vec& p);
};

// Ω = product of intervals, [0,T] in time.
struct Domain {
  double T = 1.0;
  Vec lower;
  Vec upper;

  int spatial_dim() const { return static_cast<int>(lower.size()); }
  bool contains(const Vec& p, double slack = 0.0) const;
};

// Runs fn(i) for i in [0, n) on up to `jobs` threads. Results must be written by index
// so that the outcome does not depend on scheduling. The first exception is rethrown.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn);

int default_jobs();

// Trapezoid weights for n intervals of width h (n+1 nodes).
std::vector<double> trapezoid_weights(int n, double h);

std::string format_double(double v);

}  // namespace qrecon
