#pragma once

#include "qrecon/common.hpp"
#include "qrecon/gaussian_beam.hpp"
#include "qrecon/geometry.hpp"
#include "qrecon/linearization.hpp"
#include "qrecon/wave_solver.hpp"

#include <boost/rational.hpp>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace qrecon {

using Rational = boost::rational<long long>;

// 8(m-1) / (2m(m-1)(8s-n+13) + 2m-1). Requires s+1 > (n+1)/2 and m >= 4.
Rational sigma(int s, int m, int n);

// ---------------------------------------------------------------------------
// Parameter choice

struct OptimalParams {
  double eps = 0.0;
  double tau = 0.0;
  double kappa0 = 0.0;
  double gamma0 = 0.0;  // kappa0^{2m-1} / M
  double s_hat = 0.0;   // (2m-1)(s - n/8 + 13/8)
  int halvings = 0;
};

// f(eps, tau) = 2 tau^{-1/2} + gamma0 delta / m eps^{-m} + eps^{m-1} tau^{s_hat} / (m-1).
double objective(int m, double s, int n, double delta, double M, double kappa0, double eps, double tau);

// Closed-form critical point of the objective for a given kappa0.
OptimalParams critical_point(int m, double s, int n, double delta, double M, double kappa0);

// Starts from kappa0 = kappa and halves it until tau >= tau0 and eps tau^{s_hat/(2m-1)} <= kappa.
OptimalParams optimal_params(int m, double s, int n, double delta, double M, double kappa, double tau0);

// Maps the critical point onto a working scale: (eps, tau) equal (eps_ref, tau_ref) at delta_ref and
// follow the power laws of the critical point in delta elsewhere, with kappa0 held fixed.
struct DeskAnchor {
  double delta_ref = 1e-6;
  double eps_ref = 0.05;
  double tau_ref = 200.0;
};

struct DeskParams {
  double eps = 0.0;
  double tau = 0.0;
  OptimalParams theory;
};

DeskParams anchored_params(int m, double s, int n, double delta, double M, double kappa0, const DeskAnchor& anchor);

// ---------------------------------------------------------------------------
// Gaussian averages

// Gamma((d+1)/2) / Gamma(d/2)
double delta_lemma_constant(int d);

// (tau/pi)^{d/2} int b(z) exp(-tau |z - z0|^2) dz by tensor trapezoid on z0 +- 9/sqrt(tau).
double gaussian_average(const std::function<double(const Vec&)>& b, const Vec& z0, double tau,
                        int nodes_per_axis = 801);

// ---------------------------------------------------------------------------
// Probes

struct ProbeOptions {
  double tau = 200.0;      // probe beams v1, v2
  double tau0 = 4.0;       // v0 and the fixed beams v5..vm
  int m = 4;
  double eps = 0.05;
  double beam_delta = 0.15;
  double chart_delta = 0.2;
  double chart_margin = 0.3;
  double angle = 0.2;      // rotation of the spatial direction of gamma1 used for gamma2 (n >= 2)
  double min_angle = 0.05; // smallest accepted angle between the tangents of gamma1 and gamma2
  double angular_resolution = 0.05;
  double vhat_floor = 0.5;
  double v0_floor = 0.1;    // lower bound on |v0(p0)| / tau0^{n/8}
  double hessian_floor = 1e-8;

  void validate() const;
};

struct ProbeBundle {
  Event p0;
  Vec dir1;  // future-directed tangents at p0
  Vec dir2;
  double tangent_angle = 0.0;
  double tau = 0.0;
  double tau0 = 0.0;
  std::vector<CorrectedBeam> beams;  // v1, v2 at tau (unscaled corrected beams)
  std::vector<CorrectedBeam> fixed;  // v5..vm at tau0
  CorrectedBeam v0;                  // backward corrected beam, see v0_field for the normalized field
  ScalarField v0_field;              // v0 / v0(p0)
  cplx v0_p0 = 1.0;
  cplx v_hat = 1.0;
  PhaseHessian hessian;
  DnProbe probe;                     // f_j = tau^{1/8} (v_tau,j + r_j) on Sigma, conjugates as v3, v4
  std::vector<ScalarField> v_terms;  // the matching first-order fields
};

// v1, v2 through p0 along the past boundary-optimal geodesic and its perturbation, v0 along the
// future boundary-optimal geodesic. Throws OutsideDomainError when p0 is not in the numerical W.
ProbeBundle build_probe(MetricPtr metric, const Domain& domain, GridPtr grid, const Event& p0,
                        const ProbeOptions& opt);

// -rhs / (m! pi^{(n+1)/2} v0(p0) vhat(p0) |det H|^{-1/2}).
cplx recover_point(cplx identity_rhs, const ProbeBundle& bundle, int m);

// Calibration denominator m! pi^{(n+1)/2} v0(p0) vhat(p0) |det H|^{-1/2}.
cplx recovery_denominator(const ProbeBundle& bundle, int m);

// ---------------------------------------------------------------------------
// Noise

// Adds complex Gaussian noise to every returned trace, rescaled to discrete L2(Sigma) norm delta.
// The noise realization depends only on the seed and the input data.
DnCallable noisy_dn(DnCallable dn, std::vector<double> sigma_w, double delta, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Pointwise pipeline

struct RecoveryConfig {
  MetricPtr metric;
  Domain domain;
  GridPtr grid;
  ScalarField q_true;
  SemilinearOptions solver;
  ProbeOptions probe;
  double noise_delta = 0.0;
  std::uint64_t seed = 0;
  int jobs = 1;  // threads for the 2^m probe solves
};

struct PointRecovery {
  Event p0;
  bool ok = false;
  std::string failure;
  cplx q_hat = 0.0;
  double q_true = 0.0;
  IdentityEvaluation identity;
};

PointRecovery recover_at(const RecoveryConfig& cfg, const Event& p0, std::uint64_t point_seed = 0);

// Lattice events (counts[a] points per axis, including the end points of [lo, hi]) where both
// boundary-optimal searches succeed.
std::vector<Event> w_grid(const MetricField& metric, const Domain& domain, const Vec& lo, const Vec& hi,
                          const std::vector<int>& counts, double angular_resolution = 0.05);

// ---------------------------------------------------------------------------
// Several intersection points

// Throws IntersectionBoundError when any pair of paths crosses more than P times.
void check_intersection_cap(const std::vector<GeodesicPath>& paths, int P, double spatial_tol = 1e-3);

// Past-directed corrected beam through x: along the future boundary-optimal geodesic, solved with
// zero Cauchy data at t = T.
CorrectedBeam filter_beam(MetricPtr metric, const Domain& domain, GridPtr grid, const Event& x, double tau,
                          const ProbeOptions& opt);

// Value of a filter beam with the tau^{n/2p} factor removed.
cplx filter_value(const CorrectedBeam& beam, const Vec& p);

struct SeparationMatrix {
  std::vector<Event> points;  // ordered by t
  std::vector<int> filters;   // collection index per row, -1 when built for this matrix
  CMat A;                     // A(k, l) = beam of row k at x_l
  cplx det = 0.0;
  double condition = 0.0;
  double tau_sep = 0.0;
};

SeparationMatrix matrix_from_beams(std::vector<Event> points, const std::vector<const CorrectedBeam*>& beams);

// Builds one filter beam per point; doubles tau_sep (up to max_doublings) while |det| < d_min.
SeparationMatrix separation_matrix(std::vector<Event> points, MetricPtr metric, const Domain& domain, GridPtr grid,
                                   double tau_sep, const ProbeOptions& opt, double d_min = 0.25,
                                   int max_doublings = 3);

struct SeparationSolution {
  CVec values;
  double residual = 0.0;  // |A x - b| / |b|
  bool flagged = false;   // condition number above the threshold
};

SeparationSolution solve_separation(const SeparationMatrix& mat, const CVec& measured, double max_condition = 1e8);

struct SeparationFilter {
  std::vector<CorrectedBeam> beams;
  std::vector<Event> anchors;
  std::vector<std::vector<int>> covers;  // covers[i]: beams with |value| >= 2/3 at grid point i
  int sampled = 0;
  int separable = 0;
};

// Greedy cover of W by filter beams; samples random ordered tuples of up to P points with pairwise
// distance > delta_sep and adds beams until each sampled tuple has a matrix with |det| >= d_min.
SeparationFilter separation_filter(MetricPtr metric, const Domain& domain, GridPtr grid,
                                   const std::vector<Event>& W, int P, double delta_sep, double tau_sep,
                                   const ProbeOptions& opt, std::uint64_t seed, int samples = 100,
                                   double d_min = 0.25);

// ---------------------------------------------------------------------------
// Stability sweep

struct SweepPoint {
  double delta = 0.0;
  DeskParams params;
  std::vector<PointRecovery> points;
  double error = 0.0;  // max |q_hat - q_true| over recovered points
  int failures = 0;
};

struct StabilityReport {
  std::vector<SweepPoint> ladder;
  Rational sigma_exact{0};
  double sigma_value = 0.0;
  bool slope_defined = false;
  double slope = 0.0;
  double slope_stderr = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  std::string config_hash;
};

struct SweepConfig {
  RecoveryConfig base;
  std::vector<Event> W;
  std::vector<double> deltas;
  int s = 2;
  double M = 1.0;
  double kappa = 0.5;
  double tau0 = 1.0;
  DeskAnchor anchor;
};

// Least-squares fit of log y on log x; returns slope, its standard error, intercept, R^2.
struct LogFit {
  double slope = 0.0;
  double stderr_slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};
LogFit fit_log_log(const std::vector<double>& x, const std::vector<double>& y);

StabilityReport stability_sweep(const SweepConfig& cfg);

void write_sweep_csv(const StabilityReport& report, const std::string& path);
void write_sweep_summary(const StabilityReport& report, const SweepConfig& cfg, const std::string& path);

}  // namespace qrecon
