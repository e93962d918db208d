#pragma once

#include "qrecon/common.hpp"

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace qrecon {

// Product Lorentzian metric g = -beta dt^2 + h_ij dx^i dx^j. Points are spacetime
// coordinate vectors p = (t, x^1, ..., x^n).
class MetricField {
 public:
  using BetaFn = std::function<double(const Vec&)>;
  using HFn = std::function<Mat(const Vec&)>;
  // Partial derivatives d_a beta and d_a h for a = 0..n.
  using DBetaFn = std::function<Vec(const Vec&)>;
  using DHFn = std::function<std::array<Mat, kMaxDim>(const Vec&)>;

  MetricField(int n, std::string name, BetaFn beta, HFn h);

  void set_derivatives(DBetaFn dbeta, DHFn dh);
  void set_flat(bool flat) { flat_ = flat; }
  void set_time_independent(bool v) { time_independent_ = v; }

  int spatial_dim() const { return n_; }
  int dim() const { return n_ + 1; }
  const std::string& name() const { return name_; }
  bool is_flat() const { return flat_; }
  bool is_time_independent() const { return time_independent_; }

  double beta(const Vec& p) const { return beta_(p); }
  Mat h(const Vec& p) const { return h_(p); }
  Mat g(const Vec& p) const;
  Mat g_inv(const Vec& p) const;
  double sqrt_abs_det(const Vec& p) const;
  // dg[c](a,b) = d_c g_ab; closed form when provided, central differences otherwise.
  std::array<Mat, kMaxDim> dg(const Vec& p) const;

  // Throws NumericalError when beta <= 0 or h is not positive definite at p.
  void check_invariants(const Vec& p) const;

  double fd_step = 1e-5;

 private:
  int n_;
  std::string name_;
  BetaFn beta_;
  HFn h_;
  DBetaFn dbeta_;
  DHFn dh_;
  bool flat_ = false;
  bool time_independent_ = false;
};

using MetricPtr = std::shared_ptr<const MetricField>;

MetricPtr make_minkowski(int n);
// beta = 1 + c |x|^2, h = I.
MetricPtr make_perturbed_beta(int n, double c);
// beta = 1, h = (1 + c t) I.
MetricPtr make_time_dependent_h(int n, double c);
// Regular-grid samples: columns t, x1..xn, beta, then the upper triangle of h row by row.
// Values are interpolated multilinearly; derivatives use the central-difference fallback.
MetricPtr load_grid_metric(const std::string& csv_path, int n);

// gamma[a](b,c) = Gamma^a_{bc}.
using Christoffel = std::array<Mat, kMaxDim>;
Christoffel christoffel(const MetricField& metric, const Vec& p);
Christoffel christoffel(const MetricField& metric, const Event& e);

// Contraction Gamma^a_{bc} u^b w^c.
Vec contract(const Christoffel& gamma, const Vec& u, const Vec& w);

// riem[a][b](c,d) = R_{abcd} with R^a_{bcd} = d_c Gamma^a_{db} - d_d Gamma^a_{cb} + ...
using Riemann = std::array<std::array<Mat, kMaxDim>, kMaxDim>;
Riemann riemann(const MetricField& metric, const Vec& p, double step = 1e-4);

enum class CausalType { null, timelike };
enum class Face { none, initial, final, lateral };
enum class TimeDirection { past, future };

struct PathSample {
  double s = 0.0;
  Vec p;  // position
  Vec v;  // velocity
  Vec a;  // acceleration -Gamma(v,v)
};

struct ExitInfo {
  bool exited = false;
  Face face = Face::none;
  int axis = -1;  // spatial axis for lateral exits
  int side = 0;   // -1 lower face, +1 upper face
  double s = 0.0;
  Vec p;
};

struct GeodesicPath {
  std::vector<PathSample> samples;
  CausalType causal_type = CausalType::null;
  ExitInfo exit;
  double max_norm_drift = 0.0;

  double s_min() const { return samples.front().s; }
  double s_max() const { return samples.back().s; }
  // Cubic Hermite interpolation on the samples.
  Vec position(double s) const;
  Vec velocity(double s) const;
  // Locates s with position(s)(0) == t; requires t monotone along the path.
  double parameter_at_time(double t) const;
  std::size_t interval(double s) const;
};

// Builds a path from raw samples (used for fabricated curves in tests).
GeodesicPath make_path(std::vector<PathSample> samples, CausalType type);

struct GeodesicOptions {
  double tol = 1e-11;
  double h0 = 1e-2;
  double h_max = 0.05;
  double h_min = 1e-13;
  int max_steps = 200000;
  double drift_tol = 1e-8;
  // Stop at the first exit from this region (domain inflated by slack).
  std::optional<Domain> stop_domain;
  double stop_slack = 0.0;
};

// Integrates the geodesic ODE from start with initial velocity v0 over s in [0, s_max]
// (or [s_max, 0] when s_max < 0). Samples are always returned in increasing s.
GeodesicPath integrate_geodesic(const MetricField& metric, const Event& start, const Vec& v0,
                                double s_max, const GeodesicOptions& opt = {});

// Pseudo-orthonormal frame: g(e0,e0)=g(e1,e1)=0, g(e0,e1)=-2, g(ej,ek)=delta_jk (j,k>=2).
struct Frame {
  Vec p;
  std::vector<Vec> e;
};

Mat pseudo_eta(int n);
Mat frame_gram(const MetricField& metric, const Frame& f);
double frame_defect(const MetricField& metric, const Frame& f);

// Unit future normal to the slice {t = const}.
Vec unit_time_normal(const MetricField& metric, const Vec& p);
// Future- or past-directed null vector -/+ u + nu with nu the h-normalised spatial direction.
Vec null_vector(const MetricField& metric, const Vec& p, const Vec& spatial_dir, TimeDirection dir);

Frame build_frame(const MetricField& metric, const Event& e, const Vec& null_dir, double tol = 1e-8);

struct FrameField {
  std::vector<double> s;
  std::vector<std::vector<Vec>> e;   // e[i][k] at sample i
  std::vector<std::vector<Vec>> de;  // derivative -Gamma(v, e_k)
  double max_defect = 0.0;
  std::vector<Vec> at(double s_query) const;
};

// Transports f0 (given at parameter s_start on path) along the whole path.
FrameField parallel_transport(const MetricField& metric, const GeodesicPath& path, const Frame& f0,
                              double s_start, double tol = 1e-7);
FrameField parallel_transport(const MetricField& metric, const GeodesicPath& path, const Frame& f0);

struct ChartPoint {
  bool inside = false;  // false: outside the tube or Newton failure
  double s = 0.0;
  Vec y;
};

// Tube coordinates (s, y) -> exp_{gamma(s)}(sum_k y_k e_k(s)) around a null geodesic.
class FermiChart {
 public:
  FermiChart(MetricPtr metric, GeodesicPath path, FrameField frames, double delta);

  int spatial_dim() const { return n_; }
  double delta() const { return delta_; }
  double s_min() const { return path_.s_min(); }
  double s_max() const { return path_.s_max(); }
  const GeodesicPath& path() const { return path_; }
  const FrameField& frames() const { return frames_; }
  const MetricField& metric() const { return *metric_; }
  MetricPtr metric_ptr() const { return metric_; }
  bool affine() const { return affine_; }

  Vec forward(double s, const Vec& y) const;
  ChartPoint inverse(const Vec& p) const;
  // J = dF/d(s,y), columns ordered (s, y_1..y_n).
  Mat jacobian(double s, const Vec& y) const;
  // Second derivatives d2[a](b,c) = d_b d_c F^a.
  std::array<Mat, kMaxDim> second_derivatives(double s, const Vec& y) const;
  // J^T g J at (s, y).
  Mat pulled_back_metric(double s, const Vec& y) const;
  // Samples the tube and checks that the chart Jacobian keeps its orientation.
  void check_injectivity(int samples_per_axis = 9) const;

 private:
  Vec exp_map(const Vec& base, const Vec& v) const;
  double initial_s_guess(const Vec& p) const;

  MetricPtr metric_;
  GeodesicPath path_;
  FrameField frames_;
  double delta_;
  int n_;
  bool affine_;
  Mat affine_basis_inv_;
};

using ChartPtr = std::shared_ptr<const FermiChart>;

// Chart over an existing path with f0 at s_start.
ChartPtr fermi_chart(MetricPtr metric, const GeodesicPath& path, const Frame& f0, double delta,
                     double s_start);
// Traces the null geodesic through base in both directions until it leaves the domain
// inflated by `margin`, transports the frame built from null_dir, and returns the chart
// with s = 0 at base.
ChartPtr trace_chart(MetricPtr metric, const Domain& domain, const Event& base, const Vec& null_dir,
                     double delta, double margin);

struct BoundaryHit {
  GeodesicPath path;
  Vec initial_velocity;
  Event boundary_event;
  int axis = -1;
  int side = 0;
  double angle = 0.0;  // transversality angle with the boundary, radians
  bool transversal = false;
};

// Traces the null geodesic from x with velocity v until it leaves [0,T] x Omega. Returns a hit
// only for exits through the lateral boundary with 0 < t < T.
std::optional<BoundaryHit> trace_to_boundary(const MetricField& metric, const Domain& domain,
                                             const Event& x, const Vec& v,
                                             const GeodesicOptions& opt = {});

constexpr double kTransversalityThreshold = 1e-2;

BoundaryHit boundary_optimal_geodesic(const MetricField& metric, const Domain& domain, const Event& x,
                                      TimeDirection direction, double angular_resolution,
                                      const GeodesicOptions& opt = {});

// Spatial h-orthonormal basis at p (Gram-Schmidt on coordinate axes).
std::vector<Vec> spatial_basis(const MetricField& metric, const Vec& p);

// Crossings of two causal paths, ordered by t. Throws IntersectionBoundError when more than
// `cap` crossings are found and NumericalError when the paths coincide on an interval.
std::vector<Event> intersections(const GeodesicPath& g1, const GeodesicPath& g2, double spatial_tol,
                                 int cap, int resample = 4000);

}  // namespace qrecon
