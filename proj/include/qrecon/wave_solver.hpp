#pragma once

#include "qrecon/common.hpp"
#include "qrecon/geometry.hpp"

#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace qrecon {

// One node of the lateral boundary: spatial node index on face (axis, side).
// Corner nodes appear once per face they belong to.
struct SigmaEntry {
  int axis = 0;
  int side = -1;  // -1 lower face, +1 upper face
  std::size_t node = 0;
};

// Uniform tensor grid on [0,T] x Omega. nx[k] and nt are numbers of intervals.
class SpacetimeGrid {
 public:
  SpacetimeGrid(Domain domain, int nt, std::vector<int> nx);

  // Chooses the smallest nt with cfl_number <= cfl.
  static SpacetimeGrid with_cfl(const MetricField& metric, const Domain& domain, std::vector<int> nx,
                                double cfl);

  const Domain& domain() const { return domain_; }
  int spatial_dim() const { return static_cast<int>(nx_.size()); }
  int nt() const { return nt_; }
  int nx(int k) const { return nx_[k]; }
  const std::vector<int>& nx() const { return nx_; }
  double dt() const { return dt_; }
  double dx(int k) const { return dx_[k]; }
  double T() const { return domain_.T; }

  std::size_t spatial_count() const { return spatial_count_; }
  std::size_t node_count() const { return spatial_count_ * static_cast<std::size_t>(nt_ + 1); }
  std::size_t stride(int k) const { return stride_[k]; }

  double t(int level) const { return level * dt_; }
  double x(int k, int i) const { return domain_.lower(k) + i * dx_[k]; }
  int index(std::size_t node, int k) const { return static_cast<int>((node / stride_[k]) % (nx_[k] + 1)); }
  Vec position(std::size_t node) const;
  Vec coords(int level, std::size_t node) const;
  bool is_boundary(std::size_t node) const;

  const std::vector<SigmaEntry>& sigma() const { return sigma_; }
  std::size_t sigma_count() const { return sigma_.size(); }
  const std::vector<std::size_t>& interior() const { return interior_; }

 private:
  Domain domain_;
  int nt_;
  std::vector<int> nx_;
  double dt_;
  std::vector<double> dx_;
  std::vector<std::size_t> stride_;
  std::size_t spatial_count_;
  std::vector<SigmaEntry> sigma_;
  std::vector<std::size_t> interior_;
};

using GridPtr = std::shared_ptr<const SpacetimeGrid>;

// c * dt * sqrt(sum_k 1/dx_k^2) with c = max sqrt(beta * lambda_max(h)) over grid nodes.
double cfl_number(const MetricField& metric, const SpacetimeGrid& grid);
void check_cfl(const MetricField& metric, const SpacetimeGrid& grid, double c_cfl = 0.9);

// Values on one time level.
using Slice = std::vector<cplx>;

struct ScalarField {
  GridPtr grid;
  std::vector<cplx> values;

  static ScalarField zeros(GridPtr grid);
  static ScalarField from_function(GridPtr grid, const std::function<cplx(const Vec&)>& f);

  cplx& at(int level, std::size_t node) { return values[static_cast<std::size_t>(level) * grid->spatial_count() + node]; }
  cplx at(int level, std::size_t node) const {
    return values[static_cast<std::size_t>(level) * grid->spatial_count() + node];
  }
  Slice slice(int level) const;
  double max_abs() const;
  bool finite() const;
};

ScalarField operator+(const ScalarField& a, const ScalarField& b);
ScalarField operator-(const ScalarField& a, const ScalarField& b);
ScalarField operator*(cplx c, const ScalarField& a);
ScalarField conj(const ScalarField& a);

// Values on Sigma nodes, level-major: values[level * sigma_count + j].
struct SigmaField {
  GridPtr grid;
  std::vector<cplx> values;

  static SigmaField zeros(GridPtr grid);
  static SigmaField from_function(GridPtr grid, const std::function<cplx(const Vec&)>& f);

  cplx& at(int level, std::size_t j) { return values[static_cast<std::size_t>(level) * grid->sigma_count() + j]; }
  cplx at(int level, std::size_t j) const {
    return values[static_cast<std::size_t>(level) * grid->sigma_count() + j];
  }
  double max_abs() const;
  bool finite() const;
};

SigmaField operator+(const SigmaField& a, const SigmaField& b);
SigmaField operator-(const SigmaField& a, const SigmaField& b);
SigmaField operator*(cplx c, const SigmaField& a);
SigmaField conj(const SigmaField& a);

using LateralBoundaryData = SigmaField;
using TraceField = SigmaField;

// Quadrature weights on Sigma including dS = sqrt(beta) sqrt(det h h^kk) dt dx'.
std::vector<double> sigma_weights(const MetricField& metric, const SpacetimeGrid& grid);
// Bilinear pairing sum_j w_j a_j b_j (no conjugation).
cplx sigma_pairing(const SigmaField& a, const SigmaField& b, const std::vector<double>& w);
double sigma_l2(const SigmaField& a, const std::vector<double>& w);
// L2 norm over [0,T] x Omega with trapezoid weights in coordinates.
double l2_norm(const ScalarField& u);
// Trapezoid weights of the spatial nodes (product of 1D weights).
std::vector<double> spatial_weights(const SpacetimeGrid& grid);
// Multilinear interpolation in (t, x); throws OutsideDomainError outside the grid.
cplx interpolate(const ScalarField& u, const Vec& p);

struct SolveReport {
  int iterations = 0;
  double residual = 0.0;
  std::vector<double> residual_history;
  std::vector<double> energy_history;
  double cfl = 0.0;
};

struct CompatibilityResult {
  bool pass = true;
  int failing_order = -1;
  double defect = 0.0;
};

// Discrete compatibility of f with the Cauchy data at t = 0 for orders 0..s, using forward
// differences. Orders >= 2 compare against zero and require vanishing u0, u1, F on the boundary.
CompatibilityResult compatibility_check(const SigmaField& f, const Slice* u0, const Slice* u1,
                                        const ScalarField* F, int s, double tol = 1e-10);

// Leapfrog scheme for the divergence form
//   d_t(A d_t u) - d_k(B^kl d_l u) = sqrt|g| F,  A = sqrt(det h)/sqrt(beta), B = sqrt(beta) sqrt(det h) h^-1.
class WaveOperator {
 public:
  WaveOperator(MetricPtr metric, GridPtr grid, double c_cfl = 0.9);

  const MetricField& metric() const { return *metric_; }
  MetricPtr metric_ptr() const { return metric_; }
  GridPtr grid() const { return grid_; }
  double cfl() const { return cfl_; }

  // Source values F on a time level (may be null for F = 0).
  using SourceFn = std::function<void(int level, Slice& F)>;
  using ObserverFn = std::function<void(int level, const Slice& u)>;

  // Marches from t = 0 to t = T, calling observe(level, u) once per level in order.
  void march(const SourceFn& source, const SigmaField& f, const Slice& u0, const Slice& u1,
             const ObserverFn& observe) const;

  // Discrete box_g u - F at interior nodes of levels 1..nt-1 (zero elsewhere).
  ScalarField residual(const ScalarField& u, const ScalarField* F) const;

 private:
  struct SpaceCoeffs {
    std::vector<double> sqrtg;                   // nodes
    std::vector<std::vector<double>> bdiag;      // bdiag[k][node] at node + e_k/2
    std::vector<std::vector<double>> bmix;       // bmix[k*n+l][node], k != l
  };
  void eval_a(double t, std::vector<double>& a) const;
  void eval_space(double t, SpaceCoeffs& c) const;
  cplx apply_space(const SpaceCoeffs& c, const Slice& u, std::size_t node) const;

  MetricPtr metric_;
  GridPtr grid_;
  double cfl_;
  bool frozen_;
  std::vector<double> a_frozen_;
  SpaceCoeffs space_frozen_;
};

ScalarField solve_linear(const WaveOperator& op, const ScalarField* F, const SigmaField& f,
                         const Slice* u0 = nullptr, const Slice* u1 = nullptr);
ScalarField solve_linear(MetricPtr metric, const ScalarField* F, const SigmaField& f, GridPtr grid,
                         const Slice* u0 = nullptr, const Slice* u1 = nullptr);

// Metric with t replaced by T - t.
MetricPtr time_reflected(MetricPtr metric, double T);

// Solution with vanishing Cauchy data at t = T, via the time reflection t -> T - t.
ScalarField solve_linear_backward(MetricPtr metric, const SigmaField& f, GridPtr grid,
                                  const ScalarField* F = nullptr);

struct SemilinearOptions {
  int m = 4;
  double tol = 1e-10;
  int max_iter = 50;
  double kappa = 1e-2;  // bound on max |f|
  double c0 = 1e3;      // asserted: max |u| <= c0 max |f|
  bool record_energy = false;
};

// Picard iteration u_{k+1} = solve_linear(F = -q u_k^m, f).
std::pair<ScalarField, SolveReport> solve_semilinear(const WaveOperator& op, const ScalarField& q,
                                                     const SigmaField& f, const SemilinearOptions& opt);
std::pair<ScalarField, SolveReport> solve_semilinear(MetricPtr metric, const ScalarField& q, int m,
                                                     const SigmaField& f, GridPtr grid, double tol,
                                                     int max_iter);

// Outward conormal derivative h^kj d_j u / sqrt(h^kk) on every Sigma node.
TraceField normal_derivative(const MetricField& metric, const ScalarField& u);

TraceField dn_map(const WaveOperator& op, const ScalarField& q, const SigmaField& f,
                  const SemilinearOptions& opt);
TraceField dn_map(MetricPtr metric, const ScalarField& q, int m, const SigmaField& f, GridPtr grid);

// sup_t sum_{k<=s} ||d_t^k u(t)||_{H^{s-k}(Omega)} with discrete derivatives, s <= 2.
double energy_norm(const ScalarField& u, int s);

void write_field_csv(const ScalarField& u, const std::string& path);
void write_trace_csv(const SigmaField& f, const std::string& path);

}  // namespace qrecon
