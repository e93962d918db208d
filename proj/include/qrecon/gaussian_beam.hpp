#pragma once

#include "qrecon/common.hpp"
#include "qrecon/geometry.hpp"
#include "qrecon/wave_solver.hpp"

#include <memory>
#include <string>
#include <vector>

namespace qrecon {

struct BeamSpec {
  ChartPtr chart;
  double tau = 40.0;
  int p = 4;
  int order = 2;  // only the second-order phase with leading amplitude is implemented
  double delta = 0.1;  // cutoff radius in y
  double s0 = 0.0;     // amplitude normalized to 1 here
  CMat H0;
  double tau_floor = 1.0;

  // Throws ConfigError on a violated invariant.
  void validate() const;
};

// Second-order phase Theta = y_1 + y.H(s)y along the chart axis.
// H = Z Y^-1 where Y' = -4 P Z, Z' = M Y, M = R(e0,ej,e0,ek)/4, P = diag(0,1,...,1).
struct PhaseJet {
  std::vector<double> s;
  std::vector<CMat> H;
  std::vector<CMat> dH;
  std::vector<CMat> ddH;  // from differentiating the Riccati equation; slopes for derivative_at
  std::vector<CMat> Y;
  std::vector<CMat> Z;
  double min_im_eigenvalue = 0.0;

  CMat at(double s_query) const;
  CMat derivative_at(double s_query) const;
};

struct AmplitudeJet {
  std::vector<double> s;
  std::vector<CMat> Y;
  std::vector<cplx> b00;
  std::vector<cplx> db00;
  double min_abs_det = 0.0;
  double max_transport_residual = 0.0;

  cplx at(double s_query) const;
  cplx derivative_at(double s_query) const;
};

// Curvature block M(s) in frame components.
CMat riccati_curvature(const FermiChart& chart, double s);

PhaseJet solve_riccati(const MetricField& metric, const FermiChart& chart, const CMat& H0);

// Second y-derivatives of g(dTheta, dTheta) at (s, 0), max abs entry. Richardson-extrapolated
// central differences with step h.
double eikonal_residual(const FermiChart& chart, const PhaseJet& phase, double s, double h = 1e-3);

AmplitudeJet solve_transport(const MetricField& metric, const FermiChart& chart, const PhaseJet& phase);

// Cutoff profile: 1 on r <= 1/2, 0 on r >= 1, C^2 smoothstep in between.
double cutoff(double r);
double cutoff_d1(double r);
double cutoff_d2(double r);

class Beam {
 public:
  Beam(BeamSpec spec, std::shared_ptr<const PhaseJet> phase, std::shared_ptr<const AmplitudeJet> amp,
       bool conjugated = false);

  // Value and derivatives with respect to chart coordinates (s, y).
  struct Jet {
    cplx v;
    CVec d;
    CMat dd;
  };

  cplx operator()(const Vec& p) const;
  cplx operator()(const Event& e) const { return (*this)(e.coords()); }
  cplx at_chart(double s, const Vec& y) const;
  Jet chart_jet(double s, const Vec& y) const;
  cplx theta(double s, const Vec& y) const;

  const BeamSpec& spec() const { return spec_; }
  const FermiChart& chart() const { return *spec_.chart; }
  const PhaseJet& phase() const { return *phase_; }
  const AmplitudeJet& amplitude() const { return *amp_; }
  bool conjugated() const { return conjugated_; }
  int spatial_dim() const { return spec_.chart->spatial_dim(); }
  double scale() const;  // tau^{n/2p}

  Beam conjugate() const { return Beam(spec_, phase_, amp_, !conjugated_); }
  Beam with_tau(double tau) const;

 private:
  BeamSpec spec_;
  std::shared_ptr<const PhaseJet> phase_;
  std::shared_ptr<const AmplitudeJet> amp_;
  bool conjugated_;
  cplx b_ref_;
};

Beam assemble_beam(const BeamSpec& spec);
Beam conjugate_beam(const Beam& beam);

ScalarField sample_beam(const Beam& beam, GridPtr grid);
SigmaField beam_trace(const Beam& beam, GridPtr grid);

// Checks the rule of at least 10 nodes per phase wavelength; throws NumericalError.
void check_resolution(const Beam& beam, const SpacetimeGrid& grid, double nodes_per_wavelength = 10.0);

struct ResidualResult {
  ScalarField field;
  double l2 = 0.0;
  double tau = 0.0;
};

// box_g v_tau at p from exact chart derivatives of the ansatz (zero outside the cutoff).
cplx beam_box(const Beam& beam, const Vec& p);

// box_g v_tau evaluated from exact chart derivatives of the ansatz at every grid node.
ResidualResult beam_residual(const Beam& beam, GridPtr grid);

enum class BeamDirection { forward, backward };

struct CorrectedBeam {
  std::shared_ptr<const Beam> beam;
  BeamDirection direction = BeamDirection::forward;
  ScalarField r;  // correction
  ScalarField v;  // v_tau + r, a discrete solution with trace v_tau on Sigma

  cplx operator()(const Vec& p) const;
};

// r solves the scheme with source -box_h v_tau and vanishing data, so v_tau + r is a discrete
// solution with the beam trace on Sigma and zero Cauchy data at t = 0 (forward) or t = T (backward).
CorrectedBeam correct_beam(const Beam& beam, BeamDirection direction, GridPtr grid);

struct CorrectionNorms {
  double r_l2 = 0.0;
  double beam_l2 = 0.0;
  double ratio() const { return beam_l2 > 0.0 ? r_l2 / beam_l2 : 0.0; }
};

// Same as correct_beam (forward) but streams the norms without storing the fields.
CorrectionNorms correction_norms(const Beam& beam, GridPtr grid);

// Phase Hessian 2 sum_j Hess Im Theta_j at e, in normal coordinates (orthonormal frame at e).
struct PhaseHessian {
  Mat H;
  double det = 0.0;
  Mat frame;  // columns: orthonormal basis used for the normal coordinates
};

PhaseHessian phase_hessian(const Beam& b1, const Beam& b2, const Vec& e);

// L^p norm with the volume form sqrt|g| on the grid.
double beam_lp_norm(const Beam& beam, const SpacetimeGrid& grid, double p);

void write_beam_csv(const Beam& beam, const SpacetimeGrid& grid, const std::string& path);

}  // namespace qrecon
