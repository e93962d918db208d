#pragma once

#include "qrecon/common.hpp"
#include "qrecon/wave_solver.hpp"

#include <functional>
#include <string>
#include <vector>

namespace qrecon {

struct DnProbe {
  std::vector<SigmaField> f;
  std::vector<double> eps;
  int m = 4;

  // Equal weights eps for every input.
  static DnProbe uniform(std::vector<SigmaField> f, double eps);
  // Throws ConfigError on mismatched sizes or non-positive weights.
  void validate() const;
  // Boundary data sum_j sigma_j eps_j f_j for the bit mask sigma (bit j selects input j).
  SigmaField combination(unsigned mask) const;
};

// (-1)^{|sigma| + m}
int sign_of_pattern(unsigned mask, int m);

using DnCallable = std::function<TraceField(const SigmaField&)>;

// Nonlinear DN map f -> Lambda_q f on a shared operator.
DnCallable nonlinear_dn(const WaveOperator& op, const ScalarField& q, const SemilinearOptions& opt);

// (eps_1...eps_m)^-1 sum_sigma (-1)^{|sigma|+m} dn(sum_j sigma_j eps_j f_j). The 2^m evaluations run on
// up to `jobs` threads; the sum is taken in mask order.
TraceField mixed_finite_difference(const DnCallable& dn, const DnProbe& probe, int jobs = default_jobs());

// v_j with box v_j = 0, v_j = f_j on Sigma, zero Cauchy data at t = 0.
std::vector<ScalarField> first_order_terms(const WaveOperator& op, const DnProbe& probe, int jobs = default_jobs());
std::vector<ScalarField> first_order_terms(MetricPtr metric, const DnProbe& probe, GridPtr grid);

// w with box w = -q v_1...v_m and vanishing data.
ScalarField cross_term(const WaveOperator& op, const ScalarField& q, const std::vector<ScalarField>& v);
ScalarField cross_term(MetricPtr metric, const ScalarField& q, const std::vector<ScalarField>& v, GridPtr grid);

// Trapezoid quadrature of u over [0,T] x Omega with the volume element sqrt|det g|.
cplx spacetime_integral(const MetricField& metric, const ScalarField& u);

// Values of u on the Sigma nodes.
SigmaField restrict_to_sigma(const ScalarField& u);

struct IdentityEvaluation {
  cplx lhs = 0.0;           // -m! int q v0 v1...vm dV_g (verification mode only)
  cplx rhs_boundary = 0.0;  // -int_Sigma v0 D dS with D the mixed difference
  cplx rhs_remainder = 0.0; // lhs - rhs_boundary
  double discrepancy = 0.0; // |lhs - rhs_boundary| / |lhs|
  bool verification = false;
  TraceField mixed;
};

// Both sides of the integral identity. dn supplies the measured DN map. With q_known the lhs is
// evaluated by quadrature (verification mode); with q_known == nullptr only rhs_boundary is
// computed. v_terms may pass precomputed first-order fields.
IdentityEvaluation identity_evaluate(const WaveOperator& op, const ScalarField* q_known, const ScalarField& v0,
                                     const DnProbe& probe, const DnCallable& dn,
                                     const std::vector<ScalarField>* v_terms = nullptr, int jobs = default_jobs());

// Throws NumericalError unless v0 vanishes on the last two time levels.
void check_backward_data(const ScalarField& v0, double tol = 1e-10);

struct RemainderLadder {
  std::vector<double> eps;
  std::vector<double> remainder;  // |rhs(eps) - rhs(0)|
  cplx rhs_limit = 0.0;           // rhs(0) = -m! int_Sigma v0 d_nu w, w the m-linear cross term
  double slope = 0.0;             // least-squares slope of log remainder against log eps
};

// Boundary side of the identity along an eps ladder (uniform weights on the inputs f) against its
// eps -> 0 limit. Throws NumericalError if a remainder vanishes.
RemainderLadder remainder_ladder(const WaveOperator& op, const ScalarField& q, const ScalarField& v0,
                                 const std::vector<SigmaField>& f, const std::vector<double>& eps,
                                 const DnCallable& dn, int jobs = default_jobs());

void append_identity_csv(const std::string& path, const std::string& probe_id, const IdentityEvaluation& ev);

}  // namespace qrecon
