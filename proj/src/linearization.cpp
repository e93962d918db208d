#include "qrecon/linearization.hpp"

#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>

namespace qrecon {

DnProbe DnProbe::uniform(std::vector<SigmaField> f, double eps) {
  DnProbe p;
  p.m = static_cast<int>(f.size());
  p.eps.assign(f.size(), eps);
  p.f = std::move(f);
  return p;
}

void DnProbe::validate() const {
  if (m < 1 || m > 16) throw ConfigError("probe order m must lie in [1, 16]");
  if (static_cast<int>(f.size()) != m || static_cast<int>(eps.size()) != m)
    throw ConfigError("probe needs exactly m inputs and m weights");
  for (double e : eps)
    if (!(e > 0.0)) throw ConfigError("probe weights must be positive");
  for (const auto& fj : f)
    if (fj.grid.get() != f[0].grid.get() && fj.grid->sigma_count() != f[0].grid->sigma_count())
      throw ConfigError("probe inputs live on different grids");
}

SigmaField DnProbe::combination(unsigned mask) const {
  SigmaField out = SigmaField::zeros(f[0].grid);
  for (int j = 0; j < m; ++j) {
    if (!(mask & (1u << j))) continue;
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += eps[j] * f[j].values[i];
  }
  return out;
}

int sign_of_pattern(unsigned mask, int m) {
  return ((std::popcount(mask) + m) % 2 == 0) ? 1 : -1;
}

DnCallable nonlinear_dn(const WaveOperator& op, const ScalarField& q, const SemilinearOptions& opt) {
  return [&op, &q, opt](const SigmaField& f) { return dn_map(op, q, f, opt); };
}

namespace {

std::string pattern_string(unsigned mask, int m) {
  std::string s;
  for (int j = 0; j < m; ++j) s += (mask & (1u << j)) ? '1' : '0';
  return s;
}

}  // namespace

TraceField mixed_finite_difference(const DnCallable& dn, const DnProbe& probe, int jobs) {
  probe.validate();
  const unsigned count = 1u << probe.m;
  std::vector<std::optional<TraceField>> traces(count);
  parallel_for(count, jobs, [&](std::size_t k) {
    const unsigned mask = static_cast<unsigned>(k);
    try {
      traces[k] = dn(probe.combination(mask));
    } catch (const DivergenceError& e) {
      throw DivergenceError(std::string(e.what()) + " (sign pattern " + pattern_string(mask, probe.m) + ")");
    } catch (const NumericalError& e) {
      throw NumericalError(std::string(e.what()) + " (sign pattern " + pattern_string(mask, probe.m) + ")");
    }
  });
  TraceField out = TraceField::zeros(probe.f[0].grid);
  double prod = 1.0;
  for (double e : probe.eps) prod *= e;
  for (unsigned mask = 0; mask < count; ++mask) {
    const double w = sign_of_pattern(mask, probe.m) / prod;
    const auto& t = traces[mask]->values;
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += w * t[i];
  }
  return out;
}

std::vector<ScalarField> first_order_terms(const WaveOperator& op, const DnProbe& probe, int jobs) {
  probe.validate();
  std::vector<ScalarField> v(probe.f.size());
  parallel_for(probe.f.size(), jobs, [&](std::size_t j) { v[j] = solve_linear(op, nullptr, probe.f[j]); });
  return v;
}

std::vector<ScalarField> first_order_terms(MetricPtr metric, const DnProbe& probe, GridPtr grid) {
  WaveOperator op(std::move(metric), std::move(grid));
  return first_order_terms(op, probe);
}

ScalarField cross_term(const WaveOperator& op, const ScalarField& q, const std::vector<ScalarField>& v) {
  if (v.empty()) throw ConfigError("cross term needs at least one first-order field");
  ScalarField F = ScalarField::zeros(op.grid());
  for (std::size_t i = 0; i < F.values.size(); ++i) {
    cplx prod = -q.values[i];
    for (const auto& vj : v) prod *= vj.values[i];
    F.values[i] = prod;
  }
  return solve_linear(op, &F, SigmaField::zeros(op.grid()));
}

ScalarField cross_term(MetricPtr metric, const ScalarField& q, const std::vector<ScalarField>& v, GridPtr grid) {
  WaveOperator op(std::move(metric), std::move(grid));
  return cross_term(op, q, v);
}

cplx spacetime_integral(const MetricField& metric, const ScalarField& u) {
  const auto& g = *u.grid;
  const auto ws = spatial_weights(g);
  const auto wt = trapezoid_weights(g.nt(), g.dt());
  const bool frozen = metric.is_time_independent();
  std::vector<double> sqrtg(g.spatial_count());
  auto fill = [&](int level) {
    for (std::size_t node = 0; node < g.spatial_count(); ++node)
      sqrtg[node] = ws[node] * metric.sqrt_abs_det(g.coords(level, node));
  };
  if (frozen) fill(0);
  cplx total = 0.0;
  for (int l = 0; l <= g.nt(); ++l) {
    if (!frozen) fill(l);
    cplx acc = 0.0;
    for (std::size_t node = 0; node < g.spatial_count(); ++node) acc += sqrtg[node] * u.at(l, node);
    total += wt[l] * acc;
  }
  return total;
}

SigmaField restrict_to_sigma(const ScalarField& u) {
  SigmaField f = SigmaField::zeros(u.grid);
  const auto& sig = u.grid->sigma();
  for (int l = 0; l <= u.grid->nt(); ++l)
    for (std::size_t j = 0; j < sig.size(); ++j) f.at(l, j) = u.at(l, sig[j].node);
  return f;
}

void check_backward_data(const ScalarField& v0, double tol) {
  const auto& g = *v0.grid;
  const double scale = std::max(1e-300, v0.max_abs());
  for (int level : {g.nt(), g.nt() - 1})
    for (std::size_t node = 0; node < g.spatial_count(); ++node)
      if (std::abs(v0.at(level, node)) > tol * scale)
        throw NumericalError("v0 does not vanish near t = T (level " + std::to_string(level) + ")");
}

IdentityEvaluation identity_evaluate(const WaveOperator& op, const ScalarField* q_known, const ScalarField& v0,
                                     const DnProbe& probe, const DnCallable& dn,
                                     const std::vector<ScalarField>* v_terms, int jobs) {
  probe.validate();
  check_backward_data(v0);
  const auto& metric = op.metric();
  IdentityEvaluation ev;
  ev.mixed = mixed_finite_difference(dn, probe, jobs);
  const auto w = sigma_weights(metric, *op.grid());
  ev.rhs_boundary = -sigma_pairing(restrict_to_sigma(v0), ev.mixed, w);
  if (q_known) {
    ev.verification = true;
    std::vector<ScalarField> own;
    if (!v_terms) {
      own = first_order_terms(op, probe, jobs);
      v_terms = &own;
    }
    double fact = 1.0;
    for (int k = 2; k <= probe.m; ++k) fact *= k;
    ScalarField integrand = ScalarField::zeros(op.grid());
    for (std::size_t i = 0; i < integrand.values.size(); ++i) {
      cplx prod = q_known->values[i] * v0.values[i];
      for (const auto& vj : *v_terms) prod *= vj.values[i];
      integrand.values[i] = prod;
    }
    ev.lhs = -fact * spacetime_integral(metric, integrand);
    ev.rhs_remainder = ev.lhs - ev.rhs_boundary;
    ev.discrepancy = std::abs(ev.lhs) > 0.0 ? std::abs(ev.rhs_remainder) / std::abs(ev.lhs)
                                            : std::abs(ev.rhs_remainder);
  }
  return ev;
}

RemainderLadder remainder_ladder(const WaveOperator& op, const ScalarField& q, const ScalarField& v0,
                                 const std::vector<SigmaField>& f, const std::vector<double>& eps,
                                 const DnCallable& dn, int jobs) {
  if (eps.size() < 2) throw ConfigError("remainder ladder needs at least two eps values");
  check_backward_data(v0);
  const auto& metric = op.metric();
  const auto w = sigma_weights(metric, *op.grid());
  const SigmaField v0_sigma = restrict_to_sigma(v0);
  RemainderLadder out;
  out.eps = eps;
  DnProbe unit = DnProbe::uniform(f, 1.0);
  double fact = 1.0;
  for (int k = 2; k <= unit.m; ++k) fact *= k;
  auto v = first_order_terms(op, unit, jobs);
  TraceField lin = normal_derivative(metric, cross_term(op, q, v));
  out.rhs_limit = -fact * sigma_pairing(v0_sigma, lin, w);
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  for (double e : eps) {
    TraceField D = mixed_finite_difference(dn, DnProbe::uniform(f, e), jobs);
    double r = std::abs(-sigma_pairing(v0_sigma, D, w) - out.rhs_limit);
    if (!(r > 0.0)) throw NumericalError("remainder vanishes at eps = " + format_double(e));
    out.remainder.push_back(r);
    double x = std::log(e), y = std::log(r);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double N = static_cast<double>(eps.size());
  const double den = N * sxx - sx * sx;
  if (!(den > 0.0)) throw ConfigError("eps ladder needs distinct values");
  out.slope = (N * sxy - sx * sy) / den;
  return out;
}

void append_identity_csv(const std::string& path, const std::string& probe_id, const IdentityEvaluation& ev) {
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream out(path, std::ios::app);
  if (!out) throw ConfigError("cannot open " + path);
  if (fresh) out << "probe,lhs_re,lhs_im,rhs_boundary_re,rhs_boundary_im,rhs_remainder_re,rhs_remainder_im,discrepancy\n";
  out << probe_id << "," << format_double(ev.lhs.real()) << "," << format_double(ev.lhs.imag()) << ","
      << format_double(ev.rhs_boundary.real()) << "," << format_double(ev.rhs_boundary.imag()) << ","
      << format_double(ev.rhs_remainder.real()) << "," << format_double(ev.rhs_remainder.imag()) << ","
      << format_double(ev.discrepancy) << "\n";
}

}  // namespace qrecon
