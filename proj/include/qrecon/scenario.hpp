#pragma once

#include "qrecon/reconstruction.hpp"

#include <cstdint>
#include <iosfwd>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace qrecon {

// Flat "key = value" text with dotted keys. '#' starts a comment. Keys may repeat only if the
// values agree; lists are comma separated.
class Config {
 public:
  static Config parse(std::istream& in, const std::string& origin = "<config>");
  static Config load(const std::string& path);

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;

  std::string text(const std::string& key, const std::string& fallback) const;
  double number(const std::string& key, double fallback) const;
  int integer(const std::string& key, int fallback) const;
  bool flag(const std::string& key, bool fallback) const;
  std::vector<double> numbers(const std::string& key, const std::vector<double>& fallback) const;
  std::vector<int> integers(const std::string& key, const std::vector<int>& fallback) const;

  // Throws ConfigError naming every key that no getter has read.
  void reject_unused() const;
  // Sorted "key = value" lines.
  std::string canonical() const;

 private:
  const std::string* find(const std::string& key) const;
  [[noreturn]] void fail(const std::string& key, const std::string& what) const;

  std::string origin_;
  std::map<std::string, std::string> values_;
  std::map<std::string, int> lines_;
  mutable std::set<std::string> used_;
};

struct BumpSpec {
  Vec center;  // (t, x_1, ..., x_n)
  double width2 = 0.08;
  double amplitude = 1.0;
};

struct PulseSpec {
  int axis = 0;
  int side = -1;  // -1 lower face, +1 upper face, 0 every face
  double start = 0.1;
  double width = 0.5;
  double amplitude = 1e-2;
};

enum class Command { forward, beam, identity, reconstruct, sweep };

Command parse_command(const std::string& name);
std::string command_name(Command c);

struct Scenario {
  std::string metric_kind = "minkowski";  // minkowski | perturbed_beta | time_dependent_h | grid_csv
  int n = 1;
  double metric_c = 0.0;
  std::string metric_path;
  Domain domain;
  std::vector<int> nx;
  int nt = 0;  // 0: smallest nt satisfying grid.cfl
  double cfl = 0.9;
  std::vector<BumpSpec> bumps;
  SemilinearOptions solver;
  ProbeOptions probe;

  PulseSpec pulse;
  bool manufactured = false;
  int levels = 3;

  Vec beam_event;
  Vec beam_direction;  // spatial direction of the null tangent
  std::vector<double> beam_taus{40.0, 80.0, 160.0, 320.0};
  double refine_power = 0.0;  // grid for tau uses nx * (tau / tau_first)^refine_power
  bool conjugate = false;

  Vec p0;
  std::vector<double> identity_eps;

  Vec w_lo, w_hi;
  std::vector<int> w_counts;

  std::vector<double> deltas;
  int s = 2;
  double M = 1.0;
  double kappa = 0.5;
  double tau0 = 1.0;
  DeskAnchor anchor;

  std::uint64_t seed = 0;
  std::string config_hash;

  MetricPtr metric() const;
  GridPtr grid() const;
  GridPtr grid(const std::vector<int>& nx_override) const;
  ScalarField q_true(GridPtr g) const;
  RecoveryConfig recovery(GridPtr g, int jobs) const;
};

// Reads and validates every key the command needs. Unknown keys, bad values and CFL violations
// raise ConfigError with the offending key in the message.
Scenario load_scenario(const Config& cfg, Command command);

// ---------------------------------------------------------------------------
// Runners. Each writes its files into out_dir (created if missing) when out_dir is non-empty.

struct ConvergenceRow {
  int nx = 0;
  int nt = 0;
  double max_error = 0.0;
  double ratio = 0.0;  // previous error / this error, 0 on the first row
};

// u = sin(t) prod_k sin(pi x_k) in Minkowski n+1 on the unit box, grid halved `levels - 1` times.
std::vector<ConvergenceRow> manufactured_ladder(int n, double T, int nx0, int levels, double cfl = 0.9);

struct ForwardResult {
  SolveReport report;
  double max_abs = 0.0;
  std::vector<ConvergenceRow> convergence;
};
ForwardResult run_forward(const Scenario& sc, const std::string& out_dir, int jobs);

struct BeamRow {
  double tau = 0.0;
  int nx = 0;
  double residual_l2 = 0.0;
  double l4 = 0.0;
  double r_l2 = 0.0;
  double beam_l2 = 0.0;
  double ratio = 0.0;
};
struct BeamLadder {
  std::vector<BeamRow> rows;
  bool residual_vanishes = false;  // every residual is exactly zero
  double residual_slope = 0.0;     // fitted when no residual vanishes
};
BeamLadder run_beam(const Scenario& sc, const std::string& out_dir, int jobs);

struct IdentityResult {
  IdentityEvaluation evaluation;
  std::vector<std::pair<double, IdentityEvaluation>> ladder;
  bool has_slope = false;
  RemainderLadder remainder;
};
IdentityResult run_identity(const Scenario& sc, const std::string& out_dir, int jobs);

std::vector<PointRecovery> run_reconstruct(const Scenario& sc, const std::string& out_dir, int jobs);

StabilityReport run_sweep(const Scenario& sc, const std::string& out_dir, int jobs);

}  // namespace qrecon
