// Command line front end: qrecon <command> --config FILE --out DIR [--jobs N] [--seed S]
//
// Exit codes: 0 success, 2 configuration error, 3 numerical failure.

#include "qrecon/scenario.hpp"

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <thread>

namespace {

const char* kFiles = R"(Output files (CSV headers are the first line of each file):
  forward      solution.csv        t,x1[,x2,x3],re,im                 one row per grid node
               forward_report.txt  iterations, residual, cfl, max_abs, config_hash
               convergence.csv     nx,nt,max_error,ratio             only with forward.manufactured
  beam         beam.csv            t,x1[,..],s,y1[,..],re,im          first tau, base grid
               beam_ladder.csv     tau,nx,residual_l2,l4,r_l2,beam_l2,ratio
  identity     identity.csv        probe,lhs_re,lhs_im,rhs_boundary_re,rhs_boundary_im,
                                   rhs_remainder_re,rhs_remainder_im,discrepancy
               identity_summary.txt  discrepancy and, with >= 2 identity.eps, remainder_slope
  reconstruct  reconstruct.csv     point,t,x1[,..],q_true,q_hat_re,q_hat_im,abs_err,discrepancy,status
  sweep        sweep.csv           delta,eps,tau,point,t,x1[,..],q_true,q_hat_re,q_hat_im,abs_err,status
               sweep_summary.txt   sigma, slope with stderr and 95% band, intercept, r2, per-delta rows
)";

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semilinear wave inverse problem: forward solves, beams, the linearized identity and recovery of q"};
  app.footer(kFiles);
  app.require_subcommand(1);

  std::string config_path, out_dir = ".";
  int jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  std::uint64_t seed = 0;
  std::vector<CLI::Option*> seed_opts;

  for (const char* name : {"forward", "beam", "identity", "reconstruct", "sweep"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "scenario file (key = value lines)")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "output directory, created if missing");
    sub->add_option("--jobs", jobs, "worker threads")->check(CLI::Range(1, 256));
    seed_opts.push_back(sub->add_option("--seed", seed, "noise seed (unsigned 64-bit), overrides the config key 'seed'"));
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  const auto command_name = app.get_subcommands().front()->get_name();
  try {
    using namespace qrecon;
    Command command = parse_command(command_name);
    Config cfg = Config::load(config_path);
    for (auto* opt : seed_opts)
      if (opt->count() > 0) cfg.set("seed", std::to_string(seed));
    Scenario sc = load_scenario(cfg, command);

    switch (command) {
      case Command::forward: {
        auto r = run_forward(sc, out_dir, jobs);
        std::cout << "iterations " << r.report.iterations << ", residual " << r.report.residual << ", max |u| "
                  << r.max_abs << "\n";
        for (const auto& row : r.convergence)
          std::cout << "nx " << row.nx << "  error " << row.max_error << "  ratio " << row.ratio << "\n";
        break;
      }
      case Command::beam: {
        auto lad = run_beam(sc, out_dir, jobs);
        for (const auto& row : lad.rows)
          std::cout << "tau " << row.tau << "  residual " << row.residual_l2 << "  |r|/|v| " << row.ratio << "\n";
        if (lad.residual_vanishes)
          std::cout << "residual vanishes identically\n";
        else if (lad.rows.size() >= 2)
          std::cout << "residual slope " << lad.residual_slope << "\n";
        break;
      }
      case Command::identity: {
        auto r = run_identity(sc, out_dir, jobs);
        std::cout << "lhs " << r.evaluation.lhs << "  rhs " << r.evaluation.rhs_boundary << "  discrepancy "
                  << r.evaluation.discrepancy << "\n";
        if (r.has_slope) std::cout << "remainder slope " << r.remainder.slope << "\n";
        break;
      }
      case Command::reconstruct: {
        auto pts = run_reconstruct(sc, out_dir, jobs);
        int ok = 0;
        for (const auto& p : pts) {
          if (p.ok) {
            ++ok;
            std::cout << "t " << p.p0.t << "  q_true " << p.q_true << "  q_hat " << p.q_hat.real() << "\n";
          } else {
            std::cerr << "t " << p.p0.t << "  failed: " << p.failure << "\n";
          }
        }
        std::cout << ok << " of " << pts.size() << " points recovered\n";
        if (ok == 0) return 3;
        break;
      }
      case Command::sweep: {
        auto rep = run_sweep(sc, out_dir, jobs);
        for (const auto& row : rep.ladder)
          std::cout << "delta " << row.delta << "  error " << row.error << "  failures " << row.failures << "\n";
        std::cout << "sigma " << rep.sigma_exact << " = " << rep.sigma_value << "\n";
        if (rep.slope_defined)
          std::cout << "slope " << rep.slope << " +- " << rep.slope_stderr << "  r2 " << rep.r2 << "\n";
        else
          std::cout << "slope undefined (fewer than two noise levels)\n";
        break;
      }
    }
  } catch (const qrecon::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const qrecon::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
