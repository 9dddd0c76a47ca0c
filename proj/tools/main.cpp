// icmem: deterministic-equivalent theory and seeded Monte Carlo simulation of
// in-context memorization for nonlinear attention, with figure presets and
// CSV emission.
//
// Exit codes: 0 success, 1 usage/config error, 2 numerical failure in at
// least one cell (rows for failed cells are still emitted, with the theory
// fields left empty).

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "icmem/experiments.hpp"
#include "icmem/nonlinearity.hpp"
#include "icmem/simulate.hpp"

namespace {

using icmem::SweepConfig;
using icmem::SweepMode;
using icmem::SweepResult;

int default_workers() {
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

// Shared sweep options; `overrides` accumulates --set pairs in order, then the
// --trials/--seed sugar so explicit flags win over config-file values.
struct SweepArgs {
  std::string config_path;
  std::vector<std::string> set_pairs;
  std::string out_path;
  int workers = default_workers();
  int trials = -1;            // -1: flag not given
  std::uint64_t seed = 0;
  bool seed_given = false;
};

void add_common_options(CLI::App* cmd, SweepArgs& args, bool with_mc_flags) {
  cmd->add_option("--config", args.config_path,
                  "Key=value config file (see README for the schema)");
  cmd->add_option("--set", args.set_pairs,
                  "Override a config key, e.g. --set gamma=0.01 (repeatable)")
      ->take_all();
  cmd->add_option("--out", args.out_path,
                  "Write the CSV here (atomic); default prints to stdout");
  cmd->add_option("--workers", args.workers, "Worker threads for Monte Carlo")
      ->check(CLI::PositiveNumber);
  if (with_mc_flags) {
    cmd->add_option("--trials", args.trials, "Monte Carlo trials per cell")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--seed", args.seed, "64-bit master seed")
        ->trigger_on_parse()  // so we can tell 0-given from not-given
        ->each([&args](const std::string&) { args.seed_given = true; });
  }
}

std::vector<std::pair<std::string, std::string>> split_overrides(
    const std::vector<std::string>& set_pairs) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const std::string& kv : set_pairs) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == kv.size())
      throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    out.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return out;
}

// Builds the SweepConfig from config file + overrides, applied in order:
// injected default mode (so an explicit mode in the file or on the command
// line wins), then the file pairs, then --set pairs, then the --trials/--seed
// flag sugar.
SweepConfig build_config(const SweepArgs& args,
                         const std::string& forced_default_mode) {
  std::vector<std::pair<std::string, std::string>> pairs;
  if (!forced_default_mode.empty())
    pairs.emplace_back("mode", forced_default_mode);
  if (!args.config_path.empty()) {
    std::ifstream f(args.config_path);
    if (!f)
      throw std::runtime_error("cannot open config file " + args.config_path);
    std::ostringstream buf;
    buf << f.rdbuf();
    auto file_pairs = icmem::parse_kv_text(buf.str());
    pairs.insert(pairs.end(), file_pairs.begin(), file_pairs.end());
  }
  auto cli_pairs = split_overrides(args.set_pairs);
  pairs.insert(pairs.end(), cli_pairs.begin(), cli_pairs.end());
  if (args.trials >= 0)
    pairs.emplace_back("trials", std::to_string(args.trials));
  if (args.seed_given)
    pairs.emplace_back("master_seed", std::to_string(args.seed));
  return icmem::config_from_kv(pairs);
}

int emit(const SweepResult& result, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << icmem::to_csv(result.rows);
  } else {
    icmem::write_csv(out_path, result.rows);
    std::cerr << "wrote " << out_path << " (" << result.rows.size()
              << " rows)\n";
  }
  if (result.exit_code != 0 && !result.message.empty())
    std::cerr << "numerical failure: " << result.message << "\n";
  return result.exit_code;
}

int run_configured_sweep(const SweepArgs& args,
                         const std::string& forced_default_mode,
                         bool require_theory, bool require_empirical) {
  SweepConfig cfg = build_config(args, forced_default_mode);
  if (require_theory && cfg.empirical())
    throw std::invalid_argument(
        std::string("mode ") + icmem::to_string(cfg.mode) +
        " is empirical; use the empirical or sweep subcommand");
  if (require_empirical && !cfg.empirical())
    throw std::invalid_argument(
        std::string("mode ") + icmem::to_string(cfg.mode) +
        " is not empirical; use the theory or sweep subcommand");
  cfg.validate();
  return emit(icmem::run_sweep(cfg, args.workers), args.out_path);
}

int run_figure(const std::string& name, const SweepArgs& args) {
  icmem::SweepPreset preset = icmem::figure_preset(name);
  for (SweepConfig& cfg : preset.configs) {
    if (args.trials >= 1) {
      cfg.mode = cfg.mode == SweepMode::theory_ridge
                     ? SweepMode::empirical_ridge
                     : SweepMode::empirical_attention;
      cfg.trials = args.trials;
    }
    if (args.seed_given) cfg.master_seed = args.seed;
    cfg.validate();
  }
  return emit(icmem::run_sweeps(preset.configs, args.workers), args.out_path);
}

// Diagnostics share the config vocabulary (n, p, c, f, f_param.*, gamma, snr,
// alignment) but run a single cell, not a sweep.
struct DiagArgs {
  std::vector<std::string> set_pairs;
  std::uint64_t seed = 1;
  std::string out_path;
};

SweepConfig diag_config(const DiagArgs& args) {
  SweepConfig cfg = icmem::config_from_kv(split_overrides(args.set_pairs));
  if (cfg.n == 0) cfg.n = 1024;
  if (cfg.p == 0) cfg.p = 2048;
  return cfg;
}

void diag_emit(const std::string& out_path, const std::string& text) {
  if (out_path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(out_path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + out_path);
  f << text;
}

int run_diag_linearization(const DiagArgs& args) {
  const SweepConfig cfg = diag_config(args);
  const icmem::Nonlinearity f =
      icmem::centered(icmem::catalog(cfg.f_name, cfg.f_params));
  const int p = static_cast<int>(std::llround(cfg.p));
  const icmem::SignalGeometry geo =
      icmem::sample_geometry(p, cfg.snr, cfg.alignment, args.seed);
  const icmem::Dataset ds = icmem::sample_dataset(cfg.n, p, geo.mu, args.seed);
  const icmem::LinearizationReport rep =
      icmem::linearization_parts(ds, geo.w, f);

  char buf[512];
  std::snprintf(buf, sizeof buf,
                "linearization n=%d p=%d f=%s snr=%.12g alignment=%s seed=%llu\n"
                "residual      %.12g\n"
                "kn_norm       %.12g\n"
                "uk_norm       %.12g\n"
                "vq_norm       %.12g\n"
                "sigmak_norm   %.12g\n",
                rep.n, rep.p, cfg.f_name.c_str(), cfg.snr,
                icmem::to_string(cfg.alignment),
                static_cast<unsigned long long>(args.seed), rep.residual,
                rep.kn_norm, rep.uk_norm, rep.vq_norm, rep.sigmak_norm);
  diag_emit(args.out_path, buf);
  return 0;
}

int run_diag_traces(const DiagArgs& args) {
  const SweepConfig cfg = diag_config(args);
  const icmem::Nonlinearity f =
      icmem::centered(icmem::catalog(cfg.f_name, cfg.f_params));
  const int p = static_cast<int>(std::llround(cfg.p));
  const icmem::TraceDiagnostics td =
      icmem::trace_diagnostics(cfg.n, p, f, cfg.gamma, args.seed);

  std::string text;
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "traces n=%d p=%d c=%.12g f=%s gamma=%.12g seed=%llu\n"
                "quantity   empirical        predicted        rel_gap\n",
                td.n, td.p, td.c, cfg.f_name.c_str(), td.gamma,
                static_cast<unsigned long long>(args.seed));
  text += buf;
  auto row = [&](const char* name, double hat, double pred) {
    const double gap =
        std::abs(hat - pred) / std::max(1e-300, std::abs(pred));
    std::snprintf(buf, sizeof buf, "%-10s %-16.9g %-16.9g %.3g\n", name, hat,
                  pred, gap);
    text += buf;
  };
  row("m", td.m_hat, td.m_pred);
  const char* names[7] = {"delta_1", "delta_2", "delta_3", "delta_4",
                          "delta_5", "delta_6", "delta_7"};
  for (int i = 0; i < 7; ++i) row(names[i], td.delta_hat[i], td.delta_pred[i]);
  std::snprintf(buf, sizeof buf, "resolvent_identity_gap %.6g\n",
                td.resolvent_identity_gap);
  text += buf;
  diag_emit(args.out_path, text);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Deterministic-equivalent theory and seeded Monte Carlo simulation of "
      "in-context memorization for nonlinear attention"};
  app.require_subcommand(1);

  SweepArgs theory_args, empirical_args, sweep_args, figure_args;
  std::string figure_name;
  DiagArgs lin_args, trace_args;

  CLI::App* theory = app.add_subcommand(
      "theory", "Evaluate theory curves for a configured sweep");
  add_common_options(theory, theory_args, /*with_mc_flags=*/false);

  CLI::App* empirical = app.add_subcommand(
      "empirical", "Run a Monte Carlo sweep (theory columns included)");
  add_common_options(empirical, empirical_args, /*with_mc_flags=*/true);

  CLI::App* sweep = app.add_subcommand(
      "sweep", "Run a sweep whose mode comes entirely from the config");
  add_common_options(sweep, sweep_args, /*with_mc_flags=*/true);

  CLI::App* figure = app.add_subcommand(
      "figure", "Reproduce a published figure panel's data by name");
  figure->add_option("name", figure_name,
                     "fig1a fig1b fig1c fig2a fig2b fig2c fig3a fig3b fig3c "
                     "fig4 fig5")
      ->required();
  figure->add_option("--out", figure_args.out_path,
                     "Write the CSV here (atomic); default prints to stdout");
  figure->add_option("--trials", figure_args.trials,
                     "Upgrade the preset to its empirical counterpart with "
                     "this many trials per cell")
      ->check(CLI::PositiveNumber);
  figure->add_option("--seed", figure_args.seed, "64-bit master seed")
      ->trigger_on_parse()
      ->each([&figure_args](const std::string&) {
        figure_args.seed_given = true;
      });
  figure->add_option("--workers", figure_args.workers,
                     "Worker threads for Monte Carlo")
      ->check(CLI::PositiveNumber);

  CLI::App* diag =
      app.add_subcommand("diag", "Finite-size diagnostics for one cell");
  diag->require_subcommand(1);
  CLI::App* lin = diag->add_subcommand(
      "linearization",
      "Spectral residual of the rank-three kernel linearization");
  lin->add_option("--set", lin_args.set_pairs,
                  "Cell parameter, e.g. --set n=1024 (n, p, c, f, f_param.*, "
                  "snr, alignment)")
      ->take_all();
  lin->add_option("--seed", lin_args.seed, "Trial seed");
  lin->add_option("--out", lin_args.out_path, "Write the report here");
  CLI::App* traces = diag->add_subcommand(
      "traces", "Empirical resolvent traces vs fixed-point predictions");
  traces->add_option("--set", trace_args.set_pairs,
                     "Cell parameter, e.g. --set gamma=1 (n, p, c, f, "
                     "f_param.*, gamma)")
      ->take_all();
  traces->add_option("--seed", trace_args.seed, "Trial seed");
  traces->add_option("--out", trace_args.out_path, "Write the report here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // CLI11's class-specific exit codes are collapsed onto the documented
    // contract: 0 for --help/--version, 1 for any usage error.
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (theory->parsed())
      return run_configured_sweep(theory_args, "theory-attention",
                                  /*require_theory=*/true,
                                  /*require_empirical=*/false);
    if (empirical->parsed())
      return run_configured_sweep(empirical_args, "empirical-attention",
                                  /*require_theory=*/false,
                                  /*require_empirical=*/true);
    if (sweep->parsed())
      return run_configured_sweep(sweep_args, "",
                                  /*require_theory=*/false,
                                  /*require_empirical=*/false);
    if (figure->parsed()) return run_figure(figure_name, figure_args);
    if (lin->parsed()) return run_diag_linearization(lin_args);
    if (traces->parsed()) return run_diag_traces(trace_args);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::cerr << "error: no subcommand\n";
  return 1;
}
