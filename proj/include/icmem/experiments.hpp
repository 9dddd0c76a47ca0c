#pragma once

// Sweep orchestration: figure presets, parameter sweeps over one axis,
// seeded Monte Carlo, and CSV emission. This is the layer the CLI drives.
//
// A sweep evaluates one curve: a fixed parameter cell with exactly one axis
// varying over a grid. Theory columns are pure functions of the cell
// (independent of seeds, trials, workers, and execution order); empirical
// columns come from simulate::monte_carlo under the documented seed
// derivation, so a rerun with the same master seed is byte-identical.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "icmem/simulate.hpp"

namespace icmem {

enum class SweepMode {
  theory_attention,   // deterministic-equivalent error of the attention model
  theory_ridge,       // closed-form ridge-regression error
  empirical_attention,
  empirical_ridge,
  diagnostics,        // parsed/validated but served by the diag subcommands
};

enum class SweepAxis { gamma, snr, p, a1_mix };

const char* to_string(SweepMode mode);
const char* to_string(SweepAxis axis);
const char* to_string(AlignmentMode mode);
SweepMode sweep_mode_from_string(const std::string& s);
SweepAxis sweep_axis_from_string(const std::string& s);
AlignmentMode alignment_from_string(const std::string& s);

struct SweepConfig {
  SweepMode mode = SweepMode::theory_attention;
  std::string f_name = "tanh";
  std::map<std::string, double> f_params;

  SweepAxis axis = SweepAxis::gamma;
  std::vector<double> axis_grid;  // nonempty, strictly monotone

  // Fixed cell values; the member the axis varies over is ignored.
  // p is real-valued: some published p-grids are exact rationals (theory
  // depends on p only through c = p/n); empirical runs round to the nearest
  // integer dimension.
  int n = 0;
  double p = 0;
  double gamma = 1.0;
  double snr = 1.0;
  AlignmentMode alignment = AlignmentMode::aligned;
  int trials = 0;  // required >= 1 for empirical modes, ignored by theory
  std::uint64_t master_seed = 0;

  bool empirical() const {
    return mode == SweepMode::empirical_attention ||
           mode == SweepMode::empirical_ridge;
  }
  bool ridge_only() const {
    return mode == SweepMode::theory_ridge || mode == SweepMode::empirical_ridge;
  }
  // Throws std::invalid_argument on violation of any invariant.
  void validate() const;
};

// One CSV row. Columns are emitted in exactly this order; fields that do not
// apply to the row's mode stay disengaged and are emitted empty, never as
// sentinel numbers.
struct ResultRow {
  double axis_value = 0;
  int n = 0;
  double p = 0;
  double c = 0;
  double gamma = 0;
  std::optional<double> snr;
  std::optional<double> a1;
  std::optional<double> nu;
  std::optional<double> e_theory;
  std::optional<double> e_ridge_theory;
  std::optional<double> e_emp_mean;
  std::optional<double> e_emp_std;
  std::optional<double> e_emp_stderr;
  std::optional<int> trials;
  std::optional<std::uint64_t> master_seed;
  std::optional<int> solver_iterations;
  std::optional<double> residual;
};

inline constexpr const char* kCsvHeader =
    "axis_value,n,p,c,gamma,snr,a1,nu,e_theory,e_ridge_theory,e_emp_mean,"
    "e_emp_std,e_emp_stderr,trials,master_seed,solver_iterations,residual";

struct SweepResult {
  std::vector<ResultRow> rows;
  int exit_code = 0;    // 0 all cells fine; 2 = numerical failure in >= 1 cell
  std::string message;  // first failure detail when exit_code == 2
};

// A named figure preset: one config per plotted curve / panel cell, each the
// exact parameter cell of the publication's caption (fig3b/fig3c carry three
// nonlinearities; fig4 three dimension ratios; fig5 twelve panel cells times
// two nonlinearities). Configs default to the theory mode; the CLI upgrades
// them to the empirical counterpart when trials are requested.
struct SweepPreset {
  std::string name;
  std::vector<SweepConfig> configs;
};

// Valid names: fig1a fig1b fig1c fig2a fig2b fig2c fig3a fig3b fig3c fig4
// fig5. Unknown name -> std::invalid_argument listing the valid names.
SweepPreset figure_preset(const std::string& name);

// Evaluates one sweep. Rows are ordered by the axis grid. Solver
// non-convergence in a cell leaves that row's theory fields empty and sets
// exit_code 2; empirical trial failures are absorbed by the Monte Carlo
// summary unless every trial of a cell fails (also exit_code 2).
// Invalid configs throw std::invalid_argument.
SweepResult run_sweep(const SweepConfig& config, int workers = 1);

// Concatenation of run_sweep over several configs (rows in config order,
// exit_code the worst, message the first failure).
SweepResult run_sweeps(const std::vector<SweepConfig>& configs, int workers = 1);

// ---------------------------------------------------------------------- CSV
// Header + one line per row, 12 significant digits, decimal point, no
// thousands separators; disengaged fields empty.
std::string to_csv(const std::vector<ResultRow>& rows);
// Atomic: writes a sibling temp file and renames over the target.
void write_csv(const std::string& path, const std::vector<ResultRow>& rows);
std::vector<ResultRow> parse_csv(const std::string& text);
std::vector<ResultRow> read_csv(const std::string& path);

// -------------------------------------------------------------------- config
// Flat key=value text (one pair per line; '#' comments and blank lines
// ignored) plus CLI overrides, applied in order. Unknown keys are rejected.
//
//   mode        theory-attention | theory-ridge | empirical-attention |
//               empirical-ridge | diagnostics
//   f           tanh | clamped-linear | clamped-exp | cos | hermite-mix
//   f_param.<k> nonlinearity parameter, e.g. f_param.B = 5
//   axis        gamma | snr | p | a1-mix
//   grid        log:<lo>:<hi>:<k> | lin:<lo>:<hi>:<k> | v1,v2,...
//   n, p, c     geometry (give n plus one of p or c)
//   gamma, snr  fixed values of the non-axis parameters
//   alignment   null | aligned | orthogonal
//   trials      Monte Carlo trials (empirical modes)
//   master_seed 64-bit unsigned seed
std::vector<std::pair<std::string, std::string>> parse_kv_text(
    const std::string& text);
SweepConfig config_from_kv(
    const std::vector<std::pair<std::string, std::string>>& pairs);
SweepConfig read_config_file(
    const std::string& path,
    const std::vector<std::pair<std::string, std::string>>& overrides = {});

// "log:lo:hi:k" (log-spaced, k points), "lin:lo:hi:k", or comma-separated
// explicit values.
std::vector<double> parse_grid(const std::string& text);

}  // namespace icmem
