#pragma once

// Monte Carlo ground truth for the attention memorization model: seeded
// dataset sampling, kernel construction (entrywise nonlinearity and truncated
// softmax), empirical memorization errors with an independent probe
// cross-check, and the finite-n diagnostics (linearization residual,
// resolvent traces) that validate the deterministic theory.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "icmem/nonlinearity.hpp"
#include "icmem/selfconsistent.hpp"

namespace icmem {

// Trial t of master seed s draws every random object from streams derived by
// mix64(s, t) (SplitMix64 finalizer over a Weyl step). Fixed for the life of
// the artifact: summaries depend only on (master_seed, trials), never on
// execution order or worker count. Bit-reproducibility is guaranteed within
// one build (std::normal_distribution is implementation-defined across
// standard libraries).
std::uint64_t mix64(std::uint64_t a, std::uint64_t b);

// Signal-plus-noise token matrix X = mu y^T + Z with Rademacher labels y and
// i.i.d. standard normal noise Z, all deterministic functions of `seed`.
struct Dataset {
  Eigen::MatrixXd X;   // p x n
  Eigen::VectorXd y;   // n, entries in {-1, +1}
  Eigen::VectorXd mu;  // p (zero for the null model)
  std::uint64_t seed = 0;
  int n = 0;
  int p = 0;

  // The noise part Z = X - mu y^T (reconstructed, not stored).
  Eigen::MatrixXd noise() const;
};

struct AttentionWeights {
  Eigen::VectorXd w_k;
  Eigen::VectorXd w_q;

  static AttentionWeights zero(int p);
};

enum class KernelKind { entrywise, softmax };

struct KernelMatrix {
  Eigen::MatrixXd K;  // n x n
  KernelKind kind = KernelKind::entrywise;
  std::string f_name;
  double center_shift = 0.0;  // constant subtracted from f before scaling
};

// Empirical memorization error with its independent cross-check. `e` is the
// resolvent form (gamma^2/n)||Q y||^2; `e_direct` recomputes it through the
// explicit closed-form probe w* (a different floating-point path through
// p-dimensional space); `q_form` is (1/n) y^T Q y, the quantity whose
// gamma-derivative defines the error.
struct EmpiricalError {
  double e = 0.0;
  double e_direct = 0.0;
  double q_form = 0.0;
  double condition = 0.0;  // power-iteration estimate of cond(shifted Gram)
  std::optional<std::string> warning;  // set when condition > 1e12
};

// Ingredients of the kernel linearization K_X ~ K_N + U_K Sigma_K V_Q^T and
// the spectral norm of what it leaves behind.
struct LinearizationReport {
  double residual = 0.0;  // ||K_X - (K_N + U_K Sigma_K V_Q^T)|| spectral
  double kn_norm = 0.0;
  double uk_norm = 0.0;
  double vq_norm = 0.0;
  double sigmak_norm = 0.0;
  int n = 0;
  int p = 0;
};

// Empirical resolvent traces of the noise-only model next to their
// fixed-point predictions. delta_hat[i] estimates delta_{i+1}.
struct TraceDiagnostics {
  int n = 0;
  int p = 0;
  double c = 0.0;
  double gamma = 0.0;
  std::uint64_t seed = 0;
  double m_hat = 0.0;
  std::array<double, 7> delta_hat{};
  double m_pred = 0.0;
  std::array<double, 7> delta_pred{};
  // |tr(Q0 B) - n| for B = Q0^{-1}: the resolvent identity
  // tr[Q0 (Q0^{-1} - (gamma/c) I)] = n - (gamma/c) tr Q0 checked on the
  // factorization actually used.
  double resolvent_identity_gap = 0.0;
};

// How a single Monte Carlo trial is configured. The alignment modes mirror
// the figure captions: `aligned` draws mu_base ~ N(0, I_p/p) once per trial,
// sets w_K = w_Q = mu_base and mu = sqrt(snr) mu_base/||mu_base||;
// `orthogonal` Gram-Schmidts independent draws of w_K, w_Q against mu (and
// each other); `none` is the null model mu = w_K = w_Q = 0.
enum class AlignmentMode { none, aligned, orthogonal };

enum class ModelKind { attention, attention_softmax, ridge };

struct TrialSpec {
  int n = 0;
  int p = 0;
  double gamma = 1.0;
  double snr = 0.0;  // target ||mu||^2
  AlignmentMode alignment = AlignmentMode::none;
  ModelKind model = ModelKind::attention;
  Nonlinearity f;  // centered; ignored for ridge
  double softmax_cap = 5.0;
};

struct TrialOutcome {
  std::uint64_t seed = 0;
  double e = 0.0;
  bool ok = false;
  std::string error;  // diagnostic for failed trials
};

// Mean/std/stderr over the successful trials; stderr = std_e/sqrt(trials)
// with `trials` the success count. per_trial keeps every requested trial in
// trial order, failures included.
struct MonteCarloSummary {
  double mean_e = 0.0;
  double std_e = 0.0;
  double stderr_e = 0.0;
  int trials = 0;
  int failures = 0;
  std::vector<TrialOutcome> per_trial;
};

// Samples X = mu y^T + Z: y_i independent uniform +-1, Z i.i.d. standard
// normal, both from streams derived from `seed`. Throws std::invalid_argument
// for n < 2, p < 2, or mu of wrong dimension.
Dataset sample_dataset(int n, int p, const Eigen::VectorXd& mu,
                       std::uint64_t seed);

// K = f(G/sqrt(p))/sqrt(p) entrywise (diagonal included) for
// G = X^T X + (X^T w_K)(w_Q^T X), built from two rank-structured products --
// the p x p matrix I + w_K w_Q^T is never formed. `f` is expected centered
// (its center_shift records the constant already subtracted).
// `center_diagonal = false` adds the centering constant back on the diagonal
// only, a diagnostic to confirm the diagonal treatment is immaterial.
KernelMatrix attention_kernel(const Dataset& ds, const AttentionWeights& w,
                              const Nonlinearity& f,
                              bool center_diagonal = true);

// Column-normalized truncated softmax min(exp(G/sqrt(p)), cap): every column
// sums to 1. Throws std::invalid_argument for cap <= 0.
KernelMatrix softmax_kernel(const Dataset& ds, const AttentionWeights& w,
                            double cap = 5.0);

// E = (gamma^2/n) y^T Q^2 y with Q = (K^T X^T X K/n + gamma I)^-1, plus the
// direct-probe cross-check and a condition estimate of the shifted Gram
// (warning attached above 1e12). Throws std::invalid_argument for gamma <= 0.
EmpiricalError empirical_error(const Dataset& ds, const KernelMatrix& km,
                               double gamma);

// Ridge baseline E_RR = (gamma^2/n) y^T (X^T X/n + gamma I)^-2 y with the
// same cross-check structure.
EmpiricalError ridge_empirical(const Dataset& ds, double gamma);

// Builds K_N (diagonal zeroed), U_K = [y, Z^T mu, Z^T w_K]/sqrt(p),
// V_Q = [y, Z^T mu, Z^T w_Q]/sqrt(p) and Sigma_K from the realized inner
// products, then measures ||K_X - K_tilde|| by power iteration
// (50 iterations, relative tolerance 1e-6).
LinearizationReport linearization_parts(const Dataset& ds,
                                        const AttentionWeights& w,
                                        const Nonlinearity& f);

// Noise-only resolvent traces (m_hat, delta_hat_1..7) of
// Q0 = (K_N Z^T Z K_N/p + (gamma/c) I)^-1 next to the fixed-point
// predictions solved at (c = p/n, gamma) with f's Hermite moments.
TraceDiagnostics trace_diagnostics(int n, int p, const Nonlinearity& f,
                                   double gamma, std::uint64_t seed);

// The signal geometry of one trial: mu and the attention weights drawn from
// the trial's seed streams per the alignment mode (see AlignmentMode above).
// run_trial builds its geometry through exactly this function.
struct SignalGeometry {
  Eigen::VectorXd mu;
  AttentionWeights w;
};
SignalGeometry sample_geometry(int p, double snr, AlignmentMode alignment,
                               std::uint64_t seed);

// One complete trial at seed: draw the signal geometry and dataset, build the
// model's kernel, return the empirical error. Throws on non-finite results.
double run_trial(const TrialSpec& spec, std::uint64_t seed);

// Runs `trials` independent trials, trial t seeded by mix64(master_seed, t),
// dispatched over `workers` threads (<= 1 means sequential). The summary is a
// deterministic function of (spec, trials, master_seed). Throws
// std::invalid_argument for trials < 1. Per-trial failures are recorded and
// the summary taken over the successes.
MonteCarloSummary monte_carlo(const TrialSpec& spec, int trials,
                              std::uint64_t master_seed, int workers = 1);

}  // namespace icmem
