#pragma once

// Deterministic-equivalent memorization error for nonlinear-attention
// in-context regression, plus the linear ridge-regression baseline.
//
// The signal model is X = mu y^T + Z with test-time query/key vectors
// w_K, w_Q. All predictions depend on the signal geometry only through
// the Gram scalars collected in SignalAlignment; the ambient dimension
// never enters. The main entry point is attention_error(), which solves
// the noise-resolvent fixed point, assembles the 9x9 deterministic
// equivalent, and returns the predicted memorization error
//   E-bar = -gamma^2 d/dgamma [ (1/n) y^T Q(gamma) y ].

#include <string>
#include <utility>

#include <Eigen/Dense>

#include "icmem/selfconsistent.hpp"

namespace icmem {

using Matrix9 = Eigen::Matrix<double, 9, 9>;
using Vector9 = Eigen::Matrix<double, 9, 1>;

// Gram scalars of the signal geometry (mu, w_K, w_Q). `t1` is the derived
// combination T_1 = ||mu||^2 + (mu.w_K)(mu.w_Q) that appears throughout the
// deterministic equivalent.
struct SignalAlignment {
  double mu2 = 0.0;   // ||mu||^2  (the signal-to-noise ratio)
  double muwk = 0.0;  // mu . w_K
  double muwq = 0.0;  // mu . w_Q
  double wk2 = 0.0;   // ||w_K||^2
  double wq2 = 0.0;   // ||w_Q||^2
  double wkwq = 0.0;  // w_K . w_Q
  double t1 = 0.0;    // mu2 + muwk * muwq

  // Builds from the six inner products; fills t1 and validates.
  static SignalAlignment from_inner_products(double mu2, double muwk,
                                             double muwq, double wk2,
                                             double wq2, double wkwq);

  // mu = w_K = w_Q = 0: pure-noise data, no test-time attention direction.
  static SignalAlignment none();

  // w_K = w_Q = mu with ||mu||^2 = snr (all six scalars equal snr).
  static SignalAlignment aligned(double snr);

  // w_K = w_Q = mu/||mu||: unit-norm vectors sharing mu's direction.
  static SignalAlignment aligned_base(double snr);

  // w_K, w_Q unit-norm, mutually orthogonal and orthogonal to mu.
  static SignalAlignment orthogonal(double snr);

  // Throws std::invalid_argument if the scalars cannot come from real
  // vectors (Gram matrix not PSD / Cauchy-Schwarz violated) or t1 is
  // inconsistent with the inner products.
  void validate() const;
};

// Which expression of the error is reported as ErrorPrediction::e_bar.
enum class ErrorPath {
  theorem_literal,   // -gamma^2 c^2 e7^T (cI+DL)^-1 D' (cI+LD)^-1 e7
  derivative_of_q,   // same contraction with (I+..) in place of (cI+..)
};

// Predicted memorization error together with both candidate normalizations
// and the conditioning of the 9x9 linear solves behind them.
struct ErrorPrediction {
  double e_bar = 0.0;    // canonical prediction (e_bar_theorem)
  double q_value = 0.0;  // deterministic equivalent of (1/n) y^T Q y
  ErrorPath path = ErrorPath::theorem_literal;
  double e_bar_theorem = 0.0;   // path (a): theorem-literal contraction
  double e_bar_qprime = 0.0;    // path (b): unshifted contraction
  double cond_shifted = 0.0;    // cond estimate of cI9 + Lambda*Delta
  double cond_unshifted = 0.0;  // cond estimate of I9 + Lambda*Delta
  std::string warning;          // propagated from the derivative solve
};

// The assembled deterministic-equivalent matrices for one parameter point.
struct TheoryBlocks {
  Matrix9 Lambda;       // coupling matrix Lambda(align, c, a1)
  Matrix9 Delta;        // U^T Q0 U equivalent (appendix normalization)
  Matrix9 DeltaPrime;   // entrywise gamma-derivative of Delta
  Vector9 e7;           // unit vector selecting the y/sqrt(p) column
};

// 3x3 block Sigma_K = a1 * [[T1, 1, mu.wK], [1, 0, 0], [mu.wQ, 0, 1]].
Eigen::Matrix3d sigma_k(const SignalAlignment& align, double a1);

// Full 9x9 coupling matrix Lambda.
Matrix9 lambda9(const SignalAlignment& align, double c, double a1);

// 9x9 deterministic equivalent Delta of U^T Q0 U built from a converged
// noise-system state (c, gamma are taken from state.params).
Matrix9 delta9(const SelfConsistentState& state, const SignalAlignment& align);

// Entrywise gamma-derivative Delta' built from the derivative state.
Matrix9 delta9_prime(const SelfConsistentState& state,
                     const DerivativeState& deriv,
                     const SignalAlignment& align);

// Convenience: assembles all three matrices plus e7 in one call.
TheoryBlocks theory_blocks(const SelfConsistentState& state,
                           const DerivativeState& deriv,
                           const SignalAlignment& align);

// End-to-end prediction: solves the fixed point at params, assembles the
// 9x9 system, and evaluates both error paths. e_bar carries the
// theorem-literal value; the other path and solve conditioning are kept
// as diagnostics.
ErrorPrediction attention_error(const NoiseSystemParams& params,
                                const SignalAlignment& align,
                                const SolverOptions& opts = SolverOptions{});

// Same, but reuses an already-converged state/derivative pair.
ErrorPrediction attention_error_from_state(const SelfConsistentState& state,
                                           const DerivativeState& deriv,
                                           const SignalAlignment& align);

// Marcenko-Pastur Stieltjes transform for the linear resolvent:
// unique positive root of c*gamma*m^2 + (1-c+gamma)*m - 1 = 0 and its
// gamma-derivative. Returns {m_rr, m_rr_prime}.
std::pair<double, double> mp_stieltjes(double c, double gamma);

// Closed-form ridge-regression memorization error E-bar_RR(c, gamma, snr).
double ridge_error(double c, double gamma, double snr);

}  // namespace icmem
