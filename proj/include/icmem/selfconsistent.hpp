#pragma once

// Noise-only self-consistent system: the Stieltjes transform m(gamma) and the
// trace functionals delta_1..delta_7(gamma) of the resolvent
//   Q0 = (K_N Z^T Z K_N / p + (gamma/c) I_n)^-1,
// solved as a damped fixed point over (m, d1..d4) with d5..d7 evaluated at
// convergence, plus gamma-derivatives (analytic 5x5 linear solve, gated by a
// central-difference oracle). Everything is a function of (c, gamma, a1, nu).

#include <Eigen/Dense>
#include <array>
#include <string>

namespace icmem {

using Matrix6 = Eigen::Matrix<double, 6, 6>;
using Vector6 = Eigen::Matrix<double, 6, 1>;

struct NoiseSystemParams {
  double c;      // limit p/n
  double gamma;  // regularization penalty (the paper's gamma, not gamma/c)
  double a1;     // E[xi f(xi)]
  double nu;     // E[f_c^2(xi)]

  void validate() const;  // throws std::invalid_argument on violation
};

struct SolverOptions {
  double tol = 1e-12;       // max-abs fixed-point defect over (m, d1..d4)
  int max_iter = 10000;
  double damping = 0.5;     // in (0, 1]; auto-halved down to 1/16 on stalls
  double fd_step_rel = 1e-5;
};

struct SelfConsistentState {
  double m = 0;
  std::array<double, 7> delta{};  // delta[i] = delta_{i+1}
  Matrix6 Delta0 = Matrix6::Zero();
  Matrix6 Lambda0 = Matrix6::Zero();
  Matrix6 T = Matrix6::Zero();
  Vector6 v, v1, v2, v4, v7;
  // Max fixed-point defect over (m, d1..d4), each component scaled by
  // max(1, |component|). The scaling matters: at extreme cells (small gamma,
  // small c) the state reaches O(100) and the absolute defect in double
  // precision floors near eps * cond(I + Lambda0 Delta0) * scale, measurably
  // above an absolute 1e-12.
  double residual = 0;
  int iterations = 0;  // total fixed-point map evaluations, all stages
  bool converged = false;
  // Inputs the state was solved at (carried for derivative evaluation).
  NoiseSystemParams params{};
};

enum class DerivativeSource { analytic, finite_difference };

struct DerivativeState {
  double mp = 0;                   // m'(gamma)
  std::array<double, 7> deltap{};  // delta_i'(gamma)
  Matrix6 Delta0p = Matrix6::Zero();
  Matrix6 Tp = Matrix6::Zero();
  DerivativeSource source = DerivativeSource::analytic;
  double fd_gate_deviation = 0;    // max relative deviation vs the FD oracle
  std::string warning;             // non-empty iff the analytic path failed the gate
};

// v = [a1^2(1+c)/c^2, a1/c, a1/c, 0, 0, 1], v1 = e2, v2 = e1,
// v4 = [a1/c, 1, 1, 0, 0, 0], v7 = [2a1/c + a1/c^2, 1/c + 1, 1/c + 1, 0, 1, 0].
void base_vectors(double c, double a1, Vector6 &v, Vector6 &v1, Vector6 &v2,
                  Vector6 &v4, Vector6 &v7);

Matrix6 lambda0(double c, double a1);

// Delta0 = P (x) [[1, a1], [a1, nu]] for P = [[m/c, d1, d2], [d1, d3, b],
// [d2, b, d4]], b = (1 - gamma m / c)/c.
Matrix6 delta0_matrix(double m, double d1, double d2, double d3, double d4,
                      const NoiseSystemParams &p);

// T = Delta0 (I6 + Lambda0 Delta0)^-1, asserted symmetric within 1e-8 then
// symmetrized. Throws std::runtime_error (with condition estimate) if singular.
Matrix6 t_matrix(const Matrix6 &Delta0, const Matrix6 &Lambda0);

// Damped fixed point; throws std::runtime_error on max_iter (carrying the last
// residual) and std::domain_error on non-finite intermediates.
SelfConsistentState solve(const NoiseSystemParams &params, const SolverOptions &opts = {});

// Analytic derivatives via the 5x5 linear system in (m', d1'..d4'); d5'..d7' in
// closed form from the converged T. Gated against fd_derivatives: relative
// deviation > 1e-4 in any component returns the FD result with
// source = finite_difference.
DerivativeState derivatives(const SelfConsistentState &state, const SolverOptions &opts = {});

// Independent oracle: all seven primed quantities by central differences of two
// full solves at gamma(1 +/- fd_step_rel).
DerivativeState fd_derivatives(const NoiseSystemParams &params, const SolverOptions &opts = {});

// The lemma statement's delta_7' uses the constant (1 + 1/c) where direct
// differentiation of delta_7's definition (and the lemma's own proof) gives
// (2 + 1/c). Both are computable; the default everywhere is the direct form,
// which the FD oracle confirms.
double delta7_prime_lemma_variant(const SelfConsistentState &state, const DerivativeState &d);

}  // namespace icmem
