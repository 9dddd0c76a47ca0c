#pragma once

// Activation functions admissible for the attention kernel and their Gaussian
// Hermite moments. The theory downstream consumes a nonlinearity only through
// (a1, nu) of its centered version; a2 is computed to check the vanishing
// second-Hermite-coefficient hypothesis rather than assumed.

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace icmem {

// Nodes/weights for E[g(xi)], xi ~ N(0,1):  sum_i w_i g(x_i).
// Probabilists' Gauss-Hermite rule, exact for polynomials of degree <= 2k-1.
struct GaussHermiteRule {
  std::vector<double> nodes;
  std::vector<double> weights;

  double integrate(const std::function<double(double)> &g) const;
};

// Golub-Welsch on the Jacobi matrix of the probabilists' Hermite recurrence
// (zero diagonal, off-diagonal sqrt(i)). Throws std::invalid_argument for k < 2.
GaussHermiteRule gauss_hermite_rule(int k);

struct HermiteMoments {
  double a0 = 0;  // E[f(xi)]
  double a1 = 0;  // E[xi f(xi)]
  double a2 = 0;  // E[xi^2 f(xi)] / sqrt(2)
  double nu = 0;  // E[(f(xi) - a0)^2], second moment of the centered function
};

struct Nonlinearity {
  std::string name;
  std::map<std::string, double> params;
  std::function<double(double)> eval;
  double center_shift = 0.0;  // a0 already subtracted from eval (0 for raw)
  // Points where eval or eval' jumps (clamp corners). Smooth integrands get the
  // plain Gauss-Hermite rule; kinked ones a panel rule split at these points,
  // since Gauss-Hermite alone loses ~1e-3 accuracy when a kink sits in the bulk
  // of the Gaussian mass.
  std::vector<double> kinks;
};

// Moments by deterministic quadrature with k nodes (>= 64; k nodes per smooth
// panel when f has kinks). Throws std::domain_error on a non-finite integrand
// value and std::invalid_argument for k < 64.
HermiteMoments moments(const Nonlinearity &f, int k = 200);

// t -> f(t) - m.a0, with center_shift recording the subtracted constant.
Nonlinearity centered(const Nonlinearity &f, const HermiteMoments &m);

// Convenience: catalog lookup + moments + centering in one step.
Nonlinearity centered(const Nonlinearity &f, int k = 200);

// The theory assumes a2 = 0; a nonzero value (|a2| > 1e-6, e.g. clamped-exp,
// which is neither odd nor even) degrades its accuracy. Returns a warning
// message when the hypothesis is violated, std::nullopt otherwise.
std::optional<std::string> a2_warning(const std::string &name,
                                      const HermiteMoments &m);

// Catalog: tanh | clamped-linear (B, default 5) | clamped-exp (C, default 5) |
// cos | hermite-mix (r in [0,1]): max(-5, min(5, r*He1 + sqrt(1-r^2)*He3)) with
// He1(t) = t, He3(t) = (t^3 - 3t)/sqrt(6).
// Throws std::invalid_argument for unknown names or r outside [0,1].
Nonlinearity catalog(const std::string &name,
                     const std::map<std::string, double> &params = {});

}  // namespace icmem
