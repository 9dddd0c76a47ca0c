#include "icmem/theory.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace icmem {

namespace {

// Canonical error path. The two candidate normalizations coincide only at
// c = 1; the shifted ("theorem-literal") contraction is the one that is
// algebraically equal to -gamma^2 q'(gamma) for
// q = c e7^T Delta (cI + Lambda Delta)^-1 e7, and it is the one that
// matches the published sweep values (see test_theory.cpp, figure-value
// regression). Verified numerically against the unshifted variant.
constexpr ErrorPath kCanonicalPath = ErrorPath::theorem_literal;

double cond_number(const Matrix9& a) {
  Eigen::JacobiSVD<Matrix9> svd(a);
  const double smin = svd.singularValues().minCoeff();
  const double smax = svd.singularValues().maxCoeff();
  if (smin <= 0.0) return std::numeric_limits<double>::infinity();
  return smax / smin;
}

// Assembles the 9x9 deterministic equivalent of U^T Q0 U from the scalar
// solution. Used for both Delta (m, delta_i, 1 - gamma*m/c) and its
// gamma-derivative (m', delta_i', -(m + gamma*m')/c): the two matrices have
// identical structure with those substitutions.
//
// d[1..7] are the deltas; bfac is the (1 - gamma*m/c)-like factor.
Matrix9 assemble_delta(double c, const SignalAlignment& g, double m,
                       const std::array<double, 7>& deltas, double bfac) {
  // deltas[i] holds delta_{i+1}; unpack to paper indices for readability.
  const double d1 = deltas[0], d2 = deltas[1], d3 = deltas[2],
               d4 = deltas[3], d5 = deltas[4], d6 = deltas[5], d7 = deltas[6];
  Matrix9 out = Matrix9::Zero();

  auto block = [&out](int bi, int bj) {
    return out.block<3, 3>(3 * bi, 3 * bj);
  };

  // Block (1,1): [[c^2 d4, 0, 0], [0, c^2 mu2 d7, c^2 muwk d7],
  //               [0, c^2 muwk d7, c^2 wk2 d7]]
  {
    Eigen::Matrix3d b = Eigen::Matrix3d::Zero();
    b(0, 0) = c * c * d4;
    b(1, 1) = c * c * g.mu2 * d7;
    b(1, 2) = c * c * g.muwk * d7;
    b(2, 1) = c * c * g.muwk * d7;
    b(2, 2) = c * c * g.wk2 * d7;
    block(0, 0) = b;
  }

  // Block (1,2): [[bfac, 0, 0], [0, c mu2 d4, c muwk d4],
  //               [0, c muwk d4, c wk2 d4]]
  {
    Eigen::Matrix3d b = Eigen::Matrix3d::Zero();
    b(0, 0) = bfac;
    b(1, 1) = c * g.mu2 * d4;
    b(1, 2) = c * g.muwk * d4;
    b(2, 1) = c * g.muwk * d4;
    b(2, 2) = c * g.wk2 * d4;
    block(0, 1) = b;
  }

  // Block (1,3): [[c d2, 0, 0], [0, c mu2 d6, c muwq d6],
  //               [0, c muwk d6, c wkwq d6]]
  {
    Eigen::Matrix3d b = Eigen::Matrix3d::Zero();
    b(0, 0) = c * d2;
    b(1, 1) = c * g.mu2 * d6;
    b(1, 2) = c * g.muwq * d6;
    b(2, 1) = c * g.muwk * d6;
    b(2, 2) = c * g.wkwq * d6;
    block(0, 2) = b;
  }

  // Block (2,2): [[d3, 0, 0], [0, mu2 bfac / c, muwk bfac / c],
  //               [0, muwk bfac / c, wk2 bfac / c]]
  {
    Eigen::Matrix3d b = Eigen::Matrix3d::Zero();
    b(0, 0) = d3;
    b(1, 1) = g.mu2 * bfac / c;
    b(1, 2) = g.muwk * bfac / c;
    b(2, 1) = g.muwk * bfac / c;
    b(2, 2) = g.wk2 * bfac / c;
    block(1, 1) = b;
  }

  // Block (2,3): [[d1, 0, 0], [0, mu2 d2, muwq d2], [0, muwk d2, wkwq d2]]
  {
    Eigen::Matrix3d b = Eigen::Matrix3d::Zero();
    b(0, 0) = d1;
    b(1, 1) = g.mu2 * d2;
    b(1, 2) = g.muwq * d2;
    b(2, 1) = g.muwk * d2;
    b(2, 2) = g.wkwq * d2;
    block(1, 2) = b;
  }

  // Block (3,3): [[m/c, 0, 0], [0, mu2 d5, muwq d5], [0, muwq d5, wq2 d5]]
  {
    Eigen::Matrix3d b = Eigen::Matrix3d::Zero();
    b(0, 0) = m / c;
    b(1, 1) = g.mu2 * d5;
    b(1, 2) = g.muwq * d5;
    b(2, 1) = g.muwq * d5;
    b(2, 2) = g.wq2 * d5;
    block(2, 2) = b;
  }

  // Lower block triangle by symmetry of the full matrix.
  out.block<3, 3>(3, 0) = out.block<3, 3>(0, 3).transpose();
  out.block<3, 3>(6, 0) = out.block<3, 3>(0, 6).transpose();
  out.block<3, 3>(6, 3) = out.block<3, 3>(3, 6).transpose();
  return out;
}

}  // namespace

SignalAlignment SignalAlignment::from_inner_products(double mu2, double muwk,
                                                     double muwq, double wk2,
                                                     double wq2, double wkwq) {
  SignalAlignment g;
  g.mu2 = mu2;
  g.muwk = muwk;
  g.muwq = muwq;
  g.wk2 = wk2;
  g.wq2 = wq2;
  g.wkwq = wkwq;
  g.t1 = mu2 + muwk * muwq;
  g.validate();
  return g;
}

SignalAlignment SignalAlignment::none() {
  return from_inner_products(0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
}

SignalAlignment SignalAlignment::aligned(double snr) {
  return from_inner_products(snr, snr, snr, snr, snr, snr);
}

SignalAlignment SignalAlignment::aligned_base(double snr) {
  const double root = std::sqrt(snr);
  return from_inner_products(snr, root, root, 1.0, 1.0, 1.0);
}

SignalAlignment SignalAlignment::orthogonal(double snr) {
  return from_inner_products(snr, 0.0, 0.0, 1.0, 1.0, 0.0);
}

void SignalAlignment::validate() const {
  if (!(std::isfinite(mu2) && std::isfinite(muwk) && std::isfinite(muwq) &&
        std::isfinite(wk2) && std::isfinite(wq2) && std::isfinite(wkwq) &&
        std::isfinite(t1))) {
    throw std::invalid_argument("SignalAlignment: non-finite entry");
  }
  if (mu2 < 0.0 || wk2 < 0.0 || wq2 < 0.0) {
    throw std::invalid_argument("SignalAlignment: negative squared norm");
  }
  // The six scalars must form a PSD Gram matrix of (mu, w_K, w_Q).
  Eigen::Matrix3d gram;
  gram << mu2, muwk, muwq,  //
      muwk, wk2, wkwq,      //
      muwq, wkwq, wq2;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(gram);
  const double scale = std::max(1.0, gram.cwiseAbs().maxCoeff());
  if (es.eigenvalues().minCoeff() < -1e-10 * scale) {
    throw std::invalid_argument(
        "SignalAlignment: inner products violate Cauchy-Schwarz "
        "(Gram matrix not PSD)");
  }
  const double t1_expected = mu2 + muwk * muwq;
  if (std::abs(t1 - t1_expected) >
      1e-12 * std::max(1.0, std::abs(t1_expected))) {
    throw std::invalid_argument(
        "SignalAlignment: t1 inconsistent with mu2 + muwk*muwq");
  }
}

Eigen::Matrix3d sigma_k(const SignalAlignment& g, double a1) {
  Eigen::Matrix3d s;
  s << g.t1, 1.0, g.muwk,  //
      1.0, 0.0, 0.0,       //
      g.muwq, 0.0, 1.0;
  return a1 * s;
}

Matrix9 lambda9(const SignalAlignment& g, double c, double a1) {
  if (!(c > 0.0)) {
    throw std::invalid_argument("lambda9: c must be positive");
  }
  Matrix9 out = Matrix9::Zero();

  // Block (1,3) = Sigma_K, block (3,1) = Sigma_K^T.
  const Eigen::Matrix3d sk = sigma_k(g, a1);
  out.block<3, 3>(0, 6) = sk;
  out.block<3, 3>(6, 0) = sk.transpose();

  // Block (2,2) = Sigma_X = c [[mu2, 1, 0], [1, 0, 0], [0, 0, 0]].
  {
    Eigen::Matrix3d b = Eigen::Matrix3d::Zero();
    b(0, 0) = c * g.mu2;
    b(0, 1) = c;
    b(1, 0) = c;
    out.block<3, 3>(3, 3) = b;
  }

  // Block (2,3) = a1 [[(mu2+1) T1, mu2, muwk (mu2+1)],
  //                   [T1, 1, muwk], [0, 0, 0]].
  {
    Eigen::Matrix3d b = Eigen::Matrix3d::Zero();
    b(0, 0) = (g.mu2 + 1.0) * g.t1;
    b(0, 1) = g.mu2;
    b(0, 2) = g.muwk * (g.mu2 + 1.0);
    b(1, 0) = g.t1;
    b(1, 1) = 1.0;
    b(1, 2) = g.muwk;
    out.block<3, 3>(3, 6) = a1 * b;
    out.block<3, 3>(6, 3) = a1 * b.transpose();
  }

  // Block (3,3) = a1^2 * S, S symmetric.
  {
    const double k2c = (2.0 + c + g.mu2) / c;
    const double k1c = (1.0 + c) / c;
    const double k1cm = (1.0 + c + g.mu2) / c;
    Eigen::Matrix3d s;
    s(0, 0) = k2c * g.t1 * g.t1 + k1c * g.t1 +
              k1c * g.muwq * (g.muwk + g.muwq * g.wk2);
    s(0, 1) = k1cm * g.t1;
    s(0, 2) = k2c * g.muwk * g.t1 + k1c * (g.muwk + g.muwq * g.wk2);
    s(1, 0) = s(0, 1);
    s(1, 1) = 1.0 + g.mu2 / c;
    s(1, 2) = k1cm * g.muwk;
    s(2, 0) = s(0, 2);
    s(2, 1) = s(1, 2);
    s(2, 2) = k2c * g.muwk * g.muwk + k1c * g.wk2;
    out.block<3, 3>(6, 6) = a1 * a1 * s;
  }

  return out;
}

Matrix9 delta9(const SelfConsistentState& state, const SignalAlignment& g) {
  const double c = state.params.c;
  const double gamma = state.params.gamma;
  const double bfac = 1.0 - gamma * state.m / c;
  return assemble_delta(c, g, state.m, state.delta, bfac);
}

Matrix9 delta9_prime(const SelfConsistentState& state,
                     const DerivativeState& deriv,
                     const SignalAlignment& g) {
  const double c = state.params.c;
  const double gamma = state.params.gamma;
  const double bfac = -(state.m + gamma * deriv.mp) / c;
  return assemble_delta(c, g, deriv.mp, deriv.deltap, bfac);
}

TheoryBlocks theory_blocks(const SelfConsistentState& state,
                           const DerivativeState& deriv,
                           const SignalAlignment& g) {
  TheoryBlocks blocks;
  blocks.Lambda = lambda9(g, state.params.c, state.params.a1);
  blocks.Delta = delta9(state, g);
  blocks.DeltaPrime = delta9_prime(state, deriv, g);
  blocks.e7 = Vector9::Zero();
  blocks.e7(6) = 1.0;
  return blocks;
}

ErrorPrediction attention_error_from_state(const SelfConsistentState& state,
                                           const DerivativeState& deriv,
                                           const SignalAlignment& g) {
  if (!state.converged) {
    throw std::invalid_argument(
        "attention_error_from_state: state is not converged");
  }
  g.validate();
  const double c = state.params.c;
  const double gamma = state.params.gamma;

  const TheoryBlocks blocks = theory_blocks(state, deriv, g);
  const Matrix9& lam = blocks.Lambda;
  const Matrix9& del = blocks.Delta;
  const Matrix9& delp = blocks.DeltaPrime;
  const Vector9& e7 = blocks.e7;

  // Both Lambda and Delta are symmetric, so (cI + Delta Lambda)^T
  // = cI + Lambda Delta and one linear solve serves both sides of each
  // bilinear form.
  const Matrix9 shifted = c * Matrix9::Identity() + lam * del;
  const Matrix9 unshifted = Matrix9::Identity() + lam * del;

  Eigen::PartialPivLU<Matrix9> lu_shifted(shifted);
  Eigen::PartialPivLU<Matrix9> lu_unshifted(unshifted);
  const Vector9 r = lu_shifted.solve(e7);
  const Vector9 ru = lu_unshifted.solve(e7);

  ErrorPrediction pred;
  pred.q_value = c * e7.dot(del * r);
  pred.e_bar_theorem = -gamma * gamma * c * c * r.dot(delp * r);
  pred.e_bar_qprime = -gamma * gamma * c * ru.dot(delp * ru);
  pred.path = kCanonicalPath;
  pred.e_bar = (kCanonicalPath == ErrorPath::theorem_literal)
                   ? pred.e_bar_theorem
                   : pred.e_bar_qprime;
  pred.cond_shifted = cond_number(shifted);
  pred.cond_unshifted = cond_number(unshifted);
  pred.warning = deriv.warning;
  return pred;
}

ErrorPrediction attention_error(const NoiseSystemParams& params,
                                const SignalAlignment& g,
                                const SolverOptions& opts) {
  params.validate();
  g.validate();
  const SelfConsistentState state = solve(params, opts);
  const DerivativeState deriv = derivatives(state, opts);
  return attention_error_from_state(state, deriv, g);
}

std::pair<double, double> mp_stieltjes(double c, double gamma) {
  if (!(c > 0.0) || !(gamma > 0.0)) {
    throw std::invalid_argument("mp_stieltjes: c and gamma must be positive");
  }
  // Positive root of c*gamma*m^2 + (1-c+gamma)*m - 1 = 0. Each branch keeps
  // the addition B + disc (resp. disc - B) cancellation-free: for c > 1 at
  // small gamma, B ~ -(c-1) and disc ~ c-1 nearly cancel in one of the two
  // equivalent forms, losing ~5 digits of m.
  const double b = 1.0 - c + gamma;
  const double disc = std::sqrt(b * b + 4.0 * c * gamma);
  const double m = b >= 0.0 ? 2.0 / (b + disc) : (disc - b) / (2.0 * c * gamma);
  // Implicit differentiation; the denominator 2*c*gamma*m + B equals disc.
  const double mp = -(c * m * m + m) / disc;
  return {m, mp};
}

double ridge_error(double c, double gamma, double snr) {
  if (snr < 0.0) {
    throw std::invalid_argument("ridge_error: snr must be non-negative");
  }
  const auto [m, mp] = mp_stieltjes(c, gamma);
  const double g2mp = gamma * gamma * mp;
  const double numer =
      c * g2mp + c - 1.0 + snr * (g2mp + (1.0 - c - gamma) * (gamma * m - 1.0));
  const double denom = 1.0 + snr - snr * gamma * m;
  return -numer / (denom * denom);
}

}  // namespace icmem
