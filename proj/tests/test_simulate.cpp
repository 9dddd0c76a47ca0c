#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

#include "icmem/nonlinearity.hpp"
#include "icmem/simulate.hpp"
#include "icmem/theory.hpp"

using namespace icmem;

namespace {

const Nonlinearity& centered_tanh() {
  static const Nonlinearity f = centered(catalog("tanh"));
  return f;
}

}  // namespace

TEST_CASE("mix64 is a deterministic, input-separating stream splitter") {
  CHECK(mix64(1, 2) == mix64(1, 2));
  CHECK(mix64(1, 2) != mix64(2, 1));
  CHECK(mix64(0, 0) != mix64(0, 1));
  CHECK(mix64(7, 3) != 0);
}

TEST_CASE("sample_dataset: shapes, labels, determinism, noise reconstruction") {
  const int n = 64, p = 48;
  Eigen::VectorXd mu = Eigen::VectorXd::LinSpaced(p, -0.3, 0.7);
  const Dataset a = sample_dataset(n, p, mu, 12345);
  const Dataset b = sample_dataset(n, p, mu, 12345);
  const Dataset c = sample_dataset(n, p, mu, 12346);

  CHECK(a.X.rows() == p);
  CHECK(a.X.cols() == n);
  CHECK(a.y.size() == n);
  CHECK(a.n == n);
  CHECK(a.p == p);
  for (int i = 0; i < n; ++i) CHECK(std::abs(a.y(i)) == 1.0);
  CHECK((a.X - b.X).norm() == 0.0);
  CHECK((a.y - b.y).norm() == 0.0);
  CHECK((a.X - c.X).norm() > 0.0);

  // X - mu y^T is the stored noise; its moments look standard normal
  const Eigen::MatrixXd Z = a.noise();
  CHECK((a.X - (mu * a.y.transpose() + Z)).norm() < 1e-12);
  const double m1 = Z.mean();
  const double m2 = Z.array().square().mean();
  CHECK(std::abs(m1) < 0.1);
  CHECK(m2 == doctest::Approx(1.0).epsilon(0.1));

  CHECK_THROWS_AS(sample_dataset(1, p, mu, 0), std::invalid_argument);
  CHECK_THROWS_AS(
      sample_dataset(n, p, Eigen::VectorXd::Zero(p + 1), 0),
      std::invalid_argument);
}

TEST_CASE("sample_geometry realizes the documented alignment modes") {
  const int p = 96;
  SUBCASE("aligned: w_K = w_Q = mu_base, mu = sqrt(snr) unit vector along it") {
    const SignalGeometry g = sample_geometry(p, 2.5, AlignmentMode::aligned, 77);
    CHECK((g.w.w_k - g.w.w_q).norm() == 0.0);
    CHECK(g.mu.squaredNorm() == doctest::Approx(2.5).epsilon(1e-12));
    const double cosang =
        g.mu.dot(g.w.w_k) / (g.mu.norm() * g.w.w_k.norm());
    CHECK(cosang == doctest::Approx(1.0).epsilon(1e-12));
    // w keeps the raw draw's norm: ||mu_base||^2 ~ 1 + O(p^{-1/2})
    CHECK(g.w.w_k.squaredNorm() == doctest::Approx(1.0).epsilon(0.5));
  }
  SUBCASE("orthogonal: w_K, w_Q orthogonal to mu and to each other") {
    const SignalGeometry g =
        sample_geometry(p, 2.5, AlignmentMode::orthogonal, 77);
    CHECK(g.mu.squaredNorm() == doctest::Approx(2.5).epsilon(1e-12));
    // Gram-Schmidt keeps the raw draws' norms (~1 up to O(p^{-1/2}) draw
    // fluctuation), it does not rescale them
    CHECK(g.w.w_k.squaredNorm() == doctest::Approx(1.0).epsilon(0.5));
    CHECK(g.w.w_q.squaredNorm() == doctest::Approx(1.0).epsilon(0.5));
    CHECK(std::abs(g.mu.dot(g.w.w_k)) < 1e-10);
    CHECK(std::abs(g.mu.dot(g.w.w_q)) < 1e-10);
    CHECK(std::abs(g.w.w_k.dot(g.w.w_q)) < 1e-10);
  }
  SUBCASE("none: everything zero") {
    const SignalGeometry g = sample_geometry(p, 2.5, AlignmentMode::none, 77);
    CHECK(g.mu.norm() == 0.0);
    CHECK(g.w.w_k.norm() == 0.0);
    CHECK(g.w.w_q.norm() == 0.0);
  }
}

TEST_CASE("empirical error: resolvent route agrees with the direct probe") {
  const int n = 128, p = 256;
  const SignalGeometry g = sample_geometry(p, 1.0, AlignmentMode::aligned, 5);
  const Dataset ds = sample_dataset(n, p, g.mu, 6);
  const KernelMatrix km = attention_kernel(ds, g.w, centered_tanh());
  const EmpiricalError e = empirical_error(ds, km, 1.0);
  CHECK(e.e > 0.0);
  CHECK(std::abs(e.e - e.e_direct) / e.e < 1e-10);
  CHECK(!e.warning.has_value());

  const EmpiricalError r = ridge_empirical(ds, 1.0);
  CHECK(r.e > 0.0);
  CHECK(std::abs(r.e - r.e_direct) / r.e < 1e-10);

  CHECK_THROWS_AS(empirical_error(ds, km, 0.0), std::invalid_argument);
}

TEST_CASE("ill-conditioned shifted Gram raises the condition warning") {
  // rank(K^T X^T X K) <= p < n, so a tiny ridge leaves a near-singular shift
  const int n = 128, p = 32;
  const Dataset ds = sample_dataset(n, p, Eigen::VectorXd::Zero(p), 9);
  const KernelMatrix km =
      attention_kernel(ds, AttentionWeights::zero(p), centered_tanh());
  const EmpiricalError e = empirical_error(ds, km, 1e-13);
  CHECK(e.condition > 1e12);
  CHECK(e.warning.has_value());
}

TEST_CASE("sign flip of the nonlinearity leaves the empirical error unchanged") {
  const int n = 96, p = 64;
  const SignalGeometry g = sample_geometry(p, 1.5, AlignmentMode::aligned, 21);
  const Dataset ds = sample_dataset(n, p, g.mu, 22);

  const Nonlinearity f = centered_tanh();
  Nonlinearity neg = f;
  const auto base = f.eval;
  neg.eval = [base](double t) { return -base(t); };
  neg.center_shift = -neg.center_shift;

  const double ep = empirical_error(ds, attention_kernel(ds, g.w, f), 0.3).e;
  const double em = empirical_error(ds, attention_kernel(ds, g.w, neg), 0.3).e;
  // K -> -K leaves K^T X^T X K bitwise unchanged
  CHECK(ep == doctest::Approx(em).epsilon(1e-14));
}

TEST_CASE("relabeling tokens permutes nothing observable") {
  const int n = 64, p = 96;
  const SignalGeometry g = sample_geometry(p, 1.0, AlignmentMode::aligned, 31);
  const Dataset ds = sample_dataset(n, p, g.mu, 32);
  const double e0 =
      empirical_error(ds, attention_kernel(ds, g.w, centered_tanh()), 0.5).e;

  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937 rng(4);
  std::shuffle(idx.begin(), idx.end(), rng);
  Dataset perm = ds;
  for (int j = 0; j < n; ++j) {
    perm.X.col(j) = ds.X.col(idx[j]);
    perm.y(j) = ds.y(idx[j]);
  }
  const double e1 =
      empirical_error(perm, attention_kernel(perm, g.w, centered_tanh()), 0.5)
          .e;
  CHECK(e0 == doctest::Approx(e1).epsilon(1e-9));
}

TEST_CASE("infinite ridge forgets everything: E -> 1") {
  TrialSpec spec;
  spec.n = 128;
  spec.p = 64;
  spec.gamma = 1e8;
  spec.snr = 1.0;
  spec.alignment = AlignmentMode::aligned;
  spec.f = centered_tanh();
  CHECK(run_trial(spec, 17) == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("truncated softmax kernel: exact column normalization, entrywise shape") {
  const int n = 256, p = 512;
  const Dataset ds = sample_dataset(n, p, Eigen::VectorXd::Zero(p), 99);
  const AttentionWeights w = AttentionWeights::zero(p);
  const KernelMatrix soft = softmax_kernel(ds, w, 5.0);
  CHECK(soft.kind == KernelKind::softmax);

  const Eigen::VectorXd sums = soft.K.colwise().sum();
  for (int j = 0; j < n; ++j)
    CHECK(sums(j) == doctest::Approx(1.0).epsilon(1e-12));

  // entrywise min(exp, C) kernel with the same cap tracks it off-diagonal
  const KernelMatrix ent =
      attention_kernel(ds, w, centered(catalog("clamped-exp", {{"C", 5.0}})));
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  int cnt = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      const double x = soft.K(i, j), y = ent.K(i, j);
      sx += x; sy += y; sxx += x * x; syy += y * y; sxy += x * y;
      ++cnt;
    }
  const double cov = sxy / cnt - (sx / cnt) * (sy / cnt);
  const double vx = sxx / cnt - (sx / cnt) * (sx / cnt);
  const double vy = syy / cnt - (sy / cnt) * (sy / cnt);
  const double corr = cov / std::sqrt(vx * vy);
  CHECK(corr > 0.99);

  CHECK_THROWS_AS(softmax_kernel(ds, w, 0.0), std::invalid_argument);
}

TEST_CASE("noise-resolvent traces match the fixed point at finite n") {
  const TraceDiagnostics td =
      trace_diagnostics(512, 1024, centered_tanh(), 1.0, 1);
  CHECK(td.c == doctest::Approx(2.0));
  CHECK(td.resolvent_identity_gap < 1e-6);
  const double m_rel = std::abs(td.m_hat - td.m_pred) / std::abs(td.m_pred);
  CHECK(m_rel < 0.03);
  for (int i = 0; i < 7; ++i) {
    CAPTURE(i);
    const double rel = std::abs(td.delta_hat[i] - td.delta_pred[i]) /
                       std::max(std::abs(td.delta_pred[i]), 0.02);
    CHECK(rel < 0.03);
  }
}

TEST_CASE("monte_carlo: deterministic in (spec, trials, seed), worker-count free") {
  TrialSpec spec;
  spec.n = 64;
  spec.p = 32;
  spec.gamma = 1.0;
  spec.snr = 1.0;
  spec.alignment = AlignmentMode::aligned;
  spec.f = centered_tanh();

  const MonteCarloSummary a = monte_carlo(spec, 6, 42, 1);
  const MonteCarloSummary b = monte_carlo(spec, 6, 42, 1);
  const MonteCarloSummary c = monte_carlo(spec, 6, 42, 3);

  CHECK(a.trials == 6);
  CHECK(a.failures == 0);
  CHECK(a.per_trial.size() == 6);
  for (int t = 0; t < 6; ++t) {
    CHECK(a.per_trial[t].seed == mix64(42, static_cast<std::uint64_t>(t)));
    CHECK(a.per_trial[t].ok);
    CHECK(a.per_trial[t].e == b.per_trial[t].e);
    CHECK(a.per_trial[t].e == c.per_trial[t].e);
  }
  CHECK(a.mean_e == b.mean_e);
  CHECK(a.mean_e == c.mean_e);
  CHECK(a.stderr_e ==
        doctest::Approx(a.std_e / std::sqrt(6.0)).epsilon(1e-14));

  CHECK_THROWS_AS(monte_carlo(spec, 0, 42, 1), std::invalid_argument);
}

TEST_CASE("kernel linearization residual decays like n^{-1/2}") {
  auto residual_at = [](int n, int p, std::uint64_t seed) {
    const SignalGeometry g =
        sample_geometry(p, 1.0, AlignmentMode::aligned, seed);
    const Dataset ds = sample_dataset(n, p, g.mu, seed + 1);
    return linearization_parts(ds, g.w, centered_tanh());
  };
  const LinearizationReport small = residual_at(256, 128, 11);
  const LinearizationReport large = residual_at(1024, 512, 11);
  CHECK(small.residual > 0.0);
  CHECK(large.residual < small.residual);
  const double ratio = small.residual / large.residual;
  // quadrupling (n, p) should halve the residual, up to fluctuation
  CHECK(ratio > 1.3);
  CHECK(ratio < 3.0);
  CHECK(small.kn_norm > 0.0);
  CHECK(small.sigmak_norm > 0.0);
}
