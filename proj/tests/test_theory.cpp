#include <doctest.h>

#include <array>
#include <cmath>
#include <stdexcept>
#include <utility>

#include "icmem/nonlinearity.hpp"
#include "icmem/theory.hpp"
#include "reference_curves.hpp"

using namespace icmem;
using refdata::Curve;

namespace {

HermiteMoments tanh_moments() {
  static const HermiteMoments m = moments(centered(catalog("tanh")));
  return m;
}

HermiteMoments clamped_moments() {
  static const HermiteMoments m =
      moments(centered(catalog("clamped-linear", {{"B", 5.0}})));
  return m;
}

HermiteMoments cos_moments() {
  static const HermiteMoments m = moments(centered(catalog("cos")));
  return m;
}

// The published "theory" curves with an aligned signal were plotted from one
// realized draw of mu_base ~ N(0, I_p/p) rather than the exact Gram limit:
// with mu = sqrt(snr) mu_base unnormalized and w_K = w_Q = mu_base, all six
// Gram scalars pick up the realized s = ||mu_base||^2, i.e. the curve is the
// exact theory evaluated at aligned(s * snr). s is fitted once per curve and
// frozen here; the exact-Gram (s = 1) predictions are the library's canonical
// values and are what Monte Carlo reproduces.
double draw_curve(const NoiseSystemParams& prm, double s, double snr) {
  return attention_error(prm, SignalAlignment::aligned(s * snr)).e_bar;
}

template <std::size_t K, typename F>
double max_abs_diff(const std::array<Curve, K>& ref, F&& predict) {
  double worst = 0.0;
  for (const auto& [x, v] : ref)
    worst = std::max(worst, std::abs(predict(x) - v));
  return worst;
}

}  // namespace

// ----------------------------------------------------------- SignalAlignment

TEST_CASE("alignment factories produce the documented Gram scalars") {
  const SignalAlignment a = SignalAlignment::aligned(2.0);
  CHECK(a.mu2 == 2.0);
  CHECK(a.wkwq == 2.0);
  CHECK(a.t1 == doctest::Approx(2.0 + 4.0));

  const SignalAlignment b = SignalAlignment::aligned_base(4.0);
  CHECK(b.mu2 == 4.0);
  CHECK(b.muwk == doctest::Approx(2.0));
  CHECK(b.wk2 == 1.0);
  CHECK(b.wkwq == 1.0);

  const SignalAlignment o = SignalAlignment::orthogonal(3.0);
  CHECK(o.mu2 == 3.0);
  CHECK(o.muwk == 0.0);
  CHECK(o.wkwq == 0.0);
  CHECK(o.wk2 == 1.0);

  const SignalAlignment n = SignalAlignment::none();
  CHECK(n.mu2 == 0.0);
  CHECK(n.t1 == 0.0);
}

TEST_CASE("alignment validation rejects impossible Gram scalars") {
  // Cauchy-Schwarz violation: mu.w_K^2 > ||mu||^2 ||w_K||^2
  CHECK_THROWS_AS(SignalAlignment::from_inner_products(1.0, 2.0, 0.0, 1.0, 1.0, 0.0),
                  std::invalid_argument);
  // negative squared norm
  CHECK_THROWS_AS(SignalAlignment::from_inner_products(-1.0, 0.0, 0.0, 1.0, 1.0, 0.0),
                  std::invalid_argument);
  // valid triple passes and fills t1
  const SignalAlignment a =
      SignalAlignment::from_inner_products(1.0, 0.5, 0.25, 1.0, 1.0, 0.125);
  CHECK(a.t1 == doctest::Approx(1.0 + 0.5 * 0.25));
}

// -------------------------------------------------------------- ridge theory

TEST_CASE("Marcenko-Pastur Stieltjes transform solves its quadratic") {
  for (double c : {0.25, 1.0, 4.0}) {
    for (double gamma : {1e-5, 1e-2, 1.0, 100.0}) {
      CAPTURE(c);
      CAPTURE(gamma);
      const auto [m, mp] = mp_stieltjes(c, gamma);
      CHECK(m > 0.0);
      // residual scaled by the term magnitudes: the quadratic's terms reach
      // ~2e5 at c = 4, gamma = 1e-5, so an absolute bound would sit below
      // the noise of evaluating the polynomial itself
      const double b = 1.0 - c + gamma;
      const double scale = 1.0 + c * gamma * m * m + std::abs(b) * m;
      CHECK(std::abs(c * gamma * m * m + b * m - 1.0) < 1e-13 * scale);
      // derivative against a central difference of the root itself
      const double h = 1e-6 * gamma;
      const double fd = (mp_stieltjes(c, gamma + h).first -
                         mp_stieltjes(c, gamma - h).first) /
                        (2.0 * h);
      CHECK(mp == doctest::Approx(fd).epsilon(1e-5));
    }
  }
}

TEST_CASE("ridge error monotonicity: up in gamma, down in c, down in snr") {
  for (double snr : {0.0, 1.0}) {
    double prev = -1.0;
    for (double gamma : {1e-3, 1e-2, 0.1, 1.0, 10.0, 100.0}) {
      const double e = ridge_error(2.0, gamma, snr);
      CHECK(e > prev);
      prev = e;
    }
  }
  for (double gamma : {1e-2, 1.0, 100.0}) {
    double prev = 2.0;
    for (double c : {0.25, 0.5, 1.0, 2.0, 4.0}) {
      CAPTURE(gamma);
      CAPTURE(c);
      const double e = ridge_error(c, gamma, 1.0);
      CHECK(e < prev);
      prev = e;
    }
  }
  {
    double prev = 2.0;
    for (double snr : {0.1, 1.0, 10.0, 100.0}) {
      const double e = ridge_error(0.25, 1e-2, snr);
      CHECK(e < prev);
      prev = e;
    }
  }
}

TEST_CASE("ridge error bounds and ridgeless limit") {
  for (double c : {0.25, 1.0, 4.0})
    for (double gamma : {1e-4, 1.0, 1e3})
      for (double snr : {0.0, 1.0, 10.0}) {
        const double e = ridge_error(c, gamma, snr);
        CHECK(e > 0.0);
        CHECK(e < 1.0 + 1e-12);
      }
  // under-parameterized ridgeless limit (1-c)/(1+snr)
  CHECK(ridge_error(0.25, 1e-9, 0.1) ==
        doctest::Approx(0.75 / 1.1).epsilon(1e-6));
  CHECK(ridge_error(0.5, 1e-9, 1.0) == doctest::Approx(0.25).epsilon(1e-6));
}

TEST_CASE("ridge theory reproduces every published ridge curve") {
  CHECK(max_abs_diff(refdata::kFig1aRidge, [](double g) {
          return ridge_error(4.0, g, 1.0);
        }) < 1e-4);
  CHECK(max_abs_diff(refdata::kFig1bRidge, [](double p) {
          return ridge_error(p / 4096.0, 1e-5, 1.0);
        }) < 2e-4);
  CHECK(max_abs_diff(refdata::kFig1cRidge, [](double snr) {
          return ridge_error(0.25, 1e-5, snr);
        }) < 1e-4);
  CHECK(max_abs_diff(refdata::kFig2aRidge, [](double g) {
          return ridge_error(4.0, g, 0.0);
        }) < 1e-4);
  CHECK(max_abs_diff(refdata::kFig2bRidge, [](double p) {
          return ridge_error(p / 4096.0, 1e-2, 0.0);
        }) < 1e-3);
  CHECK(max_abs_diff(refdata::kFig2cRidge, [](double snr) {
          return ridge_error(0.25, 1e-2, snr);
        }) < 1e-3);
  CHECK(max_abs_diff(refdata::kFig4RidgeFour, [](double snr) {
          return ridge_error(4.0, 1.0, snr);
        }) < 1e-3);
  CHECK(max_abs_diff(refdata::kFig4RidgeOne, [](double snr) {
          return ridge_error(1.0, 1.0, snr);
        }) < 1e-3);
  CHECK(max_abs_diff(refdata::kFig4RidgeQuarter, [](double snr) {
          return ridge_error(0.25, 1.0, snr);
        }) < 1e-3);
}

// ---------------------------------------------------------- attention theory

TEST_CASE("null-model attention curves match plotted data exactly") {
  const HermiteMoments m = tanh_moments();
  CHECK(max_abs_diff(refdata::kFig2aTanh, [&](double g) {
          return attention_error({4.0, g, m.a1, m.nu}, SignalAlignment::none())
              .e_bar;
        }) < 1e-3);
  CHECK(max_abs_diff(refdata::kFig2bTanh, [&](double p) {
          return attention_error({p / 4096.0, 1e-2, m.a1, m.nu},
                                 SignalAlignment::none())
              .e_bar;
        }) < 1e-3);
}

TEST_CASE("null model: 9x9 contraction equals the closed form -gamma^2 m'/c") {
  const HermiteMoments m = tanh_moments();
  for (auto [c, gamma] : {std::pair{0.25, 0.01}, {1.0, 1.0}, {4.0, 28.0}}) {
    CAPTURE(c);
    CAPTURE(gamma);
    const NoiseSystemParams prm{c, gamma, m.a1, m.nu};
    const SelfConsistentState st = solve(prm);
    const DerivativeState dv = derivatives(st);
    const double route_a =
        attention_error_from_state(st, dv, SignalAlignment::none()).e_bar;
    const double route_b = -gamma * gamma * dv.mp / c;
    CHECK(route_a == doctest::Approx(route_b).epsilon(1e-10));
  }
}

TEST_CASE("aligned signal curves match plotted data through the draw model") {
  const HermiteMoments t = tanh_moments();
  const HermiteMoments cl = clamped_moments();
  const NoiseSystemParams cell{0.25, 1e-2, t.a1, t.nu};
  const NoiseSystemParams cell_cl{0.25, 1e-2, cl.a1, cl.nu};

  // fitted realized ||mu_base||^2 per published curve (p = 512 draws)
  CHECK(max_abs_diff(refdata::kFig2cTanh, [&](double snr) {
          return draw_curve(cell, 0.9230, snr);
        }) < 2e-3);
  CHECK(max_abs_diff(refdata::kFig3cTanh, [&](double snr) {
          return draw_curve(cell, 0.9014, snr);
        }) < 2e-3);
  CHECK(max_abs_diff(refdata::kFig3cClamped, [&](double snr) {
          return draw_curve(cell_cl, 0.9842, snr);
        }) < 1e-3);

  // canonical exact-Gram values at the two published fig2c anchors, frozen;
  // Monte Carlo at the same cells reproduces these, not the plotted numbers.
  CHECK(attention_error(cell, SignalAlignment::aligned_base(1.0826367339))
            .e_bar == doctest::Approx(0.3618047015).epsilon(1e-8));
  CHECK(attention_error(cell, SignalAlignment::aligned_base(10.0)).e_bar ==
        doctest::Approx(0.0683640992).epsilon(1e-8));
}

TEST_CASE("a1 ~ 0 makes the error independent of signal and alignment") {
  const HermiteMoments m = cos_moments();
  const NoiseSystemParams prm{0.25, 1.0, m.a1, m.nu};
  const double base = attention_error(prm, SignalAlignment::none()).e_bar;
  CHECK(attention_error(prm, SignalAlignment::aligned(5.0)).e_bar ==
        doctest::Approx(base).epsilon(1e-10));
  CHECK(attention_error(prm, SignalAlignment::aligned_base(0.1)).e_bar ==
        doctest::Approx(base).epsilon(1e-10));
  CHECK(attention_error(prm, SignalAlignment::orthogonal(3.0)).e_bar ==
        doctest::Approx(base).epsilon(1e-10));
}

TEST_CASE("cos curves: exact matches where plotted, documented gamma slip where not") {
  const HermiteMoments m = cos_moments();
  // fig3b cyan: exact match of the p-sweep at the captioned gamma = 1
  CHECK(max_abs_diff(refdata::kFig3bCos, [&](double p) {
          return attention_error({p / 4096.0, 1.0, m.a1, m.nu},
                                 SignalAlignment::aligned_base(1.0))
              .e_bar;
        }) < 1e-3);
  // fig3c cyan: the plotted flat constant is the gamma = 1 value at c = 1/4,
  // not the captioned gamma = 1e-2 (Monte Carlo at the captioned cell gives
  // 0.749 +- 0.005, matching the gamma = 1e-2 value below).
  CHECK(max_abs_diff(refdata::kFig3cCos, [&](double snr) {
          return attention_error({0.25, 1.0, m.a1, m.nu},
                                 SignalAlignment::aligned_base(snr))
              .e_bar;
        }) < 1e-3);
  CHECK(attention_error({0.25, 1.0, m.a1, m.nu}, SignalAlignment::none())
            .e_bar == doctest::Approx(0.84885428).epsilon(1e-7));
  CHECK(attention_error({0.25, 1e-2, m.a1, m.nu}, SignalAlignment::none())
            .e_bar == doctest::Approx(0.75018711).epsilon(1e-7));
}

TEST_CASE("hermite-mix sweep matches the plotted a1 dependence") {
  // x of the published curve is a1(r) over r in linspace(0.1, 1, 20).
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const double r = 0.1 + 0.9 * i / 19.0;
    const HermiteMoments m =
        moments(centered(catalog("hermite-mix", {{"r", r}})));
    CHECK(std::abs(m.a1 - refdata::kFig3aMix[i].first) < 1e-4);
    const double e = attention_error({1.0, 1.0, m.a1, m.nu},
                                     SignalAlignment::aligned_base(1.0))
                         .e_bar;
    worst = std::max(worst, std::abs(e - refdata::kFig3aMix[i].second));
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("fig3b tanh/clamped plots carry dimension-scaled Grams, not snr=1") {
  // The published blue/purple "theory" curves of the p-sweep panel are only
  // reproduced with all six Gram scalars set to p/4096 (a mu_base normalizer
  // fixed at n = 4096 instead of p); Monte Carlo at the captioned snr = 1
  // cell (c = 1/8: 0.4308 +- 0.0021 at n = 2048) confirms the exact-Gram
  // canonical value below and excludes the plotted 0.7755.
  const HermiteMoments t = tanh_moments();
  const HermiteMoments cl = clamped_moments();
  CHECK(max_abs_diff(refdata::kFig3bTanh, [&](double p) {
          const double c = p / 4096.0;
          return attention_error({c, 1.0, t.a1, t.nu},
                                 SignalAlignment::aligned(c))
              .e_bar;
        }) < 0.01);
  CHECK(max_abs_diff(refdata::kFig3bClamped, [&](double p) {
          const double c = p / 4096.0;
          return attention_error({c, 1.0, cl.a1, cl.nu},
                                 SignalAlignment::aligned(c))
              .e_bar;
        }) < 0.02);
  // canonical captioned-cell values (exact Gram, snr = 1)
  CHECK(attention_error({0.125, 1.0, t.a1, t.nu},
                        SignalAlignment::aligned_base(1.0))
            .e_bar == doctest::Approx(0.439461).epsilon(1e-5));
  // at p = 4096 (c = 1) the published endpoints agree with the canonical
  // values to draw noise
  CHECK(attention_error({1.0, 1.0, t.a1, t.nu},
                        SignalAlignment::aligned_base(1.0))
            .e_bar == doctest::Approx(refdata::kFig3bTanh[29].second)
                          .epsilon(1e-2));
  CHECK(attention_error({1.0, 1.0, cl.a1, cl.nu},
                        SignalAlignment::aligned_base(1.0))
            .e_bar == doctest::Approx(refdata::kFig3bClamped[29].second)
                          .epsilon(2e-3));
}

TEST_CASE("fig4 geometry panels match within single-draw noise") {
  const HermiteMoments t = tanh_moments();
  auto curve = [&](double c, double snr) {
    return attention_error({c, 1.0, t.a1, t.nu},
                           SignalAlignment::aligned_base(snr))
        .e_bar;
  };
  CHECK(max_abs_diff(refdata::kFig4TanhFour, [&](double snr) {
          return curve(4.0, snr);
        }) < 1e-2);
  CHECK(max_abs_diff(refdata::kFig4TanhOne, [&](double snr) {
          return curve(1.0, snr);
        }) < 1e-2);
  CHECK(max_abs_diff(refdata::kFig4TanhQuarter, [&](double snr) {
          return curve(0.25, snr);
        }) < 1e-2);
}

TEST_CASE("theory invariances and limits") {
  const HermiteMoments m = tanh_moments();
  // f -> -f: a1 flips sign, prediction unchanged (matches exact empirical
  // invariance of the model)
  const double ep = attention_error({0.5, 0.1, m.a1, m.nu},
                                    SignalAlignment::aligned_base(2.0))
                        .e_bar;
  const double em = attention_error({0.5, 0.1, -m.a1, m.nu},
                                    SignalAlignment::aligned_base(2.0))
                        .e_bar;
  CHECK(ep == doctest::Approx(em).epsilon(1e-8));
  // gamma -> infinity saturates at 1 (no learning)
  CHECK(attention_error({1.0, 1e6, m.a1, m.nu}, SignalAlignment::none())
            .e_bar == doctest::Approx(1.0).epsilon(1e-3));
  // error decreasing in snr with aligned signal
  double prev = 2.0;
  for (double snr : {0.1, 0.5, 1.0, 5.0, 10.0}) {
    const double e = attention_error({0.25, 1e-2, m.a1, m.nu},
                                     SignalAlignment::aligned_base(snr))
                         .e_bar;
    CHECK(e < prev);
    prev = e;
  }
  // near-linear f with aligned signal tracks ridge at high snr
  CHECK(std::abs(attention_error({0.25, 1e-2, m.a1, m.nu},
                                 SignalAlignment::aligned_base(10.0))
                     .e_bar -
                 ridge_error(0.25, 1e-2, 10.0)) < 1e-3);
}

TEST_CASE("prediction structure: paths, conditioning, reuse") {
  const HermiteMoments m = tanh_moments();
  const NoiseSystemParams prm{0.5, 0.3, m.a1, m.nu};
  const ErrorPrediction e = attention_error(prm, SignalAlignment::aligned_base(1.0));
  CHECK(e.e_bar == e.e_bar_theorem);
  CHECK(e.path == ErrorPath::theorem_literal);
  CHECK(std::isfinite(e.e_bar_qprime));
  CHECK(e.cond_shifted > 0.0);
  CHECK(e.cond_shifted < 1e12);
  CHECK(e.q_value > 0.0);
  CHECK(e.warning.empty());
  // from_state reuse gives the identical number
  const SelfConsistentState st = solve(prm);
  const DerivativeState dv = derivatives(st);
  CHECK(attention_error_from_state(st, dv, SignalAlignment::aligned_base(1.0))
            .e_bar == doctest::Approx(e.e_bar).epsilon(1e-14));
}
