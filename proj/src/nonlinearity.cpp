#include "icmem/nonlinearity.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>

namespace icmem {

double GaussHermiteRule::integrate(const std::function<double(double)> &g) const {
  double acc = 0;
  for (std::size_t i = 0; i < nodes.size(); ++i) acc += weights[i] * g(nodes[i]);
  return acc;
}

GaussHermiteRule gauss_hermite_rule(int k) {
  if (k < 2) throw std::invalid_argument("gauss_hermite_rule: need k >= 2");
  // Probabilists' Hermite polynomials He_n obey x He_n = He_{n+1} + n He_{n-1};
  // the symmetric Jacobi matrix has zero diagonal and off-diagonal sqrt(i).
  Eigen::VectorXd diag = Eigen::VectorXd::Zero(k), sub(k - 1);
  for (int i = 1; i < k; ++i) sub[i - 1] = std::sqrt(static_cast<double>(i));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
  es.computeFromTridiagonal(diag, sub, Eigen::ComputeEigenvectors);
  GaussHermiteRule rule;
  rule.nodes.resize(k);
  rule.weights.resize(k);
  for (int i = 0; i < k; ++i) {
    rule.nodes[i] = es.eigenvalues()[i];
    const double v0 = es.eigenvectors()(0, i);
    rule.weights[i] = v0 * v0;  // total mass 1 under N(0,1)
  }
  return rule;
}

namespace {

// Composite Gauss-Legendre x Gaussian-density rule on [-L, L] with panel
// boundaries at the kinks (k nodes per panel, panels at most 3 wide). Beyond
// |t| = 12 the Gaussian mass is ~1e-32, negligible against bounded f.
GaussHermiteRule panel_rule(const std::vector<double> &kinks, int k) {
  constexpr double L = 12.0, max_panel = 3.0;
  std::set<double> edge_set{-L, L};
  for (double t : kinks)
    if (std::abs(t) < L) edge_set.insert(t);
  std::vector<double> edges;
  double prev = -L;
  edges.push_back(prev);
  for (double e : edge_set) {
    if (e <= prev) continue;
    const int nsub = std::max(1, static_cast<int>(std::ceil((e - prev) / max_panel)));
    for (int s = 1; s <= nsub; ++s) edges.push_back(prev + (e - prev) * s / nsub);
    prev = e;
  }

  // Gauss-Legendre on [-1, 1] by Golub-Welsch (Jacobi off-diagonal i/sqrt(4i^2-1)).
  Eigen::VectorXd diag = Eigen::VectorXd::Zero(k), sub(k - 1);
  for (int i = 1; i < k; ++i) sub[i - 1] = i / std::sqrt(4.0 * i * i - 1.0);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
  es.computeFromTridiagonal(diag, sub, Eigen::ComputeEigenvectors);

  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  GaussHermiteRule rule;
  for (std::size_t p = 0; p + 1 < edges.size(); ++p) {
    const double a = edges[p], b = edges[p + 1];
    for (int i = 0; i < k; ++i) {
      const double x = 0.5 * (b - a) * es.eigenvalues()[i] + 0.5 * (a + b);
      const double v0 = es.eigenvectors()(0, i);
      const double w = (b - a) * v0 * v0;  // GL weights sum to 2, scaled by (b-a)/2
      rule.nodes.push_back(x);
      rule.weights.push_back(w * inv_sqrt_2pi * std::exp(-0.5 * x * x));
    }
  }
  return rule;
}

Nonlinearity make(std::string name, std::map<std::string, double> params,
                  std::function<double(double)> eval, std::vector<double> kinks) {
  Nonlinearity f;
  f.name = std::move(name);
  f.params = std::move(params);
  f.eval = std::move(eval);
  f.kinks = std::move(kinks);
  return f;
}

double get_param(const std::map<std::string, double> &params, const std::string &key,
                 double fallback) {
  auto it = params.find(key);
  return it == params.end() ? fallback : it->second;
}

}  // namespace

HermiteMoments moments(const Nonlinearity &f, int k) {
  if (k < 64) throw std::invalid_argument("moments: need k >= 64");
  const GaussHermiteRule rule =
      f.kinks.empty() ? gauss_hermite_rule(k) : panel_rule(f.kinks, k);

  const std::size_t n = rule.nodes.size();
  std::vector<double> fx(n);
  for (std::size_t i = 0; i < n; ++i) {
    fx[i] = f.eval(rule.nodes[i]);
    if (!std::isfinite(fx[i])) {
      std::ostringstream msg;
      msg << "moments: non-finite value of '" << f.name << "' at t = " << rule.nodes[i];
      throw std::domain_error(msg.str());
    }
  }

  HermiteMoments m;
  for (std::size_t i = 0; i < n; ++i) {
    const double w = rule.weights[i], x = rule.nodes[i];
    m.a0 += w * fx[i];
    m.a1 += w * x * fx[i];
    m.a2 += w * x * x * fx[i];
  }
  m.a2 /= std::numbers::sqrt2;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = fx[i] - m.a0;
    m.nu += rule.weights[i] * d * d;
  }
  return m;
}

Nonlinearity centered(const Nonlinearity &f, const HermiteMoments &m) {
  Nonlinearity g = f;
  const double shift = m.a0;
  auto raw = f.eval;
  g.eval = [raw, shift](double t) { return raw(t) - shift; };
  g.center_shift = f.center_shift + shift;
  return g;
}

Nonlinearity centered(const Nonlinearity &f, int k) { return centered(f, moments(f, k)); }

std::optional<std::string> a2_warning(const std::string &name, const HermiteMoments &m) {
  if (std::abs(m.a2) <= 1e-6) return std::nullopt;
  std::ostringstream msg;
  msg << "warning: '" << name << "' has a2 = " << m.a2
      << " != 0; the theory assumes a vanishing second Hermite coefficient "
         "(Assumption 2) and its predictions may be off for this function";
  return msg.str();
}

Nonlinearity catalog(const std::string &name, const std::map<std::string, double> &params) {
  if (name == "tanh") {
    return make(name, {}, [](double t) { return std::tanh(t); }, {});
  }
  if (name == "clamped-linear") {
    const double B = get_param(params, "B", 5.0);
    if (B <= 0) throw std::invalid_argument("catalog: clamped-linear needs B > 0");
    return make(name, {{"B", B}},
                [B](double t) { return std::clamp(t, -B, B); }, {-B, B});
  }
  if (name == "clamped-exp") {
    const double C = get_param(params, "C", 5.0);
    if (C <= 0) throw std::invalid_argument("catalog: clamped-exp needs C > 0");
    return make(name, {{"C", C}},
                [C](double t) { return std::min(std::exp(t), C); }, {std::log(C)});
  }
  if (name == "cos") {
    return make(name, {}, [](double t) { return std::cos(t); }, {});
  }
  if (name == "hermite-mix") {
    const double r = get_param(params, "r", 1.0);
    if (!(r >= 0.0 && r <= 1.0))
      throw std::invalid_argument("catalog: hermite-mix needs r in [0, 1]");
    const double s = std::sqrt(1.0 - r * r);
    auto g = [r, s](double t) { return r * t + s * (t * t * t - 3.0 * t) / std::sqrt(6.0); };
    // Clamp corners: roots of g(t) = +/-5. g is odd; bisect on a sign-scan grid.
    std::vector<double> kinks;
    for (double target : {5.0, -5.0}) {
      constexpr int scan = 4800;
      double prev_t = -12.0, prev_v = g(prev_t) - target;
      for (int i = 1; i <= scan; ++i) {
        const double t = -12.0 + 24.0 * i / scan;
        const double v = g(t) - target;
        if ((prev_v < 0) != (v < 0)) {
          double lo = prev_t, hi = t;
          for (int it = 0; it < 80; ++it) {
            const double mid = 0.5 * (lo + hi);
            ((g(mid) - target < 0) == (prev_v < 0) ? lo : hi) = mid;
          }
          kinks.push_back(0.5 * (lo + hi));
        }
        prev_t = t;
        prev_v = v;
      }
    }
    return make(name, {{"r", r}},
                [g](double t) { return std::clamp(g(t), -5.0, 5.0); }, std::move(kinks));
  }
  throw std::invalid_argument(
      "catalog: unknown nonlinearity '" + name +
      "' (valid: tanh, clamped-linear, clamped-exp, cos, hermite-mix)");
}

}  // namespace icmem
