#include "icmem/simulate.hpp"

#include <atomic>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "icmem/theory.hpp"

namespace icmem {

using Eigen::MatrixXd;
using Eigen::VectorXd;

std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

namespace {

// Distinct per-object streams under one trial seed.
constexpr std::uint64_t kLabelStream = 1;
constexpr std::uint64_t kNoiseStream = 2;
constexpr std::uint64_t kSignalStream = 3;
constexpr std::uint64_t kKeyStream = 4;
constexpr std::uint64_t kQueryStream = 5;

MatrixXd gaussian_matrix(int rows, int cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  MatrixXd z(rows, cols);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) z(i, j) = nd(rng);
  return z;
}

VectorXd rademacher_vector(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  VectorXd y(n);
  for (int i = 0; i < n; ++i) y(i) = coin(rng) ? 1.0 : -1.0;
  return y;
}

// Deterministic start vector for the power iterations: alternating signs so
// it is never orthogonal to the leading space of the matrices seen here.
VectorXd power_start(int n) {
  VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = (i % 2 == 0) ? 1.0 : -1.0;
  v /= v.norm();
  return v;
}

// Largest singular value of M by power iteration on M^T M.
double spectral_norm(const MatrixXd& m, int max_iters, double rel_tol) {
  VectorXd v = power_start(static_cast<int>(m.cols()));
  double sigma = 0.0;
  for (int it = 0; it < max_iters; ++it) {
    VectorXd u = m * v;
    double s = u.norm();
    if (s == 0.0) return 0.0;
    v.noalias() = m.transpose() * (u / s);
    double s2 = v.norm();
    if (s2 == 0.0) return 0.0;
    v /= s2;
    double next = std::sqrt(s * s2);
    if (it > 0 && std::abs(next - sigma) <= rel_tol * next) return next;
    sigma = next;
  }
  return sigma;
}

// cond(B) for symmetric positive definite B with an existing factorization:
// power iteration for the top eigenvalue, inverse iteration for the bottom.
double spd_condition(const MatrixXd& b, const Eigen::LLT<MatrixXd>& llt) {
  const int n = static_cast<int>(b.rows());
  VectorXd v = power_start(n);
  double lmax = 0.0;
  for (int it = 0; it < 20; ++it) {
    VectorXd bv = b * v;
    lmax = bv.norm();
    if (lmax == 0.0) return std::numeric_limits<double>::infinity();
    v = bv / lmax;
  }
  VectorXd w = power_start(n);
  for (int it = 0; it < 20; ++it) {
    w = llt.solve(w);
    double s = w.norm();
    if (s == 0.0) return std::numeric_limits<double>::infinity();
    w /= s;
  }
  const double lmin = w.dot(b * w);
  if (lmin <= 0.0) return std::numeric_limits<double>::infinity();
  return lmax / lmin;
}

// Shared tail of empirical_error / ridge_empirical: given the shifted Gram
// B = S + gamma I (S PSD), the resolvent solve, the probe cross-check path
// u ~ S z, and the condition estimate.
EmpiricalError error_from_gram(const MatrixXd& b, const VectorXd& y,
                               double gamma,
                               const std::function<VectorXd(const VectorXd&)>&
                                   apply_s_via_probe) {
  const int n = static_cast<int>(y.size());
  Eigen::LLT<MatrixXd> llt(b);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("shifted Gram factorization failed");
  const VectorXd z = llt.solve(y);

  EmpiricalError out;
  out.e = gamma * gamma * z.squaredNorm() / n;
  out.q_form = y.dot(z) / n;
  const VectorXd u = apply_s_via_probe(z);
  out.e_direct = (y - u).squaredNorm() / n;
  out.condition = spd_condition(b, llt);
  if (out.condition > 1e12) {
    std::ostringstream os;
    os << "near-singular shifted Gram: condition estimate " << out.condition;
    out.warning = os.str();
  }
  if (!std::isfinite(out.e) || !std::isfinite(out.e_direct))
    throw std::runtime_error("non-finite empirical error");
  return out;
}

}  // namespace

Eigen::MatrixXd Dataset::noise() const { return X - mu * y.transpose(); }

AttentionWeights AttentionWeights::zero(int p) {
  return {VectorXd::Zero(p), VectorXd::Zero(p)};
}

Dataset sample_dataset(int n, int p, const VectorXd& mu, std::uint64_t seed) {
  if (n < 2 || p < 2)
    throw std::invalid_argument("sample_dataset: need n >= 2 and p >= 2");
  if (mu.size() != p)
    throw std::invalid_argument("sample_dataset: mu has wrong dimension");
  Dataset ds;
  ds.n = n;
  ds.p = p;
  ds.seed = seed;
  ds.mu = mu;
  ds.y = rademacher_vector(n, mix64(seed, kLabelStream));
  ds.X = gaussian_matrix(p, n, mix64(seed, kNoiseStream));
  ds.X.noalias() += mu * ds.y.transpose();
  return ds;
}

KernelMatrix attention_kernel(const Dataset& ds, const AttentionWeights& w,
                              const Nonlinearity& f, bool center_diagonal) {
  if (!f.eval) throw std::invalid_argument("attention_kernel: empty function");
  if (w.w_k.size() != ds.p || w.w_q.size() != ds.p)
    throw std::invalid_argument("attention_kernel: weight dimension mismatch");
  const double sp = std::sqrt(static_cast<double>(ds.p));
  MatrixXd g = ds.X.transpose() * ds.X;
  const VectorXd xk = ds.X.transpose() * w.w_k;
  const VectorXd xq = ds.X.transpose() * w.w_q;
  g.noalias() += xk * xq.transpose();

  KernelMatrix km;
  km.kind = KernelKind::entrywise;
  km.f_name = f.name;
  km.center_shift = f.center_shift;
  km.K = (g / sp).unaryExpr(f.eval) / sp;
  if (!center_diagonal) km.K.diagonal().array() += f.center_shift / sp;
  return km;
}

KernelMatrix softmax_kernel(const Dataset& ds, const AttentionWeights& w,
                            double cap) {
  if (cap <= 0.0) throw std::invalid_argument("softmax_kernel: cap <= 0");
  if (w.w_k.size() != ds.p || w.w_q.size() != ds.p)
    throw std::invalid_argument("softmax_kernel: weight dimension mismatch");
  const double sp = std::sqrt(static_cast<double>(ds.p));
  MatrixXd g = ds.X.transpose() * ds.X;
  const VectorXd xk = ds.X.transpose() * w.w_k;
  const VectorXd xq = ds.X.transpose() * w.w_q;
  g.noalias() += xk * xq.transpose();

  KernelMatrix km;
  km.kind = KernelKind::softmax;
  km.f_name = "softmax-trunc";
  km.center_shift = 0.0;
  km.K = (g / sp).array().exp().min(cap).matrix();
  for (int j = 0; j < ds.n; ++j) km.K.col(j) /= km.K.col(j).sum();
  return km;
}

EmpiricalError empirical_error(const Dataset& ds, const KernelMatrix& km,
                               double gamma) {
  if (gamma <= 0.0) throw std::invalid_argument("empirical_error: gamma <= 0");
  if (km.K.rows() != ds.n || km.K.cols() != ds.n)
    throw std::invalid_argument("empirical_error: kernel dimension mismatch");
  const double n = static_cast<double>(ds.n);
  MatrixXd a = ds.X.transpose() * ds.X;
  a /= n;
  MatrixXd ak;
  ak.noalias() = a * km.K;
  MatrixXd b;
  b.noalias() = km.K.transpose() * ak;
  b.diagonal().array() += gamma;

  // Probe path: w* = X K (K^T X^T X K + n gamma I)^-1 y = X K z / n, then the
  // probe's fit K^T X^T w* goes back through p-dimensional space.
  return error_from_gram(b, ds.y, gamma, [&](const VectorXd& z) -> VectorXd {
    const VectorXd w_star = ds.X * (km.K * z) / n;
    return km.K.transpose() * (ds.X.transpose() * w_star);
  });
}

EmpiricalError ridge_empirical(const Dataset& ds, double gamma) {
  if (gamma <= 0.0) throw std::invalid_argument("ridge_empirical: gamma <= 0");
  const double n = static_cast<double>(ds.n);
  MatrixXd b = ds.X.transpose() * ds.X;
  b /= n;
  b.diagonal().array() += gamma;
  return error_from_gram(b, ds.y, gamma, [&](const VectorXd& z) -> VectorXd {
    const VectorXd w_star = ds.X * z / n;
    return ds.X.transpose() * w_star;
  });
}

LinearizationReport linearization_parts(const Dataset& ds,
                                        const AttentionWeights& w,
                                        const Nonlinearity& f) {
  if (!f.eval)
    throw std::invalid_argument("linearization_parts: empty function");
  const double sp = std::sqrt(static_cast<double>(ds.p));
  const MatrixXd z = ds.noise();

  MatrixXd kn = ((z.transpose() * z) / sp).unaryExpr(f.eval) / sp;
  kn.diagonal().setZero();

  Eigen::Matrix<double, Eigen::Dynamic, 3> uk(ds.n, 3), vq(ds.n, 3);
  uk.col(0) = ds.y;
  uk.col(1).noalias() = z.transpose() * ds.mu;
  uk.col(2).noalias() = z.transpose() * w.w_k;
  vq.col(0) = ds.y;
  vq.col(1) = uk.col(1);
  vq.col(2).noalias() = z.transpose() * w.w_q;
  uk /= sp;
  vq /= sp;

  const auto geom = SignalAlignment::from_inner_products(
      ds.mu.squaredNorm(), ds.mu.dot(w.w_k), ds.mu.dot(w.w_q),
      w.w_k.squaredNorm(), w.w_q.squaredNorm(), w.w_k.dot(w.w_q));
  const double a1 = moments(f).a1;
  const Eigen::Matrix3d sk = sigma_k(geom, a1);

  const MatrixXd kx = attention_kernel(ds, w, f).K;
  MatrixXd diff = kx - kn;
  diff.noalias() -= uk * (sk * vq.transpose());

  LinearizationReport rep;
  rep.n = ds.n;
  rep.p = ds.p;
  rep.residual = spectral_norm(diff, 50, 1e-6);
  rep.kn_norm = spectral_norm(kn, 50, 1e-6);
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> esu(uk.transpose() * uk);
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> esv(vq.transpose() * vq);
  rep.uk_norm = std::sqrt(std::max(0.0, esu.eigenvalues().maxCoeff()));
  rep.vq_norm = std::sqrt(std::max(0.0, esv.eigenvalues().maxCoeff()));
  rep.sigmak_norm = sk.jacobiSvd().singularValues()(0);
  return rep;
}

TraceDiagnostics trace_diagnostics(int n, int p, const Nonlinearity& f,
                                   double gamma, std::uint64_t seed) {
  if (gamma <= 0.0)
    throw std::invalid_argument("trace_diagnostics: gamma <= 0");
  const double c = static_cast<double>(p) / n;
  const auto mom = moments(f);
  NoiseSystemParams prm{c, gamma, mom.a1, mom.nu};
  const auto st = solve(prm);

  TraceDiagnostics td;
  td.n = n;
  td.p = p;
  td.c = c;
  td.gamma = gamma;
  td.seed = seed;
  td.m_pred = st.m;
  td.delta_pred = st.delta;

  const Dataset ds = sample_dataset(n, p, VectorXd::Zero(p), seed);
  const double sp = std::sqrt(static_cast<double>(p));
  MatrixXd zc = ds.X.transpose() * ds.X;
  zc /= static_cast<double>(p);
  MatrixXd kn = (sp * zc).unaryExpr(f.eval) / sp;
  kn.diagonal().setZero();

  MatrixXd zck;
  zck.noalias() = zc * kn;
  MatrixXd b;
  b.noalias() = kn * zck;
  b.diagonal().array() += gamma / c;
  Eigen::LLT<MatrixXd> llt(b);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error("trace_diagnostics: factorization failed");
  MatrixXd q0 = llt.solve(MatrixXd::Identity(n, n));
  q0 = 0.5 * (q0 + q0.transpose()).eval();

  MatrixXd kq;
  kq.noalias() = kn * q0;
  MatrixXd kqk;
  kqk.noalias() = kq * kn;
  MatrixXd zkqk;
  zkqk.noalias() = zc * kqk;
  MatrixXd zkqkz;
  zkqkz.noalias() = zkqk * zc;
  MatrixXd zkq;
  zkq.noalias() = zc * kq;

  const double dp = static_cast<double>(p);
  td.m_hat = q0.trace() / n;
  td.delta_hat[0] = kq.trace() / dp;
  td.delta_hat[1] = zc.cwiseProduct(kq).sum() / dp;   // tr(Zc K Q0), Zc sym
  td.delta_hat[2] = kqk.trace() / dp;
  td.delta_hat[3] = zkqkz.trace() / dp;
  td.delta_hat[4] = q0.cwiseProduct(zc).sum() / dp;   // tr(Q0 Zc), both sym
  td.delta_hat[5] = zkq.cwiseProduct(zc).sum() / dp;  // tr((Zc K Q0) Zc)
  td.delta_hat[6] = zc.cwiseProduct(zkqkz).sum() / dp;  // tr(Zc (Zc K Q0 K Zc))
  td.resolvent_identity_gap = std::abs(q0.cwiseProduct(b).sum() - n);
  return td;
}

SignalGeometry sample_geometry(int p, double snr, AlignmentMode alignment,
                               std::uint64_t seed) {
  if (snr < 0.0) throw std::invalid_argument("sample_geometry: snr < 0");
  SignalGeometry geo;
  geo.mu = VectorXd::Zero(p);
  geo.w = AttentionWeights::zero(p);

  if (alignment != AlignmentMode::none) {
    const double sp = std::sqrt(static_cast<double>(p));
    const VectorXd mu_base =
        gaussian_matrix(p, 1, mix64(seed, kSignalStream)).col(0) / sp;
    const double base_norm = mu_base.norm();
    if (base_norm == 0.0) throw std::runtime_error("degenerate mu_base draw");
    const VectorXd mu_hat = mu_base / base_norm;
    if (snr > 0.0) geo.mu = std::sqrt(snr) * mu_hat;
    if (alignment == AlignmentMode::aligned) {
      geo.w.w_k = mu_base;
      geo.w.w_q = mu_base;
    } else {
      geo.w.w_k = gaussian_matrix(p, 1, mix64(seed, kKeyStream)).col(0) / sp;
      geo.w.w_q = gaussian_matrix(p, 1, mix64(seed, kQueryStream)).col(0) / sp;
      geo.w.w_k -= mu_hat * mu_hat.dot(geo.w.w_k);
      geo.w.w_q -= mu_hat * mu_hat.dot(geo.w.w_q);
      const double wk_norm = geo.w.w_k.norm();
      if (wk_norm > 0.0)
        geo.w.w_q -= geo.w.w_k * (geo.w.w_k.dot(geo.w.w_q) / (wk_norm * wk_norm));
    }
  }
  return geo;
}

double run_trial(const TrialSpec& spec, std::uint64_t seed) {
  const SignalGeometry geo =
      sample_geometry(spec.p, spec.snr, spec.alignment, seed);
  const Eigen::VectorXd& mu = geo.mu;
  const AttentionWeights& w = geo.w;

  const Dataset ds = sample_dataset(spec.n, spec.p, mu, seed);
  EmpiricalError err;
  switch (spec.model) {
    case ModelKind::ridge:
      err = ridge_empirical(ds, spec.gamma);
      break;
    case ModelKind::attention:
      err = empirical_error(ds, attention_kernel(ds, w, spec.f), spec.gamma);
      break;
    case ModelKind::attention_softmax:
      err = empirical_error(ds, softmax_kernel(ds, w, spec.softmax_cap),
                            spec.gamma);
      break;
  }
  if (!std::isfinite(err.e)) throw std::runtime_error("non-finite trial error");
  return err.e;
}

MonteCarloSummary monte_carlo(const TrialSpec& spec, int trials,
                              std::uint64_t master_seed, int workers) {
  if (trials < 1) throw std::invalid_argument("monte_carlo: trials < 1");
  MonteCarloSummary summary;
  summary.per_trial.resize(trials);

  auto run_one = [&](int t) {
    TrialOutcome& out = summary.per_trial[t];
    out.seed = mix64(master_seed, static_cast<std::uint64_t>(t));
    try {
      out.e = run_trial(spec, out.seed);
      out.ok = true;
    } catch (const std::exception& ex) {
      out.ok = false;
      out.error = ex.what();
    }
  };

  const int pool = std::min(std::max(workers, 1), trials);
  if (pool <= 1) {
    for (int t = 0; t < trials; ++t) run_one(t);
  } else {
    std::atomic<int> next{0};
    std::vector<std::thread> threads;
    threads.reserve(pool);
    for (int k = 0; k < pool; ++k)
      threads.emplace_back([&] {
        for (int t = next.fetch_add(1); t < trials; t = next.fetch_add(1))
          run_one(t);
      });
    for (auto& th : threads) th.join();
  }

  double sum = 0.0, sum2 = 0.0;
  int ok = 0;
  for (const auto& out : summary.per_trial) {
    if (!out.ok) continue;
    sum += out.e;
    sum2 += out.e * out.e;
    ++ok;
  }
  summary.trials = ok;
  summary.failures = trials - ok;
  if (ok > 0) {
    summary.mean_e = sum / ok;
    summary.std_e = std::sqrt(std::max(0.0, sum2 / ok - summary.mean_e * summary.mean_e));
    summary.stderr_e = summary.std_e / std::sqrt(static_cast<double>(ok));
  } else {
    summary.mean_e = std::numeric_limits<double>::quiet_NaN();
    summary.std_e = std::numeric_limits<double>::quiet_NaN();
    summary.stderr_e = std::numeric_limits<double>::quiet_NaN();
  }
  return summary;
}

}  // namespace icmem
