#include "icmem/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <tuple>

#include "icmem/nonlinearity.hpp"
#include "icmem/selfconsistent.hpp"
#include "icmem/theory.hpp"

namespace icmem {

// ------------------------------------------------------------- enum <-> text

const char* to_string(SweepMode mode) {
  switch (mode) {
    case SweepMode::theory_attention: return "theory-attention";
    case SweepMode::theory_ridge: return "theory-ridge";
    case SweepMode::empirical_attention: return "empirical-attention";
    case SweepMode::empirical_ridge: return "empirical-ridge";
    case SweepMode::diagnostics: return "diagnostics";
  }
  throw std::logic_error("to_string(SweepMode): unreachable");
}

const char* to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::gamma: return "gamma";
    case SweepAxis::snr: return "snr";
    case SweepAxis::p: return "p";
    case SweepAxis::a1_mix: return "a1-mix";
  }
  throw std::logic_error("to_string(SweepAxis): unreachable");
}

const char* to_string(AlignmentMode mode) {
  switch (mode) {
    case AlignmentMode::none: return "null";
    case AlignmentMode::aligned: return "aligned";
    case AlignmentMode::orthogonal: return "orthogonal";
  }
  throw std::logic_error("to_string(AlignmentMode): unreachable");
}

SweepMode sweep_mode_from_string(const std::string& s) {
  for (SweepMode m : {SweepMode::theory_attention, SweepMode::theory_ridge,
                      SweepMode::empirical_attention, SweepMode::empirical_ridge,
                      SweepMode::diagnostics})
    if (s == to_string(m)) return m;
  throw std::invalid_argument(
      "unknown mode '" + s +
      "' (valid: theory-attention, theory-ridge, empirical-attention, "
      "empirical-ridge, diagnostics)");
}

SweepAxis sweep_axis_from_string(const std::string& s) {
  for (SweepAxis a :
       {SweepAxis::gamma, SweepAxis::snr, SweepAxis::p, SweepAxis::a1_mix})
    if (s == to_string(a)) return a;
  throw std::invalid_argument("unknown axis '" + s +
                              "' (valid: gamma, snr, p, a1-mix)");
}

AlignmentMode alignment_from_string(const std::string& s) {
  if (s == "none") return AlignmentMode::none;  // accepted alias of "null"
  for (AlignmentMode m : {AlignmentMode::none, AlignmentMode::aligned,
                          AlignmentMode::orthogonal})
    if (s == to_string(m)) return m;
  throw std::invalid_argument("unknown alignment '" + s +
                              "' (valid: null, aligned, orthogonal)");
}

// ------------------------------------------------------------------ validate

void SweepConfig::validate() const {
  auto fail = [](const std::string& what) {
    throw std::invalid_argument("SweepConfig: " + what);
  };
  if (axis_grid.empty()) fail("axis_grid must be nonempty");
  const bool increasing = axis_grid.size() < 2 || axis_grid[1] > axis_grid[0];
  for (std::size_t i = 1; i < axis_grid.size(); ++i) {
    if (increasing ? axis_grid[i] <= axis_grid[i - 1]
                   : axis_grid[i] >= axis_grid[i - 1])
      fail("axis_grid must be strictly monotone");
  }
  if (n < 1) fail("n must be >= 1");
  if (axis != SweepAxis::p && !(p > 0)) fail("p must be > 0");
  if (axis != SweepAxis::gamma && !(gamma > 0)) fail("gamma must be > 0");
  if (axis != SweepAxis::snr && !(snr >= 0)) fail("snr must be >= 0");
  for (double v : axis_grid) {
    switch (axis) {
      case SweepAxis::gamma:
        if (!(v > 0)) fail("gamma grid values must be > 0");
        break;
      case SweepAxis::snr:
        if (!(v >= 0)) fail("snr grid values must be >= 0");
        break;
      case SweepAxis::p:
        if (!(v > 0)) fail("p grid values must be > 0");
        break;
      case SweepAxis::a1_mix:
        if (!(v >= 0 && v <= 1)) fail("a1-mix grid values are mix ratios in [0, 1]");
        break;
    }
  }
  if (axis == SweepAxis::a1_mix && f_name != "hermite-mix")
    fail("axis a1-mix requires f = hermite-mix");
  if (empirical() && trials < 1) fail("empirical modes require trials >= 1");
  if (!ridge_only() && mode != SweepMode::diagnostics)
    catalog(f_name, f_params);  // throws on an unknown nonlinearity
}

// ------------------------------------------------------------------- presets

namespace {

std::vector<double> logspace(double lo, double hi, int k) {
  std::vector<double> g(k);
  for (int i = 0; i < k; ++i)
    g[i] = lo * std::pow(hi / lo, static_cast<double>(i) / (k - 1));
  g.front() = lo;
  g.back() = hi;
  return g;
}

std::vector<double> linspace(double lo, double hi, int k) {
  std::vector<double> g(k);
  for (int i = 0; i < k; ++i) g[i] = lo + (hi - lo) * static_cast<double>(i) / (k - 1);
  g.back() = hi;
  return g;
}

SweepConfig preset_base(SweepMode mode, const std::string& f, SweepAxis axis,
                        std::vector<double> grid, int n, double p, double gamma,
                        double snr, AlignmentMode al) {
  SweepConfig c;
  c.mode = mode;
  c.f_name = f;
  if (f == "clamped-linear") c.f_params = {{"B", 5.0}};
  c.axis = axis;
  c.axis_grid = std::move(grid);
  c.n = n;
  c.p = p;
  c.gamma = gamma;
  c.snr = snr;
  c.alignment = al;
  return c;
}

// The published p-axis of the n = 4096 ridge/null sweeps is uniform in n/p
// over [1, 3]: p_k = 4096 * 29 / (29 + 2k).
std::vector<double> inverse_ratio_grid() {
  std::vector<double> g(30);
  for (int k = 0; k < 30; ++k) g[k] = 4096.0 * 29.0 / (29.0 + 2.0 * k);
  return g;
}

// The published embedding-dimension axis of the gamma = 1 comparison: 30
// integer points uniform on [512, 4096].
std::vector<double> embed_grid() {
  std::vector<double> g(30);
  for (int k = 0; k < 30; ++k)
    g[k] = std::round(512.0 + k * (4096.0 - 512.0) / 29.0);
  return g;
}

}  // namespace

SweepPreset figure_preset(const std::string& name) {
  using SM = SweepMode;
  using SA = SweepAxis;
  using AM = AlignmentMode;
  SweepPreset out;
  out.name = name;

  if (name == "fig1a") {
    out.configs = {preset_base(SM::theory_ridge, "", SA::gamma,
                               logspace(1e-2, 1e3, 30), 512, 2048, 1.0, 1.0,
                               AM::aligned)};
  } else if (name == "fig1b") {
    out.configs = {preset_base(SM::theory_ridge, "", SA::p, inverse_ratio_grid(),
                               4096, 4096, 1e-5, 1.0, AM::aligned)};
  } else if (name == "fig1c") {
    out.configs = {preset_base(SM::theory_ridge, "", SA::snr,
                               logspace(0.1, 100.0, 30), 2048, 512, 1e-5, 1.0,
                               AM::aligned)};
  } else if (name == "fig2a") {
    out.configs = {preset_base(SM::theory_attention, "tanh", SA::gamma,
                               logspace(1e-2, 1e3, 30), 1024, 4096, 1.0, 0.0,
                               AM::none)};
  } else if (name == "fig2b") {
    out.configs = {preset_base(SM::theory_attention, "tanh", SA::p,
                               inverse_ratio_grid(), 4096, 4096, 1e-2, 0.0,
                               AM::none)};
  } else if (name == "fig2c") {
    out.configs = {preset_base(SM::theory_attention, "tanh", SA::snr,
                               logspace(0.1, 10.0, 30), 2048, 512, 1e-2, 1.0,
                               AM::aligned)};
  } else if (name == "fig3a") {
    out.configs = {preset_base(SM::theory_attention, "hermite-mix", SA::a1_mix,
                               linspace(0.1, 1.0, 20), 4096, 4096, 1.0, 1.0,
                               AM::aligned)};
  } else if (name == "fig3b") {
    for (const char* f : {"tanh", "clamped-linear", "cos"})
      out.configs.push_back(preset_base(SM::theory_attention, f, SA::p,
                                        embed_grid(), 4096, 4096, 1.0, 1.0,
                                        AM::aligned));
  } else if (name == "fig3c") {
    for (const char* f : {"tanh", "clamped-linear", "cos"})
      out.configs.push_back(preset_base(SM::theory_attention, f, SA::snr,
                                        logspace(0.1, 10.0, 30), 2048, 512,
                                        1e-2, 1.0, AM::aligned));
  } else if (name == "fig4") {
    for (auto [n, p] : {std::pair{512, 2048}, {2048, 2048}, {2048, 512}})
      out.configs.push_back(preset_base(SM::theory_attention, "tanh", SA::snr,
                                        logspace(0.1, 10.0, 30), n, p, 1.0, 1.0,
                                        AM::aligned));
  } else if (name == "fig5") {
    for (int p : {1024, 512, 256, 128})
      for (double gamma : {10.0, 1.0, 0.1})
        for (const char* f : {"tanh", "clamped-linear"})
          out.configs.push_back(preset_base(SM::theory_attention, f, SA::snr,
                                            logspace(0.1, 10.0, 30), 2048, p,
                                            gamma, 1.0, AM::aligned));
  } else {
    throw std::invalid_argument(
        "unknown figure preset '" + name +
        "' (valid: fig1a, fig1b, fig1c, fig2a, fig2b, fig2c, fig3a, fig3b, "
        "fig3c, fig4, fig5)");
  }
  return out;
}

// ----------------------------------------------------------------- run_sweep

namespace {

SignalAlignment cell_alignment(AlignmentMode mode, double snr) {
  switch (mode) {
    case AlignmentMode::none: return SignalAlignment::none();
    case AlignmentMode::aligned: return SignalAlignment::aligned_base(snr);
    case AlignmentMode::orthogonal: return SignalAlignment::orthogonal(snr);
  }
  throw std::logic_error("cell_alignment: unreachable");
}

// Attention theory for one cell, memoized on the noise-system parameters so
// that sweeps whose axis does not move the fixed point (snr sweeps, the mix
// sweep's shared cell) solve it once.
class TheoryCache {
 public:
  struct Entry {
    SelfConsistentState state;
    DerivativeState derivs;
  };

  const Entry& at(const NoiseSystemParams& prm) {
    const Key key{prm.c, prm.gamma, prm.a1, prm.nu};
    auto it = cache_.find(key);
    if (it == cache_.end()) {
      Entry e;
      e.state = solve(prm);
      e.derivs = derivatives(e.state);
      it = cache_.emplace(key, std::move(e)).first;
    }
    return it->second;
  }

 private:
  using Key = std::tuple<double, double, double, double>;
  std::map<Key, Entry> cache_;
};

}  // namespace

SweepResult run_sweep(const SweepConfig& config, int workers) {
  config.validate();
  if (config.mode == SweepMode::diagnostics)
    throw std::invalid_argument(
        "run_sweep: diagnostics is not a sweep mode; use the diag subcommands");
  if (workers < 1) throw std::invalid_argument("run_sweep: workers must be >= 1");

  SweepResult out;
  TheoryCache cache;
  const bool is_null = config.alignment == AlignmentMode::none;

  for (double axis_value : config.axis_grid) {
    // Resolve the cell this row evaluates.
    double p = config.p;
    double gamma = config.gamma;
    double snr = is_null ? 0.0 : config.snr;
    double mix_r = 0;
    switch (config.axis) {
      case SweepAxis::gamma: gamma = axis_value; break;
      case SweepAxis::snr: snr = is_null ? 0.0 : axis_value; break;
      case SweepAxis::p: p = axis_value; break;
      case SweepAxis::a1_mix: mix_r = axis_value; break;
    }

    ResultRow row;
    row.axis_value = axis_value;
    row.n = config.n;
    row.p = p;
    row.c = p / config.n;
    row.gamma = gamma;
    if (!is_null) row.snr = snr;

    Nonlinearity f;
    if (!config.ridge_only()) {
      auto params = config.f_params;
      if (config.axis == SweepAxis::a1_mix) params["r"] = mix_r;
      f = centered(catalog(config.f_name, params));
      const HermiteMoments mm = moments(f);
      row.a1 = mm.a1;
      row.nu = mm.nu;
      if (config.axis == SweepAxis::a1_mix) row.axis_value = mm.a1;

      try {
        const auto& th = cache.at(NoiseSystemParams{row.c, gamma, mm.a1, mm.nu});
        row.e_theory =
            attention_error_from_state(th.state, th.derivs,
                                       cell_alignment(config.alignment, snr))
                .e_bar;
        row.solver_iterations = th.state.iterations;
        row.residual = th.state.residual;
      } catch (const std::exception& e) {
        out.exit_code = 2;
        if (out.message.empty())
          out.message = "theory failed at axis_value " +
                        std::to_string(row.axis_value) + ": " + e.what();
      }
    }
    row.e_ridge_theory = ridge_error(row.c, gamma, snr);

    if (config.empirical()) {
      row.trials = config.trials;
      row.master_seed = config.master_seed;
      TrialSpec spec;
      spec.n = config.n;
      spec.p = static_cast<int>(std::llround(std::max(1.0, p)));
      spec.gamma = gamma;
      spec.snr = snr;
      spec.alignment = config.alignment;
      spec.model = config.ridge_only() ? ModelKind::ridge : ModelKind::attention;
      spec.f = f;
      const MonteCarloSummary mc =
          monte_carlo(spec, config.trials, config.master_seed, workers);
      if (mc.trials > 0) {
        row.e_emp_mean = mc.mean_e;
        row.e_emp_std = mc.std_e;
        row.e_emp_stderr = mc.stderr_e;
      }
      if (mc.failures > 0 && mc.trials == 0) {
        out.exit_code = 2;
        if (out.message.empty())
          out.message = "all " + std::to_string(config.trials) +
                        " trials failed at axis_value " +
                        std::to_string(row.axis_value) +
                        (mc.per_trial.empty() || mc.per_trial.front().error.empty()
                             ? std::string()
                             : ": " + mc.per_trial.front().error);
      }
    }

    out.rows.push_back(std::move(row));
  }
  return out;
}

SweepResult run_sweeps(const std::vector<SweepConfig>& configs, int workers) {
  SweepResult all;
  for (const SweepConfig& cfg : configs) {
    SweepResult r = run_sweep(cfg, workers);
    all.rows.insert(all.rows.end(), r.rows.begin(), r.rows.end());
    all.exit_code = std::max(all.exit_code, r.exit_code);
    if (all.message.empty()) all.message = r.message;
  }
  return all;
}

// ----------------------------------------------------------------------- CSV

namespace {

std::string fmt_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

void append_field(std::string& line, const std::optional<double>& v) {
  line += ',';
  if (v) line += fmt_real(*v);
}

std::optional<double> parse_real_field(const std::string& s) {
  if (s.empty()) return std::nullopt;
  std::size_t pos = 0;
  const double v = std::stod(s, &pos);
  if (pos != s.size()) throw std::invalid_argument("bad numeric field '" + s + "'");
  return v;
}

}  // namespace

std::string to_csv(const std::vector<ResultRow>& rows) {
  std::string out = kCsvHeader;
  out += '\n';
  for (const ResultRow& r : rows) {
    std::string line = fmt_real(r.axis_value);
    line += ',' + std::to_string(r.n);
    line += ',' + fmt_real(r.p);
    line += ',' + fmt_real(r.c);
    line += ',' + fmt_real(r.gamma);
    append_field(line, r.snr);
    append_field(line, r.a1);
    append_field(line, r.nu);
    append_field(line, r.e_theory);
    append_field(line, r.e_ridge_theory);
    append_field(line, r.e_emp_mean);
    append_field(line, r.e_emp_std);
    append_field(line, r.e_emp_stderr);
    line += ',';
    if (r.trials) line += std::to_string(*r.trials);
    line += ',';
    if (r.master_seed) line += std::to_string(*r.master_seed);
    line += ',';
    if (r.solver_iterations) line += std::to_string(*r.solver_iterations);
    append_field(line, r.residual);
    out += line;
    out += '\n';
  }
  return out;
}

void write_csv(const std::string& path, const std::vector<ResultRow>& rows) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("write_csv: cannot open " + tmp);
    f << to_csv(rows);
    f.flush();
    if (!f) throw std::runtime_error("write_csv: write failed on " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw std::runtime_error("write_csv: rename to " + path + " failed");
  }
}

std::vector<ResultRow> parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader)
    throw std::invalid_argument("parse_csv: missing or mismatched header row");
  std::vector<ResultRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
      if (i == line.size() || line[i] == ',') {
        fields.push_back(line.substr(start, i - start));
        start = i + 1;
      }
    }
    if (fields.size() != 17)
      throw std::invalid_argument("parse_csv: expected 17 fields, got " +
                                  std::to_string(fields.size()));
    ResultRow r;
    r.axis_value = *parse_real_field(fields[0]);
    r.n = std::stoi(fields[1]);
    r.p = *parse_real_field(fields[2]);
    r.c = *parse_real_field(fields[3]);
    r.gamma = *parse_real_field(fields[4]);
    r.snr = parse_real_field(fields[5]);
    r.a1 = parse_real_field(fields[6]);
    r.nu = parse_real_field(fields[7]);
    r.e_theory = parse_real_field(fields[8]);
    r.e_ridge_theory = parse_real_field(fields[9]);
    r.e_emp_mean = parse_real_field(fields[10]);
    r.e_emp_std = parse_real_field(fields[11]);
    r.e_emp_stderr = parse_real_field(fields[12]);
    if (!fields[13].empty()) r.trials = std::stoi(fields[13]);
    if (!fields[14].empty()) r.master_seed = std::stoull(fields[14]);
    if (!fields[15].empty()) r.solver_iterations = std::stoi(fields[15]);
    r.residual = parse_real_field(fields[16]);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<ResultRow> read_csv(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_csv: cannot open " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  return parse_csv(buf.str());
}

// -------------------------------------------------------------------- config

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

std::vector<std::pair<std::string, std::string>> parse_kv_text(
    const std::string& text) {
  std::vector<std::pair<std::string, std::string>> pairs;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected key = value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": empty key or value");
    pairs.emplace_back(key, value);
  }
  return pairs;
}

std::vector<double> parse_grid(const std::string& text) {
  auto parse_spec = [&](const char* kind) -> std::vector<double> {
    // kind:lo:hi:k
    std::vector<std::string> parts;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= text.size(); ++i) {
      if (i == text.size() || text[i] == ':') {
        parts.push_back(text.substr(start, i - start));
        start = i + 1;
      }
    }
    if (parts.size() != 4)
      throw std::invalid_argument("grid '" + text + "': expected " +
                                  std::string(kind) + ":<lo>:<hi>:<k>");
    const double lo = std::stod(parts[1]);
    const double hi = std::stod(parts[2]);
    const int k = std::stoi(parts[3]);
    if (k < 2) throw std::invalid_argument("grid '" + text + "': need k >= 2");
    if (std::string(kind) == "log") {
      if (!(lo > 0 && hi > 0))
        throw std::invalid_argument("grid '" + text + "': log needs lo, hi > 0");
      return logspace(lo, hi, k);
    }
    return linspace(lo, hi, k);
  };
  if (text.rfind("log:", 0) == 0) return parse_spec("log");
  if (text.rfind("lin:", 0) == 0) return parse_spec("lin");
  std::vector<double> g;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= text.size(); ++i) {
    if (i == text.size() || text[i] == ',') {
      const std::string tok = trim(text.substr(start, i - start));
      if (tok.empty())
        throw std::invalid_argument("grid '" + text + "': empty element");
      std::size_t pos = 0;
      g.push_back(std::stod(tok, &pos));
      if (pos != tok.size())
        throw std::invalid_argument("grid '" + text + "': bad element '" + tok +
                                    "'");
      start = i + 1;
    }
  }
  return g;
}

SweepConfig config_from_kv(
    const std::vector<std::pair<std::string, std::string>>& pairs) {
  SweepConfig cfg;
  bool have_p = false, have_c = false, have_n = false;
  double c_value = 0;
  for (const auto& [key, value] : pairs) {
    if (key == "mode") {
      cfg.mode = sweep_mode_from_string(value);
    } else if (key == "f") {
      cfg.f_name = value;
    } else if (key.rfind("f_param.", 0) == 0) {
      const std::string pname = key.substr(8);
      if (pname.empty()) throw std::invalid_argument("config: empty f_param name");
      cfg.f_params[pname] = std::stod(value);
    } else if (key == "axis") {
      cfg.axis = sweep_axis_from_string(value);
    } else if (key == "grid") {
      cfg.axis_grid = parse_grid(value);
    } else if (key == "n") {
      cfg.n = std::stoi(value);
      have_n = true;
    } else if (key == "p") {
      cfg.p = std::stod(value);
      have_p = true;
    } else if (key == "c") {
      c_value = std::stod(value);
      have_c = true;
    } else if (key == "gamma") {
      cfg.gamma = std::stod(value);
    } else if (key == "snr") {
      cfg.snr = std::stod(value);
    } else if (key == "alignment") {
      cfg.alignment = alignment_from_string(value);
    } else if (key == "trials") {
      cfg.trials = std::stoi(value);
    } else if (key == "master_seed") {
      cfg.master_seed = std::stoull(value);
    } else {
      throw std::invalid_argument("config: unknown key '" + key + "'");
    }
  }
  if (have_c) {
    if (!have_n) throw std::invalid_argument("config: c requires n");
    const double implied = c_value * cfg.n;
    if (have_p && std::abs(cfg.p - implied) > 1e-9 * std::max(1.0, implied))
      throw std::invalid_argument("config: p and c = p/n disagree");
    cfg.p = implied;
  }
  return cfg;
}

SweepConfig read_config_file(
    const std::string& path,
    const std::vector<std::pair<std::string, std::string>>& overrides) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("read_config_file: cannot open " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  auto pairs = parse_kv_text(buf.str());
  pairs.insert(pairs.end(), overrides.begin(), overrides.end());
  return config_from_kv(pairs);
}

}  // namespace icmem
