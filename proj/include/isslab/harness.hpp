#ifndef ISSLAB_HARNESS_HPP
#define ISSLAB_HARNESS_HPP

// Experiment configuration, sweeps and command drivers behind the CLI.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "json.hpp"
#include "toml.hpp"

#include "isslab/comparison.hpp"
#include "isslab/descent.hpp"
#include "isslab/domains.hpp"
#include "isslab/errors.hpp"
#include "isslab/flow.hpp"
#include "isslab/io.hpp"
#include "isslab/linctrl.hpp"
#include "isslab/losses.hpp"
#include "isslab/lqr.hpp"

namespace isslab::harness {

namespace fs = std::filesystem;
using json = nlohmann::json;

enum class ProblemKind { quadratic, scalar_lqr, matrix_lqr, custom_polynomial };

inline std::string to_string(ProblemKind k) {
  switch (k) {
    case ProblemKind::quadratic: return "quadratic";
    case ProblemKind::scalar_lqr: return "scalar-lqr";
    case ProblemKind::matrix_lqr: return "matrix-lqr";
    case ProblemKind::custom_polynomial: return "custom-polynomial";
  }
  return "unknown";
}

struct FlowSettings {
  double eta = 1.0;
  double horizon = 50.0;
  double tol = 1e-8;
  double output_dt = 0.02;
  double burn_in = 30.0;
  std::vector<double> magnitudes{0.0, 0.1, 0.5};
  std::vector<std::string> signals{"constant", "sinusoidal", "square"};
  double frequency = 1.0;
  double period = 4.0;
  bool envelope = true;
  double pl_safety = 0.95;
  std::size_t pl_samples = 400;
  double gain_horizon = 40.0;
  std::size_t gain_realizations = 4;
};

struct DescentSettings {
  std::size_t steps = 100;
  std::string noise = "absolute";  // none | absolute | relative
  std::string direction = "random";
  std::vector<double> fixed_direction;
  std::vector<double> magnitudes{0.0, 0.05, 0.1};
  double decay = 1.0;
  std::size_t realizations = 3;
  std::size_t burn_in = 50;
  std::size_t lemma_samples = 1000;
  std::size_t lipschitz_pairs = 200;
  bool certificate = true;
};

struct OracleSettings {
  std::size_t gradient_samples = 50;
  double fd_step = 1e-5;
  double fd_tol = 1e-5;
  std::size_t line_search_cases = 20;
  double grid_step = 1e-4;
};

struct ExperimentConfig {
  ProblemKind problem = ProblemKind::quadratic;
  std::string name = "experiment";
  std::uint64_t seed = 0;
  std::string output = "out";
  std::string size = "";  // norm | excess | kurzweil; empty picks the problem default
  json system = json::object();
  std::vector<Vector> initial_points;
  std::size_t initial_count = 5;
  double initial_level = 1.0;
  FlowSettings flow;
  DescentSettings descent;
  OracleSettings oracle;
  std::string source;  // raw text, hashed into the manifest
};

// ---------------------------------------------------------------- parsing

inline json toml_to_json(const toml::node& node) {
  if (const auto* t = node.as_table()) {
    json j = json::object();
    for (const auto& [k, v] : *t) j[std::string(k.str())] = toml_to_json(v);
    return j;
  }
  if (const auto* a = node.as_array()) {
    json j = json::array();
    for (const auto& v : *a) j.push_back(toml_to_json(v));
    return j;
  }
  if (const auto* s = node.as_string()) {
    // strings may embed JSON (matrices); fall back to the plain string
    const std::string text = s->get();
    json parsed = json::parse(text, nullptr, false);
    return parsed.is_discarded() ? json(text) : parsed;
  }
  if (const auto* i = node.as_integer()) return json(i->get());
  if (const auto* f = node.as_floating_point()) return json(f->get());
  if (const auto* b = node.as_boolean()) return json(b->get());
  throw ConfigError("unsupported TOML value");
}

namespace detail {

inline double number(const json& j, const std::string& field) {
  if (!j.is_number()) throw ConfigError("field '" + field + "': expected a number");
  return j.get<double>();
}

inline Vector vector_from_json(const json& j, const std::string& field) {
  if (j.is_number()) return scalar_vector(j.get<double>());
  if (!j.is_array() || j.empty()) throw ConfigError("field '" + field + "': expected a number or a list of numbers");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = number(j[i], field);
  return v;
}

inline std::vector<double> numbers(const json& j, const std::string& field) {
  if (j.is_number()) return {j.get<double>()};
  if (!j.is_array()) throw ConfigError("field '" + field + "': expected a list of numbers");
  std::vector<double> out;
  for (const auto& v : j) out.push_back(number(v, field));
  return out;
}

template <class T>
void read(const json& section, const char* key, T& target, const std::string& prefix) {
  if (!section.contains(key)) return;
  const json& v = section.at(key);
  const std::string field = prefix + key;
  try {
    if constexpr (std::is_same_v<T, std::vector<double>>) {
      target = numbers(v, field);
    } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
      target = v.get<std::vector<std::string>>();
    } else if constexpr (std::is_same_v<T, std::size_t>) {
      if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError("field '" + field + "': expected a nonnegative integer");
      target = v.get<std::size_t>();
    } else {
      target = v.get<T>();
    }
  } catch (const json::exception&) {
    throw ConfigError("field '" + field + "': wrong type");
  }
}

}  // namespace detail

inline ExperimentConfig parse_config(const std::string& text, const std::string& origin = "<config>") {
  toml::table tbl;
  try {
    tbl = toml::parse(text, origin);
  } catch (const toml::parse_error& e) {
    throw ConfigError(std::string("config parse error: ") + std::string(e.description()));
  }
  const json j = toml_to_json(tbl);
  ExperimentConfig c;
  c.source = text;
  if (!j.contains("problem")) throw ConfigError("field 'problem': missing");
  const std::string p = j.at("problem").is_string() ? j.at("problem").get<std::string>() : "";
  if (p == "quadratic") c.problem = ProblemKind::quadratic;
  else if (p == "scalar-lqr") c.problem = ProblemKind::scalar_lqr;
  else if (p == "matrix-lqr") c.problem = ProblemKind::matrix_lqr;
  else if (p == "custom-polynomial") c.problem = ProblemKind::custom_polynomial;
  else throw ConfigError("field 'problem': unknown problem '" + p + "'");
  detail::read(j, "name", c.name, "");
  detail::read(j, "output", c.output, "");
  detail::read(j, "size", c.size, "");
  if (j.contains("seed")) {
    if (!j.at("seed").is_number_integer()) throw ConfigError("field 'seed': expected an integer");
    c.seed = j.at("seed").get<std::uint64_t>();
  } else {
    throw ConfigError("field 'seed': missing (seeds must be explicit)");
  }
  if (j.contains("system")) c.system = j.at("system");
  if (j.contains("initial")) {
    const json& ini = j.at("initial");
    if (ini.contains("points"))
      for (const auto& pt : ini.at("points")) c.initial_points.push_back(detail::vector_from_json(pt, "initial.points"));
    detail::read(ini, "count", c.initial_count, "initial.");
    detail::read(ini, "level", c.initial_level, "initial.");
  }
  if (j.contains("flow")) {
    const json& f = j.at("flow");
    auto& s = c.flow;
    detail::read(f, "eta", s.eta, "flow.");
    detail::read(f, "horizon", s.horizon, "flow.");
    detail::read(f, "tol", s.tol, "flow.");
    detail::read(f, "output_dt", s.output_dt, "flow.");
    detail::read(f, "burn_in", s.burn_in, "flow.");
    detail::read(f, "magnitudes", s.magnitudes, "flow.");
    detail::read(f, "signals", s.signals, "flow.");
    detail::read(f, "frequency", s.frequency, "flow.");
    detail::read(f, "period", s.period, "flow.");
    detail::read(f, "envelope", s.envelope, "flow.");
    detail::read(f, "pl_safety", s.pl_safety, "flow.");
    detail::read(f, "pl_samples", s.pl_samples, "flow.");
    detail::read(f, "gain_horizon", s.gain_horizon, "flow.");
    detail::read(f, "gain_realizations", s.gain_realizations, "flow.");
    if (!(s.eta > 0.0)) throw ConfigError("field 'flow.eta': must be positive");
    if (!(s.horizon > 0.0)) throw ConfigError("field 'flow.horizon': must be positive");
    for (const auto& sig : s.signals)
      if (sig != "constant" && sig != "sinusoidal" && sig != "square" && sig != "decaying")
        throw ConfigError("field 'flow.signals': unknown signal '" + sig + "'");
  }
  if (j.contains("descent")) {
    const json& d = j.at("descent");
    auto& s = c.descent;
    detail::read(d, "steps", s.steps, "descent.");
    detail::read(d, "noise", s.noise, "descent.");
    detail::read(d, "direction", s.direction, "descent.");
    detail::read(d, "fixed_direction", s.fixed_direction, "descent.");
    detail::read(d, "magnitudes", s.magnitudes, "descent.");
    detail::read(d, "decay", s.decay, "descent.");
    detail::read(d, "realizations", s.realizations, "descent.");
    detail::read(d, "burn_in", s.burn_in, "descent.");
    detail::read(d, "lemma_samples", s.lemma_samples, "descent.");
    detail::read(d, "lipschitz_pairs", s.lipschitz_pairs, "descent.");
    detail::read(d, "certificate", s.certificate, "descent.");
    if (s.noise != "none" && s.noise != "absolute" && s.noise != "relative")
      throw ConfigError("field 'descent.noise': unknown noise model '" + s.noise + "'");
    if (s.direction != "random" && s.direction != "adversarial" && s.direction != "fixed")
      throw ConfigError("field 'descent.direction': unknown direction '" + s.direction + "'");
  }
  if (j.contains("oracle")) {
    const json& o = j.at("oracle");
    auto& s = c.oracle;
    detail::read(o, "gradient_samples", s.gradient_samples, "oracle.");
    detail::read(o, "fd_step", s.fd_step, "oracle.");
    detail::read(o, "fd_tol", s.fd_tol, "oracle.");
    detail::read(o, "line_search_cases", s.line_search_cases, "oracle.");
    detail::read(o, "grid_step", s.grid_step, "oracle.");
  }
  if (!c.size.empty() && c.size != "norm" && c.size != "excess" && c.size != "kurzweil")
    throw ConfigError("field 'size': unknown size function '" + c.size + "'");
  return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
  return parse_config(io::read_file(path), path.string());
}

/// FNV-1a over the config text and the effective seed.
inline std::string config_hash(const ExperimentConfig& c) {
  return io::hex(io::fnv1a("seed=" + std::to_string(c.seed), io::fnv1a(c.source)));
}

/// Independent stream for job `stream` of a run seeded with `seed`.
inline Rng job_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32), 0x155u};
  return Rng(seq);
}

/// Runs f(0..n-1) on up to `jobs` threads. The first failing index (in index
/// order) is rethrown.
template <class F>
void parallel_for(std::size_t n, unsigned jobs, F&& f) {
  std::vector<std::exception_ptr> errors(n);
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < std::min<std::size_t>(jobs, n); ++t)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            f(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------- problems

struct Problem {
  Loss loss;
  std::shared_ptr<const LqrInstance> lqr;  // set for the LQR problems
  InputMap input;
  SizeFunction omega;
  std::string size_name;
  json info = json::object();
};

namespace detail {

inline OpenDomain domain_from_system(const json& s, const Vector& xbar) {
  const bool has_lower = s.contains("lower"), has_upper = s.contains("upper");
  if (!has_lower && !has_upper) return OpenDomain::full_space(xbar);
  const Eigen::Index n = xbar.size();
  Vector lo = has_lower ? vector_from_json(s.at("lower"), "system.lower")
                        : Vector::Constant(n, -std::numeric_limits<double>::infinity());
  Vector hi = has_upper ? vector_from_json(s.at("upper"), "system.upper")
                        : Vector::Constant(n, std::numeric_limits<double>::infinity());
  if (lo.size() != n) throw ConfigError("field 'system.lower': dimension mismatch");
  if (hi.size() != n) throw ConfigError("field 'system.upper': dimension mismatch");
  try {
    return OpenDomain::open_box(lo, hi, xbar);
  } catch (const ContractError& e) {
    throw ConfigError(std::string("field 'system.lower'/'system.upper': ") + e.what());
  }
}

}  // namespace detail

inline Problem build_problem(const ExperimentConfig& c) {
  const json& s = c.system;
  std::optional<Loss> loss;
  std::shared_ptr<const LqrInstance> lqr;
  json info = json::object();
  info["problem"] = to_string(c.problem);
  switch (c.problem) {
    case ProblemKind::quadratic: {
      Vector xbar;
      if (s.contains("equilibrium")) xbar = detail::vector_from_json(s.at("equilibrium"), "system.equilibrium");
      Matrix h;
      if (s.contains("hessian")) h = matrix_from_json(s.at("hessian"), "system.hessian");
      Eigen::Index n = 1;
      if (s.contains("dim")) n = static_cast<Eigen::Index>(detail::number(s.at("dim"), "system.dim"));
      else if (xbar.size() > 0) n = xbar.size();
      else if (h.size() > 0) n = h.rows();
      if (xbar.size() == 0) xbar = Vector::Zero(n);
      if (h.size() == 0) h = Matrix::Identity(n, n);
      if (xbar.size() != n) throw ConfigError("field 'system.equilibrium': dimension mismatch");
      if (h.rows() != n || h.cols() != n) throw ConfigError("matrix field 'system.hessian': must be n x n");
      try {
        loss = quadratic_loss(detail::domain_from_system(s, xbar), h);
      } catch (const ContractError& e) {
        throw ConfigError(std::string("field 'system': ") + e.what());
      }
      break;
    }
    case ProblemKind::scalar_lqr: {
      const double b = s.contains("b") ? detail::number(s.at("b"), "system.b") : 1.0;
      if (b == 0.0) throw ConfigError("field 'system.b': must be nonzero");
      lqr = std::make_shared<const LqrInstance>(scalar_lqr_instance(b));
      break;
    }
    case ProblemKind::matrix_lqr: {
      if (s.contains("random")) {
        const json& r = s.at("random");
        const auto n = static_cast<Eigen::Index>(r.value("n", 2));
        const auto m = static_cast<Eigen::Index>(r.value("m", 1));
        if (n <= 0 || m <= 0) throw ConfigError("field 'system.random': n and m must be positive");
        Rng rng = job_rng(c.seed, 0xA11CEull);
        lqr = std::make_shared<const LqrInstance>(random_lqr_instance(n, m, rng));
      } else {
        lqr = std::make_shared<const LqrInstance>(lqr_from_json(s));
      }
      break;
    }
    case ProblemKind::custom_polynomial: {
      if (!s.contains("coefficients")) throw ConfigError("field 'system.coefficients': missing");
      const auto coeffs = detail::numbers(s.at("coefficients"), "system.coefficients");
      const Vector xbar = s.contains("equilibrium") ? detail::vector_from_json(s.at("equilibrium"), "system.equilibrium")
                                                    : scalar_vector(0.0);
      if (xbar.size() != 1) throw ConfigError("field 'system.equilibrium': must be a scalar");
      try {
        loss = polynomial_loss(detail::domain_from_system(s, xbar), coeffs);
      } catch (const ContractError& e) {
        throw ConfigError(std::string("field 'system.coefficients': ") + e.what());
      }
      break;
    }
  }
  if (lqr) {
    loss = lqr->as_loss();
    info["optimal_gain"] = matrix_to_json(lqr->optimal_gain());
    info["optimal_loss"] = lqr->optimal_loss();
    info["riccati_residual"] = lqr->riccati().residual;
    info["riccati_method"] = lqr->riccati().method;
  }
  info["minimizer"] = std::vector<double>(loss->minimizer().data(), loss->minimizer().data() + loss->minimizer().size());
  info["min_value"] = loss->min_value();

  const Eigen::Index n = loss->domain.dimension();
  InputMap input = InputMap::identity(n);
  if (s.contains("input_matrix")) {
    const Matrix b = matrix_from_json(s.at("input_matrix"), "system.input_matrix");
    if (b.rows() != n) throw ConfigError("matrix field 'system.input_matrix': must have n rows");
    input = InputMap::constant(b);
  }

  std::string size = c.size.empty() ? (lqr ? "excess" : "norm") : c.size;
  std::optional<SizeFunction> omega;
  if (size == "norm") {
    omega = SizeFunction::norm(loss->domain);
  } else if (size == "excess") {
    omega = size_from_loss(*loss);
  } else {
    if (!loss->domain.has_boundary_distance())
      throw ConfigError("field 'size': kurzweil needs a domain with a boundary");
    omega = kurzweil_size(loss->domain);
  }
  return Problem{std::move(*loss), lqr, std::move(input), std::move(*omega), size, std::move(info)};
}

/// Configured initial points, or `count` draws from {V - Vmin <= level}.
inline std::vector<Vector> initial_points(const ExperimentConfig& c, const Problem& p) {
  if (!c.initial_points.empty()) {
    for (const Vector& x : c.initial_points)
      if (!p.loss.domain.contains(x)) throw ConfigError("field 'initial.points': point outside the domain");
    return c.initial_points;
  }
  Rng rng = job_rng(c.seed, 0x1417ull);
  const double vmin = p.loss.min_value();
  const auto value = p.loss.value;
  const SublevelSampler sampler(p.loss.domain, [value, vmin](const Vector& x) { return value(x) - vmin; });
  return sampler.draw(c.initial_level, c.initial_count, rng);
}

// ---------------------------------------------------------------- manifest

struct RunOptions {
  fs::path out;
  std::optional<std::uint64_t> seed;
  unsigned jobs = 1;
  std::ostream* log = &std::cerr;
};

struct RunManifest {
  std::string command;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<std::string> outputs;  // relative to the output directory
  json summaries = json::object();
  std::map<std::string, bool> verdicts;

  bool all_passed() const {
    return std::all_of(verdicts.begin(), verdicts.end(), [](const auto& kv) { return kv.second; });
  }
  json to_json() const {
    json v = json::object();
    for (const auto& [k, ok] : verdicts) v[k] = ok;
    return json{{"command", command}, {"config_hash", config_hash}, {"seed", seed},
                {"outputs", outputs},  {"summaries", summaries},      {"verdicts", v}};
  }
};

struct RunResult {
  int exit_code = 0;
  RunManifest manifest;
};

namespace detail {

struct OutputDir {
  fs::path root;
  RunManifest* manifest;
  fs::path file(const std::string& rel) const {
    const fs::path p = root / rel;
    fs::create_directories(p.parent_path());
    return p;
  }
  void csv(const std::string& rel, const io::Table& t) const { io::write_csv(file(rel), t); }
  void text(const std::string& rel, const std::string& s) const { io::write_text(file(rel), s); }
  /// Files are listed once, in the order they are registered (canonical job order).
  void list(const std::string& rel) const { manifest->outputs.push_back(rel); }
};

inline void finish(RunResult& r, const OutputDir& out, const ExperimentConfig& c) {
  r.manifest.config_hash = config_hash(c);
  r.manifest.seed = c.seed;
  out.text("summary.json", r.manifest.summaries.dump(2) + "\n");
  r.manifest.outputs.push_back("summary.json");
  r.manifest.outputs.push_back("manifest.json");
  out.text("manifest.json", r.manifest.to_json().dump(2) + "\n");
  r.exit_code = r.manifest.all_passed() ? 0 : 1;
}

inline io::Series column_series(const io::Table& t, const std::string& x, const std::string& y, const std::string& color,
                                bool dashed = false) {
  return io::Series{y, t.values(x), t.values(y), color, dashed};
}

inline InputSignal make_signal(const std::string& shape, Eigen::Index m, double mu, const FlowSettings& s) {
  Vector dir = Vector::Zero(m);
  dir(0) = mu;
  if (mu == 0.0) return InputSignal::zero(m);
  if (shape == "constant") return InputSignal::constant(dir);
  if (shape == "sinusoidal") return InputSignal::sinusoidal(dir, s.frequency);
  if (shape == "square") return InputSignal::square_wave(dir, s.period, s.horizon);
  return InputSignal::decaying(dir, 1.0 / s.period);
}

}  // namespace detail

// ---------------------------------------------------------------- flow

struct FlowCertificate {
  double level = 0.0;  // certified sublevel {V - Vmin <= level}
  double pl = 0.0;     // empirical PL constant on it (before the safety factor)
  std::optional<IssEnvelope> envelope;
};

/// alpha_hat(v) = safety * (eta / 2) c v from the PL constant c on a sublevel
/// set large enough to contain every trajectory started below `start_level`
/// under inputs of norm <= mu_max; gamma(s) = C^2 s^2 / (2 eta).
inline FlowCertificate flow_certificate(const PerturbedGradientSystem& sys, double start_level, double mu_max,
                                        const FlowSettings& s, Rng& rng) {
  FlowCertificate cert;
  const double c_in = sys.input.bound;
  const MonotoneCurve gamma = quadratic_input_gain(c_in, sys.eta, std::max(1.0, 2.0 * mu_max));
  double level = std::max(start_level, 1e-6);
  for (int round = 0; round < 12; ++round) {
    cert.pl = pl_constant(sys.loss, sys.loss.min_value() + level, s.pl_samples, rng);
    const double slope = s.pl_safety * 0.5 * sys.eta * cert.pl;
    const double asymptote = 2.0 * gamma(mu_max) / slope;
    if (asymptote <= level) {
      cert.level = level;
      cert.envelope.emplace(MonotoneCurve::linear(slope), gamma, MonotoneCurve::identity(), MonotoneCurve::identity());
      return cert;
    }
    level = 1.5 * asymptote;
  }
  cert.level = level;
  return cert;
}

inline RunResult cmd_flow(const ExperimentConfig& cfg, const RunOptions& opt) {
  ExperimentConfig c = cfg;
  if (opt.seed) c.seed = *opt.seed;
  RunResult res;
  res.manifest.command = "flow";
  const detail::OutputDir out{opt.out, &res.manifest};
  const Problem p = build_problem(c);
  const FlowSettings& s = c.flow;
  const PerturbedGradientSystem sys(p.loss, s.eta, p.input, p.omega);
  const auto x0s = initial_points(c, p);
  const double vmin = p.loss.min_value();

  double start_level = 0.0;
  for (const Vector& x : x0s) start_level = std::max(start_level, p.loss.value(x) - vmin);
  double mu_max = 0.0;
  for (double mu : s.magnitudes) mu_max = std::max(mu_max, mu);

  std::optional<FlowCertificate> cert;
  json cert_info = json::object();
  if (s.envelope && p.size_name == "excess") {
    Rng rng = job_rng(c.seed, 0xCE47ull);
    cert = flow_certificate(sys, start_level, mu_max, s, rng);
    cert_info = {{"level", cert->level}, {"pl_constant", cert->pl}, {"pl_safety", s.pl_safety},
                 {"available", cert->envelope.has_value()}};
  } else {
    cert_info = {{"available", false},
                 {"reason", s.envelope ? "the envelope is built for size = excess only" : "disabled"}};
  }

  struct Job {
    std::size_t x_index, mu_index;
    std::string shape;
  };
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < x0s.size(); ++i)
    for (std::size_t j = 0; j < s.magnitudes.size(); ++j) {
      if (s.magnitudes[j] == 0.0) {
        jobs.push_back({i, j, "zero"});
        continue;
      }
      for (const auto& shape : s.signals) jobs.push_back({i, j, shape});
    }

  struct JobResult {
    std::string stem;
    json summary;
    std::size_t violations = 0;
    bool completed = true;
  };
  std::vector<JobResult> results(jobs.size());
  FlowOptions fo;
  fo.tol = s.tol;
  fo.output_dt = s.output_dt;
  parallel_for(jobs.size(), opt.jobs, [&](std::size_t k) {
    const Job& jb = jobs[k];
    const double mu = s.magnitudes[jb.mu_index];
    const InputSignal u = detail::make_signal(jb.shape, sys.inputs(), mu, s);
    const FlowTrace tr = integrate(sys, x0s[jb.x_index], u, s.horizon, fo);
    JobResult& r = results[k];
    r.stem = "flow_x" + std::to_string(jb.x_index) + "_mu" + std::to_string(jb.mu_index) + "_" + jb.shape;
    r.completed = tr.termination == Termination::completed;
    const LissReport liss = check_liss(sys, tr, u);
    double sup_w = 0.0;
    for (double v : tr.V) sup_w = std::max(sup_w, v - vmin);
    r.summary = {{"trace", "traces/" + r.stem + ".csv"},
                 {"x0_index", jb.x_index},
                 {"mu", mu},
                 {"signal", jb.shape},
                 {"termination", isslab::to_string(tr.termination)},
                 {"sup_omega_after_burn_in", tr.sup_omega_after(s.burn_in)},
                 {"liss_checked", liss.checked},
                 {"liss_violations", liss.violations.size()},
                 {"liss_worst_excess", liss.worst_excess}};
    r.violations = liss.violations.size();
    const io::Table table = io::flow_table(tr);
    out.csv("traces/" + r.stem + ".csv", table);
    std::vector<io::Series> series{detail::column_series(table, "t", "omega", "#1f77b4")};
    if (cert && cert->envelope) {
      const IssReport iss = verify_iss_trace(tr, *cert->envelope, u.sup_norm());
      const bool inside = sup_w <= cert->level * (1.0 + 1e-9);
      r.summary["envelope_violations"] = iss.violations.size();
      r.summary["envelope_worst_margin"] = iss.worst_margin;
      r.summary["inside_certified_level"] = inside;
      r.violations += iss.violations.size() + (inside ? 0 : 1);
      io::Table env;
      env.columns = {"t", "omega", "bound"};
      const auto bound = cert->envelope->along(tr.omega.front(), tr.times, u.sup_norm());
      for (std::size_t i = 0; i < tr.size(); ++i) env.rows.push_back({tr.times[i], tr.omega[i], bound[i]});
      out.csv("traces/" + r.stem + "_envelope.csv", env);
      const io::Table back = io::read_csv(out.root / ("traces/" + r.stem + "_envelope.csv"));
      series = {detail::column_series(back, "t", "omega", "#1f77b4"),
                detail::column_series(back, "t", "bound", "#d62728", true)};
    }
    r.summary["violations"] = r.violations;
    // charts are drawn from the emitted CSV
    const io::Table back = io::read_csv(out.root / ("traces/" + r.stem + ".csv"));
    if (series.size() == 1) series = {detail::column_series(back, "t", "omega", "#1f77b4")};
    out.text("charts/" + r.stem + ".svg", io::svg_chart(r.stem, "t", "omega", series));
  });

  json runs = json::array();
  std::size_t total = 0;
  bool all_completed = true;
  for (const auto& r : results) {
    res.manifest.outputs.push_back("traces/" + r.stem + ".csv");
    if (cert && cert->envelope) res.manifest.outputs.push_back("traces/" + r.stem + "_envelope.csv");
    res.manifest.outputs.push_back("charts/" + r.stem + ".svg");
    runs.push_back(r.summary);
    total += r.violations;
    all_completed = all_completed && r.completed;
  }

  // empirical gain over the magnitude grid
  GainOptions go;
  go.realizations = s.gain_realizations;
  go.horizon = s.gain_horizon;
  go.burn_in = std::min(s.burn_in, 0.75 * s.gain_horizon);
  go.flow = fo;
  const GainEstimate gain = estimate_gain(sys, s.magnitudes, x0s, go);
  io::Table gt;
  gt.columns = {"mu", "gamma_raw", "gamma", "domain_exits"};
  for (std::size_t i = 0; i < gain.mus.size(); ++i)
    gt.rows.push_back({gain.mus[i], gain.raw[i], gain.monotone[i], static_cast<double>(gain.domain_exits[i])});
  out.csv("gain.csv", gt);
  const io::Table gback = io::read_csv(out.root / "gain.csv");
  out.text("charts/gain.svg", io::svg_chart("empirical gain", "mu", "gamma", {detail::column_series(gback, "mu", "gamma", "#2ca02c")}));
  res.manifest.outputs.push_back("gain.csv");
  res.manifest.outputs.push_back("charts/gain.svg");

  res.manifest.summaries = {{"problem", p.info},
                            {"size", p.size_name},
                            {"eta", s.eta},
                            {"input_bound", sys.input.bound},
                            {"certificate", cert_info},
                            {"runs", runs},
                            {"gain", {{"mu", gain.mus}, {"gamma", gain.monotone}}},
                            {"violations", total}};
  res.manifest.verdicts["zero_violations"] = total == 0;
  res.manifest.verdicts["all_completed"] = all_completed;
  detail::finish(res, out, c);
  return res;
}

inline RunResult cmd_gains(const ExperimentConfig& cfg, const RunOptions& opt) {
  ExperimentConfig c = cfg;
  if (opt.seed) c.seed = *opt.seed;
  RunResult res;
  res.manifest.command = "gains";
  const detail::OutputDir out{opt.out, &res.manifest};
  const Problem p = build_problem(c);
  const FlowSettings& s = c.flow;
  const PerturbedGradientSystem sys(p.loss, s.eta, p.input, p.omega);
  const auto x0s = initial_points(c, p);
  GainOptions go;
  go.realizations = s.gain_realizations;
  go.horizon = s.gain_horizon;
  go.burn_in = std::min(s.burn_in, 0.75 * s.gain_horizon);
  go.flow.tol = s.tol;
  go.flow.output_dt = s.output_dt;
  // one job per magnitude, merged in grid order
  std::vector<double> grid = s.magnitudes;
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  std::vector<GainEstimate> parts(grid.size(), GainEstimate{{}, {}, {}, {}, MonotoneCurve::identity()});
  parallel_for(grid.size(), opt.jobs, [&](std::size_t i) {
    const double one[] = {grid[i]};
    parts[i] = estimate_gain(sys, one, x0s, go);
  });
  std::vector<double> mus, raw;
  std::vector<std::size_t> exits;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto& g = parts[i];
    const std::size_t k = g.mus.size() - 1;  // the grid value itself (0 is prepended)
    mus.push_back(g.mus[k]);
    raw.push_back(g.raw[k]);
    exits.push_back(g.domain_exits[k]);
  }
  if (mus.empty() || mus.front() != 0.0) {
    mus.insert(mus.begin(), 0.0);
    raw.insert(raw.begin(), 0.0);
    exits.insert(exits.begin(), 0);
  }
  io::Table gt;
  gt.columns = {"mu", "gamma_raw", "gamma", "domain_exits"};
  double running = 0.0;
  bool monotone_ok = true;
  json gam = json::array();
  for (std::size_t i = 0; i < mus.size(); ++i) {
    const double v = mus[i] == 0.0 ? 0.0 : raw[i];
    if (std::isfinite(v)) running = std::max(running, v);
    const double g = std::isfinite(v) ? running : std::numeric_limits<double>::infinity();
    gt.rows.push_back({mus[i], raw[i], g, static_cast<double>(exits[i])});
    gam.push_back(std::isfinite(g) ? json(g) : json("inf"));
  }
  for (std::size_t i = 1; i < gt.rows.size(); ++i)
    if (std::isfinite(gt.rows[i][2]) && gt.rows[i][2] < gt.rows[i - 1][2]) monotone_ok = false;
  out.csv("gain.csv", gt);
  const io::Table back = io::read_csv(out.root / "gain.csv");
  out.text("charts/gain.svg", io::svg_chart("empirical gain", "mu", "gamma", {detail::column_series(back, "mu", "gamma", "#2ca02c")}));
  res.manifest.outputs = {"gain.csv", "charts/gain.svg"};
  res.manifest.summaries = {{"problem", p.info}, {"size", p.size_name}, {"mu", mus}, {"gamma", gam}};
  res.manifest.verdicts["gain_zero_at_zero"] = gt.rows.front()[2] == 0.0;
  res.manifest.verdicts["gain_monotone"] = monotone_ok;
  detail::finish(res, out, c);
  return res;
}

// ---------------------------------------------------------------- descent

inline NoiseModel noise_model(const DescentSettings& s, double mu, Eigen::Index m) {
  NoiseModel nm;
  nm.scale = s.noise == "none" ? NoiseScale::none : (s.noise == "relative" ? NoiseScale::relative : NoiseScale::absolute);
  nm.magnitude = mu;
  nm.decay = s.decay;
  nm.direction = s.direction == "adversarial" ? NoiseDirection::adversarial
                 : s.direction == "fixed"     ? NoiseDirection::fixed
                                              : NoiseDirection::random;
  if (nm.direction == NoiseDirection::fixed) {
    if (static_cast<Eigen::Index>(s.fixed_direction.size()) != m)
      throw ConfigError("field 'descent.fixed_direction': needs one entry per input");
    nm.fixed = Eigen::Map<const Vector>(s.fixed_direction.data(), m);
  }
  return nm;
}

/// Geometric grid of `count` levels from top * ratio^(count-1) up to top.
inline std::vector<double> geometric_levels(double top, std::size_t count, double ratio = 0.6) {
  std::vector<double> out(count);
  double v = top;
  for (std::size_t i = count; i-- > 0;) {
    out[i] = v;
    v *= ratio;
  }
  return out;
}

struct DescentCertificate {
  LipschitzProfile profile;
  MonotoneCurve alpha_tilde;
  DtCertificate cert;
  std::optional<KLCurve> beta;  // discrete KL from alpha, for omega = V - Vmin
};

/// alpha_tilde with |grad V|^2 >= alpha_tilde(V - Vmin) on samples of {V - Vmin <= wmax}.
inline MonotoneCurve gradient_dominance_curve(const DescentSystem& sys, double wmax, std::size_t samples, Rng& rng) {
  const double vmin = sys.loss.min_value();
  const auto value = sys.loss.value;
  const auto gradient = sys.loss.gradient;
  const SizeFunction w(sys.domain(), [value, vmin](const Vector& x) { return std::max(0.0, value(x) - vmin); }, "excess");
  const SizeFunction g2(sys.domain(), [gradient](const Vector& x) { return gradient(x).squaredNorm(); }, "gradient-squared");
  const SublevelSampler probe(sys.domain(), [value, vmin](const Vector& x) { return value(x) - vmin; });
  double top = 0.0;
  for (const Vector& x : probe.draw(wmax, 4 * samples, rng)) top = std::max(top, g2(x));
  std::vector<double> levels;
  for (double r = top; r > 1e-6 * top && levels.size() < 40; r /= 1.4) levels.push_back(r);
  std::reverse(levels.begin(), levels.end());
  CompareOptions co;
  co.samples_per_level = samples;
  co.region = [value, vmin, wmax](const Vector& x) { return value(x) - vmin <= wmax; };
  return inverse_curve(padded(compare_sizes(w, g2, levels, co, rng).alpha, 1.05));
}

inline DescentCertificate descent_certificate(const DescentSystem& sys, double wmax, const DescentSettings& s, Rng& rng) {
  const double vmin = sys.loss.min_value();
  std::vector<double> levels = geometric_levels(wmax, 10);
  for (double& l : levels) l += vmin;
  DescentCertificate dc{lipschitz_profile(sys, levels, s.lipschitz_pairs, rng), MonotoneCurve::identity(), {}, {}};
  dc.alpha_tilde = gradient_dominance_curve(sys, wmax, 200, rng);
  CertificateOptions co;
  co.verification_pairs = s.lemma_samples;
  co.max_excess = wmax;
  dc.cert = build_dt_lyapunov_certificate(sys, dc.profile, dc.alpha_tilde, co, rng);
  dc.beta = kl_from_decrease(class_k_minorant(dc.cert.alpha), DecreaseMode::discrete);
  return dc;
}

inline RunResult cmd_descent(const ExperimentConfig& cfg, const RunOptions& opt) {
  ExperimentConfig c = cfg;
  if (opt.seed) c.seed = *opt.seed;
  RunResult res;
  res.manifest.command = "descent";
  const detail::OutputDir out{opt.out, &res.manifest};
  const Problem p = build_problem(c);
  const DescentSettings& s = c.descent;
  const DescentSystem sys(p.loss, p.input, p.omega);
  const auto x0s = initial_points(c, p);
  const double vmin = p.loss.min_value();

  struct Job {
    std::size_t x_index, mu_index, realization;
  };
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < x0s.size(); ++i)
    for (std::size_t j = 0; j < s.magnitudes.size(); ++j)
      for (std::size_t r = 0; r < (s.magnitudes[j] == 0.0 ? 1 : s.realizations); ++r) jobs.push_back({i, j, r});

  struct JobResult {
    std::string stem;
    json summary;
    DescentTrace trace;
    std::size_t increases = 0;
  };
  std::vector<JobResult> results(jobs.size());
  parallel_for(jobs.size(), opt.jobs, [&](std::size_t k) {
    const Job& jb = jobs[k];
    Rng rng = job_rng(c.seed, 1000 + k);
    const double mu = s.magnitudes[jb.mu_index];
    const NoiseModel nm = noise_model(s, mu, sys.inputs());
    JobResult& r = results[k];
    r.trace = run_descent(sys, x0s[jb.x_index], nm, s.steps, rng);
    r.stem = "descent_x" + std::to_string(jb.x_index) + "_mu" + std::to_string(jb.mu_index) + "_r" +
             std::to_string(jb.realization);
    std::size_t first_stuck = std::numeric_limits<std::size_t>::max();
    for (std::size_t t = 0; t < r.trace.stuck.size(); ++t)
      if (r.trace.stuck[t]) {
        first_stuck = t;
        break;
      }
    for (std::size_t t = 1; t < r.trace.V.size(); ++t)
      if (r.trace.V[t] > r.trace.V[t - 1] + 4.0 * std::numeric_limits<double>::epsilon() * std::abs(r.trace.V[t - 1]))
        ++r.increases;
    r.summary = {{"trace", "traces/" + r.stem + ".csv"},
                 {"x0_index", jb.x_index},
                 {"mu", mu},
                 {"realization", jb.realization},
                 {"termination", "completed"},
                 {"stuck_steps", r.trace.stuck_steps()},
                 {"first_stuck", first_stuck == std::numeric_limits<std::size_t>::max() ? json(nullptr) : json(first_stuck)},
                 {"input_sup", r.trace.input_sup()},
                 {"sup_omega_after_burn_in", r.trace.sup_omega_after(std::min(s.burn_in, s.steps))},
                 {"final_gradnorm", r.trace.gradnorm.back()},
                 {"final_distance", (r.trace.states.back() - sys.domain().equilibrium()).norm()},
                 {"value_increases", r.increases}};
    out.csv("traces/" + r.stem + ".csv", io::descent_table(r.trace));
    const io::Table back = io::read_csv(out.root / ("traces/" + r.stem + ".csv"));
    out.text("charts/" + r.stem + ".svg",
             io::svg_chart(r.stem, "t", "omega", {detail::column_series(back, "t", "omega", "#1f77b4")}));
  });

  // fitted gain: cumulative max over mu of the largest lim-sup
  std::vector<double> mus = s.magnitudes;
  std::sort(mus.begin(), mus.end());
  mus.erase(std::unique(mus.begin(), mus.end()), mus.end());
  std::vector<double> fitted(mus.size(), 0.0);
  for (const auto& r : results) {
    const double mu = r.summary["mu"].get<double>();
    const std::size_t i = static_cast<std::size_t>(std::lower_bound(mus.begin(), mus.end(), mu) - mus.begin());
    fitted[i] = std::max(fitted[i], r.summary["sup_omega_after_burn_in"].get<double>());
  }
  for (std::size_t i = 1; i < fitted.size(); ++i) fitted[i] = std::max(fitted[i], fitted[i - 1]);
  std::size_t limsup_breaches = 0;
  for (const auto& r : results) {
    const double mu = r.summary["mu"].get<double>();
    const std::size_t i = static_cast<std::size_t>(std::lower_bound(mus.begin(), mus.end(), mu) - mus.begin());
    if (r.summary["sup_omega_after_burn_in"].get<double>() > fitted[i]) ++limsup_breaches;
  }

  json runs = json::array();
  std::size_t stuck_runs = 0, stuck_steps = 0, increases = 0;
  for (const auto& r : results) {
    res.manifest.outputs.push_back("traces/" + r.stem + ".csv");
    res.manifest.outputs.push_back("charts/" + r.stem + ".svg");
    runs.push_back(r.summary);
    stuck_steps += r.trace.stuck_steps();
    stuck_runs += r.trace.stuck_steps() > 0 ? 1 : 0;
    increases += r.increases;
  }

  // decrease-lemma audit and the discrete-time certificate, on {V - Vmin <= wmax}
  double wmax = 0.0;
  for (const Vector& x : x0s) wmax = std::max(wmax, p.loss.value(x) - vmin);
  json audit = json::object();
  std::size_t lemma_violations = 0, lemma_checked = 0;
  std::size_t cert_violations = 0, invariance_violations = 0, iss_violations = 0;
  json gamma_rows = json::array();
  if (s.lemma_samples > 0 && wmax > 0.0) {
    Rng rng = job_rng(c.seed, 0xDE5Cull);
    std::vector<double> levels = geometric_levels(wmax, 10);
    for (double& l : levels) l += vmin;
    const LipschitzProfile prof = lipschitz_profile(sys, levels, s.lipschitz_pairs, rng);
    const SublevelSampler sampler(sys.domain(), [&sys](const Vector& x) { return sys.excess(x); });
    for (const Vector& x : sampler.draw(wmax, s.lemma_samples, rng)) {
      const Vector pg = sys.loss.gradient(x);
      if (!(pg.norm() > 0.0)) continue;
      const Vector q = uniform_in_ball(x.size(), 0.5 * pg.norm(), rng);
      ++lemma_checked;
      if (!verify_decrease(sys, x, q, prof.at(p.loss.value(x))).passed()) ++lemma_violations;
    }
    audit["lemma_checked"] = lemma_checked;
    audit["lemma_violations"] = lemma_violations;
    audit["lipschitz"] = {{"levels", prof.levels}, {"constants", prof.constants}};

    if (s.certificate && p.size_name == "excess" && sys.input.bound > 0.0) {
      const DescentCertificate dc = descent_certificate(sys, wmax, s, rng);
      cert_violations = dc.cert.implication_violations;
      audit["certificate"] = {{"checked", dc.cert.checked}, {"implication_violations", cert_violations}, {"chi", dc.cert.chi}};
      std::vector<double> gamma_levels;
      for (double mu : mus) {
        const GammaConstruction gc = dt_gamma_construction(sys, dc.cert.chi, mu, s.lemma_samples, rng);
        invariance_violations += gc.invariance_violations;
        gamma_levels.push_back(gc.gamma);
        gamma_rows.push_back({{"mu", mu}, {"chi_mu", gc.chi_mu}, {"gamma_raw", gc.raw}, {"gamma", gc.gamma},
                              {"invariance_checked", gc.invariance_checked},
                              {"invariance_violations", gc.invariance_violations}});
      }
      // gamma for the ISS check: the larger of the fitted gain and the P_mu level
      std::vector<double> bp{0.0}, vals{0.0};
      double running = 0.0;
      for (std::size_t i = 0; i < mus.size(); ++i) {
        running = std::max({running, fitted[i], gamma_levels[i]});
        if (mus[i] > 0.0) {
          bp.push_back(mus[i]);
          vals.push_back(running);
        }
      }
      if (bp.size() == 1) {
        bp.push_back(1.0);
        vals.push_back(0.0);
      }
      const MonotoneCurve gamma_curve(bp, vals, 0.0, false);
      for (auto& r : results) {
        if (r.trace.V.front() - vmin > wmax) continue;
        if (r.trace.input_sup() > bp.back()) continue;
        const DtIssReport rep = dt_iss_check(r.trace, *dc.beta, gamma_curve);
        iss_violations += rep.violations.size();
      }
      audit["dt_iss_violations"] = iss_violations;
    }
  }
  audit["gamma_construction"] = gamma_rows;

  io::Table gt;
  gt.columns = {"mu", "gamma"};
  for (std::size_t i = 0; i < mus.size(); ++i) gt.rows.push_back({mus[i], fitted[i]});
  out.csv("gain.csv", gt);
  const io::Table gback = io::read_csv(out.root / "gain.csv");
  out.text("charts/gain.svg", io::svg_chart("fitted gain", "mu", "gamma", {detail::column_series(gback, "mu", "gamma", "#2ca02c")}));
  res.manifest.outputs.push_back("gain.csv");
  res.manifest.outputs.push_back("charts/gain.svg");

  const std::size_t violations = increases + lemma_violations + cert_violations + invariance_violations + iss_violations + limsup_breaches;
  res.manifest.summaries = {{"problem", p.info},
                            {"size", p.size_name},
                            {"input_bound", sys.input.bound},
                            {"runs", runs},
                            {"stuck", {{"runs", stuck_runs}, {"steps", stuck_steps}}},
                            {"audit", audit},
                            {"gain", {{"mu", mus}, {"gamma", fitted}}},
                            {"violations", violations}};
  res.manifest.verdicts["monotone_values"] = increases == 0;
  res.manifest.verdicts["decrease_lemma"] = lemma_violations == 0;
  res.manifest.verdicts["certificate"] = cert_violations == 0;
  res.manifest.verdicts["forward_invariance"] = invariance_violations == 0;
  res.manifest.verdicts["dt_iss"] = iss_violations == 0 && limsup_breaches == 0;
  detail::finish(res, out, c);
  return res;
}

// ---------------------------------------------------------------- oracle

/// Central differences with per-entry step h (1 + |x_i|).
inline Vector central_difference(const std::function<double(const Vector&)>& f, const Vector& x, double h) {
  Vector g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double step = h * (1.0 + std::abs(x(i)));
    Vector a = x, b = x;
    a(i) += step;
    b(i) -= step;
    g(i) = (f(a) - f(b)) / (2.0 * step);
  }
  return g;
}

/// Smallest grid minimizer of V(x - mu d) over the grid prefix on which V
/// stays at or below V(x) (and in the domain).
inline double grid_line_search(const DescentSystem& sys, const Vector& x, const Vector& d, double step,
                               std::size_t max_points = 2'000'000) {
  const double v0 = sys.loss.value(x);
  double best = v0, arg = 0.0;
  for (std::size_t i = 1; i < max_points; ++i) {
    const double mu = step * static_cast<double>(i);
    const Vector y = x - mu * d;
    if (!sys.domain().contains(y)) break;
    const double v = sys.loss.value(y);
    if (v > v0) break;
    if (v < best) {
      best = v;
      arg = mu;
    }
  }
  return arg;
}

inline RunResult cmd_oracle(const ExperimentConfig& cfg, const RunOptions& opt) {
  ExperimentConfig c = cfg;
  if (opt.seed) c.seed = *opt.seed;
  RunResult res;
  res.manifest.command = "oracle";
  const detail::OutputDir out{opt.out, &res.manifest};
  const Problem p = build_problem(c);
  const OracleSettings& s = c.oracle;
  const double vmin = p.loss.min_value();
  Rng rng = job_rng(c.seed, 0x0AC1Eull);
  json report = json::object();
  std::string worst_offender;

  // gradient vs central differences
  std::vector<Vector> points;
  if (p.lqr) {
    for (const Matrix& k : sample_stabilizing_gains(*p.lqr, s.gradient_samples, rng)) points.push_back(flatten_gain(k));
  } else {
    const SublevelSampler sampler(p.loss.domain, [&](const Vector& x) { return p.loss.value(x) - vmin; });
    points = sampler.draw(c.initial_level, s.gradient_samples, rng);
  }
  io::Table gtab;
  gtab.columns = {"index", "gradnorm", "rel_error"};
  double worst_grad = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const Vector g = p.loss.gradient(points[i]);
    const Vector fd = central_difference(p.loss.value, points[i], s.fd_step);
    const double rel = (g - fd).norm() / std::max(g.norm(), 1e-8);
    gtab.rows.push_back({static_cast<double>(i), g.norm(), rel});
    if (rel > worst_grad) {
      worst_grad = rel;
      if (rel > s.fd_tol) worst_offender = "gradient sample " + std::to_string(i) + " rel. error " + io::num(rel);
    }
  }
  out.csv("oracle_gradient.csv", gtab);
  res.manifest.outputs.push_back("oracle_gradient.csv");
  report["gradient"] = {{"samples", points.size()}, {"max_rel_error", worst_grad}, {"tolerance", s.fd_tol}};
  res.manifest.verdicts["gradient"] = worst_grad <= s.fd_tol;

  // Lyapunov / Riccati residuals
  {
    Matrix f(2, 2);
    f << 0, 1, -2, -3;
    Matrix expect(2, 2);
    expect << 1, -0.5, -0.5, 0.5;
    const Matrix pm = solve_lyapunov(f, Matrix::Identity(2, 2));
    const double err = (pm - expect).cwiseAbs().maxCoeff();
    const double resid = (f * pm + pm * f.transpose() + Matrix::Identity(2, 2)).cwiseAbs().maxCoeff();
    report["lyapunov_example"] = {{"max_abs_error", err}, {"residual", resid}};
    res.manifest.verdicts["lyapunov_example"] = err <= 1e-10;
    if (err > 1e-10) worst_offender = "Lyapunov worked example error " + io::num(err);
  }
  if (p.lqr) {
    const auto& rs = p.lqr->riccati();
    const double q_norm = p.lqr->weights().Q.norm();
    const double gstar = p.lqr->grad(p.lqr->optimal_gain()).norm();
    double worst_lyap = 0.0;
    for (const Vector& x : points) {
      const Matrix k = p.lqr->unflatten(x);
      const Matrix fk = p.lqr->system().A - p.lqr->system().B * k;
      const Matrix pk = solve_lyapunov(fk, p.lqr->weights().Sigma);
      const double r = (fk * pk + pk * fk.transpose() + p.lqr->weights().Sigma).norm() /
                       (1.0 + p.lqr->weights().Sigma.norm() + 2.0 * fk.norm() * pk.norm());
      worst_lyap = std::max(worst_lyap, r);
    }
    report["riccati"] = {{"residual", rs.residual}, {"gradient_at_optimum", gstar}, {"lyapunov_rel_residual", worst_lyap}};
    res.manifest.verdicts["riccati"] = rs.residual <= 1e-9 * (1.0 + q_norm) && gstar <= 1e-8;
    res.manifest.verdicts["lyapunov_residuals"] = worst_lyap <= 1e-12;
    if (!res.manifest.verdicts["riccati"]) worst_offender = "Riccati residual " + io::num(rs.residual);
  }

  // line search vs dense grid
  {
    const DescentSystem sys(p.loss, p.input, p.omega);
    const SublevelSampler sampler(p.loss.domain, [&](const Vector& x) { return p.loss.value(x) - vmin; });
    const double level = p.lqr ? std::max(1.0, 0.5 * std::abs(vmin)) : c.initial_level;
    const auto xs = sampler.draw(level, s.line_search_cases, rng);
    io::Table lt;
    lt.columns = {"case", "lambda_bar", "lambda_grid", "grid_step", "abs_diff"};
    double worst_ratio = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const Vector pg = p.loss.gradient(xs[i]);
      if (!(pg.norm() > 0.0)) continue;
      const Vector d = pg + uniform_in_ball(pg.size(), 0.5 * pg.norm(), rng);
      const LineSearchResult ls = line_search(sys, xs[i], d);
      const double h = s.grid_step * std::max(ls.lambda_max, 1e-300);
      const double lg = grid_line_search(sys, xs[i], d, h);
      const double diff = std::abs(ls.lambda_bar - lg);
      lt.rows.push_back({static_cast<double>(i), ls.lambda_bar, lg, h, diff});
      const double ratio = diff / h;
      if (ratio > worst_ratio) {
        worst_ratio = ratio;
        if (ratio > 2.0) worst_offender = "line search case " + std::to_string(i) + " off by " + io::num(ratio) + " grid steps";
      }
    }
    out.csv("oracle_line_search.csv", lt);
    res.manifest.outputs.push_back("oracle_line_search.csv");
    report["line_search"] = {{"cases", xs.size()}, {"max_grid_steps_off", worst_ratio}};
    res.manifest.verdicts["line_search"] = worst_ratio <= 2.0;
  }
  if (!worst_offender.empty()) report["worst_offender"] = worst_offender;
  res.manifest.summaries = {{"problem", p.info}, {"oracle", report}};
  detail::finish(res, out, c);
  if (res.exit_code != 0 && opt.log) *opt.log << "oracle breach: " << worst_offender << "\n";
  return res;
}

// ---------------------------------------------------------------- verify

inline RunResult run_command(const std::string& command, const ExperimentConfig& c, const RunOptions& opt);

/// Re-runs the command recorded in <out>/manifest.json and compares every CSV
/// byte for byte with the recorded outputs.
inline RunResult cmd_verify(const ExperimentConfig& cfg, const RunOptions& opt) {
  const fs::path manifest_path = opt.out / "manifest.json";
  json recorded;
  try {
    recorded = json::parse(io::read_file(manifest_path));
  } catch (const json::exception&) {
    throw ConfigError("verify: unreadable manifest " + manifest_path.string());
  }
  const std::string command = recorded.value("command", "");
  if (command.empty() || command == "verify") throw ConfigError("verify: manifest names no command");
  ExperimentConfig c = cfg;
  c.seed = opt.seed ? *opt.seed : recorded.value("seed", c.seed);
  RunOptions rerun = opt;
  rerun.out = opt.out / "verify";
  rerun.seed = c.seed;
  fs::remove_all(rerun.out);
  const RunResult again = run_command(command, c, rerun);

  RunResult res;
  res.manifest.command = "verify";
  std::vector<std::string> mismatched;
  std::size_t compared = 0;
  for (const auto& rel : recorded.value("outputs", std::vector<std::string>{})) {
    if (fs::path(rel).extension() != ".csv") continue;
    ++compared;
    const fs::path a = opt.out / rel, b = rerun.out / rel;
    if (!fs::exists(a) || !fs::exists(b) || io::read_file(a) != io::read_file(b)) mismatched.push_back(rel);
  }
  const bool hash_ok = recorded.value("config_hash", "") == config_hash(c);
  res.manifest.summaries = {{"command", command}, {"compared", compared}, {"mismatched", mismatched},
                            {"config_hash_matches", hash_ok}};
  res.manifest.verdicts["byte_identical"] = mismatched.empty();
  res.manifest.verdicts["config_hash"] = hash_ok;
  res.manifest.config_hash = config_hash(c);
  res.manifest.seed = c.seed;
  io::write_text(rerun.out / "verify.json", res.manifest.to_json().dump(2) + "\n");
  res.exit_code = res.manifest.all_passed() ? 0 : 1;
  (void)again;
  return res;
}

inline RunResult run_command(const std::string& command, const ExperimentConfig& c, const RunOptions& opt) {
  fs::create_directories(opt.out);
  if (command == "flow") return cmd_flow(c, opt);
  if (command == "descent") return cmd_descent(c, opt);
  if (command == "oracle") return cmd_oracle(c, opt);
  if (command == "gains") return cmd_gains(c, opt);
  if (command == "verify") return cmd_verify(c, opt);
  throw ConfigError("unknown command '" + command + "'");
}

/// Exit status for an exception escaping a command: 2 for configuration
/// problems, 3 for numerical failures.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) != nullptr) return 2;
  if (dynamic_cast<const ContractError*>(&e) != nullptr) return 2;
  return 3;
}

}  // namespace isslab::harness

#endif  // ISSLAB_HARNESS_HPP
