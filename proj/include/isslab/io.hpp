#ifndef ISSLAB_IO_HPP
#define ISSLAB_IO_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "isslab/descent.hpp"
#include "isslab/errors.hpp"
#include "isslab/flow.hpp"

namespace isslab::io {

/// Shortest round-trip-safe rendering used for every number we emit.
inline std::string num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  std::size_t column(std::string_view name) const {
    const auto it = std::find(columns.begin(), columns.end(), name);
    if (it == columns.end()) throw ConfigError("csv: no column named '" + std::string(name) + "'");
    return static_cast<std::size_t>(it - columns.begin());
  }
  std::vector<double> values(std::string_view name) const {
    const std::size_t c = column(name);
    std::vector<double> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back(r[c]);
    return out;
  }
};

inline void write_csv(const std::filesystem::path& path, const Table& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + path.string());
  for (std::size_t i = 0; i < t.columns.size(); ++i) f << (i ? "," : "") << t.columns[i];
  f << '\n';
  for (const auto& r : t.rows) {
    for (std::size_t i = 0; i < r.size(); ++i) f << (i ? "," : "") << num(r[i]);
    f << '\n';
  }
}

inline Table read_csv(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read " + path.string());
  Table t;
  std::string line;
  if (!std::getline(f, line)) return t;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) t.columns.push_back(cell);
  }
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::strtod(cell.c_str(), nullptr));
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline Table flow_table(const FlowTrace& tr) {
  Table t;
  const std::size_t n = tr.states.empty() ? 0 : static_cast<std::size_t>(tr.states.front().size());
  const std::size_t m = tr.inputs.empty() ? 0 : static_cast<std::size_t>(tr.inputs.front().size());
  t.columns.push_back("t");
  for (std::size_t i = 1; i <= n; ++i) t.columns.push_back("x_" + std::to_string(i));
  for (const char* c : {"V", "omega", "gradnorm"}) t.columns.emplace_back(c);
  for (std::size_t i = 1; i <= m; ++i) t.columns.push_back("u_" + std::to_string(i));
  for (std::size_t k = 0; k < tr.size(); ++k) {
    std::vector<double> r{tr.times[k]};
    for (std::size_t i = 0; i < n; ++i) r.push_back(tr.states[k](static_cast<Eigen::Index>(i)));
    r.push_back(tr.V[k]);
    r.push_back(tr.omega[k]);
    r.push_back(tr.gradnorm[k]);
    for (std::size_t i = 0; i < m; ++i) r.push_back(tr.inputs[k](static_cast<Eigen::Index>(i)));
    t.rows.push_back(std::move(r));
  }
  return t;
}

/// Rows t = 0..N; the last row carries no step, so lambda_bar, stuck and u are 0.
inline Table descent_table(const DescentTrace& tr) {
  Table t;
  const std::size_t n = tr.states.empty() ? 0 : static_cast<std::size_t>(tr.states.front().size());
  const std::size_t m = tr.inputs.empty() ? 0 : static_cast<std::size_t>(tr.inputs.front().size());
  t.columns.push_back("t");
  for (std::size_t i = 1; i <= n; ++i) t.columns.push_back("x_" + std::to_string(i));
  for (const char* c : {"V", "omega", "gradnorm", "lambda_bar", "stuck"}) t.columns.emplace_back(c);
  for (std::size_t i = 1; i <= m; ++i) t.columns.push_back("u_" + std::to_string(i));
  for (std::size_t k = 0; k < tr.size(); ++k) {
    const bool step = k < tr.lambda_bar.size();
    std::vector<double> r{static_cast<double>(k)};
    for (std::size_t i = 0; i < n; ++i) r.push_back(tr.states[k](static_cast<Eigen::Index>(i)));
    r.push_back(tr.V[k]);
    r.push_back(tr.omega[k]);
    r.push_back(tr.gradnorm[k]);
    r.push_back(step ? tr.lambda_bar[k] : 0.0);
    r.push_back(step && tr.stuck[k] ? 1.0 : 0.0);
    for (std::size_t i = 0; i < m; ++i) r.push_back(step ? tr.inputs[k](static_cast<Eigen::Index>(i)) : 0.0);
    t.rows.push_back(std::move(r));
  }
  return t;
}

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  std::string color = "#1f77b4";
  bool dashed = false;
};

/// Minimal SVG line chart: axes, min/max tick labels, one polyline per series.
inline std::string svg_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                             const std::vector<Series>& series) {
  constexpr double W = 640, H = 400, L = 70, R = 20, T = 40, B = 50;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (!(x1 >= x0)) x0 = 0, x1 = 1;
  if (!(y1 >= y0)) y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return std::string(buf);
  };
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n";
  o << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
    << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  o << "<text x=\"" << L << "\" y=\"" << H - B + 16 << "\" font-size=\"11\">" << fmt(x0) << "</text>\n";
  o << "<text x=\"" << W - R << "\" y=\"" << H - B + 16 << "\" font-size=\"11\" text-anchor=\"end\">" << fmt(x1)
    << "</text>\n";
  o << "<text x=\"" << L - 4 << "\" y=\"" << H - B << "\" font-size=\"11\" text-anchor=\"end\">" << fmt(y0)
    << "</text>\n";
  o << "<text x=\"" << L - 4 << "\" y=\"" << T + 4 << "\" font-size=\"11\" text-anchor=\"end\">" << fmt(y1)
    << "</text>\n";
  o << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"13\">"
    << xlabel << "</text>\n";
  o << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" font-size=\"13\" transform=\"rotate(-90 16 "
    << (T + H - B) / 2 << ")\" text-anchor=\"middle\">" << ylabel << "</text>\n";
  double legend_y = T + 10;
  for (const auto& s : series) {
    o << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\"";
    if (s.dashed) o << " stroke-dasharray=\"6 4\"";
    o << " points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      if (std::isfinite(s.x[i]) && std::isfinite(s.y[i])) o << fmt(px(s.x[i])) << ',' << fmt(py(s.y[i])) << ' ';
    o << "\"/>\n";
    o << "<text x=\"" << W - R - 4 << "\" y=\"" << legend_y << "\" font-size=\"11\" text-anchor=\"end\" fill=\""
      << s.color << "\">" << s.label << "</text>\n";
    legend_y += 14;
  }
  o << "</svg>\n";
  return o.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + path.string());
  f << text;
}

}  // namespace isslab::io

#endif  // ISSLAB_IO_HPP
