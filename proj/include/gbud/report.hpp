#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "gbud/error.hpp"
#include "gbud/evaluation.hpp"

namespace gbud {

inline std::string format_fixed(double v, int decimals = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  std::string s(buf);
  if (s == "-0.000000") s = "0.000000";  // keep reruns textually stable around zero
  return s;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(parent, ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::kIo, "cannot open " + path + " for writing");
  out << text;
  if (!out) throw FormatError(FormatErrorKind::kIo, "write failed: " + path);
}

inline std::string results_csv(const EvalResult& r) {
  std::string out = "method,metric,ause,aurg\n";
  for (const auto& row : r.rows) {
    out += row.method + "," + to_string(row.metric) + "," + format_fixed(row.ause) + "," + format_fixed(row.aurg) + "\n";
  }
  return out;
}

inline std::string curves_csv(const EvalResult& r) {
  std::string out = "method,metric,fraction,value,oracle_value\n";
  for (const auto& row : r.rows) {
    for (std::size_t j = 0; j < row.curve.size(); ++j) {
      out += row.method + "," + to_string(row.metric) + "," +
             format_fixed(static_cast<double>(j) / static_cast<double>(r.bins)) + "," + format_fixed(row.curve[j]) +
             "," + format_fixed(row.oracle[j]) + "\n";
    }
  }
  return out;
}

struct CurvePoint {
  double fraction = 0.0;
  double value = 0.0;
  double oracle = 0.0;
};

/// metric -> method -> points, methods kept in first-appearance order.
struct CurveTable {
  std::vector<std::string> metrics;
  std::map<std::string, std::vector<std::pair<std::string, std::vector<CurvePoint>>>> series;
};

inline CurveTable parse_curves_csv(const std::string& text, const std::string& name = "curves csv") {
  CurveTable t;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& why) -> FormatError {
    return FormatError(FormatErrorKind::kBadHeader, name + " line " + std::to_string(line_no) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1) {
      if (line != "method,metric,fraction,value,oracle_value") throw fail("unexpected header '" + line + "'");
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cols.push_back(cell);
    if (cols.size() != 5) throw fail("expected 5 columns, got " + std::to_string(cols.size()));
    CurvePoint p;
    double* dst[3] = {&p.fraction, &p.value, &p.oracle};
    for (int k = 0; k < 3; ++k) {
      const std::string& c = cols[static_cast<std::size_t>(k + 2)];
      std::size_t used = 0;
      try {
        *dst[k] = std::stod(c, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != c.size() || !std::isfinite(*dst[k])) throw fail("bad number '" + c + "'");
    }
    auto& by_method = t.series[cols[1]];
    if (by_method.empty()) t.metrics.push_back(cols[1]);
    auto it = std::find_if(by_method.begin(), by_method.end(), [&](const auto& s) { return s.first == cols[0]; });
    if (it == by_method.end()) {
      by_method.push_back({cols[0], {}});
      it = std::prev(by_method.end());
    }
    it->second.push_back(p);
  }
  if (line_no == 0) throw FormatError(FormatErrorKind::kTruncated, name + " line 1: empty file");
  if (t.metrics.empty()) throw FormatError(FormatErrorKind::kTruncated, name + ": no data rows");
  return t;
}

namespace detail {

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace detail

/// Sparsification-error plot (curve minus oracle) for one metric.
inline std::string sparsification_svg(const std::string& metric,
                                      const std::vector<std::pair<std::string, std::vector<CurvePoint>>>& series) {
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};
  constexpr double W = 640, H = 420, L = 70, R = 170, T = 40, B = 60;
  double ymin = 0.0, ymax = 0.0;
  for (const auto& [_, pts] : series)
    for (const auto& p : pts) {
      ymin = std::min(ymin, p.value - p.oracle);
      ymax = std::max(ymax, p.value - p.oracle);
    }
  if (ymax - ymin < 1e-12) ymax = ymin + 1.0;
  const double pw = W - L - R, ph = H - T - B;
  auto px = [&](double f) { return L + f * pw; };
  auto py = [&](double v) { return T + (ymax - v) / (ymax - ymin) * ph; };

  std::ostringstream o;
  o.setf(std::ios::fixed);
  o.precision(2);
  o << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << W << "\" height=\"" << H << "\">\n"
    << "<rect x=\"0\" y=\"0\" width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n"
    << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  if (ymin < 0.0) {
    o << "<polyline points=\"" << px(0) << "," << py(0) << " " << px(1) << "," << py(0)
      << "\" fill=\"none\" stroke=\"#999\" stroke-dasharray=\"4,3\"/>\n";
  }
  for (int k = 0; k <= 4; ++k) {
    const double f = k / 4.0, v = ymin + (ymax - ymin) * k / 4.0;
    o << "<text x=\"" << px(f) << "\" y=\"" << (H - B + 18) << "\" font-size=\"11\" text-anchor=\"middle\">" << f
      << "</text>\n";
    o << "<text x=\"" << (L - 6) << "\" y=\"" << py(v) + 4 << "\" font-size=\"11\" text-anchor=\"end\">";
    o.precision(4);
    o << v;
    o.precision(2);
    o << "</text>\n";
  }
  o << "<text x=\"" << (L + pw / 2) << "\" y=\"" << (H - 15)
    << "\" font-size=\"13\" text-anchor=\"middle\">fraction of removed pixels</text>\n"
    << "<text x=\"18\" y=\"" << (T + ph / 2) << "\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
    << (T + ph / 2) << ")\">sparsification error (" << detail::xml_escape(metric) << ")</text>\n"
    << "<text x=\"" << (L + pw / 2) << "\" y=\"24\" font-size=\"15\" text-anchor=\"middle\">"
    << detail::xml_escape(metric) << "</text>\n";
  std::size_t k = 0;
  for (const auto& [method, pts] : series) {
    const char* color = kColors[k % std::size(kColors)];
    o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < pts.size(); ++i) {
      o << (i ? " " : "") << px(pts[i].fraction) << "," << py(pts[i].value - pts[i].oracle);
    }
    o << "\"/>\n";
    const double ly = T + 14 + 18.0 * static_cast<double>(k);
    o << "<rect x=\"" << (W - R + 15) << "\" y=\"" << (ly - 9) << "\" width=\"12\" height=\"12\" fill=\"" << color
      << "\"/>\n"
      << "<text x=\"" << (W - R + 33) << "\" y=\"" << (ly + 1) << "\" font-size=\"12\">" << detail::xml_escape(method)
      << "</text>\n";
    ++k;
  }
  o << "</svg>\n";
  return o.str();
}

/// `out_svg` with `_<metric>` inserted before the extension.
inline std::string metric_svg_path(const std::string& out_svg, const std::string& metric) {
  std::filesystem::path p(out_svg);
  const std::string ext = p.has_extension() ? p.extension().string() : ".svg";
  p.replace_filename(p.stem().string() + "_" + metric + ext);
  return p.string();
}

/// Writes one SVG per metric; returns the paths written.
inline std::vector<std::string> plot_curves(const std::string& curves_csv_text, const std::string& out_svg,
                                            const std::string& source_name = "curves csv") {
  const CurveTable t = parse_curves_csv(curves_csv_text, source_name);
  std::vector<std::string> written;
  for (const auto& metric : t.metrics) {
    const auto path = metric_svg_path(out_svg, metric);
    write_text_file(path, sparsification_svg(metric, t.series.at(metric)));
    written.push_back(path);
  }
  return written;
}

}  // namespace gbud
