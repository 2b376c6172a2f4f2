#ifndef ALPHACAL_HARNESS_REPORT_HPP
#define ALPHACAL_HARNESS_REPORT_HPP

// Reliability-diagram CSVs and SVG line plots from sweep curves. Pure
// post-processing: nothing here evaluates a model.

#include <cctype>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "alphacal/error.hpp"
#include "alphacal/harness/csv.hpp"
#include "alphacal/metrics.hpp"

namespace alphacal::harness {

struct LabeledCurve {
  double alpha = 0.0;
  CoverageCurve curve;
};

/// Curves grouped by method, each list in file order.
using CurveSet = std::map<std::string, std::vector<LabeledCurve>>;

inline CurveSet curves_from_table(const CsvTable& t) {
  const std::size_t cn = t.column("nominal"), ce = t.column("empirical"), cm = t.column("method"),
                    ca = t.column("alpha");
  CurveSet out;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& f = t.rows[i];
    const std::size_t line = i + 2;
    const double nominal = parse_double(f[cn], line);
    const double empirical = parse_double(f[ce], line);
    const double alpha = parse_double(f[ca], line);
    if (!(nominal > 0.0 && nominal < 1.0)) throw ParseError(line, "nominal outside (0, 1)");
    if (!(empirical >= 0.0 && empirical <= 1.0)) throw ParseError(line, "empirical outside [0, 1]");
    auto& list = out[f[cm]];
    if (list.empty() || list.back().alpha != alpha || list.back().curve.nominal.back() >= nominal)
      list.push_back(LabeledCurve{alpha, {}});
    list.back().curve.nominal.push_back(nominal);
    list.back().curve.empirical.push_back(empirical);
  }
  return out;
}

namespace detail {

inline std::string fixed(double v, int digits = 2) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace detail

struct SvgLayout {
  double size = 360.0;
  double margin = 48.0;
  double x(double v) const { return margin + v * size; }
  double y(double v) const { return margin + (1.0 - v) * size; }
};

/// A square reliability diagram: dashed diagonal, one polyline per curve
/// (anchored at (0,0) and (1,1)), and a legend keyed by α.
inline std::string reliability_svg(const std::string& title, const std::vector<LabeledCurve>& curves) {
  static const char* kColors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
                                  "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939"};
  const SvgLayout g;
  const double w = g.size + 2 * g.margin + 110.0;
  const double h = g.size + 2 * g.margin;
  using detail::fixed;
  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fixed(w, 0) + "\" height=\"" + fixed(h, 0) +
       "\" viewBox=\"0 0 " + fixed(w, 0) + " " + fixed(h, 0) + "\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + fixed(g.x(0.5)) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" + title +
       "</text>\n";
  s += "<rect x=\"" + fixed(g.x(0)) + "\" y=\"" + fixed(g.y(1)) + "\" width=\"" + fixed(g.size) +
       "\" height=\"" + fixed(g.size) + "\" fill=\"none\" stroke=\"black\"/>\n";
  for (double t : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    s += "<text x=\"" + fixed(g.x(t)) + "\" y=\"" + fixed(g.y(0) + 16) +
         "\" text-anchor=\"middle\" font-size=\"10\">" + fixed(t) + "</text>\n";
    s += "<text x=\"" + fixed(g.x(0) - 6) + "\" y=\"" + fixed(g.y(t) + 4) +
         "\" text-anchor=\"end\" font-size=\"10\">" + fixed(t) + "</text>\n";
  }
  s += "<text x=\"" + fixed(g.x(0.5)) + "\" y=\"" + fixed(h - 8) +
       "\" text-anchor=\"middle\" font-size=\"12\">nominal coverage</text>\n";
  s += "<text x=\"14\" y=\"" + fixed(g.y(0.5)) + "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 " +
       fixed(g.y(0.5)) + ")\">empirical coverage</text>\n";
  s += "<line class=\"diagonal\" x1=\"" + fixed(g.x(0)) + "\" y1=\"" + fixed(g.y(0)) + "\" x2=\"" + fixed(g.x(1)) +
       "\" y2=\"" + fixed(g.y(1)) + "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const auto& c = curves[i].curve;
    const char* color = kColors[i % std::size(kColors)];
    std::string pts = fixed(g.x(0)) + "," + fixed(g.y(0));
    for (std::size_t k = 0; k < c.size(); ++k) pts += " " + fixed(g.x(c.nominal[k])) + "," + fixed(g.y(c.empirical[k]));
    pts += " " + fixed(g.x(1)) + "," + fixed(g.y(1));
    s += "<polyline class=\"curve\" fill=\"none\" stroke=\"" + std::string(color) +
         "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
    const double ly = g.y(1) + 14.0 * static_cast<double>(i) + 6.0;
    s += "<line x1=\"" + fixed(g.x(1) + 12) + "\" y1=\"" + fixed(ly) + "\" x2=\"" + fixed(g.x(1) + 30) +
         "\" y2=\"" + fixed(ly) + "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
    s += "<text x=\"" + fixed(g.x(1) + 34) + "\" y=\"" + fixed(ly + 4) + "\" font-size=\"10\">alpha=" +
         format_double(curves[i].alpha) + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

/// File-name-safe form of a method label.
inline std::string file_stem(const std::string& method) {
  std::string out;
  for (char ch : method) out.push_back(std::isalnum(static_cast<unsigned char>(ch)) ? ch : '_');
  return out;
}

/// Writes reliability_<method>.csv and reliability_<method>.svg into `dir`
/// for every method in `curves`. Returns the files written, in order.
inline std::vector<std::string> write_report(const CurveSet& curves, const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir + "': " + ec.message());
  std::vector<std::string> written;
  for (const auto& [method, list] : curves) {
    CsvTable t{{"nominal", "empirical", "method", "alpha"}, {}};
    for (const auto& lc : list)
      for (std::size_t i = 0; i < lc.curve.size(); ++i)
        t.rows.push_back({format_double(lc.curve.nominal[i]), format_double(lc.curve.empirical[i]), method,
                          format_double(lc.alpha)});
    const std::string base = (std::filesystem::path(dir) / ("reliability_" + file_stem(method))).string();
    write_csv(base + ".csv", t);
    write_text(base + ".svg", reliability_svg(method, list));
    written.push_back(base + ".csv");
    written.push_back(base + ".svg");
  }
  return written;
}

}  // namespace alphacal::harness

#endif  // ALPHACAL_HARNESS_REPORT_HPP
