// Minimal self-contained SVG line charts for metric curves. No external
// assets, deterministic output for identical inputs.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace subcurve {

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
  std::string color = "#1f6feb";
};

namespace detail {

inline std::string svg_num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

inline std::vector<double> nice_ticks(double lo, double hi, int target = 5) {
  if (!(hi > lo)) return {lo};
  const double raw = (hi - lo) / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    if (mag * m >= raw) {
      step = mag * m;
      break;
    }
  }
  std::vector<double> ticks;
  for (double t = std::ceil(lo / step) * step; t <= hi + 1e-12 * step; t += step)
    ticks.push_back(t);
  return ticks;
}

}  // namespace detail

/// Writes a line chart. With log_y, y values are plotted as log10 and
/// non-positive points are skipped.
inline void write_line_chart(const std::string& path, const std::string& title,
                             const std::string& x_label, const std::string& y_label,
                             const std::vector<Series>& series, bool log_y = false) {
  const double width = 820, height = 500;
  const double ml = 70, mr = 160, mt = 44, mb = 56;
  const double pw = width - ml - mr, ph = height - mt - mb;

  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool any = false;
  for (const auto& s : series) {
    for (auto [x, y] : s.points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      if (log_y && y <= 0.0) continue;
      const double yy = log_y ? std::log10(y) : y;
      if (!any) {
        xmin = xmax = x;
        ymin = ymax = yy;
        any = true;
      } else {
        xmin = std::min(xmin, x);
        xmax = std::max(xmax, x);
        ymin = std::min(ymin, yy);
        ymax = std::max(ymax, yy);
      }
    }
  }
  if (!any) {
    xmin = ymin = 0;
    xmax = ymax = 1;
  }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;

  const auto sx = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * pw; };
  const auto sy = [&](double y) { return mt + ph - (y - ymin) / (ymax - ymin) * ph; };

  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_line_chart: cannot open " + path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\" viewBox=\"0 0 " << width << " " << height
      << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n"
      << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" "
         "font-family=\"monospace\" font-size=\"15\">"
      << title << "</text>\n";

  for (double t : detail::nice_ticks(xmin, xmax)) {
    const double px = sx(t);
    out << "<line x1=\"" << detail::svg_num(px) << "\" y1=\"" << mt << "\" x2=\""
        << detail::svg_num(px) << "\" y2=\"" << mt + ph
        << "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n"
        << "<text x=\"" << detail::svg_num(px) << "\" y=\"" << mt + ph + 18
        << "\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"11\">"
        << detail::svg_num(t) << "</text>\n";
  }
  for (double t : detail::nice_ticks(ymin, ymax)) {
    const double py = sy(t);
    const double label = log_y ? std::pow(10.0, t) : t;
    out << "<line x1=\"" << ml << "\" y1=\"" << detail::svg_num(py) << "\" x2=\""
        << ml + pw << "\" y2=\"" << detail::svg_num(py)
        << "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n"
        << "<text x=\"" << ml - 6 << "\" y=\"" << detail::svg_num(py + 4)
        << "\" text-anchor=\"end\" font-family=\"monospace\" font-size=\"11\">"
        << detail::svg_num(label) << "</text>\n";
  }
  out << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << pw
      << "\" height=\"" << ph << "\" fill=\"none\" stroke=\"#333333\"/>\n"
      << "<text x=\"" << ml + pw / 2 << "\" y=\"" << height - 14
      << "\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"13\">"
      << x_label << "</text>\n"
      << "<text x=\"20\" y=\"" << mt + ph / 2
      << "\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"13\" "
         "transform=\"rotate(-90 20 "
      << mt + ph / 2 << ")\">" << y_label << (log_y ? " (log)" : "") << "</text>\n";

  double legend_y = mt + 12;
  for (const auto& s : series) {
    out << "<polyline fill=\"none\" stroke=\"" << s.color
        << "\" stroke-width=\"1.5\" points=\"";
    bool first = true;
    for (auto [x, y] : s.points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      if (log_y && y <= 0.0) continue;
      const double yy = log_y ? std::log10(y) : y;
      if (!first) out << " ";
      out << detail::svg_num(sx(x)) << "," << detail::svg_num(sy(yy));
      first = false;
    }
    out << "\"/>\n"
        << "<line x1=\"" << ml + pw + 10 << "\" y1=\"" << legend_y << "\" x2=\""
        << ml + pw + 30 << "\" y2=\"" << legend_y << "\" stroke=\"" << s.color
        << "\" stroke-width=\"2\"/>\n"
        << "<text x=\"" << ml + pw + 36 << "\" y=\"" << legend_y + 4
        << "\" font-family=\"monospace\" font-size=\"11\">" << s.name
        << "</text>\n";
    legend_y += 18;
  }
  out << "</svg>\n";
  if (!out) throw std::runtime_error("write_line_chart: write failed for " + path);
}

}  // namespace subcurve
