#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "debias/io.hpp"

namespace debias {

/// One line with an optional +-1 sd band around it.
struct ChartSeries {
  std::vector<double> x;
  std::vector<double> y;
  std::vector<double> sd;  // may be empty for no band
};

namespace detail {

inline std::string svg_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

inline std::string svg_label(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

}  // namespace detail

/// Renders a standalone deterministic SVG line chart with axes, tick labels,
/// and a shaded +-1 sd band. Throws on fewer than 2 points or non-finite data.
inline std::string render_svg_line_chart(const ChartSeries& series,
                                         const std::string& title,
                                         const std::string& x_label,
                                         const std::string& y_label) {
  const std::size_t n = series.x.size();
  if (n < 2) throw std::invalid_argument("svg chart: need at least 2 points");
  if (series.y.size() != n || (!series.sd.empty() && series.sd.size() != n)) {
    throw std::invalid_argument("svg chart: series lengths disagree");
  }
  const bool has_band = !series.sd.empty();
  double xmin = series.x[0], xmax = series.x[0];
  double ymin = series.y[0], ymax = series.y[0];
  for (std::size_t i = 0; i < n; ++i) {
    const double sd = has_band ? series.sd[i] : 0.0;
    if (!std::isfinite(series.x[i]) || !std::isfinite(series.y[i]) || !std::isfinite(sd)) {
      throw std::invalid_argument("svg chart: series contains a non-finite value");
    }
    xmin = std::min(xmin, series.x[i]);
    xmax = std::max(xmax, series.x[i]);
    ymin = std::min(ymin, series.y[i] - sd);
    ymax = std::max(ymax, series.y[i] + sd);
  }
  if (xmax == xmin) xmax = xmin + 1.0;
  if (ymax == ymin) {
    ymax += 0.5;
    ymin -= 0.5;
  }
  const double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;

  const double width = 640.0, height = 420.0;
  const double left = 70.0, right = 20.0, top = 40.0, bottom = 50.0;
  const double pw = width - left - right, ph = height - top - bottom;
  const auto sx = [&](double v) { return left + (v - xmin) / (xmax - xmin) * pw; };
  const auto sy = [&](double v) { return top + (ymax - v) / (ymax - ymin) * ph; };

  std::string out;
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"420\" "
         "viewBox=\"0 0 640 420\">\n";
  out += "<rect width=\"640\" height=\"420\" fill=\"white\"/>\n";
  out += "<text x=\"320\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"15\">" + title + "</text>\n";

  if (has_band) {
    std::string pts;
    for (std::size_t i = 0; i < n; ++i) {
      pts += detail::svg_num(sx(series.x[i])) + "," +
             detail::svg_num(sy(series.y[i] + series.sd[i])) + " ";
    }
    for (std::size_t i = n; i > 0; --i) {
      pts += detail::svg_num(sx(series.x[i - 1])) + "," +
             detail::svg_num(sy(series.y[i - 1] - series.sd[i - 1])) + " ";
    }
    out += "<polygon points=\"" + pts + "\" fill=\"#4a90d911\" stroke=\"none\"/>\n";
  }

  std::string line;
  for (std::size_t i = 0; i < n; ++i) {
    line += detail::svg_num(sx(series.x[i])) + "," + detail::svg_num(sy(series.y[i])) + " ";
  }
  out += "<polyline points=\"" + line +
         "\" fill=\"none\" stroke=\"#4a90d9\" stroke-width=\"2\"/>\n";

  // Axes and ticks.
  out += "<line x1=\"" + detail::svg_num(left) + "\" y1=\"" + detail::svg_num(top) +
         "\" x2=\"" + detail::svg_num(left) + "\" y2=\"" + detail::svg_num(top + ph) +
         "\" stroke=\"black\"/>\n";
  out += "<line x1=\"" + detail::svg_num(left) + "\" y1=\"" + detail::svg_num(top + ph) +
         "\" x2=\"" + detail::svg_num(left + pw) + "\" y2=\"" + detail::svg_num(top + ph) +
         "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double fx = xmin + (xmax - xmin) * t / 4.0;
    const double fy = ymin + (ymax - ymin) * t / 4.0;
    out += "<line x1=\"" + detail::svg_num(sx(fx)) + "\" y1=\"" + detail::svg_num(top + ph) +
           "\" x2=\"" + detail::svg_num(sx(fx)) + "\" y2=\"" +
           detail::svg_num(top + ph + 5) + "\" stroke=\"black\"/>\n";
    out += "<text x=\"" + detail::svg_num(sx(fx)) + "\" y=\"" +
           detail::svg_num(top + ph + 20) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" +
           detail::svg_label(fx) + "</text>\n";
    out += "<line x1=\"" + detail::svg_num(left - 5) + "\" y1=\"" + detail::svg_num(sy(fy)) +
           "\" x2=\"" + detail::svg_num(left) + "\" y2=\"" + detail::svg_num(sy(fy)) +
           "\" stroke=\"black\"/>\n";
    out += "<text x=\"" + detail::svg_num(left - 8) + "\" y=\"" +
           detail::svg_num(sy(fy) + 4) +
           "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" +
           detail::svg_label(fy) + "</text>\n";
  }
  out += "<text x=\"" + detail::svg_num(left + pw / 2) + "\" y=\"" +
         detail::svg_num(height - 10) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">" +
         x_label + "</text>\n";
  out += "<text x=\"16\" y=\"" + detail::svg_num(top + ph / 2) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" "
         "transform=\"rotate(-90 16 " + detail::svg_num(top + ph / 2) + ")\">" +
         y_label + "</text>\n";
  out += "</svg>\n";
  return out;
}

inline void emit_svg_line_chart(const ChartSeries& series, const std::string& title,
                                const std::string& x_label, const std::string& y_label,
                                const std::filesystem::path& path) {
  atomic_write_text(path, render_svg_line_chart(series, title, x_label, y_label));
}

}  // namespace debias
