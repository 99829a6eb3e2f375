#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sme {

struct PlotSeries {
  std::string label;
  std::vector<double> x, y;
};

struct PlotAxes {
  std::string title, x_label, y_label;
};

struct PlotPanel {
  PlotAxes axes;
  std::vector<PlotSeries> series;
};

/// Data range of one panel after padding, used for both ticks and mapping.
struct PlotRange {
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
};

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

inline std::string svg_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", std::abs(v) < 1e-12 ? 0.0 : v);
  return buf;
}

inline void widen(double& lo, double& hi) {
  if (hi > lo) {
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
  } else {
    const double pad = lo == 0 ? 0.5 : 0.1 * std::abs(lo);
    lo -= pad;
    hi += pad;
  }
}

}  // namespace detail

inline void validate_panel(const PlotPanel& p) {
  if (p.series.empty()) throw std::invalid_argument("svg plot: panel '" + p.axes.title + "' has no series");
  for (const auto& s : p.series) {
    if (s.x.empty() || s.x.size() != s.y.size())
      throw std::invalid_argument("svg plot: series '" + s.label + "' needs equal, non-empty x and y");
    for (std::size_t i = 0; i < s.x.size(); ++i)
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i]))
        throw std::invalid_argument("svg plot: series '" + s.label + "' has a non-finite point");
  }
}

inline PlotRange plot_range(const PlotPanel& p) {
  PlotRange r{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(),
              std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (const auto& s : p.series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      r.x0 = std::min(r.x0, s.x[i]);
      r.x1 = std::max(r.x1, s.x[i]);
      r.y0 = std::min(r.y0, s.y[i]);
      r.y1 = std::max(r.y1, s.y[i]);
    }
  detail::widen(r.x0, r.x1);
  detail::widen(r.y0, r.y1);
  return r;
}

/// SVG 1.1 document with the panels side by side, one polyline per series.
inline std::string svg_plot(const std::vector<PlotPanel>& panels) {
  if (panels.empty()) throw std::invalid_argument("svg plot: no panels");
  for (const auto& p : panels) validate_panel(p);
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};
  constexpr double pw = 420, ph = 320, ml = 60, mr = 20, mt = 36, mb = 70;
  const double width = pw * static_cast<double>(panels.size());
  std::ostringstream os;
  using detail::svg_num;
  using detail::xml_escape;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << svg_num(width) << "\" height=\""
     << svg_num(ph) << "\" viewBox=\"0 0 " << svg_num(width) << ' ' << svg_num(ph) << "\">\n"
     << "<rect x=\"0\" y=\"0\" width=\"" << svg_num(width) << "\" height=\"" << svg_num(ph) << "\" fill=\"white\"/>\n";
  for (std::size_t pi = 0; pi < panels.size(); ++pi) {
    const auto& p = panels[pi];
    const PlotRange r = plot_range(p);
    const double left = pw * static_cast<double>(pi) + ml, right = pw * static_cast<double>(pi + 1) - mr;
    const double top = mt, bottom = ph - mb;
    auto sx = [&](double x) { return left + (x - r.x0) / (r.x1 - r.x0) * (right - left); };
    auto sy = [&](double y) { return bottom - (y - r.y0) / (r.y1 - r.y0) * (bottom - top); };
    os << "<g font-family=\"sans-serif\" font-size=\"11\">\n";
    os << "<text x=\"" << svg_num((left + right) / 2) << "\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">"
       << xml_escape(p.axes.title) << "</text>\n";
    os << "<rect x=\"" << svg_num(left) << "\" y=\"" << svg_num(top) << "\" width=\"" << svg_num(right - left)
       << "\" height=\"" << svg_num(bottom - top) << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 4; ++t) {
      const double xv = r.x0 + (r.x1 - r.x0) * t / 4, yv = r.y0 + (r.y1 - r.y0) * t / 4;
      os << "<text x=\"" << svg_num(sx(xv)) << "\" y=\"" << svg_num(bottom + 14) << "\" text-anchor=\"middle\">"
         << detail::tick_label(xv) << "</text>\n";
      os << "<text x=\"" << svg_num(left - 4) << "\" y=\"" << svg_num(sy(yv) + 4) << "\" text-anchor=\"end\">"
         << detail::tick_label(yv) << "</text>\n";
    }
    os << "<text x=\"" << svg_num((left + right) / 2) << "\" y=\"" << svg_num(bottom + 30)
       << "\" text-anchor=\"middle\">" << xml_escape(p.axes.x_label) << "</text>\n";
    os << "<text x=\"" << svg_num(left - 44) << "\" y=\"" << svg_num((top + bottom) / 2)
       << "\" text-anchor=\"middle\" transform=\"rotate(-90 " << svg_num(left - 44) << ' '
       << svg_num((top + bottom) / 2) << ")\">" << xml_escape(p.axes.y_label) << "</text>\n";
    for (std::size_t si = 0; si < p.series.size(); ++si) {
      const auto& s = p.series[si];
      const char* color = kColors[si % (sizeof kColors / sizeof *kColors)];
      os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
      for (std::size_t i = 0; i < s.x.size(); ++i) os << (i ? " " : "") << svg_num(sx(s.x[i])) << ',' << svg_num(sy(s.y[i]));
      os << "\"/>\n";
      const double ly = bottom + 46 + 12 * static_cast<double>(si / 3);
      const double lx = left + (right - left) / 3 * static_cast<double>(si % 3);
      os << "<text x=\"" << svg_num(lx) << "\" y=\"" << svg_num(ly) << "\" fill=\"" << color << "\">"
         << xml_escape(s.label) << "</text>\n";
    }
    os << "</g>\n";
  }
  os << "</svg>\n";
  return os.str();
}

inline std::string svg_plot(const std::vector<PlotSeries>& series, const PlotAxes& axes) {
  return svg_plot(std::vector<PlotPanel>{{axes, series}});
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

inline void emit_svg_plot(const std::vector<PlotPanel>& panels, const std::filesystem::path& path) {
  write_text_file(path, svg_plot(panels));
}

inline void emit_svg_plot(const std::vector<PlotSeries>& series, const PlotAxes& axes, const std::filesystem::path& path) {
  write_text_file(path, svg_plot(series, axes));
}

}  // namespace sme
