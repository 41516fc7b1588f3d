#pragma once

// Minimal SVG chart writer: line charts for training curves and bar charts
// for ablation summaries. No dependencies beyond the standard library.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "swindet/tensor.hpp"

namespace swindet {

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;  // (x, y)
};

namespace detail {

inline std::string fmt_num(double v) {
  std::ostringstream os;
  os << std::setprecision(4) << v;
  return os.str();
}

inline const char* series_color(std::size_t i) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                  "#ff7f0e", "#8c564b", "#17becf"};
  return palette[i % (sizeof(palette) / sizeof(palette[0]))];
}

struct ChartFrame {
  int width, height;
  double x0, x1, y0, y1;       // data ranges
  int ml = 58, mr = 16, mt = 34, mb = 44;  // margins

  double px(double x) const {
    const double span = x1 > x0 ? x1 - x0 : 1.0;
    return ml + (x - x0) / span * (width - ml - mr);
  }
  double py(double y) const {
    const double span = y1 > y0 ? y1 - y0 : 1.0;
    return height - mb - (y - y0) / span * (height - mt - mb);
  }
};

inline void chart_open(std::ostringstream& svg, const ChartFrame& f, const std::string& title,
                       const std::string& x_label, const std::string& y_label) {
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.width << "\" height=\""
      << f.height << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << f.width / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"15\">"
      << title << "</text>\n";
  // axes
  svg << "<line x1=\"" << f.ml << "\" y1=\"" << f.height - f.mb << "\" x2=\"" << f.width - f.mr
      << "\" y2=\"" << f.height - f.mb << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << f.ml << "\" y1=\"" << f.mt << "\" x2=\"" << f.ml << "\" y2=\""
      << f.height - f.mb << "\" stroke=\"black\"/>\n";
  svg << "<text x=\"" << (f.ml + f.width - f.mr) / 2 << "\" y=\"" << f.height - 8
      << "\" text-anchor=\"middle\">" << x_label << "</text>\n";
  svg << "<text x=\"14\" y=\"" << (f.mt + f.height - f.mb) / 2
      << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
      << (f.mt + f.height - f.mb) / 2 << ")\">" << y_label << "</text>\n";
  // y ticks
  for (int i = 0; i <= 4; ++i) {
    const double v = f.y0 + (f.y1 - f.y0) * i / 4.0;
    const double y = f.py(v);
    svg << "<line x1=\"" << f.ml - 4 << "\" y1=\"" << y << "\" x2=\"" << f.width - f.mr
        << "\" y2=\"" << y << "\" stroke=\"#ddd\"/>\n";
    svg << "<text x=\"" << f.ml - 7 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">"
        << fmt_num(v) << "</text>\n";
  }
}

}  // namespace detail

inline std::string svg_line_chart(const std::vector<Series>& series, const std::string& title,
                                  const std::string& x_label, const std::string& y_label,
                                  int width = 640, int height = 400) {
  detail::ChartFrame f{width, height, 0, 1, 0, 1};
  bool any = false;
  for (const Series& s : series)
    for (const auto& [x, y] : s.points) {
      if (!any) {
        f.x0 = f.x1 = x;
        f.y0 = f.y1 = y;
        any = true;
      }
      f.x0 = std::min(f.x0, x);
      f.x1 = std::max(f.x1, x);
      f.y0 = std::min(f.y0, y);
      f.y1 = std::max(f.y1, y);
    }
  if (f.y0 > 0 && f.y0 < 0.25 * f.y1) f.y0 = 0;  // anchor near-zero ranges at zero
  if (f.y1 == f.y0) f.y1 = f.y0 + 1;

  std::ostringstream svg;
  detail::chart_open(svg, f, title, x_label, y_label);
  for (std::size_t si = 0; si < series.size(); ++si) {
    const Series& s = series[si];
    if (s.points.empty()) continue;
    svg << "<polyline fill=\"none\" stroke=\"" << detail::series_color(si)
        << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : s.points) svg << f.px(x) << "," << f.py(y) << " ";
    svg << "\"/>\n";
    // legend entry
    const int ly = f.mt + 6 + 16 * static_cast<int>(si);
    svg << "<line x1=\"" << width - f.mr - 110 << "\" y1=\"" << ly << "\" x2=\""
        << width - f.mr - 90 << "\" y2=\"" << ly << "\" stroke=\"" << detail::series_color(si)
        << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << width - f.mr - 84 << "\" y=\"" << ly + 4 << "\">" << s.label
        << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

inline std::string svg_bar_chart(const std::vector<std::string>& labels,
                                 const std::vector<double>& values, const std::string& title,
                                 const std::string& y_label, int width = 480, int height = 360) {
  if (labels.size() != values.size())
    throw usage_error("svg_bar_chart: labels/values size mismatch");
  detail::ChartFrame f{width, height, 0, 1, 0, 1};
  f.y1 = values.empty() ? 1 : *std::max_element(values.begin(), values.end());
  if (f.y1 <= 0) f.y1 = 1;
  f.y0 = 0;

  std::ostringstream svg;
  detail::chart_open(svg, f, title, "", y_label);
  const double plot_w = width - f.ml - f.mr;
  const double slot = values.empty() ? plot_w : plot_w / static_cast<double>(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double x = f.ml + slot * (static_cast<double>(i) + 0.2);
    const double y = f.py(values[i]);
    svg << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << slot * 0.6 << "\" height=\""
        << (height - f.mb) - y << "\" fill=\"" << detail::series_color(0) << "\"/>\n";
    svg << "<text x=\"" << x + slot * 0.3 << "\" y=\"" << height - f.mb + 16
        << "\" text-anchor=\"middle\">" << labels[i] << "</text>\n";
    svg << "<text x=\"" << x + slot * 0.3 << "\" y=\"" << y - 5 << "\" text-anchor=\"middle\">"
        << detail::fmt_num(values[i]) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot open " + path + " for writing");
  out << content;
  if (!out) throw io_error("write failed for " + path);
}

}  // namespace swindet
