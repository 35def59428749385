#include "svg_plot.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "explore/errors.hpp"

namespace explore::tools {

namespace {

constexpr double kWidth = 640, kHeight = 400;
constexpr double kLeft = 60, kRight = 150, kTop = 40, kBottom = 50;
constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

void header(std::ostringstream& svg, const std::string& title) {
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\""
      << kHeight << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << kWidth / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">"
      << escape(title) << "</text>\n";
}

void axes(std::ostringstream& svg, double y_max) {
  const double x0 = kLeft, y0 = kHeight - kBottom, x1 = kWidth - kRight;
  svg << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x1 << "\" y2=\"" << y0
      << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << x0 << "\" y1=\"" << kTop << "\" x2=\"" << x0 << "\" y2=\"" << y0
      << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double y = y0 - (y0 - kTop) * t / 4.0;
    svg << "<text x=\"" << x0 - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">"
        << fmt(y_max * t / 4.0) << "</text>\n";
  }
}

void save(const std::filesystem::path& path, const std::ostringstream& svg) {
  std::ofstream out(path);
  if (!out) throw ExportError("cannot write " + path.string());
  out << svg.str() << "</svg>\n";
}

}  // namespace

void write_line_chart(const std::filesystem::path& path, const std::string& title,
                      const std::string& x_label, const std::string& y_label,
                      const std::vector<Series>& series) {
  double y_max = 0.0;
  std::size_t n = 0;
  for (const auto& s : series) {
    for (double v : s.values) y_max = std::max(y_max, v);
    n = std::max(n, s.values.size());
  }
  if (y_max <= 0.0) y_max = 1.0;
  std::ostringstream svg;
  header(svg, title);
  axes(svg, y_max);
  const double x0 = kLeft, y0 = kHeight - kBottom, w = kWidth - kRight - kLeft, h = y0 - kTop;
  svg << "<text x=\"" << x0 + w / 2 << "\" y=\"" << kHeight - 12 << "\" text-anchor=\"middle\">"
      << escape(x_label) << "</text>\n"
      << "<text x=\"14\" y=\"" << kTop + h / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
      << kTop + h / 2 << ")\">" << escape(y_label) << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const char* color = kColors[k % std::size(kColors)];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    const auto& v = series[k].values;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double x = x0 + (n > 1 ? w * static_cast<double>(i) / static_cast<double>(n - 1) : 0.0);
      svg << fmt(x) << "," << fmt(y0 - h * v[i] / y_max) << " ";
    }
    svg << "\"/>\n<text x=\"" << kWidth - kRight + 10 << "\" y=\"" << kTop + 16 * (k + 1)
        << "\" fill=\"" << color << "\">" << escape(series[k].name) << "</text>\n";
  }
  save(path, svg);
}

void write_bar_chart(const std::filesystem::path& path, const std::string& title,
                     const std::vector<std::string>& categories, const std::vector<double>& values) {
  double y_max = 0.0;
  for (double v : values) y_max = std::max(y_max, v);
  if (y_max <= 0.0) y_max = 1.0;
  std::ostringstream svg;
  header(svg, title);
  axes(svg, y_max);
  const double x0 = kLeft, y0 = kHeight - kBottom, w = kWidth - kRight - kLeft, h = y0 - kTop;
  const double slot = values.empty() ? w : w / static_cast<double>(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double bh = h * values[i] / y_max;
    const double x = x0 + slot * static_cast<double>(i);
    svg << "<rect x=\"" << fmt(x + slot * 0.1) << "\" y=\"" << fmt(y0 - bh) << "\" width=\""
        << fmt(slot * 0.8) << "\" height=\"" << fmt(bh) << "\" fill=\"" << kColors[0] << "\"/>\n"
        << "<text x=\"" << fmt(x + slot / 2) << "\" y=\"" << y0 + 16
        << "\" text-anchor=\"middle\" font-size=\"10\">"
        << escape(i < categories.size() ? categories[i] : "") << "</text>\n";
  }
  save(path, svg);
}

}  // namespace explore::tools
