#include "regionbag/plots.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace regionbag {

namespace {

constexpr int kW = 760;
constexpr int kH = 420;
constexpr int kPad = 52;

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                          "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '&')
      out += "&amp;";
    else if (c == '<')
      out += "&lt;";
    else if (c == '>')
      out += "&gt;";
    else
      out += c;
  }
  return out;
}

void open_svg(std::ofstream& f, const std::string& title) {
  f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
    << "\" viewBox=\"0 0 " << kW << " " << kH << "\">\n";
  f << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  f << "<text x=\"" << kW / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\" "
       "font-family=\"sans-serif\">"
    << escape_xml(title) << "</text>\n";
}

}  // namespace

void svg_line_chart(const std::string& path, const std::string& title,
                    const std::vector<Series>& series) {
  std::ofstream f(path);
  open_svg(f, title);
  double lo = 0, hi = 1;
  size_t n = 1;
  bool any = false;
  for (const auto& s : series) {
    for (double y : s.ys) {
      if (!std::isfinite(y)) continue;
      if (!any) {
        lo = hi = y;
        any = true;
      }
      lo = std::min(lo, y);
      hi = std::max(hi, y);
    }
    n = std::max(n, s.ys.size());
  }
  if (hi <= lo) hi = lo + 1;
  auto sx = [&](double i) { return kPad + i / double(std::max<size_t>(n - 1, 1)) * (kW - 2 * kPad); };
  auto sy = [&](double y) { return kH - kPad - (y - lo) / (hi - lo) * (kH - 2 * kPad); };
  f << "<line x1=\"" << kPad << "\" y1=\"" << kH - kPad << "\" x2=\"" << kW - kPad
    << "\" y2=\"" << kH - kPad << "\" stroke=\"black\"/>\n";
  f << "<line x1=\"" << kPad << "\" y1=\"" << kPad << "\" x2=\"" << kPad << "\" y2=\""
    << kH - kPad << "\" stroke=\"black\"/>\n";
  for (double t : {0.0, 0.5, 1.0}) {
    const double y = lo + t * (hi - lo);
    f << "<text x=\"" << kPad - 6 << "\" y=\"" << sy(y) + 4
      << "\" text-anchor=\"end\" font-size=\"11\" font-family=\"sans-serif\">" << y
      << "</text>\n";
  }
  int color = 0;
  for (const auto& s : series) {
    std::ostringstream pts;
    for (size_t i = 0; i < s.ys.size(); ++i) {
      if (!std::isfinite(s.ys[i])) continue;
      pts << sx(double(i)) << "," << sy(s.ys[i]) << " ";
    }
    const char* col = kPalette[color % 8];
    f << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.5\" points=\""
      << pts.str() << "\"/>\n";
    f << "<text x=\"" << kW - kPad + 4 << "\" y=\"" << kPad + 16 * color
      << "\" font-size=\"11\" fill=\"" << col << "\" font-family=\"sans-serif\">"
      << escape_xml(s.label) << "</text>\n";
    ++color;
  }
  f << "</svg>\n";
}

void svg_bar_chart(const std::string& path, const std::string& title,
                   const std::vector<std::string>& names, const std::vector<double>& values) {
  std::ofstream f(path);
  open_svg(f, title);
  double hi = 1;
  for (double v : values) hi = std::max(hi, v);
  const int n = int(values.size());
  const double bw = (kW - 2 * kPad) / std::max(1, n);
  for (int i = 0; i < n; ++i) {
    const double h = values[i] / hi * (kH - 2 * kPad);
    const double x = kPad + i * bw + bw * 0.15;
    const double y = kH - kPad - h;
    f << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << bw * 0.7 << "\" height=\""
      << h << "\" fill=\"" << kPalette[i % 8] << "\"/>\n";
    f << "<text x=\"" << x + bw * 0.35 << "\" y=\"" << y - 4
      << "\" text-anchor=\"middle\" font-size=\"11\" font-family=\"sans-serif\">"
      << int(values[i] * 10 + 0.5) / 10.0 << "</text>\n";
    f << "<text x=\"" << x + bw * 0.35 << "\" y=\"" << kH - kPad + 14
      << "\" text-anchor=\"middle\" font-size=\"10\" font-family=\"sans-serif\">"
      << escape_xml(names[i]) << "</text>\n";
  }
  f << "</svg>\n";
}

}  // namespace regionbag
