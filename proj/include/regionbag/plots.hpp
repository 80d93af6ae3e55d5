#pragma once

#include <string>
#include <vector>

namespace regionbag {

struct Series {
  std::string label;
  std::vector<double> ys;  // x is the index
};

// minimal self-contained SVG emitters
void svg_line_chart(const std::string& path, const std::string& title,
                    const std::vector<Series>& series);
void svg_bar_chart(const std::string& path, const std::string& title,
                   const std::vector<std::string>& names, const std::vector<double>& values);

}  // namespace regionbag
