#include "regionbag/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace regionbag {

double intersection_area(const Box& a, const Box& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (w <= 0.0 || h <= 0.0) return 0.0;
  return w * h;
}

double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double iof(const Box& fg, const Box& ref) {
  const double area = fg.area();
  return area > 0.0 ? intersection_area(fg, ref) / area : 0.0;
}

std::vector<std::pair<Box, double>> nms(const std::vector<std::pair<Box, double>>& proposals,
                                        double iou_thresh) {
  std::vector<size_t> order(proposals.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t i, size_t j) {
    return proposals[i].second > proposals[j].second;
  });
  std::vector<std::pair<Box, double>> kept;
  for (size_t i : order) {
    bool suppressed = false;
    for (const auto& k : kept) {
      if (iou(proposals[i].first, k.first) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(proposals[i]);
  }
  return kept;
}

Box enclosing_box(const std::vector<Box>& boxes) {
  if (boxes.empty()) throw std::invalid_argument("enclosing_box: empty box list");
  Box out = boxes.front();
  for (const Box& b : boxes) {
    out.x1 = std::min(out.x1, b.x1);
    out.y1 = std::min(out.y1, b.y1);
    out.x2 = std::max(out.x2, b.x2);
    out.y2 = std::max(out.y2, b.y2);
  }
  return out;
}

double out_of_image_fraction(const Box& b, const ImageExtent& ext) {
  const double area = b.area();
  if (area <= 0.0) return 0.0;
  const Box image{0.0, 0.0, ext.width, ext.height};
  return 1.0 - intersection_area(b, image) / area;
}

Box clip_to_image(const Box& b, const ImageExtent& ext) {
  Box out;
  out.x1 = std::clamp(b.x1, 0.0, ext.width);
  out.y1 = std::clamp(b.y1, 0.0, ext.height);
  out.x2 = std::clamp(b.x2, 0.0, ext.width);
  out.y2 = std::clamp(b.y2, 0.0, ext.height);
  return out;
}

}  // namespace regionbag
