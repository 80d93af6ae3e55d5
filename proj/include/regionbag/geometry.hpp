#pragma once

#include <utility>
#include <vector>

namespace regionbag {

// Axis-aligned rectangle in real image coordinates. Half-open convention:
// area is (x2-x1)*(y2-y1) with no +1 pixel term.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x1 < x2 && y1 < y2; }

  bool operator==(const Box& o) const {
    return x1 == o.x1 && y1 == o.y1 && x2 == o.x2 && y2 == o.y2;
  }
};

struct ImageExtent {
  double width = 0, height = 0;
};

double intersection_area(const Box& a, const Box& b);

// intersection over union, in [0,1]
double iou(const Box& a, const Box& b);

// intersection over foreground: intersection area divided by area(fg).
// The first argument is the foreground box by repo convention.
double iof(const Box& fg, const Box& ref);

// Greedy descending-score suppression. Ties on equal scores keep insertion
// order. Output is sorted by score (desc); no kept pair has iou > iou_thresh.
std::vector<std::pair<Box, double>> nms(const std::vector<std::pair<Box, double>>& proposals,
                                        double iou_thresh);

// Minimal axis-aligned superset of a nonempty box list. Throws on empty input.
Box enclosing_box(const std::vector<Box>& boxes);

// Fraction of the box area lying outside the image, in [0,1].
double out_of_image_fraction(const Box& b, const ImageExtent& ext);

// Clip a box to the image; the result may be degenerate (zero area).
Box clip_to_image(const Box& b, const ImageExtent& ext);

}  // namespace regionbag
