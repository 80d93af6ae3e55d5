#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "regionbag/geometry.hpp"

namespace regionbag {

struct CorruptFileError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// 8-bit interleaved RGB, row-major.
struct ImageU8 {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> data;  // width*height*3

  static ImageU8 filled(int w, int h, uint8_t r, uint8_t g, uint8_t b);

  uint8_t& at(int x, int y, int c) { return data[(size_t(y) * width + x) * 3 + c]; }
  uint8_t at(int x, int y, int c) const { return data[(size_t(y) * width + x) * 3 + c]; }

  bool operator==(const ImageU8& o) const {
    return width == o.width && height == o.height && data == o.data;
  }
};

// binary PPM (P6)
void write_ppm(std::ostream& os, const ImageU8& img);
ImageU8 read_ppm(std::istream& is);
void write_ppm_file(const std::string& path, const ImageU8& img);
ImageU8 read_ppm_file(const std::string& path);

// (height*width) x 3 matrix of [0,1] doubles; spatial row index = y*width + x
Eigen::MatrixXd image_to_rows(const ImageU8& img);

// bilinear sample at continuous point (pixel centers at half offsets);
// contributions outside the image are zero
double bilinear_sample(const ImageU8& img, double x, double y, int c);

// Crop a region (possibly extending past the image) and letterbox it into a
// side x side square: aspect preserved, content centered, zero padding.
struct Letterbox {
  Eigen::MatrixXd pixels;  // (side*side) x 3
  int side = 0;
  double scale = 0;              // image units -> target units
  double ox = 0, oy = 0;         // content origin in target coords
  double content_w = 0, content_h = 0;

  // map a point from source image coordinates into target coordinates
  double to_target_x(double image_x) const { return ox + (image_x - crop_x1) * scale; }
  double to_target_y(double image_y) const { return oy + (image_y - crop_y1) * scale; }
  Box to_target(const Box& b) const {
    return Box{to_target_x(b.x1), to_target_y(b.y1), to_target_x(b.x2), to_target_y(b.y2)};
  }
  bool in_content(double tx, double ty) const {
    return tx >= ox && tx < ox + content_w && ty >= oy && ty < oy + content_h;
  }

  double crop_x1 = 0, crop_y1 = 0;
};

Letterbox extract_letterbox(const ImageU8& img, const Box& crop, int side);

}  // namespace regionbag
