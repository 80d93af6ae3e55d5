#include "regionbag/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace regionbag {

ImageU8 ImageU8::filled(int w, int h, uint8_t r, uint8_t g, uint8_t b) {
  ImageU8 img;
  img.width = w;
  img.height = h;
  img.data.resize(size_t(w) * h * 3);
  for (size_t i = 0; i < img.data.size(); i += 3) {
    img.data[i] = r;
    img.data[i + 1] = g;
    img.data[i + 2] = b;
  }
  return img;
}

void write_ppm(std::ostream& os, const ImageU8& img) {
  os << "P6\n" << img.width << " " << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.data.data()),
           static_cast<std::streamsize>(img.data.size()));
}

ImageU8 read_ppm(std::istream& is) {
  std::string magic;
  is >> magic;
  if (magic != "P6") throw CorruptFileError("ppm: bad magic");
  int w = 0, h = 0, maxval = 0;
  is >> w >> h >> maxval;
  if (!is || w <= 0 || h <= 0 || maxval != 255) throw CorruptFileError("ppm: bad header");
  is.get();  // single whitespace after maxval
  ImageU8 img;
  img.width = w;
  img.height = h;
  img.data.resize(size_t(w) * h * 3);
  is.read(reinterpret_cast<char*>(img.data.data()),
          static_cast<std::streamsize>(img.data.size()));
  if (is.gcount() != static_cast<std::streamsize>(img.data.size()))
    throw CorruptFileError("ppm: truncated pixel data");
  return img;
}

void write_ppm_file(const std::string& path, const ImageU8& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  write_ppm(f, img);
}

ImageU8 read_ppm_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CorruptFileError("cannot open: " + path);
  return read_ppm(f);
}

Eigen::MatrixXd image_to_rows(const ImageU8& img) {
  Eigen::MatrixXd m(img.width * img.height, 3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        m(y * img.width + x, c) = img.at(x, y, c) / 255.0;
  return m;
}

double bilinear_sample(const ImageU8& img, double x, double y, int c) {
  const double gx = x - 0.5;
  const double gy = y - 0.5;
  const int x0 = static_cast<int>(std::floor(gx));
  const int y0 = static_cast<int>(std::floor(gy));
  const double fx = gx - x0;
  const double fy = gy - y0;
  auto px = [&](int xi, int yi) -> double {
    if (xi < 0 || yi < 0 || xi >= img.width || yi >= img.height) return 0.0;
    return img.at(xi, yi, c) / 255.0;
  };
  return px(x0, y0) * (1 - fx) * (1 - fy) + px(x0 + 1, y0) * fx * (1 - fy) +
         px(x0, y0 + 1) * (1 - fx) * fy + px(x0 + 1, y0 + 1) * fx * fy;
}

Letterbox extract_letterbox(const ImageU8& img, const Box& crop, int side) {
  if (!crop.valid()) throw std::invalid_argument("extract_letterbox: degenerate crop");
  Letterbox lb;
  lb.side = side;
  lb.crop_x1 = crop.x1;
  lb.crop_y1 = crop.y1;
  const double cw = crop.width();
  const double ch = crop.height();
  lb.scale = side / std::max(cw, ch);
  lb.content_w = cw * lb.scale;
  lb.content_h = ch * lb.scale;
  lb.ox = 0.5 * (side - lb.content_w);
  lb.oy = 0.5 * (side - lb.content_h);
  lb.pixels = Eigen::MatrixXd::Zero(side * side, 3);
  for (int ty = 0; ty < side; ++ty) {
    for (int tx = 0; tx < side; ++tx) {
      const double cx = tx + 0.5;
      const double cy = ty + 0.5;
      if (!lb.in_content(cx, cy)) continue;  // zero padding
      const double sx = crop.x1 + (cx - lb.ox) / lb.scale;
      const double sy = crop.y1 + (cy - lb.oy) / lb.scale;
      for (int c = 0; c < 3; ++c)
        lb.pixels(ty * side + tx, c) = bilinear_sample(img, sx, sy, c);
    }
  }
  return lb;
}

}  // namespace regionbag
