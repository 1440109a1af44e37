#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sepbn/error.hpp"

namespace sepbn {

// 8-bit RGB raster, row-major interleaved.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> pixels;

  Image() = default;
  Image(int w, int h, uint8_t fill = 0)
    : width(w), height(h), pixels(static_cast<size_t>(w) * h * 3, fill) {}

  uint8_t* px(int x, int y) { return pixels.data() + (static_cast<size_t>(y) * width + x) * 3; }
  const uint8_t* px(int x, int y) const {
    return pixels.data() + (static_cast<size_t>(y) * width + x) * 3;
  }
  bool contains(int x, int y) const { return x >= 0 && x < width && y >= 0 && y < height; }
};

// Binary PPM, exactly `P6\n<width> <height>\n255\n` + raw RGB bytes.
Image read_ppm(const std::string& path);
void write_ppm(const Image& img, const std::string& path);

// Row-vector affine map (x, y) -> (a*x + b*y + c, d*x + e*y + f).
struct Affine {
  double a = 1, b = 0, c = 0;
  double d = 0, e = 1, f = 0;

  static Affine identity() { return {}; }
  static Affine translation(double tx, double ty) { return {1, 0, tx, 0, 1, ty}; }
  static Affine scale(double sx, double sy) { return {sx, 0, 0, 0, sy, 0}; }
  static Affine rotation_about(double degrees, double cx, double cy);
  static Affine shear_x_about(double shear, double cx, double cy);
  static Affine hflip(double width) { return {-1, 0, width, 0, 1, 0}; }

  // (this ∘ inner): apply `inner` first.
  Affine compose(const Affine& inner) const;
  Affine inverse() const;
  void apply(double x, double y, double& ox, double& oy) const;
};

// Warps `src` through `map` (source coords -> dest coords) into a dest-sized
// image, sampling bilinearly with zero padding outside the source.
Image warp_bilinear(const Image& src, const Affine& map, int dest_w, int dest_h);

}  // namespace sepbn
