#include "sepbn/image.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace sepbn {

Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image '" + path + "'");
  std::string magic;
  in >> magic;
  if (magic != "P6") throw IoError("'" + path + "': not a binary PPM (bad magic '" + magic + "')");
  int w = 0, h = 0, maxval = 0;
  in >> w >> h >> maxval;
  if (!in || w <= 0 || h <= 0) throw IoError("'" + path + "': malformed PPM header");
  if (maxval != 255) throw IoError("'" + path + "': unsupported maxval " + std::to_string(maxval));
  in.get();  // single whitespace after header
  Image img(w, h);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
    throw IoError("'" + path + "': truncated pixel data");
  return img;
}

void write_ppm(const Image& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write image '" + path + "'");
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

Affine Affine::rotation_about(double degrees, double cx, double cy) {
  const double rad = degrees * M_PI / 180.0;
  const double ca = std::cos(rad), sa = std::sin(rad);
  // translate(-c) then rotate then translate(+c)
  return {ca, -sa, cx - ca * cx + sa * cy, sa, ca, cy - sa * cx - ca * cy};
}

Affine Affine::shear_x_about(double shear, double cx, double cy) {
  (void)cx;
  return {1, shear, -shear * cy, 0, 1, 0};
}

Affine Affine::compose(const Affine& i) const {
  return {a * i.a + b * i.d, a * i.b + b * i.e, a * i.c + b * i.f + c,
          d * i.a + e * i.d, d * i.b + e * i.e, d * i.c + e * i.f + f};
}

Affine Affine::inverse() const {
  const double det = a * e - b * d;
  if (det == 0.0) throw GeometryError("singular affine map");
  const double ia = e / det, ib = -b / det, id = -d / det, ie = a / det;
  return {ia, ib, -(ia * c + ib * f), id, ie, -(id * c + ie * f)};
}

void Affine::apply(double x, double y, double& ox, double& oy) const {
  ox = a * x + b * y + c;
  oy = d * x + e * y + f;
}

Image warp_bilinear(const Image& src, const Affine& map, int dest_w, int dest_h) {
  const Affine inv = map.inverse();
  Image dst(dest_w, dest_h);
  for (int y = 0; y < dest_h; ++y) {
    for (int x = 0; x < dest_w; ++x) {
      double sx, sy;
      inv.apply(x + 0.5, y + 0.5, sx, sy);
      // pixel centers sit at integer+0.5 positions
      const double px = sx - 0.5, py = sy - 0.5;
      const int x0 = static_cast<int>(std::floor(px));
      const int y0 = static_cast<int>(std::floor(py));
      const double fx = px - x0, fy = py - y0;
      double acc[3] = {0, 0, 0};
      for (int dy = 0; dy < 2; ++dy) {
        for (int dx = 0; dx < 2; ++dx) {
          const int xs = x0 + dx, ys = y0 + dy;
          if (!src.contains(xs, ys)) continue;  // zero padding
          const double w = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy);
          const uint8_t* p = src.px(xs, ys);
          acc[0] += w * p[0];
          acc[1] += w * p[1];
          acc[2] += w * p[2];
        }
      }
      uint8_t* o = dst.px(x, y);
      for (int ch = 0; ch < 3; ++ch) {
        const double v = std::round(acc[ch]);
        o[ch] = static_cast<uint8_t>(v < 0 ? 0 : (v > 255 ? 255 : v));
      }
    }
  }
  return dst;
}

}  // namespace sepbn
