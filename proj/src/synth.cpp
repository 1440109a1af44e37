#include "sepbn/synth.hpp"

#include <algorithm>
#include <cmath>

namespace sepbn {

namespace {

// Unit-crop template: left eye, right eye, nose, left mouth, right mouth.
constexpr double kTemplate[5][2] = {
    {0.30, 0.35}, {0.70, 0.35}, {0.50, 0.55}, {0.35, 0.75}, {0.65, 0.75}};

struct Rgb {
  uint8_t r, g, b;
};

// Mirror-symmetric pairs share a color so horizontal flips stay consistent.
constexpr Rgb kMarkerColors[5] = {
    {40, 60, 120}, {40, 60, 120}, {60, 140, 70}, {170, 40, 60}, {170, 40, 60}};
constexpr Rgb kSkin = {205, 170, 150};

uint8_t clamp_byte(double v) { return static_cast<uint8_t>(v < 0 ? 0 : (v > 255 ? 255 : v)); }

}  // namespace

void SynthConfig::validate() const {
  if (n_samples < 1) throw ConfigError("synth: n_samples must be >= 1");
  if (image_size < 16) throw ConfigError("synth: image_size must be >= 16");
  if (landmarks != 5 && landmarks != 3)
    throw ConfigError("synth: landmark template supports L = 5 or L = 3");
  const size_t d = domain_weights.size();
  if (d < 1) throw ConfigError("synth: need at least one domain");
  double sum = 0;
  for (double w : domain_weights) {
    if (w < 0) throw ConfigError("synth: domain weights must be nonnegative");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("synth: domain weights must sum to 1");
  if (yaw_centers_deg.size() != d || brightness.size() != d || contrast.size() != d)
    throw ConfigError("synth: per-domain parameter lists must match domain count");
  if (yaw_jitter_deg < 0 || landmark_noise_px < 0)
    throw ConfigError("synth: jitter and noise must be nonnegative");
}

ProtocolSpec synth_protocol(const SynthConfig& cfg) {
  ProtocolSpec p;
  p.landmarks = cfg.landmarks;
  p.id = cfg.protocol_id.empty() ? ("synth" + std::to_string(cfg.landmarks)) : cfg.protocol_id;
  p.flip_perm = cfg.landmarks == 5 ? std::vector<int>{1, 0, 2, 4, 3} : std::vector<int>{1, 0, 2};
  p.norm_rule.kind = NormRule::kBboxSize;
  p.validate();
  return p;
}

Dataset synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.protocol = synth_protocol(cfg);

  const Rng master(cfg.seed);
  const int S = cfg.image_size;
  const int D = static_cast<int>(cfg.domain_weights.size());

  for (int si = 0; si < cfg.n_samples; ++si) {
    Rng rng = master.split(static_cast<uint64_t>(si));

    int domain = D - 1;
    {
      const double u = rng.uniform();
      double acc = 0;
      for (int d = 0; d < D; ++d) {
        acc += cfg.domain_weights[static_cast<size_t>(d)];
        if (u < acc) {
          domain = d;
          break;
        }
      }
    }

    const double yaw_deg = cfg.yaw_centers_deg[static_cast<size_t>(domain)] +
                           rng.uniform(-cfg.yaw_jitter_deg, cfg.yaw_jitter_deg);
    const double cos_yaw = std::cos(yaw_deg * M_PI / 180.0);

    const double scale = S * rng.uniform(0.45, 0.60);
    const double theta = rng.uniform(-8.0, 8.0) * M_PI / 180.0;
    const double ct = std::cos(theta), st = std::sin(theta);
    const double cx = S * (0.5 + rng.uniform(-0.06, 0.06));
    const double cy = S * (0.5 + rng.uniform(-0.06, 0.06));

    // unit crop -> image: foreshorten x about 0.5, center, scale, rotate.
    auto place = [&](double u, double v, double& px, double& py) {
      const double ux = (0.5 + (u - 0.5) * cos_yaw) - 0.5;
      const double vy = v - 0.55;
      px = cx + scale * (ct * ux - st * vy);
      py = cy + scale * (st * ux + ct * vy);
    };

    LandmarkSample sample;
    sample.domain = domain;
    sample.protocol_id = ds.protocol.id;
    sample.landmarks.resize(static_cast<size_t>(2 * cfg.landmarks));
    for (int l = 0; l < cfg.landmarks; ++l) {
      double px, py;
      place(kTemplate[l][0], kTemplate[l][1], px, py);
      sample.landmarks[static_cast<size_t>(2 * l)] = px + cfg.landmark_noise_px * rng.normal();
      sample.landmarks[static_cast<size_t>(2 * l + 1)] = py + cfg.landmark_noise_px * rng.normal();
    }

    const double bg = 230.0 + rng.uniform(-8.0, 8.0);

    // Render: background, face ellipse (tested in unit coordinates through
    // the inverse placement), then landmark markers.
    const double rx = 0.42 * std::abs(cos_yaw), ry = 0.52;
    sample.image = Image(S, S);
    for (int y = 0; y < S; ++y) {
      for (int x = 0; x < S; ++x) {
        const double dx = (x + 0.5 - cx) / scale, dy = (y + 0.5 - cy) / scale;
        const double ux = ct * dx + st * dy;         // un-rotate
        const double vy = -st * dx + ct * dy + 0.55;  // unit v
        const double uu = ux / std::max(1e-9, rx);
        const double vv = (vy - 0.55) / ry;
        uint8_t* p = sample.image.px(x, y);
        if (uu * uu + vv * vv <= 1.0) {
          p[0] = kSkin.r;
          p[1] = kSkin.g;
          p[2] = kSkin.b;
        } else {
          p[0] = p[1] = p[2] = clamp_byte(bg);
        }
      }
    }
    const double marker_r = std::max(1.5, 0.035 * scale);
    for (int l = 0; l < cfg.landmarks; ++l) {
      const double mx = sample.landmarks[static_cast<size_t>(2 * l)];
      const double my = sample.landmarks[static_cast<size_t>(2 * l + 1)];
      const Rgb col = kMarkerColors[l];
      const int x0 = std::max(0, static_cast<int>(std::floor(mx - marker_r)));
      const int x1 = std::min(S - 1, static_cast<int>(std::ceil(mx + marker_r)));
      const int y0 = std::max(0, static_cast<int>(std::floor(my - marker_r)));
      const int y1 = std::min(S - 1, static_cast<int>(std::ceil(my + marker_r)));
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          const double ddx = x + 0.5 - mx, ddy = y + 0.5 - my;
          if (ddx * ddx + ddy * ddy <= marker_r * marker_r) {
            uint8_t* p = sample.image.px(x, y);
            p[0] = col.r;
            p[1] = col.g;
            p[2] = col.b;
          }
        }
    }

    // Domain appearance shift.
    const double contrast = cfg.contrast[static_cast<size_t>(domain)];
    const double brightness = cfg.brightness[static_cast<size_t>(domain)];
    for (uint8_t& v : sample.image.pixels)
      v = clamp_byte(128.0 + contrast * (v - 128.0) + brightness);

    // Face bbox: ellipse bounds with a 15% margin (may exceed the image).
    const double ex = scale * (std::abs(ct) * rx + std::abs(st) * ry);
    const double ey = scale * (std::abs(st) * rx + std::abs(ct) * ry);
    sample.bx = cx - ex * 1.15;
    sample.by = cy - ey * 1.15;
    sample.bw = 2 * ex * 1.15;
    sample.bh = 2 * ey * 1.15;

    ds.samples.push_back(std::move(sample));
  }
  return ds;
}

void synth_generate_to(const SynthConfig& cfg, const std::string& out_dir) {
  Dataset ds = synth_generate(cfg);
  ds.dir = out_dir;
  write_manifest(ds, out_dir);
}

}  // namespace sepbn
