#include "sepbn/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace sepbn {

void ProtocolSpec::validate() const {
  if (id.empty()) throw ConfigError("protocol id must not be empty");
  if (landmarks < 1) throw ConfigError("protocol '" + id + "': landmark count must be >= 1");
  if (static_cast<int>(flip_perm.size()) != landmarks)
    throw ConfigError("protocol '" + id + "': flip permutation length != landmark count");
  for (int i = 0; i < landmarks; ++i) {
    const int j = flip_perm[static_cast<size_t>(i)];
    if (j < 0 || j >= landmarks)
      throw ConfigError("protocol '" + id + "': flip index out of range");
    if (flip_perm[static_cast<size_t>(j)] != i)
      throw ConfigError("protocol '" + id + "': flip permutation is not an involution");
  }
  if (norm_rule.kind == NormRule::kInterOcular) {
    if (norm_rule.left < 0 || norm_rule.left >= landmarks || norm_rule.right < 0 ||
        norm_rule.right >= landmarks || norm_rule.left == norm_rule.right)
      throw ConfigError("protocol '" + id + "': bad inter-ocular landmark indices");
  }
}

void AugmentConfig::validate() const {
  if (rot_deg < 0 || bbox_jitter_frac < 0 || shear_max < 0)
    throw ConfigError("augmentation magnitudes must be nonnegative");
  if (hflip_prob < 0 || hflip_prob > 1) throw ConfigError("hflip probability must be in [0,1]");
}

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

json norm_rule_to_json(const NormRule& r) {
  json j;
  if (r.kind == NormRule::kBboxSize) {
    j["kind"] = "bbox_size";
  } else {
    j["kind"] = "inter_ocular";
    j["left"] = r.left;
    j["right"] = r.right;
  }
  return j;
}

NormRule norm_rule_from_json(const json& j, const std::string& id) {
  NormRule r;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "bbox_size") {
    r.kind = NormRule::kBboxSize;
  } else if (kind == "inter_ocular") {
    r.kind = NormRule::kInterOcular;
    r.left = j.at("left").get<int>();
    r.right = j.at("right").get<int>();
  } else {
    throw ConfigError("protocol '" + id + "': unknown norm rule '" + kind + "'");
  }
  return r;
}

}  // namespace

void write_protocols(const std::vector<ProtocolSpec>& protos, const std::string& path) {
  json arr = json::array();
  for (const auto& p : protos) {
    json j;
    j["id"] = p.id;
    j["landmarks"] = p.landmarks;
    j["flip_perm"] = p.flip_perm;
    j["norm_rule"] = norm_rule_to_json(p.norm_rule);
    arr.push_back(j);
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << json{{"protocols", arr}}.dump(2) << "\n";
}

std::vector<ProtocolSpec> read_protocols(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw IoError("'" + path + "': " + e.what());
  }
  std::vector<ProtocolSpec> out;
  for (const json& j : doc.at("protocols")) {
    ProtocolSpec p;
    p.id = j.at("id").get<std::string>();
    p.landmarks = j.at("landmarks").get<int>();
    p.flip_perm = j.at("flip_perm").get<std::vector<int>>();
    p.norm_rule = norm_rule_from_json(j.at("norm_rule"), p.id);
    p.validate();
    out.push_back(std::move(p));
  }
  return out;
}

void write_manifest(const Dataset& ds, const std::string& dir) {
  const fs::path root(dir);
  fs::create_directories(root / "images");
  write_protocols({ds.protocol}, (root / "protocols.json").string());

  std::ofstream out(root / "manifest.csv");
  if (!out) throw IoError("cannot write manifest under '" + dir + "'");
  out << "file,protocol,domain,bx,by,bw,bh";
  for (int i = 1; i <= ds.protocol.landmarks; ++i) out << ",x" << i << ",y" << i;
  out << "\n";
  int idx = 0;
  for (const auto& s : ds.samples) {
    char name[64];
    std::snprintf(name, sizeof name, "images/sample_%06d.ppm", idx++);
    write_ppm(s.image, (root / name).string());
    out << name << "," << ds.protocol.id << "," << s.domain << "," << format_double(s.bx) << ","
        << format_double(s.by) << "," << format_double(s.bw) << "," << format_double(s.bh);
    for (double v : s.landmarks) out << "," << format_double(v);
    out << "\n";
  }
}

Dataset load_dataset(const std::string& manifest_path) {
  const fs::path mpath(manifest_path);
  std::ifstream in(mpath);
  if (!in) throw IoError("cannot open manifest '" + manifest_path + "'");
  const fs::path root = mpath.parent_path();

  auto protos = read_protocols((root / "protocols.json").string());

  std::string header;
  if (!std::getline(in, header)) throw IoError("'" + manifest_path + "': empty manifest");
  if (header.rfind("file,protocol,domain,bx,by,bw,bh", 0) != 0)
    throw IoError("'" + manifest_path + "': malformed header '" + header + "'");

  Dataset ds;
  ds.dir = root.string();
  std::string line;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);

    if (cells.size() < 8)
      throw IoError("'" + manifest_path + "' line " + std::to_string(line_no) + ": too few columns");

    LandmarkSample s;
    s.protocol_id = cells[1];
    const ProtocolSpec* proto = nullptr;
    for (const auto& p : protos)
      if (p.id == s.protocol_id) proto = &p;
    if (!proto)
      throw IoError("'" + manifest_path + "' line " + std::to_string(line_no) +
                    ": unknown protocol '" + s.protocol_id + "'");
    if (ds.samples.empty()) {
      ds.protocol = *proto;
    } else if (ds.protocol.id != proto->id) {
      throw IoError("'" + manifest_path + "': mixed protocols in one manifest");
    }

    try {
      s.domain = std::stoi(cells[2]);
      s.bx = std::stod(cells[3]);
      s.by = std::stod(cells[4]);
      s.bw = std::stod(cells[5]);
      s.bh = std::stod(cells[6]);
      for (size_t i = 7; i < cells.size(); ++i) s.landmarks.push_back(std::stod(cells[i]));
    } catch (const std::exception&) {
      throw IoError("'" + manifest_path + "' line " + std::to_string(line_no) + ": bad number");
    }
    if (static_cast<int>(s.landmarks.size()) != 2 * proto->landmarks)
      throw IoError("'" + manifest_path + "' line " + std::to_string(line_no) + ": expected " +
                    std::to_string(2 * proto->landmarks) + " coordinates, got " +
                    std::to_string(s.landmarks.size()));
    if (!(s.bw > 0) || !(s.bh > 0))
      throw IoError("'" + manifest_path + "' line " + std::to_string(line_no) +
                    ": bbox must have positive extent");
    s.image = read_ppm((root / cells[0]).string());
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.empty()) throw IoError("'" + manifest_path + "': empty dataset");
  return ds;
}

Crop crop_resize(const LandmarkSample& s, int target) {
  if (target < 1) throw ParameterError("crop target must be >= 1");
  if (!(s.bw > 0) || !(s.bh > 0)) throw GeometryError("degenerate bbox");
  if (s.bx >= s.image.width || s.by >= s.image.height || s.bx + s.bw <= 0 || s.by + s.bh <= 0)
    throw GeometryError("bbox does not intersect the image");

  const Affine to_crop =
      Affine::scale(target / s.bw, target / s.bh).compose(Affine::translation(-s.bx, -s.by));
  Image warped = warp_bilinear(s.image, to_crop, target, target);

  Crop crop;
  crop.to_crop = to_crop;
  crop.image = Tensor({3, target, target});
  for (int y = 0; y < target; ++y)
    for (int x = 0; x < target; ++x) {
      const uint8_t* p = warped.px(x, y);
      for (int ch = 0; ch < 3; ++ch)
        crop.image[(static_cast<int64_t>(ch) * target + y) * target + x] = p[ch] / 255.0;
    }
  crop.landmarks.resize(s.landmarks.size());
  for (size_t i = 0; i + 1 < s.landmarks.size(); i += 2)
    to_crop.apply(s.landmarks[i], s.landmarks[i + 1], crop.landmarks[i], crop.landmarks[i + 1]);
  return crop;
}

LandmarkSample augment(const LandmarkSample& s, const AugmentConfig& cfg,
                       const ProtocolSpec& proto, Rng& rng) {
  cfg.validate();
  if (static_cast<int>(s.landmarks.size()) != 2 * proto.landmarks)
    throw DimensionError("sample landmark count does not match protocol '" + proto.id + "'");

  // Fixed draw order keeps the random stream aligned across configs.
  const double j = cfg.bbox_jitter_frac;
  const double dx1 = rng.uniform(-j, j) * s.bw, dy1 = rng.uniform(-j, j) * s.bh;
  const double dx2 = rng.uniform(-j, j) * s.bw, dy2 = rng.uniform(-j, j) * s.bh;
  const double theta = rng.uniform(-cfg.rot_deg, cfg.rot_deg);
  const double shear = rng.uniform(-cfg.shear_max, cfg.shear_max);
  const bool flip = rng.uniform() < cfg.hflip_prob;

  LandmarkSample out;
  out.protocol_id = s.protocol_id;
  out.domain = s.domain;
  out.bx = s.bx + dx1;
  out.by = s.by + dy1;
  out.bw = s.bw + dx2 - dx1;
  out.bh = s.bh + dy2 - dy1;

  const double cx = out.bx + out.bw / 2.0, cy = out.by + out.bh / 2.0;
  Affine map = Affine::shear_x_about(shear, cx, cy).compose(Affine::rotation_about(theta, cx, cy));
  if (flip) {
    map = Affine::hflip(s.image.width).compose(map);
    const double right = s.image.width - out.bx - out.bw;
    out.bx = right;
  }

  out.image = warp_bilinear(s.image, map, s.image.width, s.image.height);
  out.landmarks.resize(s.landmarks.size());
  for (int i = 0; i < proto.landmarks; ++i) {
    const int src = flip ? proto.flip_perm[static_cast<size_t>(i)] : i;
    map.apply(s.landmarks[static_cast<size_t>(2 * src)], s.landmarks[static_cast<size_t>(2 * src + 1)],
              out.landmarks[static_cast<size_t>(2 * i)], out.landmarks[static_cast<size_t>(2 * i + 1)]);
  }
  return out;
}

ProportionalSampler::ProportionalSampler(std::vector<int> sizes, Rng rng)
  : sizes_(std::move(sizes)), rng_(rng) {
  double total = 0;
  for (int s : sizes_) {
    if (s <= 0) throw ConfigError("sampler dataset sizes must be > 0");
    total += s;
  }
  if (sizes_.empty() || total <= 0) throw ConfigError("sampler needs a nonempty dataset list");
  double acc = 0;
  for (int s : sizes_) {
    acc += s / total;
    cumulative_.push_back(acc);
  }
  cumulative_.back() = 1.0;
  queues_.resize(sizes_.size());
}

int ProportionalSampler::choose_dataset() {
  const double u = rng_.uniform();
  for (size_t i = 0; i < cumulative_.size(); ++i)
    if (u < cumulative_[i]) return static_cast<int>(i);
  return static_cast<int>(cumulative_.size()) - 1;
}

int ProportionalSampler::next_index(int dataset) {
  auto& q = queues_[static_cast<size_t>(dataset)];
  if (q.empty()) {
    q.resize(static_cast<size_t>(sizes_[static_cast<size_t>(dataset)]));
    for (size_t i = 0; i < q.size(); ++i) q[i] = static_cast<int>(i);
    rng_.shuffle(q);
  }
  const int idx = q.back();
  q.pop_back();
  return idx;
}

std::pair<int, int> ProportionalSampler::next() {
  const int d = choose_dataset();
  return {d, next_index(d)};
}

}  // namespace sepbn
