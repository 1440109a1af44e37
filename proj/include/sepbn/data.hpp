#pragma once

#include <string>
#include <utility>
#include <vector>

#include "sepbn/image.hpp"
#include "sepbn/rng.hpp"
#include "sepbn/tensor.hpp"

namespace sepbn {

struct NormRule {
  enum Kind { kBboxSize, kInterOcular };
  Kind kind = kBboxSize;
  int left = -1, right = -1;  // landmark indices for inter-ocular distance
};

// A landmark annotation scheme: count, flip permutation, NME normalizer.
struct ProtocolSpec {
  std::string id;
  int landmarks = 0;
  std::vector<int> flip_perm;
  NormRule norm_rule;

  void validate() const;  // flip_perm must be an involution over [0, L)
};

struct LandmarkSample {
  Image image;
  std::vector<double> landmarks;  // x1,y1,...,xL,yL in pixel coordinates
  double bx = 0, by = 0, bw = 0, bh = 0;
  int domain = -1;  // -1 = unlabeled
  std::string protocol_id;
};

struct Dataset {
  std::string dir;
  ProtocolSpec protocol;
  std::vector<LandmarkSample> samples;

  int size() const { return static_cast<int>(samples.size()); }
};

// Reads manifest.csv (header `file,protocol,domain,bx,by,bw,bh,x1,y1,...`),
// protocols.json next to it, and the referenced PPM images.
Dataset load_dataset(const std::string& manifest_path);

void write_manifest(const Dataset& ds, const std::string& dir);
void write_protocols(const std::vector<ProtocolSpec>& protos, const std::string& path);
std::vector<ProtocolSpec> read_protocols(const std::string& path);

struct AugmentConfig {
  double rot_deg = 25.0;
  double bbox_jitter_frac = 0.15;
  double hflip_prob = 0.5;
  double shear_max = 0.1;
  uint64_t seed = 0;  // standalone use; training loops pass their own stream

  void validate() const;
};

// Network-ready crop: image values in [0,1], landmarks in crop coordinates,
// plus the affine that produced them (original -> crop).
struct Crop {
  Tensor image;  // [3, S, S]
  std::vector<double> landmarks;
  Affine to_crop;
};

Crop crop_resize(const LandmarkSample& s, int target);

// Jitters the bbox, rotates and shears about the crop center, then flips
// with probability hflip_prob (applying the protocol flip permutation).
// One composite affine moves image and landmarks alike.
LandmarkSample augment(const LandmarkSample& s, const AugmentConfig& cfg,
                       const ProtocolSpec& proto, Rng& rng);

// Stream of (dataset index, sample index): dataset picked with probability
// proportional to size, sample uniform without replacement per pass.
class ProportionalSampler {
public:
  ProportionalSampler(std::vector<int> sizes, Rng rng);

  int choose_dataset();
  int next_index(int dataset);
  std::pair<int, int> next();

private:
  std::vector<int> sizes_;
  std::vector<double> cumulative_;
  std::vector<std::vector<int>> queues_;
  Rng rng_;
};

}  // namespace sepbn
