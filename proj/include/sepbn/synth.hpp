#pragma once

#include <string>
#include <vector>

#include "sepbn/data.hpp"

namespace sepbn {

// Multi-sub-domain synthetic face generator: each sample draws a yaw cluster
// (the sub-domain), foreshortens a fixed landmark template by cos(yaw),
// places it with a random similarity transform, perturbs landmarks with
// Gaussian noise, and renders a face ellipse plus one marker per landmark
// under domain-specific brightness/contrast.
struct SynthConfig {
  int n_samples = 600;
  int image_size = 96;
  int landmarks = 5;  // 5 (full template) or 3 (eyes + nose)
  std::vector<double> domain_weights = {1.0 / 3, 1.0 / 3, 1.0 / 3};
  std::vector<double> yaw_centers_deg = {-40.0, 0.0, 40.0};
  double yaw_jitter_deg = 8.0;
  std::vector<double> brightness = {-30.0, 0.0, 30.0};  // per domain, additive
  std::vector<double> contrast = {0.8, 1.0, 1.2};       // per domain, multiplicative
  double landmark_noise_px = 1.0;
  uint64_t seed = 1;
  std::string protocol_id;  // default: synth5 / synth3 by landmark count

  void validate() const;
};

ProtocolSpec synth_protocol(const SynthConfig& cfg);

// Generates the dataset in memory (used by tests and the training harness).
Dataset synth_generate(const SynthConfig& cfg);

// Writes images/, manifest.csv and protocols.json under out_dir.
void synth_generate_to(const SynthConfig& cfg, const std::string& out_dir);

}  // namespace sepbn
