#pragma once

#include <json.hpp>

#include "sepbn/gradcheck.hpp"
#include "sepbn/synth.hpp"
#include "sepbn/train.hpp"

namespace sepbn {

// JSON round-trips for every config block. Parsing is strict: unknown keys
// are rejected so typos fail loudly before any work starts.

nlohmann::json vanilla_to_json(const VanillaConfig& cfg);
VanillaConfig vanilla_from_json(const nlohmann::json& j);
nlohmann::json multihead_to_json(const MultiHeadConfig& cfg);
MultiHeadConfig multihead_from_json(const nlohmann::json& j);
nlohmann::json train_to_json(const TrainConfig& cfg);
TrainConfig train_from_json(const nlohmann::json& j);
nlohmann::json synth_to_json(const SynthConfig& cfg);
SynthConfig synth_from_json(const nlohmann::json& j);
nlohmann::json augment_to_json(const AugmentConfig& cfg);
AugmentConfig augment_from_json(const nlohmann::json& j);

struct GradcheckConfig {
  int batch = 2;
  double tolerance = 1e-4;
  int samples_per_param = kGradCheckSamples;
  std::vector<NormKind> norms = {NormKind::kBatchNorm, NormKind::kSimple, NormKind::kSepBN};
};

nlohmann::json gradcheck_to_json(const GradcheckConfig& cfg);
GradcheckConfig gradcheck_from_json(const nlohmann::json& j);

struct RunConfig {
  uint64_t seed = 1;
  bool has_model = false;
  bool is_multihead = false;
  VanillaConfig vanilla;
  MultiHeadConfig multihead;
  TrainConfig train;
  SynthConfig synth;
  GradcheckConfig gradcheck;
};

RunConfig run_config_from_json(const nlohmann::json& doc);
RunConfig load_run_config(const std::string& path);
// Fully resolved echo (defaults filled in) for run.json.
nlohmann::json run_config_to_json(const RunConfig& cfg);

void check_keys(const nlohmann::json& obj, std::initializer_list<const char*> allowed,
                const std::string& where);

}  // namespace sepbn
