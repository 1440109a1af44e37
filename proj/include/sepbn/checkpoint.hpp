#pragma once

#include <memory>
#include <string>

#include "sepbn/config.hpp"

namespace sepbn {

struct RunState {
  int epoch = 0;  // next epoch to run
  double tau = 1.0;
  uint64_t seed = 0;
};

// Single binary file, little endian: magic `SBNCKPT1`, u64 JSON length, the
// JSON config document, then raw 64-bit parameter blocks in declaration
// order (model state tensors first, then optimizer velocities).
inline constexpr char kCheckpointMagic[8] = {'S', 'B', 'N', 'C', 'K', 'P', 'T', '1'};

void checkpoint_save(const std::string& path, VanillaNet& net, const TrainConfig& train, Sgd& opt,
                     const RunState& state);
void checkpoint_save(const std::string& path, MultiHeadNet& net, const TrainConfig& train,
                     Sgd& opt, const RunState& state);

struct LoadedCheckpoint {
  std::string kind;  // "vanilla" | "multihead"
  std::unique_ptr<VanillaNet> vanilla;
  std::unique_ptr<MultiHeadNet> multihead;
  TrainConfig train;
  RunState state;
  Sgd opt;
  nlohmann::json config;  // full header document as stored

  std::vector<Param*> params() {
    return vanilla ? vanilla->params() : multihead->params();
  }
  void set_tau() {
    if (vanilla) vanilla->set_tau(state.tau);
    if (multihead) multihead->set_tau(state.tau);
  }
};

LoadedCheckpoint checkpoint_load(const std::string& path);

}  // namespace sepbn
