#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "sepbn/data.hpp"
#include "sepbn/model.hpp"

namespace sepbn {

struct OptimizerConfig {
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

// SGD with momentum: v <- mu*v + g + wd*w; w <- w - lr*v. Weight decay is
// skipped for parameters flagged decay=false (norm scale/shift, biases).
class Sgd {
public:
  explicit Sgd(OptimizerConfig cfg = {}) : cfg_(cfg) {}

  struct Group {
    std::vector<Param*> params;
    double lr = 0.0;
  };

  void attach(const std::vector<Param*>& params);
  bool attached() const { return !order_.empty(); }
  void step(const std::vector<Param*>& params, double lr);
  void step_groups(const std::vector<Group>& groups);

  std::vector<Tensor>& velocity() { return vel_; }
  const OptimizerConfig& config() const { return cfg_; }

private:
  OptimizerConfig cfg_;
  std::vector<Param*> order_;
  std::vector<Tensor> vel_;
  std::unordered_map<const Param*, size_t> index_;
};

struct ScheduleConfig {
  double lr_max = 1e-3;
  double lr_min = 5e-6;
  int warmup_epochs = 120;
  int total_epochs = 500;
  double tau_start = 30.0;
  double tau_end = 1.0;
  int tau_anneal_epochs = 30;

  void validate() const;
};

// Linear warm-up from lr_min to lr_max, then cosine annealing down to lr_min.
double cosine_lr(int epoch, const ScheduleConfig& cfg);
// Linear from tau_start to tau_end over tau_anneal_epochs, then constant.
double tau_schedule(int epoch, const ScheduleConfig& cfg);

struct TrainConfig {
  ScheduleConfig schedule;
  OptimizerConfig optimizer;
  AugmentConfig augment;
  int batch_size = 8;
  int eval_every = 1;            // epochs between NME evaluations (0 = never)
  double failure_threshold = 10.0;
  double backbone_lr = 1e-7;     // stage-2 fine-tune backbone rate
  uint64_t seed = 1;

  void validate() const;
};

// Desk-scale schedule: 60 epochs, 10 warm-up, tau annealed over 6.
TrainConfig desk_train_config(uint64_t seed);

struct EpochMetrics {
  int epoch = 0;
  double lr = 0, tau = 0, loss = 0;
  double nme = std::numeric_limits<double>::quiet_NaN();
};

void write_metrics_csv(const std::vector<EpochMetrics>& rows, const std::string& path);

// One shuffled augmented pass; returns the mean batch loss. Deterministic
// given (cfg.seed, epoch).
double train_epoch(VanillaNet& net, const Dataset& ds, Sgd& opt, const TrainConfig& cfg, int epoch);

struct Stage1Epoch {
  double loss = 0;
  std::vector<int> steps_per_dataset;
};

// CNT stage 1: homogeneous batches drawn proportionally to dataset size,
// routed through the matching head.
Stage1Epoch cnt_stage1_epoch(MultiHeadNet& net, const std::vector<const Dataset*>& sets, Sgd& opt,
                             const TrainConfig& cfg, int epoch);

// CNT stage 2: backbone at the configured small constant rate, head on the
// normal schedule. Call drop_other_heads() first to disconnect the rest.
double finetune_epoch(MultiHeadNet& net, const std::string& head_id, const Dataset& ds, Sgd& opt,
                      const TrainConfig& cfg, int epoch);

}  // namespace sepbn
