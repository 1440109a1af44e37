#include "sepbn/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "sepbn/ops.hpp"

namespace sepbn {

namespace {

constexpr uint64_t kStreamVanilla = 0x5431;
constexpr uint64_t kStreamStage1 = 0xC371;
constexpr uint64_t kStreamFinetune = 0xF17E;

Rng epoch_stream(uint64_t seed, uint64_t tag, int epoch) {
  return Rng(seed).split(tag).split(static_cast<uint64_t>(epoch));
}

}  // namespace

void Sgd::attach(const std::vector<Param*>& params) {
  order_ = params;
  vel_.clear();
  index_.clear();
  vel_.reserve(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    vel_.emplace_back(params[i]->value.shape());
    index_[params[i]] = i;
  }
}

void Sgd::step(const std::vector<Param*>& params, double lr) {
  step_groups({Group{params, lr}});
}

void Sgd::step_groups(const std::vector<Group>& groups) {
  if (!attached()) throw std::logic_error("optimizer used before attach()");
  for (const Group& g : groups) {
    for (Param* p : g.params) {
      auto it = index_.find(p);
      if (it == index_.end()) throw std::logic_error("parameter '" + p->name + "' not attached");
      Tensor& v = vel_[it->second];
      const auto& grad = p->value.grad();
      const double wd = p->decay ? cfg_.weight_decay : 0.0;
      for (int64_t i = 0; i < p->value.numel(); ++i) {
        const double gi = grad[static_cast<size_t>(i)];
        if (!std::isfinite(gi))
          throw DivergenceError("non-finite gradient in parameter '" + p->name + "' at element " +
                                std::to_string(i));
        v[i] = cfg_.momentum * v[i] + gi + wd * p->value[i];
        p->value[i] -= g.lr * v[i];
      }
    }
  }
}

void ScheduleConfig::validate() const {
  if (lr_min > lr_max) throw ConfigError("lr_min must be <= lr_max");
  if (!(tau_end > 0) || !(tau_start > 0)) throw ConfigError("tau values must be > 0");
  if (warmup_epochs < 0 || tau_anneal_epochs < 0) throw ConfigError("epoch counts must be >= 0");
  if (total_epochs <= warmup_epochs)
    throw ConfigError("total_epochs must exceed warmup_epochs");
}

double cosine_lr(int epoch, const ScheduleConfig& cfg) {
  cfg.validate();
  if (epoch < 0 || epoch >= cfg.total_epochs)
    throw ParameterError("epoch " + std::to_string(epoch) + " outside [0," +
                         std::to_string(cfg.total_epochs) + ")");
  if (epoch < cfg.warmup_epochs)
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * epoch / cfg.warmup_epochs;
  const double t = static_cast<double>(epoch - cfg.warmup_epochs) /
                   static_cast<double>(cfg.total_epochs - cfg.warmup_epochs);
  return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(M_PI * t));
}

double tau_schedule(int epoch, const ScheduleConfig& cfg) {
  cfg.validate();
  if (epoch < 0) throw ParameterError("epoch must be >= 0");
  if (cfg.tau_anneal_epochs == 0 || epoch >= cfg.tau_anneal_epochs) return cfg.tau_end;
  return cfg.tau_start + (cfg.tau_end - cfg.tau_start) * epoch / cfg.tau_anneal_epochs;
}

void TrainConfig::validate() const {
  schedule.validate();
  augment.validate();
  if (batch_size < 2) throw ConfigError("batch size must be >= 2 for batch statistics");
  if (eval_every < 0) throw ConfigError("eval_every must be >= 0");
  if (!(failure_threshold > 0)) throw ConfigError("failure threshold must be > 0");
  if (backbone_lr < 0) throw ConfigError("backbone lr must be >= 0");
}

TrainConfig desk_train_config(uint64_t seed) {
  TrainConfig cfg;
  cfg.schedule.total_epochs = 60;
  cfg.schedule.warmup_epochs = 10;
  cfg.schedule.tau_anneal_epochs = 6;
  cfg.seed = seed;
  return cfg;
}

void write_metrics_csv(const std::vector<EpochMetrics>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write metrics '" + path + "'");
  out << "epoch,lr,tau,loss,nme\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.lr, r.tau, r.loss,
                  r.nme);
    out << buf;
  }
}

namespace {

struct Batch {
  Tensor images;
  Tensor targets;
  std::vector<int> domains;
};

Batch make_batch(const Dataset& ds, const std::vector<int>& idx, const TrainConfig& cfg,
                 int input_size, int landmarks, Rng& aug_rng) {
  const int n = static_cast<int>(idx.size());
  Batch b{Tensor({n, 3, input_size, input_size}), Tensor({n, 2 * landmarks}), {}};
  b.domains.resize(static_cast<size_t>(n));
  const int64_t plane = static_cast<int64_t>(3) * input_size * input_size;
  for (int i = 0; i < n; ++i) {
    const LandmarkSample& raw = ds.samples[static_cast<size_t>(idx[static_cast<size_t>(i)])];
    LandmarkSample aug = augment(raw, cfg.augment, ds.protocol, aug_rng);
    Crop crop = crop_resize(aug, input_size);
    std::copy_n(crop.image.data(), plane, b.images.data() + i * plane);
    for (int j = 0; j < 2 * landmarks; ++j)
      b.targets[static_cast<int64_t>(i) * 2 * landmarks + j] =
          pixel_to_offset(crop.landmarks[static_cast<size_t>(j)], input_size);
    b.domains[static_cast<size_t>(i)] = aug.domain;
  }
  return b;
}

void check_loss(double loss, int epoch, int batch) {
  if (!std::isfinite(loss))
    throw DivergenceError("non-finite loss " + std::to_string(loss) + " at epoch " +
                          std::to_string(epoch) + ", batch " + std::to_string(batch));
}

}  // namespace

double train_epoch(VanillaNet& net, const Dataset& ds, Sgd& opt, const TrainConfig& cfg,
                   int epoch) {
  cfg.validate();
  if (ds.samples.empty()) throw ConfigError("cannot train on an empty dataset");
  if (!opt.attached()) opt.attach(net.params());

  Rng base = epoch_stream(cfg.seed, kStreamVanilla, epoch);
  Rng order_rng = base.split(0);
  Rng aug_rng = base.split(1);

  std::vector<int> order(ds.samples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  order_rng.shuffle(order);

  net.set_tau(tau_schedule(epoch, cfg.schedule));
  const double lr = cosine_lr(epoch, cfg.schedule);
  const int L = net.config().landmarks;
  auto params = net.params();

  double loss_sum = 0;
  int batches = 0;
  for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
    const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
    std::vector<int> idx(order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(end));
    Batch b = make_batch(ds, idx, cfg, net.config().input_size, L, aug_rng);

    Ctx ctx;
    ctx.mode = Mode::kTrain;
    ctx.domains = &b.domains;
    net.zero_grad();
    Tensor pred = net.forward(b.images, ctx);
    Tensor grad;
    const double loss = ops::l1_loss(pred, b.targets, &grad);
    check_loss(loss, epoch, batches);
    net.backward(grad);
    opt.step(params, lr);
    loss_sum += loss;
    ++batches;
  }
  return loss_sum / batches;
}

Stage1Epoch cnt_stage1_epoch(MultiHeadNet& net, const std::vector<const Dataset*>& sets, Sgd& opt,
                             const TrainConfig& cfg, int epoch) {
  cfg.validate();
  if (sets.empty()) throw ConfigError("stage 1 needs at least one dataset");
  std::vector<int> sizes;
  int total = 0;
  for (const Dataset* ds : sets) {
    if (!net.has_head(ds->protocol.id))
      throw ConfigError("dataset protocol '" + ds->protocol.id + "' has no registered head");
    sizes.push_back(ds->size());
    total += ds->size();
  }
  if (!opt.attached()) opt.attach(net.params());

  Rng base = epoch_stream(cfg.seed, kStreamStage1, epoch);
  Rng aug_rng = base.split(1);
  ProportionalSampler sampler(sizes, base.split(0));

  net.set_tau(tau_schedule(epoch, cfg.schedule));
  const double lr = cosine_lr(epoch, cfg.schedule);
  const int input_size = net.config().backbone.input_size;
  auto params = net.params();

  Stage1Epoch out;
  out.steps_per_dataset.assign(sets.size(), 0);
  const int steps = std::max(1, total / cfg.batch_size);
  double loss_sum = 0;
  for (int step = 0; step < steps; ++step) {
    const int d = sampler.choose_dataset();
    const Dataset& ds = *sets[static_cast<size_t>(d)];
    std::vector<int> idx(static_cast<size_t>(cfg.batch_size));
    for (int i = 0; i < cfg.batch_size; ++i) idx[static_cast<size_t>(i)] = sampler.next_index(d);

    Batch b = make_batch(ds, idx, cfg, input_size, ds.protocol.landmarks, aug_rng);
    Ctx ctx;
    ctx.mode = Mode::kTrain;
    ctx.domains = &b.domains;
    net.zero_grad();
    Tensor pred = net.forward(b.images, ds.protocol.id, ctx);
    Tensor grad;
    const double loss = ops::l1_loss(pred, b.targets, &grad);
    check_loss(loss, epoch, step);
    net.backward(grad);
    opt.step(params, lr);
    loss_sum += loss;
    out.steps_per_dataset[static_cast<size_t>(d)] += 1;
  }
  out.loss = loss_sum / steps;
  return out;
}

double finetune_epoch(MultiHeadNet& net, const std::string& head_id, const Dataset& ds, Sgd& opt,
                      const TrainConfig& cfg, int epoch) {
  cfg.validate();
  if (!net.has_head(head_id)) throw ConfigError("unknown fine-tune target '" + head_id + "'");
  if (ds.protocol.id != head_id)
    throw ConfigError("fine-tune dataset protocol '" + ds.protocol.id + "' != head '" + head_id + "'");
  if (!opt.attached()) opt.attach(net.params());

  Rng base = epoch_stream(cfg.seed, kStreamFinetune, epoch);
  Rng order_rng = base.split(0);
  Rng aug_rng = base.split(1);

  std::vector<int> order(ds.samples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  order_rng.shuffle(order);

  net.set_tau(tau_schedule(epoch, cfg.schedule));
  const double head_lr = cosine_lr(epoch, cfg.schedule);
  const int input_size = net.config().backbone.input_size;
  const int L = net.head_landmarks(head_id);

  std::vector<Sgd::Group> groups{{net.backbone_params(), cfg.backbone_lr},
                                 {net.head_params(head_id), head_lr}};

  double loss_sum = 0;
  int batches = 0;
  for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
    const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
    std::vector<int> idx(order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(end));
    Batch b = make_batch(ds, idx, cfg, input_size, L, aug_rng);

    Ctx ctx;
    ctx.mode = Mode::kTrain;
    ctx.domains = &b.domains;
    net.zero_grad();
    Tensor pred = net.forward(b.images, head_id, ctx);
    Tensor grad;
    const double loss = ops::l1_loss(pred, b.targets, &grad);
    check_loss(loss, epoch, batches);
    net.backward(grad);
    opt.step_groups(groups);
    loss_sum += loss;
    ++batches;
  }
  return loss_sum / batches;
}

}  // namespace sepbn
