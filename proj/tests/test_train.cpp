#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "sepbn/checkpoint.hpp"
#include "sepbn/eval.hpp"
#include "sepbn/synth.hpp"

using namespace sepbn;
namespace fs = std::filesystem;

namespace {

ScheduleConfig full_scale_schedule() {
  ScheduleConfig s;  // defaults are the full-scale training values
  return s;
}

Dataset tiny_dataset(int n, uint64_t seed, int landmarks = 5) {
  SynthConfig cfg;
  cfg.n_samples = n;
  cfg.image_size = 32;
  cfg.landmarks = landmarks;
  cfg.seed = seed;
  return synth_generate(cfg);
}

TrainConfig quick_train(uint64_t seed, int epochs) {
  TrainConfig cfg = desk_train_config(seed);
  cfg.schedule.total_epochs = epochs;
  cfg.schedule.warmup_epochs = std::max(1, epochs / 6);
  cfg.schedule.tau_anneal_epochs = std::max(1, epochs / 10);
  cfg.eval_every = 0;
  return cfg;
}

std::vector<std::vector<double>> snapshot(const std::vector<Tensor*>& ts) {
  std::vector<std::vector<double>> out;
  for (Tensor* t : ts) out.push_back(t->vec());
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("sgd basic steps") {
  OptimizerConfig ocfg;
  ocfg.momentum = 0.0;
  ocfg.weight_decay = 0.0;
  Sgd opt(ocfg);
  Param w("w", Tensor({2}, {1.0, -2.0}), true);
  opt.attach({&w});

  // zero gradient: parameters unchanged
  opt.step({&w}, 0.1);
  CHECK(w.value[0] == 1.0);
  CHECK(w.value[1] == -2.0);

  // one plain step: w - lr*g
  w.value.grad()[0] = 0.5;
  w.value.grad()[1] = -1.0;
  opt.step({&w}, 0.1);
  CHECK(w.value[0] == doctest::Approx(1.0 - 0.1 * 0.5).epsilon(1e-15));
  CHECK(w.value[1] == doctest::Approx(-2.0 + 0.1 * 1.0).epsilon(1e-15));
}

TEST_CASE("sgd momentum follows the two-step closed form") {
  OptimizerConfig ocfg;
  ocfg.momentum = 0.9;
  ocfg.weight_decay = 0.0;
  Sgd opt(ocfg);
  Param w("w", Tensor({1}, {2.0}), true);
  opt.attach({&w});
  const double lr = 0.05, g1 = 0.3, g2 = -0.7;

  w.value.grad()[0] = g1;
  opt.step({&w}, lr);
  w.value.grad()[0] = g2;
  opt.step({&w}, lr);
  // v1 = g1; w1 = w0 - lr g1; v2 = 0.9 g1 + g2; w2 = w1 - lr v2
  const double want = 2.0 - lr * g1 - lr * (0.9 * g1 + g2);
  CHECK(w.value[0] == doctest::Approx(want).epsilon(1e-15));
}

TEST_CASE("weight decay skips norm mapping parameters and biases") {
  OptimizerConfig ocfg;
  ocfg.momentum = 0.0;
  ocfg.weight_decay = 5e-4;
  Sgd opt(ocfg);
  Param w("w", Tensor({1}, {4.0}), true);
  Param gamma("gamma", Tensor({1}, {4.0}), false);
  opt.attach({&w, &gamma});
  opt.step({&w, &gamma}, 1.0);  // zero gradients
  CHECK(w.value[0] == doctest::Approx(4.0 - 5e-4 * 4.0).epsilon(1e-15));
  CHECK(gamma.value[0] == 4.0);
}

TEST_CASE("non-finite gradient raises a divergence error naming the parameter") {
  Sgd opt;
  Param w("stage1.conv.weight", Tensor({1}, {0.0}), true);
  opt.attach({&w});
  w.value.grad()[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_WITH_AS(opt.step({&w}, 0.1),
                       doctest::Contains("stage1.conv.weight"), DivergenceError);
}

TEST_CASE("cosine schedule hits the full-scale reference values") {
  ScheduleConfig cfg = full_scale_schedule();
  CHECK(cosine_lr(120, cfg) == 1e-3);                       // end of warm-up
  CHECK(cosine_lr(0, cfg) == doctest::Approx(5e-6));        // warm-up start
  CHECK(cosine_lr(310, cfg) == doctest::Approx((1e-3 + 5e-6) / 2).epsilon(1e-15));  // midpoint
  const double last = cosine_lr(499, cfg);
  CHECK(std::abs(last - 5e-6) / 5e-6 < 0.01);               // final epoch within 1%
  CHECK_THROWS_AS(cosine_lr(500, cfg), ParameterError);
  CHECK_THROWS_AS(cosine_lr(-1, cfg), ParameterError);
}

TEST_CASE("tau schedule hits the full-scale reference values") {
  ScheduleConfig cfg = full_scale_schedule();
  CHECK(tau_schedule(0, cfg) == 30.0);
  CHECK(tau_schedule(30, cfg) == 1.0);
  CHECK(tau_schedule(400, cfg) == 1.0);
  CHECK(tau_schedule(15, cfg) == doctest::Approx(15.5).epsilon(1e-15));
}

TEST_CASE("train_epoch is deterministic and batch size defaults to 8") {
  TrainConfig cfg = quick_train(12345, 12);
  CHECK(cfg.batch_size == 8);
  Dataset ds = tiny_dataset(24, 7);

  auto run = [&]() {
    Rng rng(cfg.seed);
    VanillaNet net(VanillaConfig::desk(5, NormKind::kBatchNorm, 16), rng);
    Sgd opt(cfg.optimizer);
    opt.attach(net.params());
    for (int e = 0; e < 3; ++e) train_epoch(net, ds, opt, cfg, e);
    return snapshot(net.state_tensors());
  };
  auto a = run();
  auto b = run();
  CHECK(a == b);
}

TEST_CASE("loss decreases over a short desk run") {
  TrainConfig cfg = quick_train(99, 20);
  Dataset ds = tiny_dataset(32, 8);
  Rng rng(cfg.seed);
  VanillaNet net(VanillaConfig::desk(5, NormKind::kBatchNorm, 16), rng);
  Sgd opt(cfg.optimizer);
  opt.attach(net.params());
  double first = 0, last = 0;
  for (int e = 0; e < 20; ++e) {
    const double loss = train_epoch(net, ds, opt, cfg, e);
    if (e == 0) first = loss;
    last = loss;
  }
  CHECK(last < first);
  CHECK(last < 0.8 * first);
}

TEST_CASE("train preconditions") {
  TrainConfig cfg = quick_train(1, 4);
  cfg.batch_size = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = quick_train(1, 4);
  Dataset empty;
  Rng rng(1);
  VanillaNet net(VanillaConfig::desk(5, NormKind::kBatchNorm, 16), rng);
  Sgd opt;
  CHECK_THROWS_AS(train_epoch(net, empty, opt, cfg, 0), ConfigError);
}

TEST_CASE("cnt stage 1: balanced sets get balanced head steps; isolation holds") {
  MultiHeadConfig mcfg;
  mcfg.backbone = VanillaConfig::desk(5, NormKind::kBatchNorm, 16);
  mcfg.heads = {{"synth5", 5}, {"synth3", 3}};
  TrainConfig cfg = quick_train(31, 10);

  Dataset a = tiny_dataset(120, 11, 5);
  Dataset b = tiny_dataset(120, 12, 3);
  REQUIRE(a.protocol.id == "synth5");
  REQUIRE(b.protocol.id == "synth3");

  Rng rng(cfg.seed);
  MultiHeadNet net(mcfg, rng);
  Sgd opt(cfg.optimizer);
  opt.attach(net.params());

  int steps_a = 0, steps_b = 0;
  for (int e = 0; e < 5; ++e) {
    Stage1Epoch se = cnt_stage1_epoch(net, {&a, &b}, opt, cfg, e);
    steps_a += se.steps_per_dataset[0];
    steps_b += se.steps_per_dataset[1];
  }
  const int total = steps_a + steps_b;
  CHECK(total == 5 * (240 / 8));
  const double sd = std::sqrt(total * 0.25);
  CHECK(std::abs(steps_a - total / 2.0) <= 3 * sd);

  // protocol without a head is rejected
  SynthConfig other;
  other.n_samples = 8;
  other.image_size = 32;
  other.protocol_id = "unknown";
  Dataset c = synth_generate(other);
  CHECK_THROWS_AS(cnt_stage1_epoch(net, {&c}, opt, cfg, 0), ConfigError);
}

TEST_CASE("finetune: zero backbone lr freezes the backbone bit-exactly") {
  MultiHeadConfig mcfg;
  mcfg.backbone = VanillaConfig::desk(5, NormKind::kBatchNorm, 16);
  mcfg.heads = {{"synth5", 5}, {"synth3", 3}};
  TrainConfig cfg = quick_train(32, 6);
  cfg.backbone_lr = 0.0;

  Dataset ds = tiny_dataset(24, 13, 5);
  Rng rng(cfg.seed);
  MultiHeadNet net(mcfg, rng);
  net.drop_other_heads("synth5");
  Sgd opt(cfg.optimizer);
  opt.attach(net.params());

  // conv weights change only through the learning rate; gamma/beta have no
  // decay, but running stats do move, so compare parameters only
  std::vector<std::vector<double>> backbone_before;
  for (Param* p : net.backbone_params()) backbone_before.push_back(p->value.vec());
  std::vector<std::vector<double>> head_before;
  for (Param* p : net.head_params("synth5")) head_before.push_back(p->value.vec());

  for (int e = 0; e < 3; ++e) finetune_epoch(net, "synth5", ds, opt, cfg, e);

  auto bb = net.backbone_params();
  for (size_t i = 0; i < bb.size(); ++i) CHECK(bb[i]->value.vec() == backbone_before[i]);
  auto hp = net.head_params("synth5");
  bool head_moved = false;
  for (size_t i = 0; i < hp.size(); ++i)
    if (hp[i]->value.vec() != head_before[i]) head_moved = true;
  CHECK(head_moved);
}

TEST_CASE("finetune: backbone and head receive their own learning rates") {
  MultiHeadConfig mcfg;
  mcfg.backbone = VanillaConfig::desk(5, NormKind::kBatchNorm, 16);
  mcfg.heads = {{"synth5", 5}, {"synth3", 3}};
  TrainConfig cfg = quick_train(33, 6);
  cfg.backbone_lr = 1e-7;

  Dataset ds = tiny_dataset(16, 14, 5);
  Rng rng(cfg.seed);
  MultiHeadNet net(mcfg, rng);
  net.drop_other_heads("synth5");
  Sgd opt(cfg.optimizer);
  opt.attach(net.params());

  std::vector<std::vector<double>> before;
  for (Param* p : net.backbone_params()) before.push_back(p->value.vec());
  finetune_epoch(net, "synth5", ds, opt, cfg, 0);

  // the backbone moved, but only a little
  auto bb = net.backbone_params();
  double max_delta = 0;
  bool moved = false;
  for (size_t i = 0; i < bb.size(); ++i)
    for (size_t j = 0; j < before[i].size(); ++j) {
      const double d = std::abs(bb[i]->value.vec()[j] - before[i][j]);
      if (d > 0) moved = true;
      max_delta = std::max(max_delta, d);
    }
  CHECK(moved);
  CHECK(max_delta < 1e-4);
}

TEST_CASE("checkpoint: save-load preserves eval outputs bit-exactly") {
  const fs::path dir = fs::temp_directory_path() / "sepbn_test_ckpt";
  fs::create_directories(dir);
  TrainConfig cfg = quick_train(41, 8);
  Dataset ds = tiny_dataset(16, 15);

  Rng rng(cfg.seed);
  VanillaNet net(VanillaConfig::desk(5, NormKind::kSepBN, 32), rng);
  Sgd opt(cfg.optimizer);
  opt.attach(net.params());
  cfg.schedule.tau_anneal_epochs = 2;
  for (int e = 0; e < 2; ++e) train_epoch(net, ds, opt, cfg, e);

  RunState st{2, tau_schedule(2, cfg.schedule), cfg.seed};
  net.set_tau(st.tau);  // eval uses the saved schedule state
  const std::string path = (dir / "a.bin").string();
  checkpoint_save(path, net, cfg, opt, st);

  LoadedCheckpoint loaded = checkpoint_load(path);
  REQUIRE(loaded.vanilla);
  CHECK(loaded.state.epoch == 2);
  CHECK(loaded.train.seed == cfg.seed);

  Rng drng(16);
  Tensor images({3, 3, 32, 32});
  for (int64_t i = 0; i < images.numel(); ++i) images[i] = drng.uniform();
  Tensor a = net.predict_pixels(images);
  Tensor b = loaded.vanilla->predict_pixels(images);
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);

  // save -> load -> save is byte-identical
  const std::string path2 = (dir / "b.bin").string();
  checkpoint_save(path2, *loaded.vanilla, loaded.train, loaded.opt, loaded.state);
  CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("checkpoint: resume matches the uninterrupted run bit-exactly") {
  const fs::path dir = fs::temp_directory_path() / "sepbn_test_resume";
  fs::create_directories(dir);
  TrainConfig cfg = quick_train(42, 8);
  Dataset ds = tiny_dataset(16, 17);

  // uninterrupted: 4 epochs
  Rng rng(cfg.seed);
  VanillaNet straight(VanillaConfig::desk(5, NormKind::kBatchNorm, 16), rng);
  Sgd opt(cfg.optimizer);
  opt.attach(straight.params());
  for (int e = 0; e < 4; ++e) train_epoch(straight, ds, opt, cfg, e);

  // interrupted at epoch 2
  Rng rng2(cfg.seed);
  VanillaNet part(VanillaConfig::desk(5, NormKind::kBatchNorm, 16), rng2);
  Sgd opt2(cfg.optimizer);
  opt2.attach(part.params());
  for (int e = 0; e < 2; ++e) train_epoch(part, ds, opt2, cfg, e);
  const std::string path = (dir / "mid.bin").string();
  checkpoint_save(path, part, cfg, opt2, RunState{2, 1.0, cfg.seed});

  LoadedCheckpoint resumed = checkpoint_load(path);
  for (int e = resumed.state.epoch; e < 4; ++e)
    train_epoch(*resumed.vanilla, ds, resumed.opt, resumed.train, e);

  auto a = snapshot(straight.state_tensors());
  auto b = snapshot(resumed.vanilla->state_tensors());
  CHECK(a == b);
}

TEST_CASE("checkpoint corruption is rejected") {
  const fs::path dir = fs::temp_directory_path() / "sepbn_test_corrupt";
  fs::create_directories(dir);
  TrainConfig cfg = quick_train(43, 4);
  Rng rng(cfg.seed);
  VanillaNet net(VanillaConfig::desk(5, NormKind::kBatchNorm, 16), rng);
  Sgd opt(cfg.optimizer);
  opt.attach(net.params());
  const std::string path = (dir / "c.bin").string();
  checkpoint_save(path, net, cfg, opt, RunState{0, 1.0, cfg.seed});

  // corrupt magic
  std::string bytes = slurp(path);
  bytes[0] = 'X';
  std::ofstream(dir / "bad_magic.bin", std::ios::binary) << bytes;
  CHECK_THROWS_AS(checkpoint_load((dir / "bad_magic.bin").string()), CheckpointError);

  // truncation
  std::ofstream(dir / "trunc.bin", std::ios::binary)
      << slurp(path).substr(0, bytes.size() - 999);
  CHECK_THROWS_AS(checkpoint_load((dir / "trunc.bin").string()), CheckpointError);

  CHECK_THROWS_AS(checkpoint_load((dir / "missing.bin").string()), IoError);
}

TEST_CASE("multihead checkpoint reloads including a dropped-head finetune state") {
  const fs::path dir = fs::temp_directory_path() / "sepbn_test_mh";
  fs::create_directories(dir);
  MultiHeadConfig mcfg;
  mcfg.backbone = VanillaConfig::desk(5, NormKind::kBatchNorm, 16);
  mcfg.heads = {{"synth5", 5}, {"synth3", 3}};
  TrainConfig cfg = quick_train(44, 4);
  Rng rng(cfg.seed);
  MultiHeadNet net(mcfg, rng);
  net.drop_other_heads("synth3");
  Sgd opt(cfg.optimizer);
  opt.attach(net.params());
  const std::string path = (dir / "mh.bin").string();
  checkpoint_save(path, net, cfg, opt, RunState{0, 1.0, cfg.seed});

  LoadedCheckpoint loaded = checkpoint_load(path);
  REQUIRE(loaded.multihead);
  CHECK(loaded.multihead->head_ids() == std::vector<std::string>{"synth3"});
  Rng drng(18);
  Tensor images({2, 3, 16, 16});
  for (int64_t i = 0; i < images.numel(); ++i) images[i] = drng.uniform();
  Tensor a = net.predict_pixels(images, "synth3");
  Tensor b = loaded.multihead->predict_pixels(images, "synth3");
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("metrics csv has the fixed header") {
  const fs::path dir = fs::temp_directory_path() / "sepbn_test_metrics";
  fs::create_directories(dir);
  std::vector<EpochMetrics> rows(2);
  rows[0] = {0, 1e-3, 30.0, 0.5, 12.0};
  rows[1].epoch = 1;
  write_metrics_csv(rows, (dir / "m.csv").string());
  std::ifstream in(dir / "m.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "epoch,lr,tau,loss,nme");
}

TEST_CASE("cnt stage 1 with one dataset degenerates to plain epoch semantics") {
  MultiHeadConfig mcfg;
  mcfg.backbone = VanillaConfig::desk(5, NormKind::kBatchNorm, 16);
  mcfg.heads = {{"synth5", 5}, {"synth3", 3}};
  TrainConfig cfg = quick_train(45, 6);
  Dataset ds = tiny_dataset(40, 19, 5);

  Rng rng(cfg.seed);
  MultiHeadNet net(mcfg, rng);
  Sgd opt(cfg.optimizer);
  opt.attach(net.params());

  std::vector<std::vector<double>> head3_before;
  for (Param* p : net.head_params("synth3")) head3_before.push_back(p->value.vec());

  Stage1Epoch se = cnt_stage1_epoch(net, {&ds}, opt, cfg, 0);
  CHECK(se.steps_per_dataset == std::vector<int>{40 / 8});
  CHECK(std::isfinite(se.loss));

  // only the matching head trains; the other stays at initialization
  auto h3 = net.head_params("synth3");
  for (size_t i = 0; i < h3.size(); ++i) CHECK(h3[i]->value.vec() == head3_before[i]);
  double moved = 0;
  for (Param* p : net.head_params("synth5"))
    for (double v : p->value.grad()) moved += std::abs(v);
  CHECK(moved > 0.0);
}
