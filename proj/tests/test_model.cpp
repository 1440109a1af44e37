#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sepbn/gradcheck.hpp"
#include "sepbn/model.hpp"
#include "sepbn/ops.hpp"

using namespace sepbn;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

GradCheckReport check_net(VanillaNet& net, int batch, int samples, uint64_t seed) {
  Rng rng(seed);
  Tensor images = random_tensor({batch, 3, net.config().input_size, net.config().input_size}, rng,
                                0.0, 1.0);
  Tensor targets = random_tensor({batch, 2 * net.config().landmarks}, rng, -0.5, 0.5);
  std::vector<int> domains(static_cast<size_t>(batch));
  for (auto& d : domains) d = static_cast<int>(rng.below(net.config().sepbn.k));
  Ctx ctx;
  ctx.mode = Mode::kTrain;
  ctx.domains = &domains;

  auto loss = [&]() { return ops::l1_loss(net.forward(images, ctx), targets, nullptr); };
  auto fwd_bwd = [&]() {
    net.zero_grad();
    Tensor g;
    ops::l1_loss(net.forward(images, ctx), targets, &g);
    net.backward(g);
  };
  Rng pick(seed + 1);
  return grad_check(net.params(), loss, fwd_bwd, kGradCheckStep, samples, pick);
}

}  // namespace

TEST_CASE("full vanilla network reproduces the stage shape progression") {
  Rng rng(50);
  VanillaConfig cfg = VanillaConfig::full(19);
  VanillaNet net(cfg, rng);
  Tensor x = random_tensor({1, 3, 128, 128}, rng, 0, 1);

  // spatial halves per stage, channels double from 64 to 2048
  const int want_ch[6] = {64, 128, 256, 512, 1024, 2048};
  const int want_sp[6] = {64, 32, 16, 8, 4, 2};
  Ctx ctx;
  ctx.mode = Mode::kEval;
  Tensor cur = x;
  auto layers = net.layers();
  int stage = 0;
  for (size_t i = 0; i < layers.size() && stage < 6; ++i) {
    cur = layers[i]->forward(cur, ctx);
    if ((i + 1) % 4 == 0) {  // conv, norm, act, pool
      CHECK(cur.dim(1) == want_ch[stage]);
      CHECK(cur.dim(2) == want_sp[stage]);
      CHECK(cur.dim(3) == want_sp[stage]);
      ++stage;
    }
  }
  CHECK(stage == 6);
  // flatten sees 2*2*2048 = 8192, head ends at 2L
  for (size_t i = 24; i < layers.size(); ++i) cur = layers[i]->forward(cur, ctx);
  CHECK(cur.shape() == std::vector<int>{1, 38});
}

TEST_CASE("desk parameter count matches the closed-form count") {
  Rng rng(51);
  VanillaNet net(VanillaConfig::desk(5), rng);
  // convs: (8*3+ ... )*9 + biases; bn: 2C per stage; fc1 128x1024+128; fc2 10x128+10
  const int64_t stage_params = (8 * 3 * 9 + 8 + 16) + (16 * 8 * 9 + 16 + 32) +
                               (32 * 16 * 9 + 32 + 64) + (64 * 32 * 9 + 64 + 128);
  const int64_t head_params = (128 * 1024 + 128) + (10 * 128 + 10);
  CHECK(net.param_count() == stage_params + head_params);
  CHECK(net.param_count() == 157258);
}

TEST_CASE("zero image and zero-initialized final linear give zero raw output") {
  Rng rng(52);
  VanillaNet net(VanillaConfig::desk(5), rng);  // zero_final defaults true
  Tensor x({2, 3, 64, 64});
  Ctx ctx;
  Tensor y = net.forward(x, ctx);
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(y[i] == 0.0);
  // and the pixel convention puts that at the crop center
  Tensor px = offsets_to_pixels(y, 64);
  for (int64_t i = 0; i < px.numel(); ++i) CHECK(px[i] == doctest::Approx(32.0));
}

TEST_CASE("desk forward shapes and input validation") {
  Rng rng(53);
  VanillaNet net(VanillaConfig::desk(5), rng);
  Tensor batch8 = random_tensor({8, 3, 64, 64}, rng, 0, 1);
  Ctx ctx;
  CHECK(net.forward(batch8, ctx).shape() == std::vector<int>{8, 10});
  Tensor wrong = random_tensor({1, 3, 32, 32}, rng, 0, 1);
  CHECK_THROWS_AS(net.forward(wrong, ctx), DimensionError);
}

TEST_CASE("config validation") {
  VanillaConfig cfg = VanillaConfig::desk(5);
  cfg.norm_mask.pop_back();
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = VanillaConfig::desk(5);
  cfg.input_size = 60;  // not divisible by 16
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("eval-mode output is independent of batch composition") {
  Rng rng(54);
  VanillaConfig cfg = VanillaConfig::desk(5, NormKind::kSepBN, 32);
  VanillaNet net(cfg, rng, /*zero_final=*/false);
  Tensor batch = random_tensor({4, 3, 32, 32}, rng, 0, 1);
  Ctx eval;
  eval.mode = Mode::kEval;
  Tensor ybatch = net.forward(batch, eval);
  Tensor one({1, 3, 32, 32});
  std::copy_n(batch.data(), one.numel(), one.data());
  Tensor yone = net.forward(one, eval);
  for (int64_t i = 0; i < yone.numel(); ++i)
    CHECK(yone[i] == doctest::Approx(ybatch[i]).epsilon(1e-12));
}

TEST_CASE("set_tau reaches every attention layer") {
  Rng rng(55);
  VanillaNet net(VanillaConfig::desk(5, NormKind::kSepBN, 32), rng);
  net.set_tau(17.5);
  int seen = 0;
  for (Layer* l : net.layers())
    if (auto* s = dynamic_cast<SepBN*>(l)) {
      CHECK(s->tau() == 17.5);
      ++seen;
    }
  CHECK(seen == 4);
}

TEST_CASE("desk network passes gradcheck for every norm variant") {
  // bn
  {
    Rng rng(56);
    VanillaNet net(VanillaConfig::desk(5, NormKind::kBatchNorm, 32), rng, false);
    CHECK(check_net(net, 2, 40, 561).max_rel_err() < 1e-4);
  }
  // simple sepbn
  {
    Rng rng(57);
    VanillaConfig cfg = VanillaConfig::desk(5, NormKind::kSimple, 32);
    cfg.sepbn.reduction = 8;  // smallest stage has 8 channels
    VanillaNet net(cfg, rng, false);
    net.set_tau(2.0);
    CHECK(check_net(net, 2, 40, 571).max_rel_err() < 1e-4);
  }
  // grouped-attention sepbn, soft aggregation
  {
    Rng rng(58);
    VanillaNet net(VanillaConfig::desk(5, NormKind::kSepBN, 32), rng, false);
    net.set_tau(2.0);
    CHECK(check_net(net, 2, 40, 581).max_rel_err() < 1e-4);
  }
  // brute-force
  {
    Rng rng(59);
    VanillaNet net(VanillaConfig::desk(5, NormKind::kBruteForce, 32), rng, false);
    CHECK(check_net(net, 3, 40, 591).max_rel_err() < 1e-4);
  }
}

TEST_CASE("multihead config rules") {
  MultiHeadConfig cfg;
  cfg.backbone = VanillaConfig::desk(5, NormKind::kBatchNorm, 32);
  cfg.heads = {{"a", 5}};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);  // needs >= 2 heads
  cfg.heads = {{"a", 5}, {"a", 3}};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);  // duplicate id
  cfg.heads = {{"a", 5}, {"b", 3}};
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("multihead heads have per-protocol output lengths") {
  Rng rng(60);
  MultiHeadConfig cfg;
  cfg.backbone = VanillaConfig::desk(5, NormKind::kBatchNorm, 32);
  cfg.heads = {{"aflw19", 19}, {"wflw98", 98}};
  MultiHeadNet net(cfg, rng);
  Tensor x = random_tensor({2, 3, 32, 32}, rng, 0, 1);
  Ctx ctx;
  CHECK(net.forward(x, "aflw19", ctx).shape() == std::vector<int>{2, 38});
  CHECK(net.forward(x, "wflw98", ctx).shape() == std::vector<int>{2, 196});
  CHECK_THROWS_AS(net.forward(x, "nope", ctx), RoutingError);
}

TEST_CASE("backbone is shared: a step through head A changes head B outputs") {
  Rng rng(61);
  MultiHeadConfig cfg;
  cfg.backbone = VanillaConfig::desk(5, NormKind::kBatchNorm, 32);
  cfg.heads = {{"a", 5}, {"b", 3}};
  MultiHeadNet net(cfg, rng, /*zero_final=*/false);
  Tensor x = random_tensor({2, 3, 32, 32}, rng, 0, 1);
  Ctx eval;
  eval.mode = Mode::kEval;
  Tensor before = net.forward(x, "b", eval);

  // manual sgd-free step: nudge every backbone parameter along its gradient
  Ctx train;
  Tensor target = random_tensor({2, 10}, rng);
  net.zero_grad();
  Tensor g;
  ops::l1_loss(net.forward(x, "a", train), target, &g);
  net.backward(g);
  for (Param* p : net.backbone_params())
    for (int64_t i = 0; i < p->value.numel(); ++i)
      p->value[i] -= 0.5 * p->value.grad()[static_cast<size_t>(i)];

  Tensor after = net.forward(x, "b", eval);
  double diff = 0;
  for (int64_t i = 0; i < after.numel(); ++i) diff += std::abs(after[i] - before[i]);
  CHECK(diff > 0.0);
}

TEST_CASE("head isolation: gradients and updates through A leave B untouched") {
  Rng rng(62);
  MultiHeadConfig cfg;
  cfg.backbone = VanillaConfig::desk(5, NormKind::kBatchNorm, 32);
  cfg.heads = {{"a", 5}, {"b", 3}};
  MultiHeadNet net(cfg, rng, false);
  Tensor x = random_tensor({2, 3, 32, 32}, rng, 0, 1);

  std::vector<std::vector<double>> b_before;
  for (Param* p : net.head_params("b")) b_before.push_back(p->value.vec());

  Ctx train;
  Tensor target = random_tensor({2, 10}, rng);
  net.zero_grad();
  Tensor g;
  ops::l1_loss(net.forward(x, "a", train), target, &g);
  net.backward(g);

  auto bparams = net.head_params("b");
  for (size_t i = 0; i < bparams.size(); ++i) {
    for (double v : bparams[i]->value.grad()) CHECK(v == 0.0);
    CHECK(bparams[i]->value.vec() == b_before[i]);
  }
  // head A did receive gradient
  double mass = 0;
  for (Param* p : net.head_params("a"))
    for (double v : p->value.grad()) mass += std::abs(v);
  CHECK(mass > 0.0);
}

TEST_CASE("backbone gradient equals the sum of per-head microbatch contributions") {
  Rng rng(63);
  MultiHeadConfig cfg;
  cfg.backbone = VanillaConfig::desk(5, NormKind::kBatchNorm, 32);
  cfg.heads = {{"a", 5}, {"b", 3}};
  MultiHeadNet net(cfg, rng, false);
  Tensor xa = random_tensor({2, 3, 32, 32}, rng, 0, 1);
  Tensor xb = random_tensor({2, 3, 32, 32}, rng, 0, 1);
  Tensor ta = random_tensor({2, 10}, rng);
  Tensor tb = random_tensor({2, 6}, rng);

  // eval-mode normalization decouples samples, so contributions add exactly
  Ctx ctx;
  ctx.mode = Mode::kEval;

  net.zero_grad();
  Tensor g;
  ops::l1_loss(net.forward(xa, "a", ctx), ta, &g);
  net.backward(g);
  ops::l1_loss(net.forward(xb, "b", ctx), tb, &g);
  net.backward(g);
  std::vector<std::vector<double>> accumulated;
  for (Param* p : net.backbone_params()) accumulated.push_back(p->value.grad());

  net.zero_grad();
  ops::l1_loss(net.forward(xa, "a", ctx), ta, &g);
  net.backward(g);
  std::vector<std::vector<double>> only_a;
  for (Param* p : net.backbone_params()) only_a.push_back(p->value.grad());

  net.zero_grad();
  ops::l1_loss(net.forward(xb, "b", ctx), tb, &g);
  net.backward(g);
  auto bb = net.backbone_params();
  for (size_t i = 0; i < bb.size(); ++i) {
    const auto& gb = bb[i]->value.grad();
    for (size_t j = 0; j < gb.size(); ++j)
      CHECK(accumulated[i][j] == doctest::Approx(only_a[i][j] + gb[j]).epsilon(1e-12));
  }
}

TEST_CASE("drop_other_heads keeps only the target branch") {
  Rng rng(64);
  MultiHeadConfig cfg;
  cfg.backbone = VanillaConfig::desk(5, NormKind::kBatchNorm, 32);
  cfg.heads = {{"a", 5}, {"b", 3}};
  MultiHeadNet net(cfg, rng);
  net.drop_other_heads("b");
  CHECK(net.head_ids() == std::vector<std::string>{"b"});
  CHECK_THROWS_AS(net.drop_other_heads("a"), RoutingError);
  Tensor x = random_tensor({1, 3, 32, 32}, rng, 0, 1);
  Ctx ctx;
  ctx.mode = Mode::kEval;
  CHECK(net.forward(x, "b", ctx).shape() == std::vector<int>{1, 6});
}

TEST_CASE("partial norm mask places sepbn only at the chosen stages") {
  Rng rng(65);
  VanillaConfig cfg = VanillaConfig::desk(5, NormKind::kBatchNorm, 32);
  cfg.norm_mask = {NormKind::kBatchNorm, NormKind::kBatchNorm, NormKind::kSepBN,
                   NormKind::kSepBN};
  VanillaNet net(cfg, rng, false);

  int bn_count = 0, sep_count = 0;
  for (Layer* l : net.layers()) {
    if (dynamic_cast<BatchNorm*>(l)) ++bn_count;
    if (dynamic_cast<SepBN*>(l)) ++sep_count;
  }
  CHECK(bn_count == 2);
  CHECK(sep_count == 2);

  Tensor x = random_tensor({2, 3, 32, 32}, rng, 0, 1);
  Ctx ctx;
  CHECK(net.forward(x, ctx).shape() == std::vector<int>{2, 10});
  CHECK(check_net(net, 2, 30, 651).max_rel_err() < 1e-4);
}
