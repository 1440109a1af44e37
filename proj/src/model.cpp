#include "sepbn/model.hpp"

#include <algorithm>
#include <numeric>

namespace sepbn {

const char* norm_kind_name(NormKind k) {
  switch (k) {
    case NormKind::kBatchNorm: return "bn";
    case NormKind::kSepBN: return "sepbn";
    case NormKind::kBruteForce: return "bruteforce";
    case NormKind::kSimple: return "simple";
  }
  return "?";
}

NormKind norm_kind_from_name(const std::string& s) {
  if (s == "bn") return NormKind::kBatchNorm;
  if (s == "sepbn") return NormKind::kSepBN;
  if (s == "bruteforce") return NormKind::kBruteForce;
  if (s == "simple") return NormKind::kSimple;
  throw ConfigError("unknown norm kind '" + s + "' (expected bn|sepbn|bruteforce|simple)");
}

void VanillaConfig::validate() const {
  const int s = stages();
  if (s < 1) throw ConfigError("network needs at least one stage");
  if (!norm_mask.empty() && static_cast<int>(norm_mask.size()) != s)
    throw ConfigError("norm mask has " + std::to_string(norm_mask.size()) + " entries for " +
                      std::to_string(s) + " stages");
  int div = 1;
  for (int i = 0; i < s; ++i) div *= 2;
  if (input_size <= 0 || input_size % div != 0)
    throw ConfigError("input size " + std::to_string(input_size) + " must be divisible by 2^" +
                      std::to_string(s));
  if (landmarks < 1) throw ConfigError("landmark count must be >= 1");
  if (hidden_width < 1) throw ConfigError("hidden width must be >= 1");
}

VanillaConfig VanillaConfig::full(int landmarks, NormKind norm) {
  VanillaConfig cfg;
  cfg.input_size = 128;
  cfg.channels = {64, 128, 256, 512, 1024, 2048};
  cfg.hidden_width = 1024;
  cfg.landmarks = landmarks;
  cfg.norm_mask.assign(cfg.channels.size(), norm);
  return cfg;
}

VanillaConfig VanillaConfig::desk(int landmarks, NormKind norm, int input_size) {
  VanillaConfig cfg;
  cfg.input_size = input_size;
  cfg.channels = {8, 16, 32, 64};
  cfg.hidden_width = 128;
  cfg.landmarks = landmarks;
  cfg.norm_mask.assign(cfg.channels.size(), norm);
  return cfg;
}

Tensor offsets_to_pixels(const Tensor& raw, int input_size) {
  Tensor px(raw.shape());
  for (int64_t i = 0; i < raw.numel(); ++i) px[i] = (raw[i] + 0.5) * input_size;
  return px;
}

double pixel_to_offset(double px, int input_size) { return px / input_size - 0.5; }

namespace {

std::unique_ptr<Layer> make_norm(const std::string& name, NormKind kind, int channels,
                                 const SepBNParams& p, Rng& rng) {
  switch (kind) {
    case NormKind::kBatchNorm: return std::make_unique<BatchNorm>(name, channels);
    case NormKind::kSepBN:
      return std::make_unique<SepBN>(name, channels, p.k, p.g, p.t, rng, p.aggregation);
    case NormKind::kBruteForce: return std::make_unique<BruteForceSepBN>(name, channels, p.k);
    case NormKind::kSimple: {
      // narrow stages cannot honor the full SE reduction rate; fall back to
      // the largest divisor of C not exceeding it
      const int r = std::gcd(p.reduction, channels);
      return std::make_unique<SimpleSepBN>(name, channels, p.k, r, rng);
    }
  }
  throw ConfigError("unreachable norm kind");
}

Tensor run_forward(std::vector<std::unique_ptr<Layer>>& seq, const Tensor& x, const Ctx& ctx) {
  Tensor cur = x;
  for (auto& layer : seq) cur = layer->forward(cur, ctx);
  return cur;
}

Tensor run_backward(std::vector<std::unique_ptr<Layer>>& seq, const Tensor& g) {
  Tensor cur = g;
  for (auto it = seq.rbegin(); it != seq.rend(); ++it) cur = (*it)->backward(cur);
  return cur;
}

}  // namespace

std::vector<std::unique_ptr<Layer>> build_stages(const VanillaConfig& cfg, Rng& rng) {
  std::vector<std::unique_ptr<Layer>> seq;
  int in_ch = 3;
  for (int s = 0; s < cfg.stages(); ++s) {
    const std::string prefix = "stage" + std::to_string(s + 1);
    const int out_ch = cfg.channels[static_cast<size_t>(s)];
    const NormKind kind = cfg.norm_mask.empty() ? NormKind::kBatchNorm
                                                : cfg.norm_mask[static_cast<size_t>(s)];
    seq.push_back(std::make_unique<Conv2d>(prefix + ".conv", in_ch, out_ch, 3, 1, 1, rng));
    seq.push_back(make_norm(prefix + ".norm", kind, out_ch, cfg.sepbn, rng));
    seq.push_back(std::make_unique<LeakyRelu>(prefix + ".act", 1e-2));
    seq.push_back(std::make_unique<MaxPool2d>(prefix + ".pool", 2, 2));
    in_ch = out_ch;
  }
  return seq;
}

VanillaNet::VanillaNet(const VanillaConfig& cfg, Rng& rng, bool zero_final) : cfg_(cfg) {
  cfg_.validate();
  seq_ = build_stages(cfg_, rng);
  const int final_spatial = cfg_.input_size >> cfg_.stages();
  const int flat = cfg_.channels.back() * final_spatial * final_spatial;
  seq_.push_back(std::make_unique<Flatten>("head.flatten"));
  seq_.push_back(std::make_unique<Linear>("head.fc1", flat, cfg_.hidden_width, rng));
  seq_.push_back(std::make_unique<LeakyRelu>("head.act", 1e-2));
  auto out = std::make_unique<Linear>("head.fc2", cfg_.hidden_width, 2 * cfg_.landmarks, rng);
  if (zero_final) out->zero_init();
  seq_.push_back(std::move(out));
}

Tensor VanillaNet::forward(const Tensor& images, const Ctx& ctx) {
  if (images.ndim() != 4 || images.dim(1) != 3 || images.dim(2) != cfg_.input_size ||
      images.dim(3) != cfg_.input_size)
    throw DimensionError("expected Nx3x" + std::to_string(cfg_.input_size) + "x" +
                         std::to_string(cfg_.input_size) + " images, got " + images.shape_str());
  return run_forward(seq_, images, ctx);
}

Tensor VanillaNet::backward(const Tensor& grad_out) { return run_backward(seq_, grad_out); }

Tensor VanillaNet::predict_pixels(const Tensor& images) {
  Ctx ctx;
  ctx.mode = Mode::kEval;
  return offsets_to_pixels(forward(images, ctx), cfg_.input_size);
}

std::vector<Param*> VanillaNet::params() {
  std::vector<Param*> out;
  for (auto& l : seq_) l->collect_params(out);
  return out;
}

std::vector<Tensor*> VanillaNet::state_tensors() {
  std::vector<Tensor*> out;
  for (auto& l : seq_) l->collect_state(out);
  return out;
}

std::vector<Layer*> VanillaNet::layers() {
  std::vector<Layer*> out;
  for (auto& l : seq_) out.push_back(l.get());
  return out;
}

void VanillaNet::zero_grad() {
  for (Param* p : params()) p->value.zero_grad();
}

void VanillaNet::set_tau(double tau) {
  for (auto& l : seq_) l->set_tau(tau);
}

int64_t VanillaNet::param_count() {
  int64_t n = 0;
  for (Param* p : params()) n += p->value.numel();
  return n;
}

void MultiHeadConfig::validate(bool allow_single_head) const {
  backbone.validate();
  if (heads.empty() || (!allow_single_head && heads.size() < 2))
    throw ConfigError("multi-head network needs at least 2 heads");
  for (size_t i = 0; i < heads.size(); ++i) {
    if (heads[i].landmarks < 1) throw ConfigError("head landmark count must be >= 1");
    for (size_t j = i + 1; j < heads.size(); ++j)
      if (heads[i].protocol_id == heads[j].protocol_id)
        throw ConfigError("duplicate head id '" + heads[i].protocol_id + "'");
  }
  if (head_hidden < 1) throw ConfigError("head hidden width must be >= 1");
}

MultiHeadNet::MultiHeadNet(const MultiHeadConfig& cfg, Rng& rng, bool zero_final,
                           bool allow_single_head)
  : cfg_(cfg) {
  cfg_.validate(allow_single_head);
  backbone_ = build_stages(cfg_.backbone, rng);
  const int ch = cfg_.backbone.channels.back();
  const int final_spatial = cfg_.backbone.input_size >> cfg_.backbone.stages();
  const int flat = ch * final_spatial * final_spatial;
  for (const HeadSpec& spec : cfg_.heads) {
    Head h;
    h.spec = spec;
    const std::string prefix = "heads." + spec.protocol_id;
    h.seq.push_back(std::make_unique<Conv2d>(prefix + ".conv", ch, ch, 3, 1, 1, rng));
    h.seq.push_back(std::make_unique<Flatten>(prefix + ".flatten"));
    h.seq.push_back(std::make_unique<Linear>(prefix + ".fc1", flat, cfg_.head_hidden, rng));
    h.seq.push_back(std::make_unique<LeakyRelu>(prefix + ".act", 1e-2));
    auto out = std::make_unique<Linear>(prefix + ".fc2", cfg_.head_hidden, 2 * spec.landmarks, rng);
    if (zero_final) out->zero_init();
    h.seq.push_back(std::move(out));
    heads_.push_back(std::move(h));
  }
}

MultiHeadNet::Head& MultiHeadNet::find_head(const std::string& id) {
  for (Head& h : heads_)
    if (h.spec.protocol_id == id) return h;
  throw RoutingError("unknown head '" + id + "'");
}

Tensor MultiHeadNet::forward(const Tensor& images, const std::string& head_id, const Ctx& ctx) {
  Head& head = find_head(head_id);
  Tensor feat = run_forward(backbone_, images, ctx);
  active_ = &head;
  return run_forward(head.seq, feat, ctx);
}

Tensor MultiHeadNet::backward(const Tensor& grad_out) {
  if (!active_) throw std::logic_error("multi-head backward without forward");
  Tensor g = run_backward(active_->seq, grad_out);
  active_ = nullptr;
  return run_backward(backbone_, g);
}

Tensor MultiHeadNet::predict_pixels(const Tensor& images, const std::string& head_id) {
  Ctx ctx;
  ctx.mode = Mode::kEval;
  return offsets_to_pixels(forward(images, head_id, ctx), cfg_.backbone.input_size);
}

std::vector<Param*> MultiHeadNet::params() {
  std::vector<Param*> out = backbone_params();
  for (Head& h : heads_)
    for (auto& l : h.seq) l->collect_params(out);
  return out;
}

std::vector<Param*> MultiHeadNet::backbone_params() {
  std::vector<Param*> out;
  for (auto& l : backbone_) l->collect_params(out);
  return out;
}

std::vector<Param*> MultiHeadNet::head_params(const std::string& head_id) {
  std::vector<Param*> out;
  for (auto& l : find_head(head_id).seq) l->collect_params(out);
  return out;
}

std::vector<Tensor*> MultiHeadNet::state_tensors() {
  std::vector<Tensor*> out;
  for (auto& l : backbone_) l->collect_state(out);
  for (Head& h : heads_)
    for (auto& l : h.seq) l->collect_state(out);
  return out;
}

std::vector<Layer*> MultiHeadNet::layers() {
  std::vector<Layer*> out;
  for (auto& l : backbone_) out.push_back(l.get());
  for (Head& h : heads_)
    for (auto& l : h.seq) out.push_back(l.get());
  return out;
}

void MultiHeadNet::zero_grad() {
  for (Param* p : params()) p->value.zero_grad();
}

void MultiHeadNet::set_tau(double tau) {
  for (Layer* l : layers()) l->set_tau(tau);
}

std::vector<std::string> MultiHeadNet::head_ids() const {
  std::vector<std::string> ids;
  for (const Head& h : heads_) ids.push_back(h.spec.protocol_id);
  return ids;
}

int MultiHeadNet::head_landmarks(const std::string& head_id) const {
  for (const Head& h : heads_)
    if (h.spec.protocol_id == head_id) return h.spec.landmarks;
  throw RoutingError("unknown head '" + head_id + "'");
}

bool MultiHeadNet::has_head(const std::string& head_id) const {
  for (const Head& h : heads_)
    if (h.spec.protocol_id == head_id) return true;
  return false;
}

void MultiHeadNet::drop_other_heads(const std::string& keep) {
  find_head(keep);  // throws if unknown
  std::vector<Head> kept;
  for (Head& h : heads_)
    if (h.spec.protocol_id == keep) kept.push_back(std::move(h));
  heads_ = std::move(kept);
  cfg_.heads.erase(std::remove_if(cfg_.heads.begin(), cfg_.heads.end(),
                                  [&](const HeadSpec& s) { return s.protocol_id != keep; }),
                   cfg_.heads.end());
  active_ = nullptr;
}

}  // namespace sepbn
