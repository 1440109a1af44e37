#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "sepbn/norm.hpp"

namespace sepbn {

enum class NormKind { kBatchNorm, kSepBN, kBruteForce, kSimple };

const char* norm_kind_name(NormKind k);
NormKind norm_kind_from_name(const std::string& s);

struct SepBNParams {
  int k = 3;
  int g = 2;
  int t = 3;
  int reduction = 16;
  Aggregation aggregation = Aggregation::kSoft;
};

struct VanillaConfig {
  int input_size = 128;
  std::vector<int> channels = {64, 128, 256, 512, 1024, 2048};
  int landmarks = 19;
  int hidden_width = 1024;
  std::vector<NormKind> norm_mask;  // one entry per stage; empty = all BatchNorm
  SepBNParams sepbn;

  int stages() const { return static_cast<int>(channels.size()); }
  void validate() const;

  // Table-style full network: 6 stages, 128x128 input.
  static VanillaConfig full(int landmarks, NormKind norm = NormKind::kBatchNorm);
  // Desk-scale variant: 4 stages, channels 8..64, hidden width 128.
  static VanillaConfig desk(int landmarks, NormKind norm = NormKind::kBatchNorm,
                            int input_size = 64);
};

// Raw regression output is an offset from the crop center in units of the
// crop; pixel coordinates are (raw + 0.5) * size at the boundary.
Tensor offsets_to_pixels(const Tensor& raw, int input_size);
double pixel_to_offset(double px, int input_size);

class VanillaNet {
public:
  VanillaNet(const VanillaConfig& cfg, Rng& rng, bool zero_final = true);

  // Raw regression output [N, 2L].
  Tensor forward(const Tensor& images, const Ctx& ctx);
  Tensor backward(const Tensor& grad_out);
  // Pixel-space prediction in eval mode.
  Tensor predict_pixels(const Tensor& images);

  std::vector<Param*> params();
  std::vector<Tensor*> state_tensors();
  std::vector<Layer*> layers();
  void zero_grad();
  void set_tau(double tau);
  int64_t param_count();

  const VanillaConfig& config() const { return cfg_; }

private:
  VanillaConfig cfg_;
  std::vector<std::unique_ptr<Layer>> seq_;
};

struct HeadSpec {
  std::string protocol_id;
  int landmarks = 0;
};

struct MultiHeadConfig {
  VanillaConfig backbone;  // backbone.landmarks is unused
  std::vector<HeadSpec> heads;
  int head_hidden = 128;

  // Fresh builds require >= 2 heads; a fine-tuned checkpoint reloads with 1.
  void validate(bool allow_single_head = false) const;
};

// Shared conv backbone with one regression branch per annotation protocol.
// Each branch: 3x3 conv (channels preserved) -> flatten -> linear ->
// leaky_relu -> linear(2L).
class MultiHeadNet {
public:
  MultiHeadNet(const MultiHeadConfig& cfg, Rng& rng, bool zero_final = true,
               bool allow_single_head = false);

  Tensor forward(const Tensor& images, const std::string& head_id, const Ctx& ctx);
  Tensor backward(const Tensor& grad_out);
  Tensor predict_pixels(const Tensor& images, const std::string& head_id);

  std::vector<Param*> params();
  std::vector<Param*> backbone_params();
  std::vector<Param*> head_params(const std::string& head_id);
  std::vector<Tensor*> state_tensors();
  std::vector<Layer*> layers();
  void zero_grad();
  void set_tau(double tau);

  std::vector<std::string> head_ids() const;
  int head_landmarks(const std::string& head_id) const;
  bool has_head(const std::string& head_id) const;
  // Stage-2: disconnect every branch except `keep`.
  void drop_other_heads(const std::string& keep);

  const MultiHeadConfig& config() const { return cfg_; }

private:
  struct Head {
    HeadSpec spec;
    std::vector<std::unique_ptr<Layer>> seq;
  };
  Head& find_head(const std::string& id);

  MultiHeadConfig cfg_;
  std::vector<std::unique_ptr<Layer>> backbone_;
  std::vector<Head> heads_;
  Head* active_ = nullptr;
};

// Builds the stage sequence shared by VanillaNet and MultiHeadNet backbones.
std::vector<std::unique_ptr<Layer>> build_stages(const VanillaConfig& cfg, Rng& rng);

}  // namespace sepbn
