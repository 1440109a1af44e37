#pragma once

#include <optional>
#include <vector>

#include "sepbn/layers.hpp"

namespace sepbn {

inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.1;

// Per-channel normalization shared by every variant. Train mode normalizes
// with batch mean and biased variance and updates the running buffers in
// place; eval mode normalizes with the running buffers.
struct SharedNormSaved {
  Tensor xhat;
  std::vector<double> rstd;
  Mode mode = Mode::kTrain;
};

Tensor shared_normalize(const Tensor& x, Mode mode, Tensor& running_mean, Tensor& running_var,
                        double eps, double momentum, SharedNormSaved& saved);
// Gradient w.r.t. x given the gradient w.r.t. xhat (train mode includes the
// mean/variance dependence; eval mode is a pure rescale).
Tensor shared_normalize_backward(const SharedNormSaved& saved, const Tensor& grad_xhat);

class BatchNorm final : public Layer {
public:
  BatchNorm(std::string name, int channels, double eps = kBnEps, double momentum = kBnMomentum);

  Tensor forward(const Tensor& x, const Ctx& ctx) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_params(std::vector<Param*>& out) override;
  void collect_state(std::vector<Tensor*>& out) override;

  Param& gamma() { return gamma_; }
  Param& beta() { return beta_; }
  Tensor& running_mean() { return running_mean_; }
  Tensor& running_var() { return running_var_; }
  int channels() const { return channels_; }

private:
  int channels_;
  double eps_, momentum_;
  Param gamma_, beta_;
  Tensor running_mean_, running_var_;
  SharedNormSaved saved_;
};

// K fully separate BN branches routed by a known per-sample domain label.
class BruteForceSepBN final : public Layer {
public:
  struct Branch {
    Param gamma, beta;
    Tensor running_mean, running_var;
  };

  BruteForceSepBN(std::string name, int channels, int k, double eps = kBnEps,
                  double momentum = kBnMomentum);

  Tensor forward(const Tensor& x, const Ctx& ctx) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_params(std::vector<Param*>& out) override;
  void collect_state(std::vector<Tensor*>& out) override;

  int branch_count() const { return static_cast<int>(branches_.size()); }
  Branch& branch(int k) { return branches_[static_cast<size_t>(k)]; }

private:
  struct Routed {
    int branch = 0;
    std::vector<int> samples;
    SharedNormSaved saved;
  };

  int channels_;
  double eps_, momentum_;
  std::vector<Branch> branches_;
  std::vector<Routed> routed_;
  std::vector<int> in_shape_;
};

// Shared normalization, K mapping sets, SE-style attention producing one
// weight per set per sample.
class SimpleSepBN final : public Layer {
public:
  SimpleSepBN(std::string name, int channels, int k, int reduction, Rng& rng,
              double eps = kBnEps, double momentum = kBnMomentum);

  Tensor forward(const Tensor& x, const Ctx& ctx) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_params(std::vector<Param*>& out) override;
  void collect_state(std::vector<Tensor*>& out) override;
  void set_tau(double t) override { tau_ = t; }
  double tau() const { return tau_; }

  const Tensor& last_lambda() const { return lambda_; }
  Param& gamma() { return gamma_; }
  Param& beta() { return beta_; }
  Tensor& running_mean() { return running_mean_; }
  Tensor& running_var() { return running_var_; }

private:
  int channels_, k_, reduced_;
  double eps_, momentum_, tau_ = 1.0;
  Param gamma_, beta_;          // [K, C]
  Param sq_w_, sq_b_;           // squeeze: C -> C/r
  Param ex_w_, ex_b_;           // excite: C/r -> K
  Tensor running_mean_, running_var_;

  SharedNormSaved saved_;
  Tensor pooled_, h_pre_, h_, excite_, lambda_, gamma_hat_, beta_hat_;
  std::vector<int> in_shape_;
};

enum class Aggregation { kSoft, kHard };

// Grouped-attention SepBN: shared normalization, K mapping sets combined per
// channel group by attention weights pi in R^{N x G x K}.
class SepBN final : public Layer {
public:
  SepBN(std::string name, int channels, int k, int g, int t, Rng& rng,
        Aggregation agg = Aggregation::kSoft, double eps = kBnEps, double momentum = kBnMomentum);

  Tensor forward(const Tensor& x, const Ctx& ctx) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_params(std::vector<Param*>& out) override;
  void collect_state(std::vector<Tensor*>& out) override;
  void set_tau(double t) override { tau_ = t; }
  double tau() const { return tau_; }
  void set_aggregation(Aggregation a) { agg_ = a; }
  Aggregation aggregation() const { return agg_; }

  // Attention weights only (shape [N, G, K]); stateless w.r.t. running stats.
  Tensor attention(const Tensor& x);
  const Tensor& last_pi() const { return pi_; }

  Param& gamma() { return gamma_; }
  Param& beta() { return beta_; }
  Tensor& running_mean() { return running_mean_; }
  Tensor& running_var() { return running_var_; }
  int set_count() const { return k_; }
  int group_count() const { return g_; }

private:
  Tensor attention_forward(const Tensor& x);

  int channels_, k_, g_, t_, group_size_, hidden_;
  double eps_, momentum_, tau_ = 1.0;
  Aggregation agg_;
  Param gamma_, beta_;        // [K, C]
  Param conv_w_, conv_b_;     // 1x1 conv C -> G
  Param mlp_w1_, mlp_b1_;     // G*T*T -> hidden
  Param mlp_w2_, mlp_b2_;     // hidden -> G*K, zero-init so pi starts uniform
  Tensor running_mean_, running_var_;

  SharedNormSaved saved_;
  std::vector<int64_t> amp_argmax_;
  Tensor amp_out_, conv_out_, m1_pre_, m1_, pi_, gamma_hat_, beta_hat_;
  std::vector<int> in_shape_;
};

// Mean pairwise cosine similarity over all unordered pairs of K vectors.
double param_similarity(const std::vector<std::vector<double>>& vectors);

struct SimilarityRow {
  std::string module;
  // Entries absent when a kind does not apply (e.g. shared tracking stats).
  std::optional<double> running_mean, running_var, scale, shift;
};

// Similarity analysis across a norm layer's K parameter sets; nullopt for
// plain BatchNorm (nothing to compare).
std::optional<SimilarityRow> norm_similarity(Layer& layer);

}  // namespace sepbn
