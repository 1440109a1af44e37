#pragma once

#include <memory>
#include <string>
#include <vector>

#include "sepbn/ops.hpp"
#include "sepbn/rng.hpp"
#include "sepbn/tensor.hpp"

namespace sepbn {

enum class Mode { kTrain, kEval };

// Per-forward context threaded through every layer. `domains` carries
// brute-force routing labels; `forced_branch` overrides routing during
// best-of-k evaluation.
struct Ctx {
  Mode mode = Mode::kTrain;
  const std::vector<int>* domains = nullptr;
  int forced_branch = -1;
};

class Layer {
public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;
  Layer(const Layer&) = delete;
  Layer& operator=(const Layer&) = delete;

  virtual Tensor forward(const Tensor& x, const Ctx& ctx) = 0;
  virtual Tensor backward(const Tensor& grad_out) = 0;

  virtual void collect_params(std::vector<Param*>& out) {}
  // Everything that belongs in a checkpoint, declaration order: parameters
  // first, then persistent buffers (running statistics).
  virtual void collect_state(std::vector<Tensor*>& out);
  virtual void set_tau(double) {}

  const std::string& name() const { return name_; }

protected:
  // Enforces: backward at most once per forward, never without one.
  void mark_forward() { armed_ = true; }
  void take_forward();

private:
  std::string name_;
  bool armed_ = false;
};

// Fan-in scaled uniform init, U(-1/sqrt(fan_in), +1/sqrt(fan_in)).
void init_fan_in(Tensor& t, int fan_in, Rng& rng);

class Conv2d final : public Layer {
public:
  Conv2d(std::string name, int in_ch, int out_ch, int k, int stride, int pad, Rng& rng);

  Tensor forward(const Tensor& x, const Ctx& ctx) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_params(std::vector<Param*>& out) override;

  Param& weight() { return w_; }
  Param& bias() { return b_; }

private:
  Param w_, b_;
  int stride_, pad_;
  Tensor x_;
};

class Linear final : public Layer {
public:
  Linear(std::string name, int in_f, int out_f, Rng& rng);

  Tensor forward(const Tensor& x, const Ctx& ctx) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_params(std::vector<Param*>& out) override;

  Param& weight() { return w_; }
  Param& bias() { return b_; }
  void zero_init();  // regression output layers start at the crop center

private:
  Param w_, b_;
  Tensor x_;
};

class LeakyRelu final : public Layer {
public:
  LeakyRelu(std::string name, double slope) : Layer(std::move(name)), slope_(slope) {}
  Tensor forward(const Tensor& x, const Ctx& ctx) override;
  Tensor backward(const Tensor& grad_out) override;

private:
  double slope_;
  Tensor x_;
};

class MaxPool2d final : public Layer {
public:
  MaxPool2d(std::string name, int k, int stride) : Layer(std::move(name)), k_(k), stride_(stride) {}
  Tensor forward(const Tensor& x, const Ctx& ctx) override;
  Tensor backward(const Tensor& grad_out) override;

private:
  int k_, stride_;
  std::vector<int64_t> argmax_;
  std::vector<int> in_shape_;
};

class Flatten final : public Layer {
public:
  explicit Flatten(std::string name) : Layer(std::move(name)) {}
  Tensor forward(const Tensor& x, const Ctx& ctx) override;
  Tensor backward(const Tensor& grad_out) override;

private:
  std::vector<int> in_shape_;
};

}  // namespace sepbn
