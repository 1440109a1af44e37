#include "sepbn/layers.hpp"

#include <cmath>

namespace sepbn {

void Layer::take_forward() {
  if (!armed_) throw std::logic_error(name_ + ": backward without a prior forward");
  armed_ = false;
}

void Layer::collect_state(std::vector<Tensor*>& out) {
  std::vector<Param*> ps;
  collect_params(ps);
  for (Param* p : ps) out.push_back(&p->value);
}

void init_fan_in(Tensor& t, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
}

Conv2d::Conv2d(std::string name, int in_ch, int out_ch, int k, int stride, int pad, Rng& rng)
  : Layer(std::move(name)),
    w_(this->name() + ".weight", Tensor({out_ch, in_ch, k, k}), true),
    b_(this->name() + ".bias", Tensor({out_ch}), false),
    stride_(stride),
    pad_(pad) {
  const int fan_in = in_ch * k * k;
  init_fan_in(w_.value, fan_in, rng);
  init_fan_in(b_.value, fan_in, rng);
}

Tensor Conv2d::forward(const Tensor& x, const Ctx&) {
  x_ = x;
  mark_forward();
  return ops::conv2d(x, w_.value, b_.value, stride_, pad_);
}

Tensor Conv2d::backward(const Tensor& grad_out) {
  take_forward();
  Tensor gx(x_.shape());
  Tensor gw(w_.value.shape()), gb(b_.value.shape());
  ops::conv2d_backward(x_, w_.value, grad_out, stride_, pad_, &gx, gw, gb);
  for (int64_t i = 0; i < gw.numel(); ++i) w_.value.grad()[static_cast<size_t>(i)] += gw[i];
  for (int64_t i = 0; i < gb.numel(); ++i) b_.value.grad()[static_cast<size_t>(i)] += gb[i];
  return gx;
}

void Conv2d::collect_params(std::vector<Param*>& out) {
  out.push_back(&w_);
  out.push_back(&b_);
}

Linear::Linear(std::string name, int in_f, int out_f, Rng& rng)
  : Layer(std::move(name)),
    w_(this->name() + ".weight", Tensor({out_f, in_f}), true),
    b_(this->name() + ".bias", Tensor({out_f}), false) {
  init_fan_in(w_.value, in_f, rng);
  init_fan_in(b_.value, in_f, rng);
}

void Linear::zero_init() {
  std::fill(w_.value.vec().begin(), w_.value.vec().end(), 0.0);
  std::fill(b_.value.vec().begin(), b_.value.vec().end(), 0.0);
}

Tensor Linear::forward(const Tensor& x, const Ctx&) {
  x_ = x;
  mark_forward();
  return ops::linear(x, w_.value, b_.value);
}

Tensor Linear::backward(const Tensor& grad_out) {
  take_forward();
  Tensor gx(x_.shape());
  Tensor gw(w_.value.shape()), gb(b_.value.shape());
  ops::linear_backward(x_, w_.value, grad_out, &gx, gw, gb);
  for (int64_t i = 0; i < gw.numel(); ++i) w_.value.grad()[static_cast<size_t>(i)] += gw[i];
  for (int64_t i = 0; i < gb.numel(); ++i) b_.value.grad()[static_cast<size_t>(i)] += gb[i];
  return gx;
}

void Linear::collect_params(std::vector<Param*>& out) {
  out.push_back(&w_);
  out.push_back(&b_);
}

Tensor LeakyRelu::forward(const Tensor& x, const Ctx&) {
  x_ = x;
  mark_forward();
  return ops::leaky_relu(x, slope_);
}

Tensor LeakyRelu::backward(const Tensor& grad_out) {
  take_forward();
  return ops::leaky_relu_backward(x_, grad_out, slope_);
}

Tensor MaxPool2d::forward(const Tensor& x, const Ctx&) {
  in_shape_ = x.shape();
  mark_forward();
  return ops::max_pool2d(x, k_, stride_, argmax_);
}

Tensor MaxPool2d::backward(const Tensor& grad_out) {
  take_forward();
  return ops::pool_backward(argmax_, grad_out, in_shape_);
}

Tensor Flatten::forward(const Tensor& x, const Ctx&) {
  in_shape_ = x.shape();
  mark_forward();
  const int n = x.dim(0);
  return Tensor({n, static_cast<int>(x.numel() / n)}, x.vec());
}

Tensor Flatten::backward(const Tensor& grad_out) {
  take_forward();
  return Tensor(in_shape_, grad_out.vec());
}

}  // namespace sepbn
