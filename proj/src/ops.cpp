#include "sepbn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace sepbn::ops {

namespace {

int ceil_div(int a, int b) { return a > 0 ? (a + b - 1) / b : a / b; }
int floor_div(int a, int b) { return a >= 0 ? a / b : (a - b + 1) / b; }

void require_4d(const Tensor& x, const char* who) {
  if (x.ndim() != 4) throw DimensionError(std::string(who) + " expects NCHW input, got " + x.shape_str());
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  require_4d(x, "conv2d");
  if (w.ndim() != 4) throw DimensionError("conv2d weight must be OCKK, got " + w.shape_str());
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  if (w.dim(1) != C)
    throw DimensionError("conv2d weight channels " + std::to_string(w.dim(1)) +
                         " != input channels " + std::to_string(C));
  if (b.numel() != O) throw DimensionError("conv2d bias length != output channels");
  if (stride < 1) throw ParameterError("conv2d stride must be >= 1");
  if (pad < 0) throw ParameterError("conv2d pad must be >= 0");
  if (KH > H + 2 * pad || KW > W + 2 * pad)
    throw DimensionError("conv2d kernel larger than padded input");

  const int OH = (H + 2 * pad - KH) / stride + 1;
  const int OW = (W + 2 * pad - KW) / stride + 1;
  Tensor y({N, O, OH, OW});

  const double* xd = x.data();
  const double* wd = w.data();
  const double* bd = b.data();
  double* yd = y.data();

  for (int n = 0; n < N; ++n) {
    for (int o = 0; o < O; ++o) {
      double* yplane = yd + (static_cast<int64_t>(n) * O + o) * OH * OW;
      for (int c = 0; c < C; ++c) {
        const double* xplane = xd + (static_cast<int64_t>(n) * C + c) * H * W;
        const double* wk = wd + (static_cast<int64_t>(o) * C + c) * KH * KW;
        for (int kh = 0; kh < KH; ++kh) {
          const int oh_lo = std::max(0, ceil_div(pad - kh, stride));
          const int oh_hi = std::min(OH, floor_div(H - 1 + pad - kh, stride) + 1);
          for (int kw = 0; kw < KW; ++kw) {
            const double wv = wk[kh * KW + kw];
            const int ow_lo = std::max(0, ceil_div(pad - kw, stride));
            const int ow_hi = std::min(OW, floor_div(W - 1 + pad - kw, stride) + 1);
            for (int oh = oh_lo; oh < oh_hi; ++oh) {
              const double* xrow = xplane + (oh * stride + kh - pad) * W + kw - pad;
              double* yrow = yplane + oh * OW;
              if (stride == 1) {
                for (int ow = ow_lo; ow < ow_hi; ++ow) yrow[ow] += wv * xrow[ow];
              } else {
                for (int ow = ow_lo; ow < ow_hi; ++ow) yrow[ow] += wv * xrow[ow * stride];
              }
            }
          }
        }
      }
      for (int i = 0; i < OH * OW; ++i) yplane[i] += bd[o];
    }
  }
  return y;
}

void conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& grad_out, int stride, int pad,
                     Tensor* grad_x, Tensor& grad_w, Tensor& grad_b) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const int OH = grad_out.dim(2), OW = grad_out.dim(3);
  if (grad_out.dim(0) != N || grad_out.dim(1) != O)
    throw DimensionError("conv2d backward grad shape mismatch");

  const double* xd = x.data();
  const double* wd = w.data();
  const double* gd = grad_out.data();
  double* gw = grad_w.data();
  double* gb = grad_b.data();
  double* gx = grad_x ? grad_x->data() : nullptr;

  for (int n = 0; n < N; ++n) {
    for (int o = 0; o < O; ++o) {
      const double* gplane = gd + (static_cast<int64_t>(n) * O + o) * OH * OW;
      double bsum = 0.0;
      for (int i = 0; i < OH * OW; ++i) bsum += gplane[i];
      gb[o] += bsum;
      for (int c = 0; c < C; ++c) {
        const double* xplane = xd + (static_cast<int64_t>(n) * C + c) * H * W;
        double* gxplane = gx ? gx + (static_cast<int64_t>(n) * C + c) * H * W : nullptr;
        double* gwk = gw + (static_cast<int64_t>(o) * C + c) * KH * KW;
        const double* wk = wd + (static_cast<int64_t>(o) * C + c) * KH * KW;
        for (int kh = 0; kh < KH; ++kh) {
          const int oh_lo = std::max(0, ceil_div(pad - kh, stride));
          const int oh_hi = std::min(OH, floor_div(H - 1 + pad - kh, stride) + 1);
          for (int kw = 0; kw < KW; ++kw) {
            const int ow_lo = std::max(0, ceil_div(pad - kw, stride));
            const int ow_hi = std::min(OW, floor_div(W - 1 + pad - kw, stride) + 1);
            const double wv = wk[kh * KW + kw];
            double wsum = 0.0;
            for (int oh = oh_lo; oh < oh_hi; ++oh) {
              const int row_off = (oh * stride + kh - pad) * W + kw - pad;
              const double* xrow = xplane + row_off;
              const double* grow = gplane + oh * OW;
              if (stride == 1) {
                for (int ow = ow_lo; ow < ow_hi; ++ow) wsum += grow[ow] * xrow[ow];
                if (gxplane) {
                  double* gxrow = gxplane + row_off;
                  for (int ow = ow_lo; ow < ow_hi; ++ow) gxrow[ow] += wv * grow[ow];
                }
              } else {
                for (int ow = ow_lo; ow < ow_hi; ++ow) wsum += grow[ow] * xrow[ow * stride];
                if (gxplane) {
                  double* gxrow = gxplane + row_off;
                  for (int ow = ow_lo; ow < ow_hi; ++ow) gxrow[ow * stride] += wv * grow[ow];
                }
              }
            }
            gwk[kh * KW + kw] += wsum;
          }
        }
      }
    }
  }
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.ndim() != 2) throw DimensionError("linear expects NxF input, got " + x.shape_str());
  const int N = x.dim(0), FI = x.dim(1);
  const int FO = w.dim(0);
  if (w.ndim() != 2 || w.dim(1) != FI)
    throw DimensionError("linear weight " + w.shape_str() + " incompatible with input " + x.shape_str());
  if (b.numel() != FO) throw DimensionError("linear bias length != output features");

  Tensor y({N, FO});
  const double* xd = x.data();
  const double* wd = w.data();
  double* yd = y.data();
  for (int n = 0; n < N; ++n) {
    const double* xrow = xd + static_cast<int64_t>(n) * FI;
    for (int o = 0; o < FO; ++o) {
      const double* wrow = wd + static_cast<int64_t>(o) * FI;
      double acc = 0.0;
      for (int i = 0; i < FI; ++i) acc += wrow[i] * xrow[i];
      yd[static_cast<int64_t>(n) * FO + o] = acc + b[o];
    }
  }
  return y;
}

void linear_backward(const Tensor& x, const Tensor& w, const Tensor& grad_out, Tensor* grad_x,
                     Tensor& grad_w, Tensor& grad_b) {
  const int N = x.dim(0), FI = x.dim(1), FO = w.dim(0);
  if (grad_out.dim(0) != N || grad_out.dim(1) != FO)
    throw DimensionError("linear backward grad shape mismatch");
  const double* xd = x.data();
  const double* wd = w.data();
  const double* gd = grad_out.data();
  double* gw = grad_w.data();
  double* gb = grad_b.data();
  for (int n = 0; n < N; ++n) {
    const double* xrow = xd + static_cast<int64_t>(n) * FI;
    const double* grow = gd + static_cast<int64_t>(n) * FO;
    for (int o = 0; o < FO; ++o) {
      const double g = grow[o];
      gb[o] += g;
      double* gwrow = gw + static_cast<int64_t>(o) * FI;
      for (int i = 0; i < FI; ++i) gwrow[i] += g * xrow[i];
    }
    if (grad_x) {
      double* gxrow = grad_x->data() + static_cast<int64_t>(n) * FI;
      for (int o = 0; o < FO; ++o) {
        const double g = grow[o];
        const double* wrow = wd + static_cast<int64_t>(o) * FI;
        for (int i = 0; i < FI; ++i) gxrow[i] += g * wrow[i];
      }
    }
  }
}

Tensor leaky_relu(const Tensor& x, double slope) {
  if (!(slope > 0.0 && slope < 1.0)) throw ParameterError("leaky_relu slope must be in (0,1)");
  Tensor y(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) y[i] = x[i] >= 0.0 ? x[i] : slope * x[i];
  return y;
}

Tensor leaky_relu_backward(const Tensor& x, const Tensor& grad_out, double slope) {
  Tensor g(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) g[i] = grad_out[i] * (x[i] >= 0.0 ? 1.0 : slope);
  return g;
}

Tensor sigmoid(const Tensor& x) {
  Tensor y(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) y[i] = 1.0 / (1.0 + std::exp(-x[i]));
  return y;
}

Tensor sigmoid_backward(const Tensor& y, const Tensor& grad_out) {
  Tensor g(y.shape());
  for (int64_t i = 0; i < y.numel(); ++i) g[i] = grad_out[i] * y[i] * (1.0 - y[i]);
  return g;
}

Tensor max_pool2d(const Tensor& x, int k, int stride, std::vector<int64_t>& argmax) {
  require_4d(x, "max_pool2d");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (k > H || k > W) throw DimensionError("max_pool2d window exceeds input");
  if (stride < 1) throw ParameterError("max_pool2d stride must be >= 1");
  const int OH = (H - k) / stride + 1;
  const int OW = (W - k) / stride + 1;
  Tensor y({N, C, OH, OW});
  argmax.assign(static_cast<size_t>(y.numel()), -1);

  const double* xd = x.data();
  double* yd = y.data();
  int64_t out = 0;
  for (int p = 0; p < N * C; ++p) {
    const double* plane = xd + static_cast<int64_t>(p) * H * W;
    for (int oh = 0; oh < OH; ++oh) {
      for (int ow = 0; ow < OW; ++ow, ++out) {
        double best = -std::numeric_limits<double>::infinity();
        int64_t best_idx = -1;
        for (int dh = 0; dh < k; ++dh) {
          const int ih = oh * stride + dh;
          for (int dw = 0; dw < k; ++dw) {
            const int iw = ow * stride + dw;
            const double v = plane[ih * W + iw];
            if (v > best) {
              best = v;
              best_idx = static_cast<int64_t>(p) * H * W + ih * W + iw;
            }
          }
        }
        yd[out] = best;
        argmax[static_cast<size_t>(out)] = best_idx;
      }
    }
  }
  return y;
}

Tensor adaptive_max_pool2d(const Tensor& x, int target, std::vector<int64_t>& argmax) {
  require_4d(x, "adaptive_max_pool2d");
  if (target < 1) throw ParameterError("adaptive_max_pool2d target must be >= 1");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (target > H || target > W) throw DimensionError("adaptive_max_pool2d target exceeds input");
  Tensor y({N, C, target, target});
  argmax.assign(static_cast<size_t>(y.numel()), -1);

  const double* xd = x.data();
  double* yd = y.data();
  int64_t out = 0;
  for (int p = 0; p < N * C; ++p) {
    const double* plane = xd + static_cast<int64_t>(p) * H * W;
    for (int oh = 0; oh < target; ++oh) {
      const int h0 = (oh * H) / target;
      const int h1 = ((oh + 1) * H + target - 1) / target;  // ceil
      for (int ow = 0; ow < target; ++ow, ++out) {
        const int w0 = (ow * W) / target;
        const int w1 = ((ow + 1) * W + target - 1) / target;
        double best = -std::numeric_limits<double>::infinity();
        int64_t best_idx = -1;
        for (int ih = h0; ih < h1; ++ih) {
          for (int iw = w0; iw < w1; ++iw) {
            const double v = plane[ih * W + iw];
            if (v > best) {
              best = v;
              best_idx = static_cast<int64_t>(p) * H * W + ih * W + iw;
            }
          }
        }
        yd[out] = best;
        argmax[static_cast<size_t>(out)] = best_idx;
      }
    }
  }
  return y;
}

Tensor pool_backward(const std::vector<int64_t>& argmax, const Tensor& grad_out,
                     const std::vector<int>& in_shape) {
  Tensor g(in_shape);
  if (static_cast<int64_t>(argmax.size()) != grad_out.numel())
    throw DimensionError("pool backward: argmax/grad size mismatch");
  for (int64_t i = 0; i < grad_out.numel(); ++i) g[argmax[static_cast<size_t>(i)]] += grad_out[i];
  return g;
}

Tensor global_avg_pool(const Tensor& x) {
  require_4d(x, "global_avg_pool");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor y({N, C, 1, 1});
  const double* xd = x.data();
  for (int p = 0; p < N * C; ++p) {
    const double* plane = xd + static_cast<int64_t>(p) * H * W;
    double s = 0.0;
    for (int i = 0; i < H * W; ++i) s += plane[i];
    y[p] = s / (H * W);
  }
  return y;
}

Tensor global_avg_pool_backward(const Tensor& grad_out, const std::vector<int>& in_shape) {
  Tensor g(in_shape);
  const int H = in_shape[2], W = in_shape[3];
  const double inv = 1.0 / (H * W);
  double* gd = g.data();
  for (int64_t p = 0; p < grad_out.numel(); ++p) {
    const double v = grad_out[p] * inv;
    double* plane = gd + p * H * W;
    for (int i = 0; i < H * W; ++i) plane[i] += v;
  }
  return g;
}

Tensor temp_softmax(const Tensor& logits, double tau) {
  if (!(tau > 0.0)) throw ParameterError("temp_softmax tau must be > 0");
  if (logits.ndim() < 1) throw DimensionError("temp_softmax needs at least 1 axis");
  const int K = logits.dim(logits.ndim() - 1);
  const int64_t rows = logits.numel() / K;
  Tensor y(logits.shape());
  const double* zd = logits.data();
  double* yd = y.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* z = zd + r * K;
    double* out = yd + r * K;
    double zmax = z[0];
    for (int k = 1; k < K; ++k) zmax = std::max(zmax, z[k]);
    double sum = 0.0;
    for (int k = 0; k < K; ++k) {
      out[k] = std::exp((z[k] - zmax) / tau);
      sum += out[k];
    }
    for (int k = 0; k < K; ++k) out[k] /= sum;
  }
  return y;
}

Tensor temp_softmax_backward(const Tensor& y, const Tensor& grad_out, double tau) {
  const int K = y.dim(y.ndim() - 1);
  const int64_t rows = y.numel() / K;
  Tensor g(y.shape());
  const double* yd = y.data();
  const double* gd = grad_out.data();
  double* out = g.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* yr = yd + r * K;
    const double* gr = gd + r * K;
    double dot = 0.0;
    for (int k = 0; k < K; ++k) dot += gr[k] * yr[k];
    for (int k = 0; k < K; ++k) out[r * K + k] = yr[k] * (gr[k] - dot) / tau;
  }
  return g;
}

double l1_loss(const Tensor& pred, const Tensor& target, Tensor* grad_pred) {
  if (!pred.same_shape(target))
    throw DimensionError("l1_loss shape mismatch: " + pred.shape_str() + " vs " + target.shape_str());
  const int64_t n = pred.numel();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) acc += std::abs(pred[i] - target[i]);
  if (grad_pred) {
    *grad_pred = Tensor(pred.shape());
    const double inv = 1.0 / static_cast<double>(n);
    for (int64_t i = 0; i < n; ++i) {
      const double d = pred[i] - target[i];
      (*grad_pred)[i] = d > 0.0 ? inv : (d < 0.0 ? -inv : 0.0);
    }
  }
  return acc / static_cast<double>(n);
}

}  // namespace sepbn::ops
