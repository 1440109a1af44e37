#include "sepbn/norm.hpp"

#include <algorithm>
#include <cmath>

namespace sepbn {

namespace {

void require_channels(const Tensor& x, int channels, const std::string& who) {
  if (x.ndim() != 4) throw DimensionError(who + " expects NCHW input, got " + x.shape_str());
  if (x.dim(1) != channels)
    throw DimensionError(who + " built for " + std::to_string(channels) + " channels, input has " +
                         std::to_string(x.dim(1)));
}

void accumulate(Param& p, const Tensor& g) {
  auto& dst = p.value.grad();
  for (int64_t i = 0; i < g.numel(); ++i) dst[static_cast<size_t>(i)] += g[i];
}

Tensor gather_samples(const Tensor& x, const std::vector<int>& samples) {
  const int C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t plane = static_cast<int64_t>(C) * H * W;
  Tensor out({static_cast<int>(samples.size()), C, H, W});
  for (size_t i = 0; i < samples.size(); ++i)
    std::copy_n(x.data() + samples[i] * plane, plane, out.data() + static_cast<int64_t>(i) * plane);
  return out;
}

void scatter_samples(const Tensor& src, const std::vector<int>& samples, Tensor& dst) {
  const int64_t plane = src.numel() / src.dim(0);
  for (size_t i = 0; i < samples.size(); ++i)
    std::copy_n(src.data() + static_cast<int64_t>(i) * plane, plane, dst.data() + samples[i] * plane);
}

}  // namespace

Tensor shared_normalize(const Tensor& x, Mode mode, Tensor& running_mean, Tensor& running_var,
                        double eps, double momentum, SharedNormSaved& saved) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t spatial = static_cast<int64_t>(H) * W;
  const int64_t m = static_cast<int64_t>(N) * spatial;

  saved.mode = mode;
  saved.rstd.assign(static_cast<size_t>(C), 0.0);
  Tensor xhat(x.shape());

  const double* xd = x.data();
  double* hd = xhat.data();

  if (mode == Mode::kTrain) {
    if (m < 2) throw DegenerateStatsError("batch statistics need N*H*W >= 2, got " + std::to_string(m));
    for (int c = 0; c < C; ++c) {
      double sum = 0.0;
      for (int n = 0; n < N; ++n) {
        const double* plane = xd + (static_cast<int64_t>(n) * C + c) * spatial;
        for (int64_t i = 0; i < spatial; ++i) sum += plane[i];
      }
      const double mean = sum / static_cast<double>(m);
      double sq = 0.0;
      for (int n = 0; n < N; ++n) {
        const double* plane = xd + (static_cast<int64_t>(n) * C + c) * spatial;
        for (int64_t i = 0; i < spatial; ++i) {
          const double d = plane[i] - mean;
          sq += d * d;
        }
      }
      const double var = sq / static_cast<double>(m);  // biased (population) variance
      const double rstd = 1.0 / std::sqrt(var + eps);
      saved.rstd[static_cast<size_t>(c)] = rstd;
      for (int n = 0; n < N; ++n) {
        const double* plane = xd + (static_cast<int64_t>(n) * C + c) * spatial;
        double* out = hd + (static_cast<int64_t>(n) * C + c) * spatial;
        for (int64_t i = 0; i < spatial; ++i) out[i] = (plane[i] - mean) * rstd;
      }
      running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mean;
      running_var[c] = (1.0 - momentum) * running_var[c] + momentum * var;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      const double mean = running_mean[c];
      const double rstd = 1.0 / std::sqrt(running_var[c] + eps);
      saved.rstd[static_cast<size_t>(c)] = rstd;
      for (int n = 0; n < N; ++n) {
        const double* plane = xd + (static_cast<int64_t>(n) * C + c) * spatial;
        double* out = hd + (static_cast<int64_t>(n) * C + c) * spatial;
        for (int64_t i = 0; i < spatial; ++i) out[i] = (plane[i] - mean) * rstd;
      }
    }
  }
  saved.xhat = xhat;
  return xhat;
}

Tensor shared_normalize_backward(const SharedNormSaved& saved, const Tensor& grad_xhat) {
  const Tensor& xhat = saved.xhat;
  const int N = xhat.dim(0), C = xhat.dim(1);
  const int64_t spatial = xhat.numel() / (static_cast<int64_t>(N) * C);
  Tensor gx(xhat.shape());

  if (saved.mode == Mode::kEval) {
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const double rstd = saved.rstd[static_cast<size_t>(c)];
        const int64_t off = (static_cast<int64_t>(n) * C + c) * spatial;
        for (int64_t i = 0; i < spatial; ++i) gx[off + i] = grad_xhat[off + i] * rstd;
      }
    return gx;
  }

  const int64_t m = static_cast<int64_t>(N) * spatial;
  const double inv_m = 1.0 / static_cast<double>(m);
  for (int c = 0; c < C; ++c) {
    double g_sum = 0.0, gx_sum = 0.0;
    for (int n = 0; n < N; ++n) {
      const int64_t off = (static_cast<int64_t>(n) * C + c) * spatial;
      for (int64_t i = 0; i < spatial; ++i) {
        g_sum += grad_xhat[off + i];
        gx_sum += grad_xhat[off + i] * xhat[off + i];
      }
    }
    const double rstd = saved.rstd[static_cast<size_t>(c)];
    const double mean_g = g_sum * inv_m;
    const double mean_gx = gx_sum * inv_m;
    for (int n = 0; n < N; ++n) {
      const int64_t off = (static_cast<int64_t>(n) * C + c) * spatial;
      for (int64_t i = 0; i < spatial; ++i)
        gx[off + i] = rstd * (grad_xhat[off + i] - mean_g - xhat[off + i] * mean_gx);
    }
  }
  return gx;
}

BatchNorm::BatchNorm(std::string name, int channels, double eps, double momentum)
  : Layer(std::move(name)),
    channels_(channels),
    eps_(eps),
    momentum_(momentum),
    gamma_(this->name() + ".gamma", Tensor::full({channels}, 1.0), false),
    beta_(this->name() + ".beta", Tensor({channels}), false),
    running_mean_(Tensor({channels})),
    running_var_(Tensor::full({channels}, 1.0)) {}

Tensor BatchNorm::forward(const Tensor& x, const Ctx& ctx) {
  require_channels(x, channels_, name());
  Tensor xhat = shared_normalize(x, ctx.mode, running_mean_, running_var_, eps_, momentum_, saved_);
  mark_forward();
  const int N = x.dim(0);
  const int64_t spatial = x.numel() / (static_cast<int64_t>(N) * channels_);
  Tensor y(x.shape());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < channels_; ++c) {
      const double g = gamma_.value[c], b = beta_.value[c];
      const int64_t off = (static_cast<int64_t>(n) * channels_ + c) * spatial;
      for (int64_t i = 0; i < spatial; ++i) y[off + i] = g * xhat[off + i] + b;
    }
  return y;
}

Tensor BatchNorm::backward(const Tensor& grad_out) {
  take_forward();
  const Tensor& xhat = saved_.xhat;
  const int N = grad_out.dim(0);
  const int64_t spatial = grad_out.numel() / (static_cast<int64_t>(N) * channels_);
  Tensor dxhat(grad_out.shape());
  auto& ggamma = gamma_.value.grad();
  auto& gbeta = beta_.value.grad();
  for (int c = 0; c < channels_; ++c) {
    double dg = 0.0, db = 0.0;
    const double g = gamma_.value[c];
    for (int n = 0; n < N; ++n) {
      const int64_t off = (static_cast<int64_t>(n) * channels_ + c) * spatial;
      for (int64_t i = 0; i < spatial; ++i) {
        dg += grad_out[off + i] * xhat[off + i];
        db += grad_out[off + i];
        dxhat[off + i] = grad_out[off + i] * g;
      }
    }
    ggamma[static_cast<size_t>(c)] += dg;
    gbeta[static_cast<size_t>(c)] += db;
  }
  return shared_normalize_backward(saved_, dxhat);
}

void BatchNorm::collect_params(std::vector<Param*>& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
}

void BatchNorm::collect_state(std::vector<Tensor*>& out) {
  out.push_back(&gamma_.value);
  out.push_back(&beta_.value);
  out.push_back(&running_mean_);
  out.push_back(&running_var_);
}

BruteForceSepBN::BruteForceSepBN(std::string name, int channels, int k, double eps, double momentum)
  : Layer(std::move(name)), channels_(channels), eps_(eps), momentum_(momentum) {
  if (k < 2) throw ParameterError("brute-force SepBN needs K >= 2 branches");
  branches_.reserve(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) {
    const std::string prefix = this->name() + ".branch" + std::to_string(i);
    Branch br{Param(prefix + ".gamma", Tensor::full({channels}, 1.0), false),
              Param(prefix + ".beta", Tensor({channels}), false), Tensor({channels}),
              Tensor::full({channels}, 1.0)};
    branches_.push_back(std::move(br));
  }
}

Tensor BruteForceSepBN::forward(const Tensor& x, const Ctx& ctx) {
  require_channels(x, channels_, name());
  const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
  const int K = branch_count();

  std::vector<int> route(static_cast<size_t>(N));
  if (ctx.forced_branch >= 0) {
    if (ctx.forced_branch >= K)
      throw RoutingError(name() + ": forced branch " + std::to_string(ctx.forced_branch) +
                         " out of range [0," + std::to_string(K) + ")");
    std::fill(route.begin(), route.end(), ctx.forced_branch);
  } else {
    if (!ctx.domains) throw RoutingError(name() + ": domain labels required");
    if (static_cast<int>(ctx.domains->size()) != N)
      throw RoutingError(name() + ": got " + std::to_string(ctx.domains->size()) +
                         " labels for a batch of " + std::to_string(N));
    for (int n = 0; n < N; ++n) {
      const int d = (*ctx.domains)[static_cast<size_t>(n)];
      if (d < 0 || d >= K)
        throw RoutingError(name() + ": domain label " + std::to_string(d) + " out of range [0," +
                           std::to_string(K) + ")");
      route[static_cast<size_t>(n)] = d;
    }
  }

  in_shape_ = x.shape();
  routed_.clear();
  Tensor y(x.shape());
  const int64_t spatial = static_cast<int64_t>(H) * W;

  for (int k = 0; k < K; ++k) {
    std::vector<int> samples;
    for (int n = 0; n < N; ++n)
      if (route[static_cast<size_t>(n)] == k) samples.push_back(n);
    if (samples.empty()) continue;
    if (ctx.mode == Mode::kTrain && static_cast<int64_t>(samples.size()) * spatial < 2)
      throw DegenerateStatsError(name() + ": branch " + std::to_string(k) +
                                 " received a single spatial-singleton sample");

    Branch& br = branches_[static_cast<size_t>(k)];
    Tensor xs = gather_samples(x, samples);
    Routed r;
    r.branch = k;
    r.samples = samples;
    Tensor xhat =
        shared_normalize(xs, ctx.mode, br.running_mean, br.running_var, eps_, momentum_, r.saved);
    Tensor ys(xs.shape());
    const int nk = static_cast<int>(samples.size());
    for (int n = 0; n < nk; ++n)
      for (int c = 0; c < channels_; ++c) {
        const double g = br.gamma.value[c], b = br.beta.value[c];
        const int64_t off = (static_cast<int64_t>(n) * channels_ + c) * spatial;
        for (int64_t i = 0; i < spatial; ++i) ys[off + i] = g * xhat[off + i] + b;
      }
    scatter_samples(ys, samples, y);
    routed_.push_back(std::move(r));
  }
  mark_forward();
  return y;
}

Tensor BruteForceSepBN::backward(const Tensor& grad_out) {
  take_forward();
  Tensor gx(in_shape_);
  const int64_t spatial = static_cast<int64_t>(in_shape_[2]) * in_shape_[3];
  for (Routed& r : routed_) {
    Branch& br = branches_[static_cast<size_t>(r.branch)];
    Tensor gs = gather_samples(grad_out, r.samples);
    const Tensor& xhat = r.saved.xhat;
    Tensor dxhat(gs.shape());
    auto& ggamma = br.gamma.value.grad();
    auto& gbeta = br.beta.value.grad();
    const int nk = static_cast<int>(r.samples.size());
    for (int c = 0; c < channels_; ++c) {
      double dg = 0.0, db = 0.0;
      const double g = br.gamma.value[c];
      for (int n = 0; n < nk; ++n) {
        const int64_t off = (static_cast<int64_t>(n) * channels_ + c) * spatial;
        for (int64_t i = 0; i < spatial; ++i) {
          dg += gs[off + i] * xhat[off + i];
          db += gs[off + i];
          dxhat[off + i] = gs[off + i] * g;
        }
      }
      ggamma[static_cast<size_t>(c)] += dg;
      gbeta[static_cast<size_t>(c)] += db;
    }
    Tensor dxs = shared_normalize_backward(r.saved, dxhat);
    scatter_samples(dxs, r.samples, gx);
  }
  return gx;
}

void BruteForceSepBN::collect_params(std::vector<Param*>& out) {
  for (Branch& br : branches_) {
    out.push_back(&br.gamma);
    out.push_back(&br.beta);
  }
}

void BruteForceSepBN::collect_state(std::vector<Tensor*>& out) {
  for (Branch& br : branches_) {
    out.push_back(&br.gamma.value);
    out.push_back(&br.beta.value);
    out.push_back(&br.running_mean);
    out.push_back(&br.running_var);
  }
}

namespace {

Tensor init_mapping_sets(int k, int channels, Rng& rng) {
  // Identical sets would be a saddle for the attention; break the tie.
  Tensor g({k, channels});
  for (int64_t i = 0; i < g.numel(); ++i) g[i] = 1.0 + rng.uniform(-0.1, 0.1);
  return g;
}

}  // namespace

SimpleSepBN::SimpleSepBN(std::string name, int channels, int k, int reduction, Rng& rng, double eps,
                         double momentum)
  : Layer(std::move(name)),
    channels_(channels),
    k_(k),
    reduced_(0),
    eps_(eps),
    momentum_(momentum),
    gamma_(this->name() + ".gamma", init_mapping_sets(k, channels, rng), false),
    beta_(this->name() + ".beta", Tensor({k, channels}), false),
    sq_w_(this->name() + ".squeeze.weight", Tensor({std::max(1, channels / std::max(1, reduction)), channels}), true),
    sq_b_(this->name() + ".squeeze.bias", Tensor({std::max(1, channels / std::max(1, reduction))}), false),
    ex_w_(this->name() + ".excite.weight", Tensor({k, std::max(1, channels / std::max(1, reduction))}), true),
    ex_b_(this->name() + ".excite.bias", Tensor({k}), false),
    running_mean_(Tensor({channels})),
    running_var_(Tensor::full({channels}, 1.0)) {
  if (k < 1) throw ParameterError("simple SepBN needs K >= 1");
  if (reduction < 1 || channels % reduction != 0)
    throw ParameterError("simple SepBN channels " + std::to_string(channels) +
                         " not divisible by reduction rate " + std::to_string(reduction));
  reduced_ = channels / reduction;
  init_fan_in(sq_w_.value, channels, rng);
  init_fan_in(sq_b_.value, channels, rng);
  init_fan_in(ex_w_.value, reduced_, rng);
  init_fan_in(ex_b_.value, reduced_, rng);
}

Tensor SimpleSepBN::forward(const Tensor& x, const Ctx& ctx) {
  require_channels(x, channels_, name());
  const int N = x.dim(0);
  const int64_t spatial = x.numel() / (static_cast<int64_t>(N) * channels_);
  in_shape_ = x.shape();

  Tensor xhat = shared_normalize(x, ctx.mode, running_mean_, running_var_, eps_, momentum_, saved_);

  Tensor gap = ops::global_avg_pool(x);
  pooled_ = Tensor({N, channels_}, gap.vec());
  h_pre_ = ops::linear(pooled_, sq_w_.value, sq_b_.value);
  h_ = ops::leaky_relu(h_pre_, 1e-2);
  Tensor e_pre = ops::linear(h_, ex_w_.value, ex_b_.value);
  excite_ = ops::sigmoid(e_pre);
  lambda_ = ops::temp_softmax(excite_, tau_);

  gamma_hat_ = Tensor({N, channels_});
  beta_hat_ = Tensor({N, channels_});
  for (int n = 0; n < N; ++n)
    for (int k = 0; k < k_; ++k) {
      const double w = lambda_[static_cast<int64_t>(n) * k_ + k];
      for (int c = 0; c < channels_; ++c) {
        gamma_hat_[static_cast<int64_t>(n) * channels_ + c] += w * gamma_.value[static_cast<int64_t>(k) * channels_ + c];
        beta_hat_[static_cast<int64_t>(n) * channels_ + c] += w * beta_.value[static_cast<int64_t>(k) * channels_ + c];
      }
    }

  Tensor y(x.shape());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < channels_; ++c) {
      const double g = gamma_hat_[static_cast<int64_t>(n) * channels_ + c];
      const double b = beta_hat_[static_cast<int64_t>(n) * channels_ + c];
      const int64_t off = (static_cast<int64_t>(n) * channels_ + c) * spatial;
      for (int64_t i = 0; i < spatial; ++i) y[off + i] = g * xhat[off + i] + b;
    }
  mark_forward();
  return y;
}

Tensor SimpleSepBN::backward(const Tensor& grad_out) {
  take_forward();
  const Tensor& xhat = saved_.xhat;
  const int N = grad_out.dim(0);
  const int64_t spatial = grad_out.numel() / (static_cast<int64_t>(N) * channels_);

  Tensor dgh({N, channels_}), dbh({N, channels_});
  Tensor dxhat(grad_out.shape());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < channels_; ++c) {
      const int64_t off = (static_cast<int64_t>(n) * channels_ + c) * spatial;
      double sg = 0.0, sb = 0.0;
      const double gh = gamma_hat_[static_cast<int64_t>(n) * channels_ + c];
      for (int64_t i = 0; i < spatial; ++i) {
        sg += grad_out[off + i] * xhat[off + i];
        sb += grad_out[off + i];
        dxhat[off + i] = grad_out[off + i] * gh;
      }
      dgh[static_cast<int64_t>(n) * channels_ + c] = sg;
      dbh[static_cast<int64_t>(n) * channels_ + c] = sb;
    }

  // Mapping sets and attention weights.
  Tensor dlambda({N, k_});
  for (int n = 0; n < N; ++n)
    for (int k = 0; k < k_; ++k) {
      const double w = lambda_[static_cast<int64_t>(n) * k_ + k];
      double acc = 0.0;
      for (int c = 0; c < channels_; ++c) {
        const int64_t nc = static_cast<int64_t>(n) * channels_ + c;
        const int64_t kc = static_cast<int64_t>(k) * channels_ + c;
        gamma_.value.grad()[static_cast<size_t>(kc)] += w * dgh[nc];
        beta_.value.grad()[static_cast<size_t>(kc)] += w * dbh[nc];
        acc += dgh[nc] * gamma_.value[kc] + dbh[nc] * beta_.value[kc];
      }
      dlambda[static_cast<int64_t>(n) * k_ + k] = acc;
    }

  Tensor de = ops::temp_softmax_backward(lambda_, dlambda, tau_);
  Tensor de_pre = ops::sigmoid_backward(excite_, de);
  Tensor dh(h_.shape());
  Tensor gw_ex(ex_w_.value.shape()), gb_ex(ex_b_.value.shape());
  ops::linear_backward(h_, ex_w_.value, de_pre, &dh, gw_ex, gb_ex);
  accumulate(ex_w_, gw_ex);
  accumulate(ex_b_, gb_ex);
  Tensor dh_pre = ops::leaky_relu_backward(h_pre_, dh, 1e-2);
  Tensor dpooled(pooled_.shape());
  Tensor gw_sq(sq_w_.value.shape()), gb_sq(sq_b_.value.shape());
  ops::linear_backward(pooled_, sq_w_.value, dh_pre, &dpooled, gw_sq, gb_sq);
  accumulate(sq_w_, gw_sq);
  accumulate(sq_b_, gb_sq);

  Tensor dgap({N, channels_, 1, 1}, dpooled.vec());
  Tensor gx_att = ops::global_avg_pool_backward(dgap, in_shape_);
  Tensor gx = shared_normalize_backward(saved_, dxhat);
  for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += gx_att[i];
  return gx;
}

void SimpleSepBN::collect_params(std::vector<Param*>& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
  out.push_back(&sq_w_);
  out.push_back(&sq_b_);
  out.push_back(&ex_w_);
  out.push_back(&ex_b_);
}

void SimpleSepBN::collect_state(std::vector<Tensor*>& out) {
  Layer::collect_state(out);
  out.push_back(&running_mean_);
  out.push_back(&running_var_);
}

SepBN::SepBN(std::string name, int channels, int k, int g, int t, Rng& rng, Aggregation agg,
             double eps, double momentum)
  : Layer(std::move(name)),
    channels_(channels),
    k_(k),
    g_(g),
    t_(t),
    group_size_(0),
    hidden_(g * t * t),
    eps_(eps),
    momentum_(momentum),
    agg_(agg),
    gamma_(this->name() + ".gamma", init_mapping_sets(k, channels, rng), false),
    beta_(this->name() + ".beta", Tensor({k, channels}), false),
    conv_w_(this->name() + ".attn_conv.weight", Tensor({g, channels}), true),
    conv_b_(this->name() + ".attn_conv.bias", Tensor({g}), false),
    mlp_w1_(this->name() + ".mlp1.weight", Tensor({g * t * t, g * t * t}), true),
    mlp_b1_(this->name() + ".mlp1.bias", Tensor({g * t * t}), false),
    mlp_w2_(this->name() + ".mlp2.weight", Tensor({g * k, g * t * t}), true),
    mlp_b2_(this->name() + ".mlp2.bias", Tensor({g * k}), false),
    running_mean_(Tensor({channels})),
    running_var_(Tensor::full({channels}, 1.0)) {
  if (k < 1) throw ParameterError("SepBN needs K >= 1");
  if (g < 1 || channels % g != 0)
    throw ParameterError("SepBN channels " + std::to_string(channels) +
                         " not divisible into G = " + std::to_string(g) + " groups");
  if (t < 1) throw ParameterError("SepBN pooling size T must be >= 1");
  group_size_ = channels / g;
  init_fan_in(conv_w_.value, channels, rng);
  init_fan_in(conv_b_.value, channels, rng);
  init_fan_in(mlp_w1_.value, hidden_, rng);
  init_fan_in(mlp_b1_.value, hidden_, rng);
  // Zero output layer: attention starts uniform, the module behaves as
  // standard BN at initialization.
}

Tensor SepBN::attention_forward(const Tensor& x) {
  const int N = x.dim(0);
  const int tt = t_ * t_;

  amp_out_ = ops::adaptive_max_pool2d(x, t_, amp_argmax_);

  // 1x1 convolution C -> G over the pooled map.
  conv_out_ = Tensor({N, g_, t_, t_});
  for (int n = 0; n < N; ++n)
    for (int g = 0; g < g_; ++g) {
      double* out = conv_out_.data() + (static_cast<int64_t>(n) * g_ + g) * tt;
      for (int i = 0; i < tt; ++i) out[i] = conv_b_.value[g];
      for (int c = 0; c < channels_; ++c) {
        const double w = conv_w_.value[static_cast<int64_t>(g) * channels_ + c];
        const double* in = amp_out_.data() + (static_cast<int64_t>(n) * channels_ + c) * tt;
        for (int i = 0; i < tt; ++i) out[i] += w * in[i];
      }
    }

  Tensor flat({N, g_ * tt}, conv_out_.vec());
  m1_pre_ = ops::linear(flat, mlp_w1_.value, mlp_b1_.value);
  m1_ = ops::leaky_relu(m1_pre_, 1e-2);
  Tensor logits = ops::linear(m1_, mlp_w2_.value, mlp_b2_.value);
  Tensor logits3({N, g_, k_}, logits.vec());
  pi_ = ops::temp_softmax(logits3, tau_);
  return pi_;
}

Tensor SepBN::attention(const Tensor& x) {
  require_channels(x, channels_, name());
  return attention_forward(x);
}

Tensor SepBN::forward(const Tensor& x, const Ctx& ctx) {
  require_channels(x, channels_, name());
  const int N = x.dim(0);
  const int64_t spatial = x.numel() / (static_cast<int64_t>(N) * channels_);
  in_shape_ = x.shape();

  Tensor xhat = shared_normalize(x, ctx.mode, running_mean_, running_var_, eps_, momentum_, saved_);
  attention_forward(x);

  gamma_hat_ = Tensor({N, channels_});
  beta_hat_ = Tensor({N, channels_});
  for (int n = 0; n < N; ++n)
    for (int g = 0; g < g_; ++g) {
      const double* pi_row = pi_.data() + (static_cast<int64_t>(n) * g_ + g) * k_;
      const int c0 = g * group_size_;
      if (agg_ == Aggregation::kSoft) {
        for (int k = 0; k < k_; ++k) {
          const double w = pi_row[k];
          const double* gk = gamma_.value.data() + static_cast<int64_t>(k) * channels_;
          const double* bk = beta_.value.data() + static_cast<int64_t>(k) * channels_;
          for (int c = c0; c < c0 + group_size_; ++c) {
            gamma_hat_[static_cast<int64_t>(n) * channels_ + c] += w * gk[c];
            beta_hat_[static_cast<int64_t>(n) * channels_ + c] += w * bk[c];
          }
        }
      } else {
        int best = 0;
        for (int k = 1; k < k_; ++k)
          if (pi_row[k] > pi_row[best]) best = k;
        const double* gk = gamma_.value.data() + static_cast<int64_t>(best) * channels_;
        const double* bk = beta_.value.data() + static_cast<int64_t>(best) * channels_;
        for (int c = c0; c < c0 + group_size_; ++c) {
          gamma_hat_[static_cast<int64_t>(n) * channels_ + c] = gk[c];
          beta_hat_[static_cast<int64_t>(n) * channels_ + c] = bk[c];
        }
      }
    }

  Tensor y(x.shape());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < channels_; ++c) {
      const double g = gamma_hat_[static_cast<int64_t>(n) * channels_ + c];
      const double b = beta_hat_[static_cast<int64_t>(n) * channels_ + c];
      const int64_t off = (static_cast<int64_t>(n) * channels_ + c) * spatial;
      for (int64_t i = 0; i < spatial; ++i) y[off + i] = g * xhat[off + i] + b;
    }
  mark_forward();
  return y;
}

Tensor SepBN::backward(const Tensor& grad_out) {
  take_forward();
  const Tensor& xhat = saved_.xhat;
  const int N = grad_out.dim(0);
  const int64_t spatial = grad_out.numel() / (static_cast<int64_t>(N) * channels_);
  const int tt = t_ * t_;

  Tensor dgh({N, channels_}), dbh({N, channels_});
  Tensor dxhat(grad_out.shape());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < channels_; ++c) {
      const int64_t off = (static_cast<int64_t>(n) * channels_ + c) * spatial;
      double sg = 0.0, sb = 0.0;
      const double gh = gamma_hat_[static_cast<int64_t>(n) * channels_ + c];
      for (int64_t i = 0; i < spatial; ++i) {
        sg += grad_out[off + i] * xhat[off + i];
        sb += grad_out[off + i];
        dxhat[off + i] = grad_out[off + i] * gh;
      }
      dgh[static_cast<int64_t>(n) * channels_ + c] = sg;
      dbh[static_cast<int64_t>(n) * channels_ + c] = sb;
    }

  Tensor gx = shared_normalize_backward(saved_, dxhat);

  if (agg_ == Aggregation::kHard) {
    // Selected set still learns; the attention path receives no gradient.
    for (int n = 0; n < N; ++n)
      for (int g = 0; g < g_; ++g) {
        const double* pi_row = pi_.data() + (static_cast<int64_t>(n) * g_ + g) * k_;
        int best = 0;
        for (int k = 1; k < k_; ++k)
          if (pi_row[k] > pi_row[best]) best = k;
        const int c0 = g * group_size_;
        for (int c = c0; c < c0 + group_size_; ++c) {
          const int64_t nc = static_cast<int64_t>(n) * channels_ + c;
          const int64_t kc = static_cast<int64_t>(best) * channels_ + c;
          gamma_.value.grad()[static_cast<size_t>(kc)] += dgh[nc];
          beta_.value.grad()[static_cast<size_t>(kc)] += dbh[nc];
        }
      }
    return gx;
  }

  Tensor dpi({N, g_, k_});
  for (int n = 0; n < N; ++n)
    for (int g = 0; g < g_; ++g) {
      const double* pi_row = pi_.data() + (static_cast<int64_t>(n) * g_ + g) * k_;
      const int c0 = g * group_size_;
      for (int k = 0; k < k_; ++k) {
        const double w = pi_row[k];
        double acc = 0.0;
        for (int c = c0; c < c0 + group_size_; ++c) {
          const int64_t nc = static_cast<int64_t>(n) * channels_ + c;
          const int64_t kc = static_cast<int64_t>(k) * channels_ + c;
          gamma_.value.grad()[static_cast<size_t>(kc)] += w * dgh[nc];
          beta_.value.grad()[static_cast<size_t>(kc)] += w * dbh[nc];
          acc += dgh[nc] * gamma_.value[kc] + dbh[nc] * beta_.value[kc];
        }
        dpi[(static_cast<int64_t>(n) * g_ + g) * k_ + k] = acc;
      }
    }

  Tensor dlogits3 = ops::temp_softmax_backward(pi_, dpi, tau_);
  Tensor dlogits({N, g_ * k_}, dlogits3.vec());
  Tensor dm1(m1_.shape());
  Tensor gw2(mlp_w2_.value.shape()), gb2(mlp_b2_.value.shape());
  ops::linear_backward(m1_, mlp_w2_.value, dlogits, &dm1, gw2, gb2);
  accumulate(mlp_w2_, gw2);
  accumulate(mlp_b2_, gb2);
  Tensor dm1_pre = ops::leaky_relu_backward(m1_pre_, dm1, 1e-2);
  Tensor flat({N, g_ * tt}, conv_out_.vec());
  Tensor dflat(flat.shape());
  Tensor gw1(mlp_w1_.value.shape()), gb1(mlp_b1_.value.shape());
  ops::linear_backward(flat, mlp_w1_.value, dm1_pre, &dflat, gw1, gb1);
  accumulate(mlp_w1_, gw1);
  accumulate(mlp_b1_, gb1);

  // 1x1 conv backward.
  Tensor damp(amp_out_.shape());
  for (int n = 0; n < N; ++n)
    for (int g = 0; g < g_; ++g) {
      const double* dq = dflat.data() + (static_cast<int64_t>(n) * g_ + g) * tt;
      double bsum = 0.0;
      for (int i = 0; i < tt; ++i) bsum += dq[i];
      conv_b_.value.grad()[static_cast<size_t>(g)] += bsum;
      for (int c = 0; c < channels_; ++c) {
        const double* a = amp_out_.data() + (static_cast<int64_t>(n) * channels_ + c) * tt;
        double* da = damp.data() + (static_cast<int64_t>(n) * channels_ + c) * tt;
        const double w = conv_w_.value[static_cast<int64_t>(g) * channels_ + c];
        double wsum = 0.0;
        for (int i = 0; i < tt; ++i) {
          wsum += dq[i] * a[i];
          da[i] += w * dq[i];
        }
        conv_w_.value.grad()[static_cast<size_t>(static_cast<int64_t>(g) * channels_ + c)] += wsum;
      }
    }

  Tensor gx_att = ops::pool_backward(amp_argmax_, damp, in_shape_);
  for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += gx_att[i];
  return gx;
}

void SepBN::collect_params(std::vector<Param*>& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
  out.push_back(&conv_w_);
  out.push_back(&conv_b_);
  out.push_back(&mlp_w1_);
  out.push_back(&mlp_b1_);
  out.push_back(&mlp_w2_);
  out.push_back(&mlp_b2_);
}

void SepBN::collect_state(std::vector<Tensor*>& out) {
  Layer::collect_state(out);
  out.push_back(&running_mean_);
  out.push_back(&running_var_);
}

double param_similarity(const std::vector<std::vector<double>>& vectors) {
  const size_t k = vectors.size();
  if (k < 2) throw ParameterError("similarity needs at least 2 vectors");
  std::vector<double> norms(k);
  for (size_t i = 0; i < k; ++i) {
    double n = 0.0;
    for (double v : vectors[i]) n += v * v;
    norms[i] = std::sqrt(n);
    if (norms[i] == 0.0) throw MetricError("undefined similarity: zero-norm vector");
  }
  double acc = 0.0;
  int pairs = 0;
  for (size_t i = 0; i < k; ++i)
    for (size_t j = i + 1; j < k; ++j) {
      if (vectors[i].size() != vectors[j].size())
        throw DimensionError("similarity vectors must share length");
      double dot = 0.0;
      for (size_t t = 0; t < vectors[i].size(); ++t) dot += vectors[i][t] * vectors[j][t];
      acc += dot / (norms[i] * norms[j]);
      ++pairs;
    }
  return acc / pairs;
}

namespace {

std::optional<double> safe_similarity(const std::vector<std::vector<double>>& vs) {
  try {
    return param_similarity(vs);
  } catch (const MetricError&) {
    return std::nullopt;
  }
}

std::vector<std::vector<double>> mapping_rows(const Tensor& sets) {
  const int k = sets.dim(0), c = sets.dim(1);
  std::vector<std::vector<double>> rows;
  for (int i = 0; i < k; ++i)
    rows.emplace_back(sets.data() + static_cast<int64_t>(i) * c,
                      sets.data() + static_cast<int64_t>(i + 1) * c);
  return rows;
}

}  // namespace

std::optional<SimilarityRow> norm_similarity(Layer& layer) {
  if (auto* bf = dynamic_cast<BruteForceSepBN*>(&layer)) {
    const int k = bf->branch_count();
    std::vector<std::vector<double>> rm, rv, sc, sh;
    for (int i = 0; i < k; ++i) {
      auto& br = bf->branch(i);
      rm.push_back(br.running_mean.vec());
      rv.push_back(br.running_var.vec());
      sc.push_back(br.gamma.value.vec());
      sh.push_back(br.beta.value.vec());
    }
    SimilarityRow row{layer.name(), safe_similarity(rm), safe_similarity(rv), safe_similarity(sc),
                      safe_similarity(sh)};
    return row;
  }
  if (auto* sb = dynamic_cast<SepBN*>(&layer)) {
    if (sb->set_count() < 2) return std::nullopt;
    SimilarityRow row{layer.name(), std::nullopt, std::nullopt,
                      safe_similarity(mapping_rows(sb->gamma().value)),
                      safe_similarity(mapping_rows(sb->beta().value))};
    return row;
  }
  if (auto* ss = dynamic_cast<SimpleSepBN*>(&layer)) {
    if (ss->gamma().value.dim(0) < 2) return std::nullopt;
    SimilarityRow row{layer.name(), std::nullopt, std::nullopt,
                      safe_similarity(mapping_rows(ss->gamma().value)),
                      safe_similarity(mapping_rows(ss->beta().value))};
    return row;
  }
  return std::nullopt;
}

}  // namespace sepbn
