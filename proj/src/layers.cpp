#include "microbia/layers.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <string>

#include <Eigen/Core>

namespace microbia {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t kernels, kh, kw;
  std::size_t out_h, out_w;
  std::size_t patch() const { return channels * kh * kw; }
  std::size_t out_area() const { return out_h * out_w; }
};

template <typename T>
ConvGeometry conv_geometry(const BasicTensor<T>& input, const ConvParams<T>& params) {
  if (input.rank() != 4)
    throw DimensionError("conv2d: input must be B x C x H x W, got " + shape_string(input.shape()));
  if (params.weight.rank() != 4)
    throw DimensionError("conv2d: weight must be K x C x kH x kW, got " +
                         shape_string(params.weight.shape()));
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3),
                 params.weight.dim(0), params.weight.dim(2), params.weight.dim(3), 0, 0};
  if (params.weight.dim(1) != g.channels)
    throw DimensionError("conv2d: input has " + std::to_string(g.channels) +
                         " channels, kernels expect " + std::to_string(params.weight.dim(1)));
  if (params.bias.size() != g.kernels)
    throw DimensionError("conv2d: bias size does not match kernel count");
  if (g.height < g.kh || g.width < g.kw)
    throw DimensionError("conv2d: input " + shape_string(input.shape()) +
                         " smaller than kernel " + shape_string(params.weight.shape()));
  g.out_h = g.height - g.kh + 1;
  g.out_w = g.width - g.kw + 1;
  return g;
}

// Patch matrix of one sample: rows (c, ki, kj), columns (oh, ow).
template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* col) {
  const std::size_t area = g.out_area();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = col + ((c * g.kh + ki) * g.kw + kj) * area;
        const T* src = image + (c * g.height + ki) * g.width + kj;
        for (std::size_t oh = 0; oh < g.out_h; ++oh)
          std::memcpy(row + oh * g.out_w, src + oh * g.width, g.out_w * sizeof(T));
      }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* image) {
  const std::size_t area = g.out_area();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = col + ((c * g.kh + ki) * g.kw + kj) * area;
        T* dst = image + (c * g.height + ki) * g.width + kj;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const T* r = row + oh * g.out_w;
          T* d = dst + oh * g.width;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) d[ow] += r[ow];
        }
      }
}

std::size_t channel_count(const Shape& s) { return s[1]; }
std::size_t spatial_count(const Shape& s) { return s.size() == 4 ? s[2] * s[3] : 1; }

}  // namespace

// ---------------------------------------------------------------------------

template <typename T>
ConvParams<T> ConvParams<T>::zeros(std::size_t out_channels, std::size_t in_channels,
                                   std::size_t kh, std::size_t kw) {
  return {BasicTensor<T>({out_channels, in_channels, kh, kw}), BasicTensor<T>({out_channels})};
}

template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const ConvParams<T>& params) {
  const ConvGeometry g = conv_geometry(input, params);
  BasicTensor<T> out({g.batch, g.kernels, g.out_h, g.out_w});
  AlignedVector<T> col(g.patch() * g.out_area());
  ConstMapMat<T> w(params.weight.data(), g.kernels, g.patch());
  ConstMapMat<T> colm(col.data(), g.patch(), g.out_area());
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bias(params.bias.data(), g.kernels);
  const std::size_t in_stride = g.channels * g.height * g.width;
  const std::size_t out_stride = g.kernels * g.out_area();
  for (std::size_t b = 0; b < g.batch; ++b) {
    im2col(input.data() + b * in_stride, g, col.data());
    MapMat<T> o(out.data() + b * out_stride, g.kernels, g.out_area());
    o.noalias() = w * colm;
    o.colwise() += bias;
  }
  require_finite(out, "conv2d_forward");
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& input, const ConvParams<T>& params,
                             const BasicTensor<T>& grad_out, bool want_input_grad,
                             bool want_param_grads) {
  const ConvGeometry g = conv_geometry(input, params);
  require_shape(grad_out, {g.batch, g.kernels, g.out_h, g.out_w}, "conv2d_backward grad_out");
  ConvGrads<T> grads;
  if (want_param_grads) {
    grads.weight = BasicTensor<T>(params.weight.shape());
    grads.bias = BasicTensor<T>(params.bias.shape());
  }
  if (want_input_grad) grads.input = BasicTensor<T>(input.shape());
  if (!want_param_grads && !want_input_grad) return grads;

  AlignedVector<T> col(g.patch() * g.out_area());
  MapMat<T> colm(col.data(), g.patch(), g.out_area());
  ConstMapMat<T> w(params.weight.data(), g.kernels, g.patch());
  const std::size_t in_stride = g.channels * g.height * g.width;
  const std::size_t out_stride = g.kernels * g.out_area();
  for (std::size_t b = 0; b < g.batch; ++b) {
    ConstMapMat<T> go(grad_out.data() + b * out_stride, g.kernels, g.out_area());
    if (want_param_grads) {
      im2col(input.data() + b * in_stride, g, col.data());
      MapMat<T> gw(grads.weight.data(), g.kernels, g.patch());
      gw.noalias() += go * colm.transpose();
      Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> gb(grads.bias.data(), g.kernels);
      gb += go.rowwise().sum();
    }
    if (want_input_grad) {
      colm.noalias() = w.transpose() * go;
      col2im(col.data(), g, grads.input.data() + b * in_stride);
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------

template <typename T>
PoolResult<T> maxpool2x2_forward(const BasicTensor<T>& input) {
  if (input.rank() != 4)
    throw DimensionError("maxpool2x2: input must be rank 4, got " + shape_string(input.shape()));
  const std::size_t planes = input.dim(0) * input.dim(1);
  const std::size_t h = input.dim(2), w = input.dim(3);
  if (h % 2 != 0 || w % 2 != 0)
    throw DimensionError("maxpool2x2: spatial dims must be even, got " + shape_string(input.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  PoolResult<T> r{BasicTensor<T>({input.dim(0), input.dim(1), oh, ow}), {}};
  r.argmax.resize(r.output.size());
  const T* in = input.data();
  T* out = r.output.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const std::size_t base = p * h * w + (2 * i) * w + 2 * j;
        const std::size_t cand[4] = {base, base + 1, base + w, base + w + 1};
        std::size_t best = cand[0];
        for (int k = 1; k < 4; ++k)
          if (in[cand[k]] > in[best]) best = cand[k];
        const std::size_t o = (p * oh + i) * ow + j;
        out[o] = in[best];
        r.argmax[o] = static_cast<std::uint32_t>(best);
      }
  return r;
}

template <typename T>
BasicTensor<T> maxpool2x2_backward(const BasicTensor<T>& grad_out,
                                   std::span<const std::uint32_t> argmax,
                                   const Shape& input_shape) {
  if (argmax.size() != grad_out.size())
    throw DimensionError("maxpool2x2_backward: argmax does not match grad_out");
  BasicTensor<T> grad(input_shape);
  for (std::size_t o = 0; o < grad_out.size(); ++o) grad[argmax[o]] += grad_out[o];
  return grad;
}

// ---------------------------------------------------------------------------

template <typename T>
BatchNormParams<T> BatchNormParams<T>::identity(std::size_t channels) {
  BatchNormParams p;
  p.gamma = BasicTensor<T>({channels}, T{1});
  p.beta = BasicTensor<T>({channels});
  p.running_mean = BasicTensor<T>({channels});
  p.running_var = BasicTensor<T>({channels}, T{1});
  return p;
}

namespace {

template <typename T>
BasicTensor<T> batchnorm_impl(const BasicTensor<T>& input, const BatchNormParams<T>& params,
                              Mode mode, BatchNormCache<T>* cache, BatchNormParams<T>* running) {
  if (input.rank() != 2 && input.rank() != 4)
    throw DimensionError("batchnorm: input must be rank 2 or 4, got " + shape_string(input.shape()));
  const std::size_t batch = input.dim(0);
  const std::size_t channels = channel_count(input.shape());
  const std::size_t spatial = spatial_count(input.shape());
  if (channels != params.channels())
    throw DimensionError("batchnorm: input has " + std::to_string(channels) +
                         " channels, parameters have " + std::to_string(params.channels()));
  if (mode == Mode::Train && batch < 2)
    throw DimensionError("batchnorm: train mode needs a batch of at least 2 (degenerate batch)");

  BasicTensor<T> out(input.shape());
  BasicTensor<T> normalized(input.shape());
  std::vector<T> inv_std(channels);
  const std::size_t count = batch * spatial;
  for (std::size_t c = 0; c < channels; ++c) {
    double mean, var;
    if (mode == Mode::Train) {
      double sum = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* x = input.data() + (b * channels + c) * spatial;
        T part{0};
        for (std::size_t s = 0; s < spatial; ++s) part += x[s];
        sum += part;
      }
      mean = sum / static_cast<double>(count);
      double sq = 0.0;
      const T tm = static_cast<T>(mean);
      for (std::size_t b = 0; b < batch; ++b) {
        const T* x = input.data() + (b * channels + c) * spatial;
        T part{0};
        for (std::size_t s = 0; s < spatial; ++s) part += (x[s] - tm) * (x[s] - tm);
        sq += part;
      }
      var = sq / static_cast<double>(count);
      const double unbiased = sq / static_cast<double>(count - 1);
      const double m = params.momentum;
      running->running_mean[c] = static_cast<T>((1.0 - m) * params.running_mean[c] + m * mean);
      running->running_var[c] = static_cast<T>((1.0 - m) * params.running_var[c] + m * unbiased);
    } else {
      mean = params.running_mean[c];
      var = params.running_var[c];
    }
    const double istd = 1.0 / std::sqrt(var + params.epsilon);
    inv_std[c] = static_cast<T>(istd);
    const T tmean = static_cast<T>(mean), tistd = static_cast<T>(istd);
    const T gamma = params.gamma[c], beta = params.beta[c];
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t off = (b * channels + c) * spatial;
      const T* x = input.data() + off;
      T* xh = normalized.data() + off;
      T* y = out.data() + off;
      for (std::size_t s = 0; s < spatial; ++s) {
        xh[s] = (x[s] - tmean) * tistd;
        y[s] = gamma * xh[s] + beta;
      }
    }
  }
  require_finite(out, "batchnorm_forward");
  if (cache) {
    cache->mode = mode;
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

}  // namespace

template <typename T>
BasicTensor<T> batchnorm_forward(const BasicTensor<T>& input, BatchNormParams<T>& params,
                                 Mode mode, BatchNormCache<T>* cache) {
  return batchnorm_impl(input, params, mode, cache, &params);
}

template <typename T>
BasicTensor<T> batchnorm_forward(const BasicTensor<T>& input, const BatchNormParams<T>& params,
                                 BatchNormCache<T>* cache) {
  return batchnorm_impl<T>(input, params, Mode::Eval, cache, nullptr);
}

template <typename T>
BatchNormGrads<T> batchnorm_backward(const BasicTensor<T>& grad_out,
                                     const BatchNormParams<T>& params,
                                     const BatchNormCache<T>& cache) {
  require_shape(grad_out, cache.normalized.shape(), "batchnorm_backward grad_out");
  const std::size_t batch = grad_out.dim(0);
  const std::size_t channels = channel_count(grad_out.shape());
  const std::size_t spatial = spatial_count(grad_out.shape());
  const double count = static_cast<double>(batch * spatial);
  BatchNormGrads<T> g{BasicTensor<T>(grad_out.shape()), BasicTensor<T>({channels}),
                      BasicTensor<T>({channels})};
  for (std::size_t c = 0; c < channels; ++c) {
    double sum_dy = 0.0, sum_dy_xh = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t off = (b * channels + c) * spatial;
      const T* dy = grad_out.data() + off;
      const T* xh = cache.normalized.data() + off;
      T p_dy{0}, p_dy_xh{0};
      for (std::size_t s = 0; s < spatial; ++s) {
        p_dy += dy[s];
        p_dy_xh += dy[s] * xh[s];
      }
      sum_dy += p_dy;
      sum_dy_xh += p_dy_xh;
    }
    g.gamma[c] = static_cast<T>(sum_dy_xh);
    g.beta[c] = static_cast<T>(sum_dy);
    const double gamma = params.gamma[c];
    const double istd = cache.inv_std[c];
    // Train: dx = istd * gamma * (dy - mean(dy) - xh * mean(dy * xh)).
    const bool train = cache.mode == Mode::Train;
    const T scale = static_cast<T>(gamma * istd);
    const T mean_dy = train ? static_cast<T>(sum_dy / count) : T{0};
    const T mean_dy_xh = train ? static_cast<T>(sum_dy_xh / count) : T{0};
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t off = (b * channels + c) * spatial;
      const T* dy = grad_out.data() + off;
      const T* xh = cache.normalized.data() + off;
      T* dx = g.input.data() + off;
      for (std::size_t s = 0; s < spatial; ++s)
        dx[s] = scale * (dy[s] - mean_dy - xh[s] * mean_dy_xh);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> relu_forward(const BasicTensor<T>& input) {
  BasicTensor<T> out(input.shape());
  const T* x = input.data();
  T* y = out.data();
  for (std::size_t i = 0, n = input.size(); i < n; ++i) y[i] = std::max(x[i], T{0});
  require_finite(out, "relu_forward");
  return out;
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& output) {
  require_shape(grad_out, output.shape(), "relu_backward grad_out");
  BasicTensor<T> g(grad_out.shape());
  const T* dy = grad_out.data();
  const T* y = output.data();
  T* dx = g.data();
  for (std::size_t i = 0, n = g.size(); i < n; ++i) dx[i] = y[i] > T{0} ? dy[i] : T{0};
  return g;
}

template <typename T>
DenseParams<T> DenseParams<T>::zeros(std::size_t out_features, std::size_t in_features) {
  return {BasicTensor<T>({out_features, in_features}), BasicTensor<T>({out_features})};
}

template <typename T>
BasicTensor<T> dense_forward(const BasicTensor<T>& input, const DenseParams<T>& params) {
  if (input.rank() != 2 || input.dim(1) != params.in_features())
    throw DimensionError("dense: input " + shape_string(input.shape()) + " does not match " +
                         std::to_string(params.in_features()) + " input features");
  const std::size_t batch = input.dim(0), in = params.in_features(), out = params.out_features();
  BasicTensor<T> y({batch, out});
  ConstMapMat<T> x(input.data(), batch, in);
  ConstMapMat<T> w(params.weight.data(), out, in);
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(params.bias.data(), out);
  MapMat<T> ym(y.data(), batch, out);
  ym.noalias() = x * w.transpose();
  ym.rowwise() += b;
  require_finite(y, "dense_forward");
  return y;
}

template <typename T>
DenseGrads<T> dense_backward(const BasicTensor<T>& input, const DenseParams<T>& params,
                             const BasicTensor<T>& grad_out, bool want_input_grad,
                             bool want_param_grads) {
  const std::size_t batch = input.dim(0), in = params.in_features(), out = params.out_features();
  require_shape(grad_out, {batch, out}, "dense_backward grad_out");
  ConstMapMat<T> x(input.data(), batch, in);
  ConstMapMat<T> w(params.weight.data(), out, in);
  ConstMapMat<T> go(grad_out.data(), batch, out);
  DenseGrads<T> g;
  if (want_param_grads) {
    g.weight = BasicTensor<T>({out, in});
    g.bias = BasicTensor<T>({out});
    MapMat<T>(g.weight.data(), out, in).noalias() = go.transpose() * x;
    Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(g.bias.data(), out) = go.colwise().sum();
  }
  if (want_input_grad) {
    g.input = BasicTensor<T>({batch, in});
    MapMat<T>(g.input.data(), batch, in).noalias() = go * w;
  }
  return g;
}

template <typename T>
BasicTensor<T> flatten(const BasicTensor<T>& input) {
  if (input.rank() < 2) throw DimensionError("flatten: input needs a batch axis");
  return input.reshaped({input.dim(0), input.size() / input.dim(0)});
}

template <typename T>
BasicTensor<T> dropout_forward(const BasicTensor<T>& input, double p, Mode mode, Rng& rng,
                               std::vector<T>* mask) {
  if (!(p >= 0.0 && p < 1.0))
    throw ParameterError("dropout: rate must be in [0, 1), got " + std::to_string(p));
  if (mode == Mode::Eval || p == 0.0) {
    if (mask) mask->assign(input.size(), T{1});
    return input;
  }
  const T scale = static_cast<T>(1.0 / (1.0 - p));
  BasicTensor<T> out(input.shape());
  std::vector<T> m(input.size());
  for (std::size_t i = 0; i < input.size(); ++i) {
    m[i] = rng.uniform() < p ? T{0} : scale;
    out[i] = input[i] * m[i];
  }
  if (mask) *mask = std::move(m);
  return out;
}

template <typename T>
BasicTensor<T> dropout_backward(const BasicTensor<T>& grad_out, std::span<const T> mask) {
  if (mask.size() != grad_out.size())
    throw DimensionError("dropout_backward: mask does not match grad_out");
  BasicTensor<T> g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) g[i] *= mask[i];
  return g;
}

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits) {
  if (logits.rank() != 2) throw DimensionError("softmax: logits must be B x C");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  BasicTensor<T> p(logits.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    const T* z = logits.data() + b * classes;
    const double zmax = *std::max_element(z, z + classes);
    double denom = 0.0;
    for (std::size_t c = 0; c < classes; ++c) denom += std::exp(z[c] - zmax);
    for (std::size_t c = 0; c < classes; ++c)
      p[b * classes + c] = static_cast<T>(std::exp(z[c] - zmax) / denom);
  }
  return p;
}

template <typename T>
LossResult<T> softmax_crossentropy(const BasicTensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw DimensionError("softmax_crossentropy: logits must be B x C");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch)
    throw DimensionError("softmax_crossentropy: " + std::to_string(labels.size()) +
                         " labels for a batch of " + std::to_string(batch));
  LossResult<T> r{0.0, BasicTensor<T>(logits.shape())};
  for (std::size_t b = 0; b < batch; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= classes)
      throw LabelError("softmax_crossentropy: label " + std::to_string(y) + " outside [0, " +
                       std::to_string(classes) + ")");
    const T* z = logits.data() + b * classes;
    const double zmax = *std::max_element(z, z + classes);
    double denom = 0.0;
    for (std::size_t c = 0; c < classes; ++c) denom += std::exp(z[c] - zmax);
    const double log_denom = std::log(denom) + zmax;
    r.loss += log_denom - z[y];
    for (std::size_t c = 0; c < classes; ++c) {
      const double p = std::exp(z[c] - log_denom);
      r.grad_logits[b * classes + c] =
          static_cast<T>((p - (static_cast<std::size_t>(y) == c ? 1.0 : 0.0)) / batch);
    }
  }
  r.loss /= static_cast<double>(batch);
  if (!std::isfinite(r.loss)) throw NumericError("softmax_crossentropy: non-finite loss");
  return r;
}

// ---------------------------------------------------------------------------

template <typename T>
void adam_step(AdamState<T>& state, std::span<BasicTensor<T>* const> params,
               std::span<const BasicTensor<T>* const> grads) {
  if (params.size() != grads.size())
    throw DimensionError("adam_step: parameter and gradient lists differ in length");
  if (state.first_moment.empty()) {
    for (auto* p : params) {
      state.first_moment.emplace_back(p->shape());
      state.second_moment.emplace_back(p->shape());
    }
  }
  if (state.first_moment.size() != params.size())
    throw DimensionError("adam_step: optimiser state tracks a different parameter list");
  const AdamConfig& cfg = state.config;
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    BasicTensor<T>& p = *params[k];
    const BasicTensor<T>& g = *grads[k];
    require_shape(g, p.shape(), "adam_step gradient");
    require_shape(state.first_moment[k], p.shape(), "adam_step moment");
    T* m = state.first_moment[k].data();
    T* v = state.second_moment[k].data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      double grad = g[i];
      if (!cfg.decoupled_weight_decay) grad += cfg.weight_decay * p[i];
      m[i] = static_cast<T>(cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad);
      v[i] = static_cast<T>(cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad * grad);
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      double w = p[i];
      if (cfg.decoupled_weight_decay) w -= cfg.learning_rate * cfg.weight_decay * w;
      p[i] = static_cast<T>(w - cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon));
    }
    require_finite(p, "adam_step");
  }
}

template <typename T>
BasicTensor<T> kaiming_normal(const Shape& shape, std::size_t fan_in, Rng& rng) {
  if (fan_in == 0) throw ParameterError("kaiming_normal: fan_in must be positive");
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  BasicTensor<T> t(shape);
  for (auto& v : t.values()) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

// ---------------------------------------------------------------------------

#define MICROBIA_INSTANTIATE(T)                                                                 \
  template struct ConvParams<T>;                                                                \
  template struct BatchNormParams<T>;                                                           \
  template struct DenseParams<T>;                                                               \
  template BasicTensor<T> conv2d_forward(const BasicTensor<T>&, const ConvParams<T>&);          \
  template ConvGrads<T> conv2d_backward(const BasicTensor<T>&, const ConvParams<T>&,            \
                                        const BasicTensor<T>&, bool, bool);                     \
  template PoolResult<T> maxpool2x2_forward(const BasicTensor<T>&);                             \
  template BasicTensor<T> maxpool2x2_backward(const BasicTensor<T>&,                            \
                                              std::span<const std::uint32_t>, const Shape&);    \
  template BasicTensor<T> batchnorm_forward(const BasicTensor<T>&, BatchNormParams<T>&, Mode,   \
                                            BatchNormCache<T>*);                                \
  template BasicTensor<T> batchnorm_forward(const BasicTensor<T>&, const BatchNormParams<T>&,   \
                                            BatchNormCache<T>*);                                \
  template BatchNormGrads<T> batchnorm_backward(const BasicTensor<T>&, const BatchNormParams<T>&, \
                                                const BatchNormCache<T>&);                      \
  template BasicTensor<T> relu_forward(const BasicTensor<T>&);                                  \
  template BasicTensor<T> relu_backward(const BasicTensor<T>&, const BasicTensor<T>&);          \
  template BasicTensor<T> dense_forward(const BasicTensor<T>&, const DenseParams<T>&);          \
  template DenseGrads<T> dense_backward(const BasicTensor<T>&, const DenseParams<T>&,           \
                                        const BasicTensor<T>&, bool, bool);                     \
  template BasicTensor<T> flatten(const BasicTensor<T>&);                                       \
  template BasicTensor<T> dropout_forward(const BasicTensor<T>&, double, Mode, Rng&,            \
                                          std::vector<T>*);                                     \
  template BasicTensor<T> dropout_backward(const BasicTensor<T>&, std::span<const T>);          \
  template BasicTensor<T> softmax(const BasicTensor<T>&);                                       \
  template LossResult<T> softmax_crossentropy(const BasicTensor<T>&, std::span<const int>);     \
  template void adam_step(AdamState<T>&, std::span<BasicTensor<T>* const>,                      \
                          std::span<const BasicTensor<T>* const>);                              \
  template BasicTensor<T> kaiming_normal<T>(const Shape&, std::size_t, Rng&);

MICROBIA_INSTANTIATE(float)
MICROBIA_INSTANTIATE(double)
#undef MICROBIA_INSTANTIATE

}  // namespace microbia
