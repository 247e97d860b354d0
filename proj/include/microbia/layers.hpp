#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "microbia/rng.hpp"
#include "microbia/tensor.hpp"

namespace microbia {

enum class Mode { Train, Eval };

// ---------------------------------------------------------------------------
// Convolution: valid cross-correlation, stride 1, no padding.

template <typename T>
struct ConvParams {
  BasicTensor<T> weight;  // out_channels x in_channels x kH x kW
  BasicTensor<T> bias;    // out_channels

  static ConvParams zeros(std::size_t out_channels, std::size_t in_channels, std::size_t kh,
                          std::size_t kw);
  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t kernel_h() const { return weight.dim(2); }
  std::size_t kernel_w() const { return weight.dim(3); }
};

template <typename T>
struct ConvGrads {
  BasicTensor<T> input;  // empty when not requested
  BasicTensor<T> weight;
  BasicTensor<T> bias;
};

/// input B x C x H x W -> B x K x (H-kH+1) x (W-kW+1)
template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const ConvParams<T>& params);

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& input, const ConvParams<T>& params,
                             const BasicTensor<T>& grad_out, bool want_input_grad = true,
                             bool want_param_grads = true);

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2.

template <typename T>
struct PoolResult {
  BasicTensor<T> output;
  std::vector<std::uint32_t> argmax;  // flat input offset of each output cell
};

/// Ties resolve to the first cell in row-major window order.
template <typename T>
PoolResult<T> maxpool2x2_forward(const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> maxpool2x2_backward(const BasicTensor<T>& grad_out,
                                   std::span<const std::uint32_t> argmax,
                                   const Shape& input_shape);

// ---------------------------------------------------------------------------
// Batch normalisation over the channel axis (rank 2 or rank 4 inputs).

template <typename T>
struct BatchNormParams {
  BasicTensor<T> gamma;
  BasicTensor<T> beta;
  BasicTensor<T> running_mean;
  BasicTensor<T> running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;

  static BatchNormParams identity(std::size_t channels);
  std::size_t channels() const { return gamma.size(); }
};

template <typename T>
struct BatchNormCache {
  Mode mode = Mode::Eval;
  BasicTensor<T> normalized;  // x-hat
  std::vector<T> inv_std;     // per channel
};

template <typename T>
struct BatchNormGrads {
  BasicTensor<T> input;
  BasicTensor<T> gamma;
  BasicTensor<T> beta;
};

/// Train mode normalises with batch statistics and folds them into the
/// running estimates (exponential moving average, unbiased variance).
template <typename T>
BasicTensor<T> batchnorm_forward(const BasicTensor<T>& input, BatchNormParams<T>& params,
                                 Mode mode, BatchNormCache<T>* cache = nullptr);

/// Eval-mode normalisation with the running statistics; never mutates params.
template <typename T>
BasicTensor<T> batchnorm_forward(const BasicTensor<T>& input, const BatchNormParams<T>& params,
                                 BatchNormCache<T>* cache = nullptr);

template <typename T>
BatchNormGrads<T> batchnorm_backward(const BasicTensor<T>& grad_out,
                                     const BatchNormParams<T>& params,
                                     const BatchNormCache<T>& cache);

// ---------------------------------------------------------------------------
// Elementwise and dense layers.

template <typename T>
BasicTensor<T> relu_forward(const BasicTensor<T>& input);

/// Routes gradient where the forward output was positive.
template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& output);

template <typename T>
struct DenseParams {
  BasicTensor<T> weight;  // out x in
  BasicTensor<T> bias;    // out

  static DenseParams zeros(std::size_t out_features, std::size_t in_features);
  std::size_t out_features() const { return weight.dim(0); }
  std::size_t in_features() const { return weight.dim(1); }
};

template <typename T>
struct DenseGrads {
  BasicTensor<T> input;
  BasicTensor<T> weight;
  BasicTensor<T> bias;
};

/// input B x in -> B x out
template <typename T>
BasicTensor<T> dense_forward(const BasicTensor<T>& input, const DenseParams<T>& params);

template <typename T>
DenseGrads<T> dense_backward(const BasicTensor<T>& input, const DenseParams<T>& params,
                             const BasicTensor<T>& grad_out, bool want_input_grad = true,
                             bool want_param_grads = true);

/// B x ... -> B x prod(...)
template <typename T>
BasicTensor<T> flatten(const BasicTensor<T>& input);

/// Inverted dropout: kept units are scaled by 1/(1-p) in train mode, eval is
/// the identity. `mask` receives the per-element multiplier.
template <typename T>
BasicTensor<T> dropout_forward(const BasicTensor<T>& input, double p, Mode mode, Rng& rng,
                               std::vector<T>* mask = nullptr);

template <typename T>
BasicTensor<T> dropout_backward(const BasicTensor<T>& grad_out, std::span<const T> mask);

// ---------------------------------------------------------------------------
// Loss.

template <typename T>
struct LossResult {
  double loss = 0.0;
  BasicTensor<T> grad_logits;
};

/// Mean negative log-softmax over the batch, log-sum-exp stabilised.
template <typename T>
LossResult<T> softmax_crossentropy(const BasicTensor<T>& logits, std::span<const int> labels);

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits);

// ---------------------------------------------------------------------------
// Optimiser and initialisation.

struct AdamConfig {
  double learning_rate = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 5e-4;
  /// false: decay added to the gradient (L2); true: AdamW-style decoupled.
  bool decoupled_weight_decay = false;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::uint64_t step_count = 0;
  std::vector<BasicTensor<T>> first_moment;
  std::vector<BasicTensor<T>> second_moment;
};

/// One bias-corrected Adam update over the parallel lists of parameters and
/// gradients. Moments are created on the first call.
template <typename T>
void adam_step(AdamState<T>& state, std::span<BasicTensor<T>* const> params,
               std::span<const BasicTensor<T>* const> grads);

/// Normal samples with standard deviation sqrt(2 / fan_in).
template <typename T>
BasicTensor<T> kaiming_normal(const Shape& shape, std::size_t fan_in, Rng& rng);

}  // namespace microbia
