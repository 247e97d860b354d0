#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "microbia/dataset.hpp"
#include "microbia/layers.hpp"

namespace microbia {

/// Layer geometry. The default is MicrobiaNet; the gradient suites use a
/// shrunken geometry with the same layer sequence.
struct Architecture {
  std::size_t input_size = kInputSize;
  std::array<std::size_t, 4> channels{20, 50, 100, 200};
  std::array<std::size_t, 4> kernels{5, 5, 4, 4};
  std::size_t hidden = 500;
  std::size_t outputs = kSevenClasses;
  double dropout = 0.25;

  static Architecture microbianet(std::size_t outputs = kSevenClasses);

  /// Spatial size of conv layer `layer` (0-based) before pooling.
  std::size_t conv_output_size(std::size_t layer) const;
  std::size_t flatten_width() const;
  /// Throws DimensionError if any conv/pool stage would be invalid.
  void validate() const;
  bool operator==(const Architecture&) const = default;
};

/// Named points in the network where activations and gradients are exposed.
/// ConvNOut is the post-activation map of conv layer N before pooling.
enum class Tap { Input, Conv1Out, Conv2Out, Conv3Out, Conv4Out, FlattenOut, Fc1Out, Logits };

std::string_view tap_name(Tap tap);
Tap parse_tap(std::string_view name);
Tap conv_tap(std::size_t layer);  // 0-based conv layer -> ConvNOut

template <typename T>
struct BasicModelState {
  Architecture arch;
  std::array<ConvParams<T>, 4> conv;
  std::array<BatchNormParams<T>, 2> bn;
  DenseParams<T> fc1;
  DenseParams<T> head;
  Mode mode = Mode::Eval;
  /// Training-set channel statistics the inputs were normalised with.
  std::optional<ChannelStats> normalization;
  /// Bumped on every parameter mutation; traces from older generations are stale.
  std::uint64_t generation = 0;

  /// Kaiming-normal weights, zero biases, identity batch norm.
  static BasicModelState initialize(const Architecture& arch, Rng& rng);

  LabelScheme scheme() const;
  std::size_t num_outputs() const { return arch.outputs; }

  /// Trainable tensors in a fixed order, with stable names ("conv1.weight", ...).
  std::vector<BasicTensor<T>*> parameters();
  std::vector<const BasicTensor<T>*> parameters() const;
  static std::vector<std::string> parameter_names();
  /// Trainable tensors plus batch-norm running statistics.
  std::vector<std::pair<std::string, BasicTensor<T>*>> state_tensors();
  std::vector<std::pair<std::string, const BasicTensor<T>*>> state_tensors() const;
  std::size_t parameter_count() const;

  template <typename U>
  BasicModelState<U> cast() const;
};

using ModelState = BasicModelState<float>;
using ModelStateD = BasicModelState<double>;

/// Parameter count implied by the shape table alone.
std::size_t expected_parameter_count(const Architecture& arch);

/// Every intermediate activation of one forward pass, plus the caches the
/// backward pass needs.
template <typename T>
struct ForwardTrace {
  std::vector<BasicTensor<T>> activations;  // one per position; see model.cpp
  std::array<BatchNormCache<T>, 2> bn_cache;
  std::array<std::vector<std::uint32_t>, 4> pool_argmax;
  std::array<std::vector<T>, 2> dropout_mask;
  Mode mode = Mode::Eval;
  const void* model_id = nullptr;
  std::uint64_t generation = 0;
  std::size_t computed = 0;  // positions filled

  const BasicTensor<T>& tap(Tap t) const;
  const BasicTensor<T>& logits() const { return tap(Tap::Logits); }
};

/// Runs the network. In train mode batch norm updates its running statistics
/// and dropout draws from `rng` (required). Stops after `until` when given.
template <typename T>
ForwardTrace<T> forward(BasicModelState<T>& model, const BasicTensor<T>& input,
                        Rng* rng = nullptr, Tap until = Tap::Logits);

/// Eval-mode forward on a const model; throws StateError unless in eval mode.
template <typename T>
ForwardTrace<T> forward_eval(const BasicModelState<T>& model, const BasicTensor<T>& input,
                             Tap until = Tap::Logits);

/// Eval-mode forward resumed from an activation at `from`; returns logits.
template <typename T>
BasicTensor<T> forward_from(const BasicModelState<T>& model, Tap from,
                            const BasicTensor<T>& activation);

template <typename T>
struct BackwardResult {
  std::vector<BasicTensor<T>> param_grads;  // aligned with parameters(); empty if not requested
  BasicTensor<T> grad;                      // gradient at the `to` tap
};

/// Propagates `grad` (the gradient at tap `from`) back to tap `to`.
/// `want_target_grad = false` skips the gradient at `to` itself (training
/// has no use for the input gradient).
template <typename T>
BackwardResult<T> backward(const BasicModelState<T>& model, const ForwardTrace<T>& trace,
                           const BasicTensor<T>& grad, Tap from = Tap::Logits,
                           Tap to = Tap::Input, bool want_param_grads = true,
                           bool want_target_grad = true);

/// d logit[class_index] / d activation at `tap` for one image (3 x S x S or
/// 1 x 3 x S x S); the batch axis is dropped from the result.
template <typename T>
BasicTensor<T> class_score_gradient(const BasicModelState<T>& model, const BasicTensor<T>& image,
                                    std::size_t class_index, Tap tap);

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  ModelState model;
  std::optional<AdamState<float>> optimizer;
};

/// One JSON index line (names -> offsets, architecture, scheme tag
/// {"outputs": 7|4}) followed by tensor dumps.
void checkpoint_save(const std::filesystem::path& path, const ModelState& model,
                     const AdamState<float>* optimizer = nullptr);

/// Throws CheckpointError on version, truncation, shape or scheme mismatch.
Checkpoint checkpoint_load(const std::filesystem::path& path,
                           std::optional<std::size_t> expected_outputs = std::nullopt);

}  // namespace microbia
