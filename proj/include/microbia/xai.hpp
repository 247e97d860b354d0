#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "microbia/dataset.hpp"
#include "microbia/model.hpp"

namespace microbia {

using MatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VectorD = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Layer outputs

struct LayerOutputs {
  MatrixD features;  // N x D, one row per sample in input order
  std::vector<int> labels;
  std::vector<std::string> ids;
  LabelScheme scheme = LabelScheme::Seven;
  Tap tap = Tap::Fc1Out;
};

/// Eval-mode activations at `tap`, flattened per sample. Tap::Input is
/// rejected with ParameterError.
LayerOutputs extract_layer_outputs(const ModelState& model, const SampleSet& samples, Tap tap,
                                   std::size_t batch_size = 64);

// ---------------------------------------------------------------------------
// Embeddings

enum class EmbedMethod { Pca, Tsne };

struct Embedding2D {
  MatrixD points;  // N x 2
  std::vector<int> labels;
  LabelScheme scheme = LabelScheme::Seven;
  EmbedMethod method = EmbedMethod::Pca;
  std::string source;  // tap name, if known
  // t-SNE settings, zero for PCA.
  double perplexity = 0.0;
  std::size_t iterations = 0;
  double learning_rate = 0.0;
  std::uint64_t seed = 0;
};

struct PcaResult {
  Embedding2D embedding;
  MatrixD components;   // k x D, orthonormal rows
  VectorD eigenvalues;  // k, descending; covariance with 1/(N-1)
  VectorD mean;         // D
  /// Rank below k: the missing components and coordinates are zero.
  bool degenerate = false;
};

/// Top-k principal components of the mean-centred rows of `features`.
/// Each component's largest-magnitude entry is made positive.
PcaResult pca_embed(const MatrixD& features, std::size_t k = 2);

struct TsneConfig {
  double perplexity = 30.0;
  std::size_t iterations = 5000;
  /// Defaults to tsne_learning_rate(N).
  std::optional<double> learning_rate;
  std::uint64_t seed = 0;
  double early_exaggeration = 12.0;
  std::size_t exaggeration_iterations = 250;
  double initial_momentum = 0.5;
  double final_momentum = 0.8;
  std::size_t momentum_switch = 250;
  /// Start from the scaled top-2 principal components instead of noise.
  bool pca_init = false;
  double init_stddev = 1e-4;
  std::size_t log_every = 50;
};

/// max(50, N / 48).
double tsne_learning_rate(std::size_t n);

struct ConditionalP {
  MatrixD p;               // row-conditional p_{j|i}, zero diagonal
  VectorD beta;            // 1 / (2 sigma_i^2)
  VectorD row_perplexity;  // exp(H_i) achieved
};

/// Per-row Gaussian bandwidths binary-searched to `perplexity`.
/// Throws ParameterError unless N > 3 * perplexity.
ConditionalP conditional_probabilities(const MatrixD& features, double perplexity);
/// (P + P^T) / (2N).
MatrixD joint_probabilities(const ConditionalP& conditional);

struct KlPoint {
  std::size_t iteration = 0;
  double kl = 0.0;
};

struct TsneResult {
  Embedding2D embedding;
  /// KL(P || Q) with the unexaggerated P, every log_every iterations and at the end.
  std::vector<KlPoint> kl_log;
};

/// Exact-gradient t-SNE with early exaggeration, momentum and gains.
TsneResult tsne_embed(const MatrixD& features, const TsneConfig& config = {});

// ---------------------------------------------------------------------------
// Activation maximisation

struct FeatureVizConfig {
  std::size_t images = 8;
  std::size_t iterations = 512;
  double step = 0.05;
  /// Standard deviation of the initial Gaussian noise (normalised input units).
  double init_stddev = 0.1;
  std::uint64_t seed = 0;
};

struct FeatureVizResult {
  std::size_t layer = 0;   // 0-based conv layer
  std::size_t kernel = 0;  // 0-based output channel
  std::vector<Tensor> images;                  // 3 x S x S, normalised input units
  std::vector<std::vector<double>> objective;  // per image: before step 0, after each step
  /// The gradient was zero at every step for every image.
  bool dead = false;
};

/// Gradient ascent on the mean activation of one kernel's map at ConvNOut.
/// Each step moves by `step` along the gradient scaled to unit RMS.
FeatureVizResult feature_visualize(const ModelState& model, std::size_t layer, std::size_t kernel,
                                   const FeatureVizConfig& config = {});

// ---------------------------------------------------------------------------
// Class activation maps

enum class CamMethod { GradCam, GradCamPlusPlus, HiResCam, XGradCam, EigenCam, EigenGradCam };

inline constexpr CamMethod kAllCamMethods[] = {CamMethod::GradCam,  CamMethod::GradCamPlusPlus,
                                               CamMethod::HiResCam, CamMethod::XGradCam,
                                               CamMethod::EigenCam, CamMethod::EigenGradCam};

std::string_view cam_method_name(CamMethod method);
CamMethod parse_cam_method(std::string_view name);

struct ActivationMap {
  TensorD heat;       // H x W in [0, 1]
  TensorD upsampled;  // S x S in [0, 1]
  TensorD raw;        // H x W before normalisation
  CamMethod method = CamMethod::GradCam;
  std::size_t class_index = 0;
  Tap tap = Tap::Conv4Out;
};

/// Raw (un-normalised) map from K x H x W activations and gradients.
TensorD cam_from_maps(const TensorD& activations, const TensorD& gradients, CamMethod method);
/// Min-max to [0, 1]; a constant map becomes all zeros.
TensorD minmax_normalize(const TensorD& map);
/// Half-pixel-centred bilinear resize of an H x W map.
TensorD upsample_bilinear(const TensorD& map, std::size_t size);

/// CAM for one image (3 x S x S) at `tap` against the raw logit of `class_index`.
ActivationMap cam(const ModelState& model, const Tensor& image, std::size_t class_index,
                  CamMethod method, Tap tap = Tap::Conv4Out);

// ---------------------------------------------------------------------------
// Export

/// Colour per class index; seven distinct hues.
std::string_view class_color(int index);
/// x,y,label rows.
void write_embedding_csv(const std::filesystem::path& path, const Embedding2D& embedding);
/// Scatter plot with a class legend.
void write_embedding_svg(const std::filesystem::path& path, const Embedding2D& embedding,
                         const std::string& title);

/// Undo channel normalisation and clamp to 8-bit RGB.
Image8 tensor_to_image(const Tensor& image, const std::optional<ChannelStats>& normalization);
/// Greyscale heat map.
Image8 heat_to_gray(const TensorD& heat);
/// Jet-coloured heat blended over the image (alpha = heat weight).
Image8 heat_overlay(const Image8& image, const TensorD& heat, double alpha = 0.5);

/// Writes layer{L}_kernel{K}_img{I}.ppm under `dir` (L 1-based, K and I 0-based).
std::vector<std::filesystem::path> write_feature_viz(
    const std::filesystem::path& dir, const FeatureVizResult& result,
    const std::optional<ChannelStats>& normalization);

}  // namespace microbia
