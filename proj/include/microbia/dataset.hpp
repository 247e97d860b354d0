#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "microbia/image.hpp"
#include "microbia/tensor.hpp"

namespace microbia {

// ---------------------------------------------------------------------------
// Labels

/// Seven-class cardinality labels; the enumerator value is the model output index.
enum class ClassLabel : int { Outlier = 0, One, Two, Three, Four, Five, Six };

/// Seven: the original labels. Four: Three..Six collapsed into More.
enum class LabelScheme { Seven, Four };

inline constexpr std::size_t kSevenClasses = 7;
inline constexpr std::size_t kFourClasses = 4;
inline constexpr int kMoreIndex = 3;

constexpr std::size_t num_classes(LabelScheme scheme) {
  return scheme == LabelScheme::Seven ? kSevenClasses : kFourClasses;
}

/// Manifest word for an output index ("outlier", "one", ..., "more").
std::string_view label_word(LabelScheme scheme, int index);
/// Human-readable class name ("One-colony", "More-colonies", ...).
std::string_view label_display_name(LabelScheme scheme, int index);
/// Accepts manifest words and digits 0..6 (0 = outlier); seven-class only.
ClassLabel parse_label(std::string_view word);

/// Three, Four, Five and Six map to More; Outlier, One and Two keep their index.
int merge_label(ClassLabel label);
std::vector<int> merge_labels(std::span<const int> seven_class_labels);
/// Label indices for `labels` under `scheme`.
std::vector<int> scheme_labels(std::span<const ClassLabel> labels, LabelScheme scheme);

// ---------------------------------------------------------------------------
// Segments and manifests

struct LabeledSegment {
  Image8 image;  // H x W x 3
  Image8 mask;   // H x W x 1, zero = excluded
  ClassLabel label = ClassLabel::Outlier;
  std::string source_id;
};

/// Zeroes every pixel whose mask value is zero; other pixels pass through.
Image8 apply_mask(const LabeledSegment& segment);

enum class Split { Train, Valid, Test };
std::string_view split_name(Split split);
Split parse_split(std::string_view word);

struct ManifestRecord {
  std::string image_path;  // relative to the manifest directory unless absolute
  std::string mask_path;
  ClassLabel label = ClassLabel::Outlier;
  std::optional<Split> split;
};

struct DatasetManifest {
  std::filesystem::path root;  // directory the relative paths resolve against
  std::vector<ManifestRecord> records;
  std::optional<std::uint64_t> shuffle_seed;

  std::vector<ClassLabel> labels() const;
  /// Record indices assigned to `split`, in manifest order.
  std::vector<std::size_t> indices_of(Split split) const;
};

/// CSV with header image_path,mask_path,label[,split]. A leading
/// "# shuffle_seed=N" comment line is optional.
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

LabeledSegment load_segment(const DatasetManifest& manifest, std::size_t index);

// ---------------------------------------------------------------------------
// Model-ready tensors

inline constexpr std::size_t kInputSize = 128;

/// Bilinear (half-pixel centres) resize of an interleaved image into a
/// channels-first tensor of values in [0, 1].
Tensor resize_image(const Image8& image, std::size_t size);

/// Masks, then resizes to `size` x `size`; output 3 x size x size.
Tensor resize_segment(const LabeledSegment& segment, std::size_t size = kInputSize);

/// Images plus labels in one label scheme, ready for the network.
struct SampleSet {
  Tensor images;  // N x 3 x S x S
  std::vector<int> labels;
  std::vector<std::string> ids;
  LabelScheme scheme = LabelScheme::Seven;

  std::size_t size() const { return labels.size(); }
  SampleSet subset(std::span<const std::size_t> indices) const;
  SampleSet merged() const;  // Seven -> Four relabelling
};

SampleSet make_sample_set(std::span<const LabeledSegment> segments, std::size_t size = kInputSize);
SampleSet load_samples(const DatasetManifest& manifest, std::span<const std::size_t> indices,
                       std::size_t size = kInputSize);

struct ChannelStats {
  std::array<double, 3> mean{};
  std::array<double, 3> stddev{};
};

/// Per-channel mean and population standard deviation over every pixel of
/// `images` (N x 3 x H x W). A zero-variance channel raises NormalizationError
/// naming the offending channel(s).
ChannelStats compute_channel_stats(const Tensor& images);
void normalize_in_place(Tensor& images, const ChannelStats& stats);

// ---------------------------------------------------------------------------
// Splitting, balancing

struct SplitCounts {
  std::size_t train = 0;
  std::size_t valid = 0;
  std::size_t test = 0;
};

/// 6:2:2 counts for one class of size n (n >= 5): train = round(0.6n); if the
/// remainder is odd, train moves by one towards 0.6n; valid = test.
SplitCounts split_counts(std::size_t n);

/// Stratified 6:2:2 assignment; within-class order is shuffled by `seed`.
std::vector<Split> stratified_split(std::span<const ClassLabel> labels, std::uint64_t seed);
/// Writes the assignment into the manifest and records the seed.
void assign_splits(DatasetManifest& manifest, std::uint64_t seed);

/// Indices kept after reducing every class to the smallest class size by
/// uniform random removal. Returned in ascending order.
std::vector<std::size_t> downsample_balanced(std::span<const int> labels, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Synthetic colony segments

struct Rgb {
  double r = 0, g = 0, b = 0;
};

struct SynthConfig {
  std::size_t canvas_size = kInputSize;
  double colony_radius_min = 9.0;
  double colony_radius_max = 13.0;
  /// Chance that a colony is placed touching or overlapping an earlier one.
  double overlap_probability = 0.15;
  /// Chance of a clipped neighbouring colony outside the mask.
  double neighbour_probability = 0.3;
  Rgb background_min{170, 140, 90};
  Rgb background_max{215, 185, 135};
  Rgb colony_color{185, 70, 55};
  double colony_color_jitter = 25.0;
  double edge_softness = 1.2;
  double noise_std = 5.0;
  /// Indexed by ClassLabel.
  std::array<std::size_t, kSevenClasses> class_counts{20, 20, 20, 20, 20, 20, 20};
  std::uint64_t seed = 0;

  void validate() const;
};

/// Segments in label-major order; record i draws from Rng(seed).fork(i).
std::vector<LabeledSegment> generate_synthetic(const SynthConfig& config);

/// Writes images/*.ppm, masks/*.pgm and manifest.csv under `dir`.
DatasetManifest write_dataset(const std::filesystem::path& dir,
                              std::span<const LabeledSegment> segments);

}  // namespace microbia
