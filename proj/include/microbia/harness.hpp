#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "microbia/dataset.hpp"
#include "microbia/training.hpp"
#include "microbia/xai.hpp"

namespace microbia {

// ---------------------------------------------------------------------------
// Config files

/// Sectioned key = value text. '#' and ';' start comments; keys are stored
/// as "section.key". Errors carry "path:line:".
class IniFile {
 public:
  static IniFile parse(const std::string& text, const std::string& origin = "<config>");
  static IniFile load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  std::optional<std::string> get(const std::string& key) const;
  /// Line a key was defined on (0 if absent).
  std::size_t line_of(const std::string& key) const;
  const std::string& origin() const { return origin_; }
  /// Keys that no accessor asked for.
  std::vector<std::string> unused_keys() const;

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<std::uint64_t> get_uint_list(const std::string& key,
                                           const std::vector<std::uint64_t>& fallback) const;
  std::vector<double> get_double_list(const std::string& key,
                                      const std::vector<double>& fallback) const;

  void set(const std::string& key, const std::string& value);  // command-line overrides
  const std::map<std::string, std::string>& values() const { return values_; }

  /// ConfigError anchored at the line of `key`.
  [[noreturn]] void fail(const std::string& key, const std::string& message) const;

 private:
  std::string origin_;
  std::map<std::string, std::string> values_;
  std::map<std::string, std::size_t> lines_;
  mutable std::map<std::string, bool> used_;
};

enum class ExperimentKind { Baseline, Balanced, Merged, Explain };
std::string_view experiment_kind_name(ExperimentKind kind);

struct ExplainSettings {
  std::filesystem::path checkpoint;  // empty: the baseline checkpoint of the first split seed
  /// Output count the checkpoint must have (7 or 4); a mismatch is a CheckpointError.
  std::size_t classes = 7;
  double perplexity = 30.0;
  std::vector<double> perplexity_sweep{2, 5, 30, 50, 100};
  std::size_t tsne_iterations = 5000;
  std::vector<std::size_t> featviz_kernels{0, 1};
  FeatureVizConfig featviz;
  std::size_t cam_per_class = 3;
  std::uint64_t seed = 0;
  bool embeddings = true;
  bool feature_viz = true;
  bool cams = true;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::Baseline;
  /// Directory holding manifest.csv; empty means "generate from `synth`".
  std::filesystem::path dataset;
  SynthConfig synth;
  std::vector<std::uint64_t> split_seeds{1};
  std::vector<std::uint64_t> downsample_seeds{1};
  TrainConfig train;
  /// Model initialisation seed; each split seed s uses model_seed + s.
  std::uint64_t model_seed = 0;
  std::filesystem::path output = "runs";
  /// Merged runs compare against this 7-class report when present.
  std::filesystem::path baseline_report;
  ExplainSettings explain;

  /// Every field is optional; defaults reproduce the baseline protocol.
  static ExperimentConfig from_ini(const IniFile& ini);
  static ExperimentConfig load(const std::filesystem::path& path);
  void validate() const;
};

/// MICROBIA_OUTPUT_ROOT, when set, anchors relative output paths.
std::filesystem::path resolve_output(const std::filesystem::path& output);

// ---------------------------------------------------------------------------
// Runs

struct SeedRun {
  std::uint64_t seed = 0;
  EvalReport train;  // best checkpoint on its own training split
  EvalReport valid;
  EpochLog log;
  /// Population std of the per-class training F1 values.
  double train_class_f1_std = 0.0;
  std::filesystem::path checkpoint;
};

struct MetricStats {
  double mean = 0.0;
  double std = 0.0;  // population
  double min = 0.0;
  double max = 0.0;
};

/// Throws DataError on an empty list.
MetricStats summarize(const std::vector<double>& values);

struct RunSummary {
  std::string kind;
  std::vector<SeedRun> runs;
  MetricStats precision, recall, f1, accuracy;  // validation, across seeds
  MetricStats train_f1;
  /// Index into `runs` of the seed whose validation F1 is closest to the mean.
  std::size_t representative = 0;
};

/// Closest |F1 - mean|; exact ties go to the lowest seed.
std::size_t representative_index(const std::vector<SeedRun>& runs, double mean_f1);
/// Fills the statistics and the representative from `runs`.
void finalize_summary(RunSummary& summary);

/// Images and labels for every record, plus the record order labels.
struct Corpus {
  SampleSet samples;  // seven-class, unnormalised
  std::vector<ClassLabel> labels;
};
Corpus load_corpus(const ExperimentConfig& config);

struct PreparedSplit {
  SampleSet train;
  SampleSet valid;
  ChannelStats stats;
};
/// Stratified split by `seed`, normalised with training-split statistics.
/// The test split is dropped.
PreparedSplit prepare_split(const Corpus& corpus, std::uint64_t seed);
/// One split of the seeded assignment, normalised with given statistics.
SampleSet split_samples(const Corpus& corpus, std::uint64_t seed, Split which,
                        const ChannelStats& stats);

struct MergedComparison {
  EvalReport merged;  // 4-output model on validation
  std::optional<EvalReport> converted_baseline;
  std::optional<double> delta_f1;  // merged - converted baseline
  SeedRun run;
};

/// Progress lines go to `log` when non-null.
RunSummary run_baseline(const ExperimentConfig& config, std::ostream* log = nullptr);
RunSummary run_balanced(const ExperimentConfig& config, std::ostream* log = nullptr);
MergedComparison run_merged(const ExperimentConfig& config, std::ostream* log = nullptr);
/// Returns the artifact directory.
std::filesystem::path run_explain(const ExperimentConfig& config, std::ostream* log = nullptr);

void write_summary(const std::filesystem::path& dir, const RunSummary& summary);
/// Independent aggregation of reports/<kind>_seed*_valid.json files.
RunSummary summarize_reports(const std::filesystem::path& output, const std::string& kind);

// ---------------------------------------------------------------------------
// Run manifests

std::string sha256_file(const std::filesystem::path& path);
/// Writes manifest.json under `output`: command, config values, seeds and
/// the SHA-256 of every other file below `output`, in path order.
void write_run_manifest(const std::filesystem::path& output, const std::string& command,
                        const std::map<std::string, std::string>& settings);
/// SHA-256 over the sorted (relative path, file hash) list of a directory.
std::string directory_hash(const std::filesystem::path& dir);

}  // namespace microbia
