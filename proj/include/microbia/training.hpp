#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "microbia/dataset.hpp"
#include "microbia/model.hpp"

namespace microbia {

struct TrainConfig {
  double learning_rate = 1e-2;
  std::size_t batch_size = 64;
  std::size_t max_epochs = 500;
  double weight_decay = 5e-4;
  bool decoupled_weight_decay = false;
  /// Epochs without a significant validation-F1 gain before stopping.
  std::size_t early_stop_patience = 100;
  /// Significant gain: absolute +min_delta in weighted F1 over the best so
  /// far, or best * min_delta when `relative_min_delta` is set.
  double early_stop_min_delta = 0.01;
  bool relative_min_delta = false;
  /// Linear ramp of the learning rate over the first N optimiser steps
  /// (0 = constant rate from the first step).
  std::size_t warmup_steps = 0;
  /// Stop as soon as validation weighted F1 reaches this value (0 = off).
  double target_valid_f1 = 0.0;
  /// Stop after the first epoch that ends past this many wall-clock seconds
  /// (0 = off). Runs that hit it are not reproducible across machines.
  double time_budget_seconds = 0.0;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  AdamConfig adam() const;
};

/// Rows are true labels, columns predictions.
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t classes);
  ConfusionMatrix(std::size_t classes, std::vector<std::uint64_t> counts);

  static ConfusionMatrix from_predictions(std::span<const int> truth, std::span<const int> predicted,
                                          std::size_t classes);

  std::size_t classes() const { return classes_; }
  std::uint64_t& at(std::size_t truth, std::size_t predicted) {
    return counts_[truth * classes_ + predicted];
  }
  std::uint64_t at(std::size_t truth, std::size_t predicted) const {
    return counts_[truth * classes_ + predicted];
  }
  const std::vector<std::uint64_t>& counts() const { return counts_; }
  std::uint64_t total() const;
  std::uint64_t correct() const;
  std::uint64_t support(std::size_t c) const;    // row sum
  std::uint64_t predicted(std::size_t c) const;  // column sum
  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t classes_ = 0;
  std::vector<std::uint64_t> counts_;
};

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::uint64_t support = 0;
};

struct EvalReport {
  LabelScheme scheme = LabelScheme::Seven;
  ConfusionMatrix confusion;
  std::vector<ClassMetrics> per_class;
  // Support-weighted means of the per-class values.
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double accuracy = 0.0;  // percent
  double loss = std::numeric_limits<double>::quiet_NaN();
};

struct WeightedMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Support-weighted means of per-class values. Throws DataError if all
/// supports are zero.
WeightedMetrics weighted_average(std::span<const ClassMetrics> per_class);

/// Per-class metrics (undefined ratios score 0) and their support-weighted means.
EvalReport metrics_from_confusion(const ConfusionMatrix& confusion, LabelScheme scheme,
                                  double loss = std::numeric_limits<double>::quiet_NaN());

/// Collapses Three..Six into More on the raw confusion matrix and recomputes
/// every metric. Throws SchemeError for a report that is not 7-class.
EvalReport convert_report_7_to_4(const EvalReport& report);

/// Eval-mode argmax predictions over `samples`, assembled into a report.
EvalReport evaluate(const ModelState& model, const SampleSet& samples,
                    std::size_t batch_size = 64);

/// Argmax predictions and mean cross-entropy over `samples` (eval mode).
struct Predictions {
  std::vector<int> labels;
  double loss = 0.0;
};
Predictions predict(const ModelState& model, const SampleSet& samples, std::size_t batch_size = 64);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double valid_loss = 0.0;
  double train_f1 = 0.0;  // from the epoch's train-mode minibatch predictions
  double valid_f1 = 0.0;
  bool best = false;
};

struct EpochLog {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_valid_f1 = 0.0;
  std::string stop_reason;
};

struct TrainResult {
  ModelState model;  // best-validation snapshot, eval mode
  AdamState<float> optimizer;
  EpochLog log;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Minibatch Adam training with seeded per-epoch shuffling and early stopping
/// on validation weighted F1. Returns the best-validation snapshot.
TrainResult train(ModelState model, const SampleSet& train_set, const SampleSet& valid_set,
                  const TrainConfig& config, const EpochCallback& on_epoch = {});

}  // namespace microbia
