#include "microbia/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace microbia {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (batch_size < 2) throw ConfigError("batch_size must be at least 2 (batch norm)");
  if (max_epochs == 0) throw ConfigError("max_epochs must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (early_stop_patience == 0) throw ConfigError("early_stop_patience must be positive");
  if (!(early_stop_min_delta > 0.0 && early_stop_min_delta < 1.0))
    throw ConfigError("early_stop_min_delta must lie in (0, 1)");
  if (target_valid_f1 < 0.0 || target_valid_f1 > 1.0)
    throw ConfigError("target_valid_f1 must lie in [0, 1]");
  if (!(time_budget_seconds >= 0.0)) throw ConfigError("time_budget_seconds must be non-negative");
}

AdamConfig TrainConfig::adam() const {
  AdamConfig a;
  a.learning_rate = learning_rate;
  a.weight_decay = weight_decay;
  a.decoupled_weight_decay = decoupled_weight_decay;
  return a;
}

// ---------------------------------------------------------------------------

ConfusionMatrix::ConfusionMatrix(std::size_t classes)
    : classes_(classes), counts_(classes * classes, 0) {}

ConfusionMatrix::ConfusionMatrix(std::size_t classes, std::vector<std::uint64_t> counts)
    : classes_(classes), counts_(std::move(counts)) {
  if (counts_.size() != classes * classes)
    throw DimensionError("confusion matrix needs " + std::to_string(classes * classes) + " counts");
}

ConfusionMatrix ConfusionMatrix::from_predictions(std::span<const int> truth,
                                                  std::span<const int> predicted,
                                                  std::size_t classes) {
  if (truth.size() != predicted.size())
    throw DimensionError("confusion: truth and prediction lists differ in length");
  ConfusionMatrix m(classes);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || predicted[i] < 0 || static_cast<std::size_t>(truth[i]) >= classes ||
        static_cast<std::size_t>(predicted[i]) >= classes)
      throw LabelError("confusion: label outside [0, " + std::to_string(classes) + ")");
    ++m.at(static_cast<std::size_t>(truth[i]), static_cast<std::size_t>(predicted[i]));
  }
  return m;
}

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

std::uint64_t ConfusionMatrix::correct() const {
  std::uint64_t n = 0;
  for (std::size_t c = 0; c < classes_; ++c) n += at(c, c);
  return n;
}

std::uint64_t ConfusionMatrix::support(std::size_t c) const {
  std::uint64_t n = 0;
  for (std::size_t p = 0; p < classes_; ++p) n += at(c, p);
  return n;
}

std::uint64_t ConfusionMatrix::predicted(std::size_t c) const {
  std::uint64_t n = 0;
  for (std::size_t t = 0; t < classes_; ++t) n += at(t, c);
  return n;
}

WeightedMetrics weighted_average(std::span<const ClassMetrics> per_class) {
  std::uint64_t total = 0;
  for (const auto& m : per_class) total += m.support;
  if (total == 0) throw DataError("weighted_average: all supports are zero");
  WeightedMetrics w;
  for (const auto& m : per_class) {
    const double share = static_cast<double>(m.support) / static_cast<double>(total);
    w.precision += share * m.precision;
    w.recall += share * m.recall;
    w.f1 += share * m.f1;
  }
  return w;
}

EvalReport metrics_from_confusion(const ConfusionMatrix& confusion, LabelScheme scheme,
                                  double loss) {
  if (confusion.classes() != num_classes(scheme))
    throw SchemeError("confusion matrix has " + std::to_string(confusion.classes()) +
                      " classes, scheme expects " + std::to_string(num_classes(scheme)));
  const std::uint64_t total = confusion.total();
  if (total == 0) throw DataError("metrics_from_confusion: empty confusion matrix");
  EvalReport r;
  r.scheme = scheme;
  r.confusion = confusion;
  r.loss = loss;
  for (std::size_t c = 0; c < confusion.classes(); ++c) {
    ClassMetrics m;
    const double tp = static_cast<double>(confusion.at(c, c));
    const auto col = confusion.predicted(c);
    m.support = confusion.support(c);
    m.precision = col ? tp / static_cast<double>(col) : 0.0;
    m.recall = m.support ? tp / static_cast<double>(m.support) : 0.0;
    m.f1 = (m.precision + m.recall) > 0.0
               ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
               : 0.0;
    r.per_class.push_back(m);
  }
  const auto w = weighted_average(r.per_class);
  r.precision = w.precision;
  r.recall = w.recall;
  r.f1 = w.f1;
  r.accuracy = 100.0 * static_cast<double>(confusion.correct()) / static_cast<double>(total);
  return r;
}

EvalReport convert_report_7_to_4(const EvalReport& report) {
  if (report.scheme != LabelScheme::Seven || report.confusion.classes() != kSevenClasses)
    throw SchemeError("convert_report_7_to_4: report is not in the 7-class scheme");
  ConfusionMatrix merged(kFourClasses);
  for (std::size_t t = 0; t < kSevenClasses; ++t)
    for (std::size_t p = 0; p < kSevenClasses; ++p)
      merged.at(static_cast<std::size_t>(merge_label(static_cast<ClassLabel>(t))),
                static_cast<std::size_t>(merge_label(static_cast<ClassLabel>(p)))) +=
          report.confusion.at(t, p);
  return metrics_from_confusion(merged, LabelScheme::Four, report.loss);
}

// ---------------------------------------------------------------------------

namespace {

int argmax_row(const float* row, std::size_t n) {
  return static_cast<int>(std::max_element(row, row + n) - row);
}

std::vector<std::size_t> batch_range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return idx;
}

}  // namespace

Predictions predict(const ModelState& model, const SampleSet& samples, std::size_t batch_size) {
  if (samples.size() == 0) throw DataError("evaluate: empty split");
  if (model.mode != Mode::Eval) throw StateError("evaluate: model must be in eval mode");
  if (batch_size == 0) throw ParameterError("evaluate: batch_size must be positive");
  const std::size_t classes = model.num_outputs();
  Predictions out;
  out.labels.reserve(samples.size());
  double loss_sum = 0.0;
  for (std::size_t begin = 0; begin < samples.size(); begin += batch_size) {
    const std::size_t end = std::min(samples.size(), begin + batch_size);
    const auto idx = batch_range(begin, end);
    const Tensor batch = samples.images.gather_batch(idx);
    const auto trace = forward_eval(model, batch);
    const Tensor& logits = trace.logits();
    const std::span<const int> labels(samples.labels.data() + begin, end - begin);
    loss_sum += softmax_crossentropy(logits, labels).loss * static_cast<double>(end - begin);
    for (std::size_t b = 0; b < end - begin; ++b)
      out.labels.push_back(argmax_row(logits.data() + b * classes, classes));
  }
  out.loss = loss_sum / static_cast<double>(samples.size());
  return out;
}

EvalReport evaluate(const ModelState& model, const SampleSet& samples, std::size_t batch_size) {
  if (samples.scheme != model.scheme())
    throw SchemeError("evaluate: sample labels and model outputs use different schemes");
  const Predictions p = predict(model, samples, batch_size);
  const auto confusion =
      ConfusionMatrix::from_predictions(samples.labels, p.labels, model.num_outputs());
  return metrics_from_confusion(confusion, samples.scheme, p.loss);
}

// ---------------------------------------------------------------------------

TrainResult train(ModelState model, const SampleSet& train_set, const SampleSet& valid_set,
                  const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  if (train_set.size() < 2) throw DataError("train: training split needs at least 2 samples");
  if (valid_set.size() == 0) throw DataError("train: empty validation split");
  if (train_set.scheme != model.scheme() || valid_set.scheme != model.scheme())
    throw SchemeError("train: data labels do not match the model's output scheme");

  const std::size_t classes = model.num_outputs();
  const Rng base(config.seed);
  AdamState<float> opt;
  opt.config = config.adam();

  TrainResult result;
  result.model = model;
  result.model.mode = Mode::Eval;
  bool have_best = false;
  double best_f1 = 0.0;
  std::size_t stale = 0;

  const auto started = std::chrono::steady_clock::now();
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng = base.fork(2 * epoch);
    shuffle_rng.shuffle(std::span(order));
    Rng dropout_rng = base.fork(2 * epoch + 1);

    model.mode = Mode::Train;
    double loss_sum = 0.0;
    std::size_t seen = 0;
    std::vector<int> truth, predicted;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      if (end - begin < 2) break;  // a singleton batch cannot be batch-normalised
      const std::span<const std::size_t> idx(order.data() + begin, end - begin);
      const Tensor batch = train_set.images.gather_batch(idx);
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(train_set.labels[i]);
      try {
        const auto trace = forward(model, batch, &dropout_rng);
        const auto loss = softmax_crossentropy(trace.logits(), labels);
        auto grads = backward(model, trace, loss.grad_logits, Tap::Logits, Tap::Input, true, false);
        auto params = model.parameters();
        std::vector<const Tensor*> grad_ptrs;
        for (const auto& g : grads.param_grads) grad_ptrs.push_back(&g);
        const double ramp =
            config.warmup_steps == 0
                ? 1.0
                : std::min(1.0, static_cast<double>(opt.step_count + 1) /
                                    static_cast<double>(config.warmup_steps));
        opt.config.learning_rate = config.learning_rate * ramp;
        adam_step<float>(opt, params, grad_ptrs);
        ++model.generation;
        loss_sum += loss.loss * static_cast<double>(labels.size());
        seen += labels.size();
        const Tensor& logits = trace.logits();
        for (std::size_t b = 0; b < labels.size(); ++b) {
          truth.push_back(labels[b]);
          predicted.push_back(argmax_row(logits.data() + b * classes, classes));
        }
      } catch (const NumericError& e) {
        throw DivergenceError("training diverged in epoch " + std::to_string(epoch) + ": " +
                              e.what());
      }
    }

    model.mode = Mode::Eval;
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(seen, 1));
    rec.train_f1 = metrics_from_confusion(ConfusionMatrix::from_predictions(truth, predicted, classes),
                                          model.scheme())
                       .f1;
    EvalReport valid;
    try {
      valid = evaluate(model, valid_set, config.batch_size);
    } catch (const NumericError& e) {
      throw DivergenceError("validation diverged after epoch " + std::to_string(epoch) + ": " +
                            e.what());
    }
    rec.valid_loss = valid.loss;
    rec.valid_f1 = valid.f1;

    const double threshold = config.relative_min_delta
                                 ? best_f1 * (1.0 + config.early_stop_min_delta)
                                 : best_f1 + config.early_stop_min_delta;
    if (!have_best || rec.valid_f1 >= threshold)
      stale = 0;
    else
      ++stale;
    if (!have_best || rec.valid_f1 > best_f1) {
      have_best = true;
      best_f1 = rec.valid_f1;
      rec.best = true;
      result.model = model;
      result.log.best_epoch = epoch;
      result.log.best_valid_f1 = best_f1;
      for (auto& e : result.log.epochs) e.best = false;
    }
    result.log.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (config.target_valid_f1 > 0.0 && rec.valid_f1 >= config.target_valid_f1) {
      result.log.stop_reason = "reached target validation F1";
      break;
    }
    if (stale >= config.early_stop_patience) {
      result.log.stop_reason = "early stop: no validation F1 gain of " +
                               std::to_string(config.early_stop_min_delta) + " in " +
                               std::to_string(config.early_stop_patience) + " epochs";
      break;
    }
    const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - started;
    if (config.time_budget_seconds > 0.0 && elapsed.count() >= config.time_budget_seconds) {
      result.log.stop_reason = "time budget exhausted";
      break;
    }
  }
  if (result.log.stop_reason.empty()) result.log.stop_reason = "reached max_epochs";
  result.model.mode = Mode::Eval;
  opt.config.learning_rate = config.learning_rate;
  result.optimizer = std::move(opt);
  return result;
}

}  // namespace microbia
