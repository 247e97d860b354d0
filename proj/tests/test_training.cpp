#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "doctest.h"
#include "microbia/reports.hpp"
#include "microbia/training.hpp"

using namespace microbia;
namespace fs = std::filesystem;

namespace {

// [[3,1],[2,4]] padded into the four-class scheme; the empty classes carry no weight.
ConfusionMatrix two_by_two() {
  ConfusionMatrix m(4);
  m.at(0, 0) = 3, m.at(0, 1) = 1, m.at(1, 0) = 2, m.at(1, 1) = 4;
  return m;
}

ConfusionMatrix random_confusion(std::size_t classes, Rng& rng) {
  ConfusionMatrix m(classes);
  for (std::size_t t = 0; t < classes; ++t)
    for (std::size_t p = 0; p < classes; ++p)
      m.at(t, p) = rng.bernoulli(0.3) ? 0 : rng.below(40);
  if (m.total() == 0) m.at(0, 0) = 1;
  return m;
}

// Per-sample recount straight from prediction lists.
double weighted_f1_oracle(const std::vector<int>& truth, const std::vector<int>& pred, int classes) {
  double sum = 0;
  for (int c = 0; c < classes; ++c) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      if (truth[i] == c && pred[i] == c) tp += 1;
      if (truth[i] != c && pred[i] == c) fp += 1;
      if (truth[i] == c && pred[i] != c) fn += 1;
    }
    const double p = tp + fp > 0 ? tp / (tp + fp) : 0;
    const double r = tp + fn > 0 ? tp / (tp + fn) : 0;
    const double f = p + r > 0 ? 2 * p * r / (p + r) : 0;
    sum += f * (tp + fn);
  }
  return sum / static_cast<double>(truth.size());
}

Architecture tiny_arch(std::size_t outputs = 7) {
  Architecture a;
  a.input_size = 32;
  a.channels = {3, 4, 4, 5};
  a.kernels = {5, 3, 3, 1};
  a.hidden = 6;
  a.outputs = outputs;
  return a;
}

SampleSet random_samples(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  SampleSet s;
  s.images = Tensor({n, 3, 32, 32});
  for (auto& v : s.images.values()) v = static_cast<float>(rng.normal());
  for (std::size_t i = 0; i < n; ++i) {
    s.labels.push_back(static_cast<int>(i % 7));
    s.ids.push_back("s" + std::to_string(i));
  }
  // A little signal so training has something to find.
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < 32 * 32; ++k)
      s.images.data()[i * 3 * 32 * 32 + k] += 0.5f * static_cast<float>(s.labels[i]);
  return s;
}

}  // namespace

TEST_CASE("metrics from a confusion matrix") {
  SUBCASE("hand-computed 2x2") {
    const auto r = metrics_from_confusion(two_by_two(), LabelScheme::Four);
    CHECK(r.per_class[0].precision == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(r.per_class[1].precision == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(r.per_class[0].recall == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(r.per_class[1].recall == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(r.per_class[0].f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(r.per_class[1].f1 == doctest::Approx(8.0 / 11.0).epsilon(1e-12));
    CHECK(r.accuracy == doctest::Approx(70.0));
    CHECK(r.f1 == doctest::Approx(0.4 * 2.0 / 3.0 + 0.6 * 8.0 / 11.0));
  }
  SUBCASE("perfect predictor") {
    ConfusionMatrix m(7);
    for (std::size_t c = 0; c < 7; ++c) m.at(c, c) = 5 + c;
    const auto r = metrics_from_confusion(m, LabelScheme::Seven);
    CHECK(r.accuracy == 100.0);
    CHECK(r.f1 == doctest::Approx(1.0));
    CHECK(r.precision == doctest::Approx(1.0));
    CHECK(r.recall == doctest::Approx(1.0));
    for (const auto& c : r.per_class) CHECK(c.f1 == 1.0);
  }
  SUBCASE("degenerate classes score zero") {
    const auto r = metrics_from_confusion(two_by_two(), LabelScheme::Four);
    CHECK(r.per_class[2].precision == 0.0);
    CHECK(r.per_class[2].recall == 0.0);
    CHECK(r.per_class[2].f1 == 0.0);
    ConfusionMatrix never_right(4);
    never_right.at(0, 1) = 3;
    const auto z = metrics_from_confusion(never_right, LabelScheme::Four);
    CHECK(z.f1 == 0.0);
    CHECK(z.accuracy == 0.0);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(metrics_from_confusion(ConfusionMatrix(7), LabelScheme::Seven), DataError);
    CHECK_THROWS_AS(metrics_from_confusion(two_by_two(), LabelScheme::Seven), SchemeError);
    const std::vector<int> truth{0, 7}, pred{0, 0};
    CHECK_THROWS_AS(ConfusionMatrix::from_predictions(truth, pred, 7), LabelError);
  }
}

TEST_CASE("weighted F1 matches a per-sample recount") {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(300);
    std::vector<int> truth(n), pred(n);
    for (std::size_t i = 0; i < n; ++i) {
      truth[i] = static_cast<int>(rng.below(7));
      pred[i] = rng.bernoulli(0.6) ? truth[i] : static_cast<int>(rng.below(7));
    }
    const auto r =
        metrics_from_confusion(ConfusionMatrix::from_predictions(truth, pred, 7), LabelScheme::Seven);
    CHECK(r.f1 == doctest::Approx(weighted_f1_oracle(truth, pred, 7)).epsilon(1e-12));
  }
}

TEST_CASE("published per-class table aggregates to the overall F1") {
  // Table order One..Six, Outlier.
  const double f1[] = {0.96, 0.82, 0.66, 0.43, 0.32, 0.63, 0.83};
  const std::uint64_t support[] = {2857, 1089, 727, 367, 191, 201, 252};
  std::vector<ClassMetrics> per_class;
  for (int i = 0; i < 7; ++i) per_class.push_back({0.0, 0.0, f1[i], support[i]});
  const double w = weighted_average(per_class).f1;
  CHECK(std::abs(w - 0.82) <= 0.005);
  double num = 0, den = 0;
  for (int i = 0; i < 7; ++i) num += f1[i] * static_cast<double>(support[i]), den += support[i];
  CHECK(w == doctest::Approx(num / den).epsilon(1e-12));
}

TEST_CASE("seven-to-four conversion") {
  SUBCASE("diagonal stays diagonal") {
    ConfusionMatrix m(7);
    for (std::size_t c = 0; c < 7; ++c) m.at(c, c) = 10;
    const auto four = convert_report_7_to_4(metrics_from_confusion(m, LabelScheme::Seven));
    CHECK(four.scheme == LabelScheme::Four);
    CHECK(four.confusion.at(3, 3) == 40);
    CHECK(four.confusion.correct() == four.confusion.total());
    CHECK(four.f1 == doctest::Approx(1.0));
  }
  SUBCASE("random matrices") {
    Rng rng(22);
    for (int trial = 0; trial < 200; ++trial) {
      const auto m = random_confusion(7, rng);
      const auto seven = metrics_from_confusion(m, LabelScheme::Seven);
      const auto four = convert_report_7_to_4(seven);
      CHECK(four.confusion.total() == m.total());
      CHECK(four.accuracy >= seven.accuracy - 1e-12);
      std::uint64_t more = 0;
      for (std::size_t c = 3; c < 7; ++c) more += m.support(c);
      CHECK(four.per_class[3].support == more);
      for (std::size_t c = 0; c < 3; ++c) CHECK(four.per_class[c].support == m.support(c));
    }
  }
  SUBCASE("four-class input refused") {
    const auto four = metrics_from_confusion(two_by_two(), LabelScheme::Four);
    CHECK_THROWS_AS(convert_report_7_to_4(four), SchemeError);
  }
}

TEST_CASE("train config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.early_stop_patience = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.early_stop_min_delta = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.learning_rate = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("evaluate") {
  Rng rng(23);
  auto model = ModelState::initialize(tiny_arch(), rng);
  model.mode = Mode::Eval;
  const auto set = random_samples(40, 24);
  const auto r = evaluate(model, set, 16);
  CHECK(r.confusion.total() == 40);
  CHECK(std::isfinite(r.loss));

  // Order independence: a permuted split gives the same report.
  std::vector<std::size_t> perm(40);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng(25).shuffle(std::span(perm));
  const auto shuffled = evaluate(model, set.subset(perm), 7);
  CHECK(shuffled.confusion == r.confusion);
  CHECK(shuffled.f1 == r.f1);
  CHECK(shuffled.loss == doctest::Approx(r.loss).epsilon(1e-6));

  CHECK_THROWS_AS(evaluate(model, SampleSet{}), DataError);
  CHECK_THROWS_AS(evaluate(model, set.merged()), SchemeError);
  model.mode = Mode::Train;
  CHECK_THROWS_AS(evaluate(model, set), StateError);
}

TEST_CASE("training loop") {
  Rng rng(26);
  const auto model = ModelState::initialize(tiny_arch(), rng);
  const auto train_set = random_samples(70, 27);
  const auto valid_set = random_samples(28, 28);
  TrainConfig c;
  c.batch_size = 16;
  c.max_epochs = 6;
  c.learning_rate = 1e-3;
  c.seed = 3;

  const auto a = train(model, train_set, valid_set, c);
  const auto b = train(model, train_set, valid_set, c);
  REQUIRE(a.log.epochs.size() == 6);
  REQUIRE(b.log.epochs.size() == 6);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(a.log.epochs[i].epoch == i + 1);
    CHECK(a.log.epochs[i].train_loss == b.log.epochs[i].train_loss);
    CHECK(a.log.epochs[i].valid_loss == b.log.epochs[i].valid_loss);
    CHECK(a.log.epochs[i].valid_f1 == b.log.epochs[i].valid_f1);
  }
  CHECK(a.log.stop_reason == "reached max_epochs");

  // The returned snapshot is the best epoch, and the best marker is unique.
  double best = 0;
  for (const auto& e : a.log.epochs) best = std::max(best, e.valid_f1);
  CHECK(a.log.best_valid_f1 == best);
  CHECK(std::count_if(a.log.epochs.begin(), a.log.epochs.end(), [](auto& e) { return e.best; }) ==
        1);
  CHECK(a.log.epochs[a.log.best_epoch - 1].best);
  CHECK(a.model.mode == Mode::Eval);
  CHECK(evaluate(a.model, valid_set, 16).f1 == doctest::Approx(best).epsilon(1e-12));
  CHECK(a.optimizer.step_count == 6 * (70 / 16 + 1));

  SUBCASE("early stop") {
    TrainConfig e = c;
    e.max_epochs = 50;
    e.early_stop_patience = 2;
    e.early_stop_min_delta = 0.99;
    const auto r = train(model, train_set, valid_set, e);
    CHECK(r.log.epochs.size() == 3);
    CHECK(r.log.stop_reason.rfind("early stop", 0) == 0);
  }
  SUBCASE("divergence carries the epoch") {
    auto bad = train_set;
    bad.images[5] = std::numeric_limits<float>::quiet_NaN();
    try {
      train(model, bad, valid_set, c);
      FAIL("expected a divergence error");
    } catch (const DivergenceError& err) {
      CHECK(std::string(err.what()).find("epoch 1") != std::string::npos);
    }
  }
  SUBCASE("scheme mismatch") {
    CHECK_THROWS_AS(train(model, train_set.merged(), valid_set.merged(), c), SchemeError);
  }
}

TEST_CASE("report files") {
  const fs::path dir = fs::temp_directory_path() / "microbia_test_reports";
  fs::remove_all(dir);
  Rng rng(29);
  const auto seven = metrics_from_confusion(random_confusion(7, rng), LabelScheme::Seven, 0.5);
  write_report_json(dir / "r.json", seven);
  const auto back = read_report_json(dir / "r.json");
  CHECK(back.confusion == seven.confusion);
  CHECK(back.f1 == seven.f1);
  CHECK(back.loss == 0.5);

  write_report_csv(dir / "r.csv", seven);
  const std::string csv = read_text(dir / "r.csv");
  CHECK(csv.rfind("class,precision,recall,f1,support\noutlier,", 0) == 0);
  CHECK(csv.find("\nweighted,") != std::string::npos);

  write_confusion_csv(dir / "c.csv", seven.confusion, LabelScheme::Seven);
  CHECK(read_text(dir / "c.csv").rfind("true\\predicted,outlier,one,two,three,four,five,six\n", 0) ==
        0);
  CHECK_THROWS_AS(write_confusion_csv(dir / "x.csv", seven.confusion, LabelScheme::Four),
                  SchemeError);

  EpochLog log;
  log.epochs = {{1, 1.5, 1.6, 0.3, 0.25, false}, {2, 1.0, 1.2, 0.5, 0.5, true}};
  write_epoch_log_csv(dir / "log.csv", log);
  CHECK(read_text(dir / "log.csv") ==
        "epoch,train_loss,valid_loss,train_f1,valid_f1,best\n1,1.5,1.6,0.3,0.25,0\n2,1,1.2,0.5,0.5,1\n");
  write_epoch_log_svg(dir / "log.svg", log);
  const std::string svg = read_text(dir / "log.svg");
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(std::count(svg.begin(), svg.end(), '\n') > 10);
  CHECK(svg.find("</svg>") != std::string::npos);

  std::ofstream(dir / "bad.json") << "{\"scheme\": \"nine\"}";
  CHECK_THROWS_AS(read_report_json(dir / "bad.json"), DataError);
  fs::remove_all(dir);
}
