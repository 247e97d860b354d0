#include <cmath>
#include <limits>
#include <sstream>

#include "doctest.h"
#include "microbia/layers.hpp"
#include "support.hpp"

using namespace microbia;
using testing::max_relative_error;
using testing::numeric_gradient;
using testing::project;
using testing::random_tensor;

TEST_CASE("tensor shape bookkeeping") {
  Tensor t({2, 3, 4});
  CHECK(t.size() == 24);
  CHECK(t.rank() == 3);
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<float>(5)), DimensionError);
  CHECK_THROWS_AS(t.reshaped({5, 5}), DimensionError);
  CHECK(t.reshaped({6, 4}).shape() == Shape{6, 4});
}

TEST_CASE("tensor dump round trip") {
  Rng rng(4);
  const TensorD a = random_tensor({2, 3, 5}, rng);
  std::stringstream ss;
  write_tensor(ss, a);
  CHECK(ss.str().size() == dump_size(a));
  std::string header;
  std::getline(ss, header);
  CHECK(header == R"({"shape":[2,3,5],"dtype":"f64","layout":"row-major"})");
  ss.seekg(0);
  CHECK(read_tensor<double>(ss) == a);

  std::stringstream narrowed(ss.str());
  CHECK(read_tensor<float>(narrowed) == a.cast<float>());
  std::stringstream bad_dtype(R"({"shape":[1],"dtype":"i8","layout":"row-major"})" "\nx");
  CHECK_THROWS_AS(read_tensor<float>(bad_dtype), DataError);
  std::stringstream cut(ss.str().substr(0, ss.str().size() - 3));
  CHECK_THROWS(read_tensor<double>(cut));
}

TEST_CASE("non-finite values are surfaced") {
  Tensor t({3});
  CHECK(t.all_finite());
  t[1] = std::numeric_limits<float>::infinity();
  CHECK_FALSE(t.all_finite());
  t[1] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(require_finite(t, "probe"), NumericError);
}

TEST_CASE("rng streams") {
  Rng a(99), b(99), c(100);
  for (int i = 0; i < 10; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    CHECK(x != c.next_u64());
  }
  // Seed 0 is the reference splitmix64 sequence.
  Rng pinned(0);
  CHECK(pinned.next_u64() == 0xE220A8397B1DCDAFull);
  CHECK(pinned.next_u64() == 0x6E789E6AA1B965F4ull);
  const Rng base(5);
  Rng f1 = base.fork(1), f1b = base.fork(1), f2 = base.fork(2);
  CHECK(f1.next_u64() == f1b.next_u64());
  CHECK(f1.next_u64() != f2.next_u64());
  CHECK(base.counter() == 0);

  Rng u(7);
  double mean = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const double v = u.uniform();
    REQUIRE(v >= 0.0);
    REQUIRE(v < 1.0);
    mean += v;
  }
  CHECK(mean / 100000 == doctest::Approx(0.5).epsilon(0.01));
  for (int i = 0; i < 1000; ++i) CHECK(u.below(7) < 7);
}

// ---------------------------------------------------------------------------

TEST_CASE("conv2d forward") {
  SUBCASE("ones") {
    TensorD x({1, 1, 3, 3}, 1.0);
    ConvParams<double> p{TensorD({1, 1, 2, 2}, 1.0), TensorD({1})};
    const auto y = conv2d_forward(x, p);
    CHECK(y.shape() == Shape{1, 1, 2, 2});
    for (double v : y.values()) CHECK(v == 4.0);
  }
  SUBCASE("shape of the first layer") {
    Tensor x({1, 3, 128, 128});
    auto p = ConvParams<float>::zeros(20, 3, 5, 5);
    CHECK(conv2d_forward(x, p).shape() == Shape{1, 20, 124, 124});
  }
  SUBCASE("matches the nested-loop oracle") {
    Rng rng(11);
    for (auto [b, c, k, hw, ks] : {std::tuple{2, 3, 4, 8, 3}, std::tuple{4, 4, 3, 10, 4},
                                   std::tuple{1, 2, 2, 5, 5}}) {
      const auto x = random_tensor({size_t(b), size_t(c), size_t(hw), size_t(hw)}, rng);
      ConvParams<double> p{random_tensor({size_t(k), size_t(c), size_t(ks), size_t(ks)}, rng),
                           random_tensor({size_t(k)}, rng)};
      CHECK(testing::max_abs_diff(conv2d_forward(x, p), testing::naive_conv(x, p.weight, p.bias)) <=
            1e-6);
    }
  }
  SUBCASE("errors") {
    TensorD x({1, 2, 4, 4});
    auto p = ConvParams<double>::zeros(1, 3, 2, 2);
    CHECK_THROWS_AS(conv2d_forward(x, p), DimensionError);
    auto big = ConvParams<double>::zeros(1, 2, 5, 5);
    CHECK_THROWS_AS(conv2d_forward(x, big), DimensionError);
  }
}

TEST_CASE("conv2d backward") {
  SUBCASE("zero upstream gradient") {
    Rng rng(1);
    const auto x = random_tensor({2, 2, 5, 5}, rng);
    ConvParams<double> p{random_tensor({3, 2, 2, 2}, rng), random_tensor({3}, rng)};
    const auto g = conv2d_backward(x, p, TensorD({2, 3, 4, 4}));
    for (const auto* t : {&g.input, &g.weight, &g.bias})
      for (double v : t->values()) CHECK(v == 0.0);
  }
  SUBCASE("window sums on the ones case") {
    TensorD x({1, 1, 3, 3});
    for (std::size_t i = 0; i < 9; ++i) x[i] = static_cast<double>(i + 1);
    ConvParams<double> p{TensorD({1, 1, 2, 2}, 1.0), TensorD({1})};
    const TensorD ones({1, 1, 2, 2}, 1.0);
    const auto g = conv2d_backward(x, p, ones);
    // Weight (u, v) sees the 2x2 block of inputs starting at (u, v).
    CHECK(g.weight[0] == 1 + 2 + 4 + 5);
    CHECK(g.weight[1] == 2 + 3 + 5 + 6);
    CHECK(g.weight[2] == 4 + 5 + 7 + 8);
    CHECK(g.weight[3] == 5 + 6 + 8 + 9);
    CHECK(g.bias[0] == 4.0);
    auto f = [&] { return project(conv2d_forward(x, p), ones); };
    CHECK(testing::max_abs_diff(numeric_gradient(f, p.weight), g.weight) <= 1e-6);
  }
  SUBCASE("finite differences") {
    Rng rng(2);
    auto x = random_tensor({2, 3, 6, 7}, rng);
    ConvParams<double> p{random_tensor({4, 3, 3, 2}, rng), random_tensor({4}, rng)};
    const auto r = random_tensor({2, 4, 4, 6}, rng);
    const auto g = conv2d_backward(x, p, r);
    auto f = [&] { return project(conv2d_forward(x, p), r); };
    CHECK(max_relative_error(numeric_gradient(f, x), g.input) <= 1e-4);
    CHECK(max_relative_error(numeric_gradient(f, p.weight), g.weight) <= 1e-4);
    CHECK(max_relative_error(numeric_gradient(f, p.bias), g.bias) <= 1e-4);
  }
  SUBCASE("shape mismatch") {
    TensorD x({1, 1, 3, 3});
    ConvParams<double> p{TensorD({1, 1, 2, 2}), TensorD({1})};
    CHECK_THROWS_AS(conv2d_backward(x, p, TensorD({1, 1, 3, 3})), DimensionError);
  }
}

TEST_CASE("max pooling") {
  TensorD x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  const auto r = maxpool2x2_forward(x);
  CHECK(r.output[0] == 4.0);
  CHECK(r.argmax[0] == 3);
  CHECK(maxpool2x2_forward(Tensor({1, 20, 124, 124})).output.shape() == Shape{1, 20, 62, 62});
  CHECK_THROWS_AS(maxpool2x2_forward(TensorD({1, 1, 3, 4})), DimensionError);

  const auto back = maxpool2x2_backward(TensorD({1, 1, 1, 1}, 5.0), r.argmax, x.shape());
  CHECK(back.values()[3] == 5.0);
  CHECK(back[0] + back[1] + back[2] == 0.0);

  Rng rng(3);
  auto y = random_tensor({2, 3, 6, 4}, rng);  // continuous draws: ties have probability zero
  const auto w = random_tensor({2, 3, 3, 2}, rng);
  const auto fwd = maxpool2x2_forward(y);
  const auto g = maxpool2x2_backward(w, fwd.argmax, y.shape());
  auto f = [&] { return project(maxpool2x2_forward(y).output, w); };
  CHECK(max_relative_error(numeric_gradient(f, y), g) <= 1e-4);
}

TEST_CASE("batch normalisation") {
  Rng rng(5);
  SUBCASE("train-mode output is standardised") {
    auto p = BatchNormParams<double>::identity(3);
    const auto x = random_tensor({4, 3, 5, 5}, rng, 3.0);
    const auto y = batchnorm_forward(x, p, Mode::Train);
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0, sq = 0;
      for (std::size_t b = 0; b < 4; ++b)
        for (std::size_t i = 0; i < 25; ++i) s += y[(b * 3 + c) * 25 + i];
      const double mean = s / 100;
      for (std::size_t b = 0; b < 4; ++b)
        for (std::size_t i = 0; i < 25; ++i) sq += std::pow(y[(b * 3 + c) * 25 + i] - mean, 2);
      CHECK(std::abs(mean) <= 1e-5);
      CHECK(std::abs(sq / 100 - 1.0) <= 1e-4);
    }
  }
  SUBCASE("running statistics") {
    auto p = BatchNormParams<double>::identity(1);
    TensorD x({4, 1}, std::vector<double>{1, 2, 3, 6});
    batchnorm_forward(x, p, Mode::Train);
    CHECK(p.running_mean[0] == doctest::Approx(0.1 * 3.0));
    // Unbiased variance of {1,2,3,6} is 14/3.
    CHECK(p.running_var[0] == doctest::Approx(0.9 + 0.1 * 14.0 / 3.0));
  }
  SUBCASE("eval uses running statistics") {
    auto p = BatchNormParams<double>::identity(2);
    p.gamma.fill(2.0);
    p.beta.fill(1.0);
    const auto x = random_tensor({1, 2, 3, 3}, rng);
    const auto y = batchnorm_forward(x, std::as_const(p));
    for (std::size_t i = 0; i < x.size(); ++i)
      CHECK(y[i] == doctest::Approx(2.0 * x[i] / std::sqrt(1.0 + 1e-5) + 1.0));
  }
  SUBCASE("degenerate batch") {
    auto p = BatchNormParams<double>::identity(2);
    CHECK_THROWS_AS(batchnorm_forward(TensorD({1, 2, 2, 2}), p, Mode::Train), DimensionError);
  }
  SUBCASE("finite differences") {
    for (Mode mode : {Mode::Train, Mode::Eval}) {
      auto p = BatchNormParams<double>::identity(3);
      p.gamma = random_tensor({3}, rng);
      p.beta = random_tensor({3}, rng);
      p.running_mean = random_tensor({3}, rng);
      p.running_var = TensorD({3}, 1.7);
      auto x = random_tensor({3, 3, 2, 4}, rng);
      const auto r = random_tensor({3, 3, 2, 4}, rng);
      BatchNormCache<double> cache;
      auto frozen = p;
      batchnorm_forward(x, frozen, mode, &cache);
      const auto g = batchnorm_backward(r, p, cache);
      auto f = [&] {
        auto q = p;  // running-stat updates must not leak between probes
        return project(batchnorm_forward(x, q, mode), r);
      };
      CHECK(max_relative_error(numeric_gradient(f, x), g.input) <= 1e-4);
      CHECK(max_relative_error(numeric_gradient(f, p.gamma), g.gamma) <= 1e-4);
      CHECK(max_relative_error(numeric_gradient(f, p.beta), g.beta) <= 1e-4);
    }
  }
}

TEST_CASE("relu, dense, flatten") {
  Rng rng(6);
  SUBCASE("relu") {
    auto x = random_tensor({4, 5}, rng);
    for (auto& v : x.values())
      if (std::abs(v) < 1e-3) v = 0.5;  // stay clear of the kink
    const auto r = random_tensor({4, 5}, rng);
    const auto y = relu_forward(x);
    auto f = [&] { return project(relu_forward(x), r); };
    CHECK(max_relative_error(numeric_gradient(f, x), relu_backward(r, y)) <= 1e-4);
  }
  SUBCASE("dense") {
    auto x = random_tensor({3, 6}, rng);
    DenseParams<double> p{random_tensor({4, 6}, rng), random_tensor({4}, rng)};
    const auto r = random_tensor({3, 4}, rng);
    const auto g = dense_backward(x, p, r);
    auto f = [&] { return project(dense_forward(x, p), r); };
    CHECK(max_relative_error(numeric_gradient(f, x), g.input) <= 1e-4);
    CHECK(max_relative_error(numeric_gradient(f, p.weight), g.weight) <= 1e-4);
    CHECK(max_relative_error(numeric_gradient(f, p.bias), g.bias) <= 1e-4);
    CHECK_THROWS_AS(dense_forward(TensorD({3, 5}), p), DimensionError);
  }
  SUBCASE("flatten") {
    CHECK(flatten(Tensor({2, 200, 5, 5})).shape() == Shape{2, 5000});
  }
}

TEST_CASE("dropout") {
  Rng rng(8);
  SUBCASE("p = 0 is the identity") {
    const auto x = random_tensor({10, 10}, rng);
    CHECK(dropout_forward(x, 0.0, Mode::Train, rng) == x);
    CHECK(dropout_forward(x, 0.0, Mode::Eval, rng) == x);
  }
  SUBCASE("eval is the identity") {
    const auto x = random_tensor({10, 10}, rng);
    CHECK(dropout_forward(x, 0.25, Mode::Eval, rng) == x);
  }
  SUBCASE("inverted scaling keeps the mean") {
    const Tensor ones({200000}, 1.0f);
    std::vector<float> mask;
    const auto y = dropout_forward(ones, 0.25, Mode::Train, rng, &mask);
    double s = 0;
    for (float v : y.values()) s += v;
    CHECK(std::abs(s / 200000 - 1.0) <= 0.02);
    const auto g = dropout_backward(ones, std::span<const float>(mask));
    CHECK(g == y);
  }
  SUBCASE("invalid rate") {
    CHECK_THROWS_AS(dropout_forward(TensorD({2}), 1.0, Mode::Train, rng), ParameterError);
    CHECK_THROWS_AS(dropout_forward(TensorD({2}), -0.1, Mode::Train, rng), ParameterError);
  }
  SUBCASE("seeded") {
    Rng a(3), b(3);
    const Tensor x({1000}, 1.0f);
    CHECK(dropout_forward(x, 0.5, Mode::Train, a) == dropout_forward(x, 0.5, Mode::Train, b));
  }
}

TEST_CASE("softmax cross-entropy") {
  const std::vector<int> label0{0};
  SUBCASE("uniform logits") {
    const auto r = softmax_crossentropy(TensorD({1, 7}), std::span<const int>(label0));
    CHECK(r.loss == doctest::Approx(std::log(7.0)).epsilon(1e-12));
  }
  SUBCASE("large logit") {
    TensorD z({1, 7});
    z[0] = 1000.0;
    const auto r = softmax_crossentropy(z, std::span<const int>(label0));
    CHECK(std::isfinite(r.loss));
    CHECK(r.loss <= 1e-12);
  }
  SUBCASE("shift invariance and gradient") {
    Rng rng(9);
    auto z = random_tensor({4, 7}, rng, 2.0);
    const std::vector<int> labels{0, 3, 6, 2};
    auto shifted = z;
    for (auto& v : shifted.values()) v += 37.5;
    CHECK(std::abs(softmax_crossentropy(z, labels).loss -
                   softmax_crossentropy(shifted, labels).loss) <= 1e-6);
    const auto g = softmax_crossentropy(z, labels).grad_logits;
    auto f = [&] { return softmax_crossentropy(z, labels).loss; };
    CHECK(max_relative_error(numeric_gradient(f, z), g) <= 1e-4);
    const auto p = softmax(z);
    for (std::size_t b = 0; b < 4; ++b) {
      double s = 0;
      for (std::size_t c = 0; c < 7; ++c) s += p.at(b, c);
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }
  SUBCASE("label out of range") {
    const std::vector<int> bad{7};
    CHECK_THROWS_AS(softmax_crossentropy(TensorD({1, 7}), bad), LabelError);
  }
}

TEST_CASE("adam") {
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  SUBCASE("zero gradient") {
    AdamState<double> s{cfg};
    TensorD w({3}, std::vector<double>{1, -2, 3});
    const auto before = w;
    TensorD g({3});
    std::vector<TensorD*> ps{&w};
    std::vector<const TensorD*> gs{&g};
    adam_step<double>(s, ps, gs);
    CHECK(w == before);
    CHECK(s.step_count == 1);
  }
  SUBCASE("first step is the learning rate") {
    cfg.learning_rate = 0.1;
    AdamState<double> s{cfg};
    TensorD w({1}, 0.0), g({1}, 1.0);
    std::vector<TensorD*> ps{&w};
    std::vector<const TensorD*> gs{&g};
    adam_step<double>(s, ps, gs);
    CHECK(w[0] == doctest::Approx(-0.1 / (1.0 + 1e-8)).epsilon(1e-12));
  }
  SUBCASE("minimises a quadratic") {
    cfg.learning_rate = 0.01;
    AdamState<double> s{cfg};
    TensorD w({1}, 1.0);
    double prev = 1.0;
    for (int i = 0; i < 100; ++i) {
      TensorD g({1}, 2.0 * w[0]);
      std::vector<TensorD*> ps{&w};
      std::vector<const TensorD*> gs{&g};
      adam_step<double>(s, ps, gs);
      CHECK(w[0] * w[0] < prev);
      prev = w[0] * w[0];
    }
    CHECK(std::abs(w[0]) < 0.5);
    CHECK(s.step_count == 100);
  }
  SUBCASE("coupled and decoupled decay differ") {
    AdamConfig c = cfg;
    c.weight_decay = 0.1;
    AdamState<double> coupled{c};
    c.decoupled_weight_decay = true;
    AdamState<double> decoupled{c};
    TensorD a({1}, 2.0), b({1}, 2.0), g({1}, 0.0);
    std::vector<TensorD*> pa{&a}, pb{&b};
    std::vector<const TensorD*> gs{&g};
    adam_step<double>(coupled, pa, gs);
    adam_step<double>(decoupled, pb, gs);
    // Coupled: the decay gradient 0.2 is normalised to a full step of lr.
    CHECK(a[0] == doctest::Approx(2.0 - 1e-2).epsilon(1e-9));
    CHECK(b[0] == doctest::Approx(2.0 - 1e-2 * 0.1 * 2.0).epsilon(1e-9));
  }
  SUBCASE("shape mismatch") {
    AdamState<double> s{cfg};
    TensorD w({2}), g({3});
    std::vector<TensorD*> ps{&w};
    std::vector<const TensorD*> gs{&g};
    CHECK_THROWS_AS(adam_step<double>(s, ps, gs), DimensionError);
  }
}

TEST_CASE("kaiming initialisation") {
  Rng rng(10);
  const auto t = kaiming_normal<double>({100000}, 2, rng);
  double s = 0, sq = 0;
  for (double v : t.values()) s += v;
  const double mean = s / t.size();
  for (double v : t.values()) sq += (v - mean) * (v - mean);
  CHECK(std::abs(mean) <= 0.02);
  CHECK(std::abs(std::sqrt(sq / t.size()) - 1.0) <= 0.02);
  Rng a(1), b(1);
  CHECK(kaiming_normal<float>({50}, 10, a) == kaiming_normal<float>({50}, 10, b));
  CHECK_THROWS_AS(kaiming_normal<float>({5}, 0, a), ParameterError);
}
