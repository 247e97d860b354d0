#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <queue>
#include <set>

#include "doctest.h"
#include "microbia/dataset.hpp"
#include "microbia/rng.hpp"

using namespace microbia;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("microbia_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<ClassLabel> labels_with_counts(const std::vector<std::size_t>& counts) {
  std::vector<ClassLabel> labels;
  for (std::size_t c = 0; c < counts.size(); ++c)
    labels.insert(labels.end(), counts[c], static_cast<ClassLabel>(c));
  return labels;
}

// The published tables list One..Six first and Outlier last.
constexpr std::array<ClassLabel, 7> kTableOrder{ClassLabel::One,  ClassLabel::Two,
                                                ClassLabel::Three, ClassLabel::Four,
                                                ClassLabel::Five, ClassLabel::Six,
                                                ClassLabel::Outlier};

std::vector<ClassLabel> labels_in_table_order(const std::vector<std::size_t>& counts) {
  std::vector<ClassLabel> labels;
  for (std::size_t row = 0; row < counts.size(); ++row)
    labels.insert(labels.end(), counts[row], kTableOrder[row]);
  return labels;
}

// 4-connected components of the mask after a 3x3 erosion.
int eroded_components(const Image8& mask) {
  const std::size_t h = mask.height, w = mask.width;
  std::vector<std::uint8_t> er(h * w, 0);
  for (std::size_t y = 1; y + 1 < h; ++y)
    for (std::size_t x = 1; x + 1 < w; ++x) {
      bool all = true;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) all = all && mask.at(y + dy, x + dx) != 0;
      er[y * w + x] = all;
    }
  int components = 0;
  std::vector<std::uint8_t> seen(h * w, 0);
  for (std::size_t start = 0; start < h * w; ++start) {
    if (!er[start] || seen[start]) continue;
    ++components;
    std::queue<std::size_t> q;
    q.push(start);
    seen[start] = 1;
    while (!q.empty()) {
      const std::size_t p = q.front();
      q.pop();
      const std::size_t y = p / w, x = p % w;
      const std::size_t nbr[4] = {y > 0 ? p - w : p, y + 1 < h ? p + w : p, x > 0 ? p - 1 : p,
                                  x + 1 < w ? p + 1 : p};
      for (std::size_t n : nbr)
        if (er[n] && !seen[n]) {
          seen[n] = 1;
          q.push(n);
        }
    }
  }
  return components;
}

}  // namespace

TEST_CASE("labels and merging") {
  CHECK(parse_label("three") == ClassLabel::Three);
  CHECK(parse_label("0") == ClassLabel::Outlier);
  CHECK(parse_label("6") == ClassLabel::Six);
  CHECK_THROWS_AS(parse_label("seven"), LabelError);
  CHECK(merge_label(ClassLabel::Five) == kMoreIndex);
  CHECK(merge_label(ClassLabel::Outlier) == 0);
  CHECK(merge_label(ClassLabel::Two) == 2);
  CHECK(label_word(LabelScheme::Four, 3) == "more");
  CHECK(label_display_name(LabelScheme::Seven, 1) == "One-colony");
  for (int i = 0; i < 7; ++i)
    CHECK(static_cast<int>(parse_label(label_word(LabelScheme::Seven, i))) == i);

  // Training counts of the paper's split table, merged.
  const std::vector<std::size_t> train{8571, 3265, 2180, 1102, 571, 604, 757};
  const auto labels = labels_in_table_order(train);
  const auto merged = scheme_labels(labels, LabelScheme::Four);
  CHECK(merged.size() == labels.size());
  CHECK(std::count(merged.begin(), merged.end(), kMoreIndex) == 2180 + 1102 + 571 + 604);
  CHECK(std::count(merged.begin(), merged.end(), 1) == 8571);
  CHECK(std::count(merged.begin(), merged.end(), 0) == 757);
}

TEST_CASE("masking") {
  LabeledSegment s;
  s.image = Image8(2, 2, 3, 120);
  s.mask = Image8(2, 2, 1, 255);
  s.mask.at(0, 1) = 0;
  const Image8 m = apply_mask(s);
  CHECK(m.at(0, 0, 0) == 120);
  CHECK(m.at(0, 1, 0) == 0);
  CHECK(m.at(0, 1, 2) == 0);
  LabeledSegment again = s;
  again.image = m;
  CHECK(apply_mask(again) == m);
  s.mask = Image8(2, 2, 1, 0);
  for (auto v : apply_mask(s).pixels) CHECK(v == 0);
  s.mask = Image8(3, 3, 1, 0);
  CHECK_THROWS_AS(apply_mask(s), DataError);
}

TEST_CASE("split counts reproduce the paper's table") {
  const std::map<std::size_t, std::array<std::size_t, 3>> table{
      {14285, {8571, 2857, 2857}}, {5443, {3265, 1089, 1089}}, {3634, {2180, 727, 727}},
      {1836, {1102, 367, 367}},    {953, {571, 191, 191}},     {1006, {604, 201, 201}},
      {1261, {757, 252, 252}}};
  for (const auto& [n, want] : table) {
    const auto got = split_counts(n);
    CHECK(got.train == want[0]);
    CHECK(got.valid == want[1]);
    CHECK(got.test == want[2]);
  }
  CHECK_THROWS_AS(split_counts(4), SplitError);
}

TEST_CASE("stratified split") {
  const auto labels = labels_with_counts({40, 23, 17, 9, 5, 6, 12});
  const auto a = stratified_split(labels, 1);
  const auto b = stratified_split(labels, 1);
  const auto c = stratified_split(labels, 2);
  CHECK(a == b);
  CHECK(a != c);
  REQUIRE(a.size() == labels.size());
  for (int cls = 0; cls < 7; ++cls) {
    std::size_t n = 0, tr = 0, va = 0, te = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (static_cast<int>(labels[i]) != cls) continue;
      ++n;
      tr += a[i] == Split::Train;
      va += a[i] == Split::Valid;
      te += a[i] == Split::Test;
    }
    const auto want = split_counts(n);
    CHECK(tr == want.train);
    CHECK(va == want.valid);
    CHECK(te == want.test);
    CHECK(tr + va + te == n);
  }
  CHECK_THROWS_AS(stratified_split(labels_with_counts({10, 3}), 1), SplitError);
}

TEST_CASE("balanced downsampling") {
  const std::vector<std::size_t> train{8571, 3265, 2180, 1102, 571, 604, 757};
  std::vector<int> labels;
  for (auto l : labels_in_table_order(train)) labels.push_back(static_cast<int>(l));
  const auto kept = downsample_balanced(labels, 1);
  CHECK(kept.size() == 3997);
  CHECK(std::is_sorted(kept.begin(), kept.end()));
  std::array<int, 7> per{};
  for (auto i : kept) ++per[labels[i]];
  for (int n : per) CHECK(n == 571);
  const auto other = downsample_balanced(labels, 2);
  CHECK(other.size() == kept.size());
  CHECK(other != kept);

  std::vector<int> even{0, 1, 2, 0, 1, 2};
  auto same = downsample_balanced(even, 3);
  CHECK(same == std::vector<std::size_t>{0, 1, 2, 3, 4, 5});
}

TEST_CASE("resizing") {
  Rng rng(1);
  Image8 img(128, 128, 3);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.below(256));
  const Tensor t = resize_image(img, 128);
  CHECK(t.shape() == Shape{3, 128, 128});
  double worst = 0;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 128; ++y)
      for (std::size_t x = 0; x < 128; ++x)
        worst = std::max(worst, std::abs(double(t[(c * 128 + y) * 128 + x]) -
                                         double(static_cast<float>(img.at(y, x, c) / 255.0))));
  CHECK(worst == 0.0);

  const Tensor k = resize_image(Image8(256, 256, 3, 51), 128);
  for (float v : k.values()) CHECK(v == doctest::Approx(0.2f));

  Image8 checker(64, 64, 3);
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x)
      for (std::size_t c = 0; c < 3; ++c) checker.at(y, x, c) = ((x + y) % 2) * 255;
  CHECK(resize_image(checker, 128).shape() == Shape{3, 128, 128});
}

TEST_CASE("channel statistics") {
  Tensor imgs({2, 3, 4, 4}, 0.5f);
  CHECK_THROWS_AS(compute_channel_stats(imgs), NormalizationError);
  for (std::size_t i = 0; i < 16; ++i) imgs[2 * 16 + i] = static_cast<float>(i) / 16.0f;
  try {
    compute_channel_stats(imgs);
    FAIL("expected a normalization error");
  } catch (const NormalizationError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("0") != std::string::npos);
    CHECK(msg.find("1") != std::string::npos);
  }

  SynthConfig cfg;
  cfg.class_counts.fill(3);
  cfg.seed = 5;
  auto set = make_sample_set(generate_synthetic(cfg));
  const auto st = compute_channel_stats(set.images);
  normalize_in_place(set.images, st);
  const auto after = compute_channel_stats(set.images);
  for (int c = 0; c < 3; ++c) {
    CHECK(std::abs(after.mean[c]) <= 1e-6);
    CHECK(std::abs(after.stddev[c] - 1.0) <= 1e-6);
  }
}

TEST_CASE("synthetic generator") {
  SynthConfig cfg;
  cfg.class_counts = {6, 6, 6, 12, 6, 6, 6};
  cfg.seed = 42;
  const auto a = generate_synthetic(cfg);
  const auto b = generate_synthetic(cfg);
  REQUIRE(a.size() == 48);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].image == b[i].image);
    CHECK(a[i].mask == b[i].mask);
    CHECK(a[i].image.height == a[i].image.width);
  }
  cfg.seed = 43;
  const auto c = generate_synthetic(cfg);
  CHECK(c.size() == a.size());
  CHECK(c[0].image != a[0].image);

  for (const auto& s : a) {
    std::size_t area = 0;
    for (auto v : s.mask.pixels) area += v != 0;
    const double frac = double(area) / double(s.mask.pixels.size());
    if (s.label == ClassLabel::Outlier) CHECK(frac < 0.05);
    if (s.label == ClassLabel::Three) {
      const int k = eroded_components(s.mask);
      CHECK(k >= 1);
      CHECK(k <= 3);
    }
  }

  SynthConfig bad;
  bad.colony_radius_min = 0;
  CHECK_THROWS(bad.validate());
  SynthConfig crowded;
  crowded.class_counts = {0, 0, 0, 0, 0, 0, 1};
  crowded.canvas_size = 40;
  crowded.colony_radius_min = 15;
  crowded.colony_radius_max = 16;
  crowded.overlap_probability = 0.0;
  CHECK_THROWS_AS(generate_synthetic(crowded), GenerationError);
}

TEST_CASE("dataset files and manifests") {
  const fs::path dir = scratch_dir("manifest");
  SynthConfig cfg;
  cfg.class_counts.fill(5);
  cfg.seed = 3;
  const auto segs = generate_synthetic(cfg);
  auto manifest = write_dataset(dir, segs);
  REQUIRE(manifest.records.size() == 35);
  assign_splits(manifest, 9);
  save_manifest(manifest, dir / "manifest.csv");

  const auto loaded = load_manifest(dir / "manifest.csv");
  CHECK(loaded.shuffle_seed == std::optional<std::uint64_t>(9));
  CHECK(loaded.records.size() == 35);
  CHECK(loaded.indices_of(Split::Train).size() == 21);
  CHECK(loaded.indices_of(Split::Valid).size() == 7);
  const auto seg = load_segment(loaded, 4);
  CHECK(seg.image == segs[4].image);
  CHECK(seg.mask == segs[4].mask);
  CHECK(seg.label == segs[4].label);

  const auto samples = load_samples(loaded, loaded.indices_of(Split::Valid));
  CHECK(samples.images.shape() == Shape{7, 3, 128, 128});

  {
    std::ofstream bad(dir / "bad.csv");
    bad << "image_path,mask_path,label\n" << "images/a.ppm,masks/a.pgm,eleven\n";
  }
  try {
    load_manifest(dir / "bad.csv");
    FAIL("expected an ingestion error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
  }
  CHECK_THROWS_AS(load_manifest(dir / "missing.csv"), IngestionError);

  Image8 wide(4, 6, 3, 9);
  write_ppm(dir / "wide.ppm", wide);
  CHECK(read_netpbm(dir / "wide.ppm") == wide);
  {
    std::ofstream m(dir / "wide.csv");
    m << "image_path,mask_path,label\nwide.ppm,wide.ppm,one\n";
  }
  CHECK_THROWS_AS(load_segment(load_manifest(dir / "wide.csv"), 0), IngestionError);
  fs::remove_all(dir);
}
