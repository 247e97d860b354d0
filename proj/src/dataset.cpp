#include "microbia/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "microbia/rng.hpp"

namespace microbia {

namespace {

constexpr std::array<std::string_view, kSevenClasses> kSevenWords = {
    "outlier", "one", "two", "three", "four", "five", "six"};
constexpr std::array<std::string_view, kFourClasses> kFourWords = {"outlier", "one", "two",
                                                                  "more"};
constexpr std::array<std::string_view, kSevenClasses> kSevenNames = {
    "Outlier",        "One-colony",    "Two-colonies", "Three-colonies",
    "Four-colonies",  "Five-colonies", "Six-colonies"};
constexpr std::array<std::string_view, kFourClasses> kFourNames = {
    "Outlier", "One-colony", "Two-colonies", "More-colonies"};

void check_index(LabelScheme scheme, int index) {
  if (index < 0 || static_cast<std::size_t>(index) >= num_classes(scheme))
    throw LabelError("label index " + std::to_string(index) + " outside the " +
                     std::to_string(num_classes(scheme)) + "-class scheme");
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(trim(std::string_view(line).substr(start, pos - start)));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string_view label_word(LabelScheme scheme, int index) {
  check_index(scheme, index);
  return scheme == LabelScheme::Seven ? kSevenWords[index] : kFourWords[index];
}

std::string_view label_display_name(LabelScheme scheme, int index) {
  check_index(scheme, index);
  return scheme == LabelScheme::Seven ? kSevenNames[index] : kFourNames[index];
}

ClassLabel parse_label(std::string_view word) {
  const std::string w = lower(trim(word));
  for (std::size_t i = 0; i < kSevenWords.size(); ++i)
    if (w == kSevenWords[i]) return static_cast<ClassLabel>(i);
  if (w.size() == 1 && w[0] >= '0' && w[0] <= '6') return static_cast<ClassLabel>(w[0] - '0');
  throw LabelError("unknown class label '" + std::string(word) + "'");
}

int merge_label(ClassLabel label) {
  const int i = static_cast<int>(label);
  check_index(LabelScheme::Seven, i);
  return i >= static_cast<int>(ClassLabel::Three) ? kMoreIndex : i;
}

std::vector<int> merge_labels(std::span<const int> seven_class_labels) {
  std::vector<int> out;
  out.reserve(seven_class_labels.size());
  for (int l : seven_class_labels) out.push_back(merge_label(static_cast<ClassLabel>(l)));
  return out;
}

std::vector<int> scheme_labels(std::span<const ClassLabel> labels, LabelScheme scheme) {
  std::vector<int> out;
  out.reserve(labels.size());
  for (auto l : labels)
    out.push_back(scheme == LabelScheme::Seven ? static_cast<int>(l) : merge_label(l));
  return out;
}

// ---------------------------------------------------------------------------

Image8 apply_mask(const LabeledSegment& segment) {
  const Image8& img = segment.image;
  const Image8& mask = segment.mask;
  if (img.height != mask.height || img.width != mask.width || mask.channels != 1)
    throw DataError("apply_mask: image " + std::to_string(img.height) + "x" +
                    std::to_string(img.width) + " and mask " + std::to_string(mask.height) + "x" +
                    std::to_string(mask.width) + "x" + std::to_string(mask.channels) +
                    " do not match");
  Image8 out = img;
  for (std::size_t p = 0; p < img.height * img.width; ++p)
    if (mask.pixels[p] == 0)
      for (std::size_t c = 0; c < img.channels; ++c) out.pixels[p * img.channels + c] = 0;
  return out;
}

std::string_view split_name(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::Test: return "test";
  }
  return "train";
}

Split parse_split(std::string_view word) {
  const std::string w = lower(trim(word));
  if (w == "train") return Split::Train;
  if (w == "valid" || w == "validation") return Split::Valid;
  if (w == "test") return Split::Test;
  throw DataError("unknown split '" + std::string(word) + "'");
}

std::vector<ClassLabel> DatasetManifest::labels() const {
  std::vector<ClassLabel> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.label);
  return out;
}

std::vector<std::size_t> DatasetManifest::indices_of(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].split == split) out.push_back(i);
  return out;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("manifest not found: " + path.string());
  DatasetManifest m;
  m.root = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false, has_split = false;
  const auto fail = [&](const std::string& msg) {
    throw IngestionError(path.string() + ":" + std::to_string(line_no) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty()) continue;
    if (t[0] == '#') {
      const auto eq = t.find("shuffle_seed=");
      if (eq != std::string::npos) {
        try {
          m.shuffle_seed = std::stoull(t.substr(eq + 13));
        } catch (const std::exception&) {
          fail("bad shuffle_seed comment");
        }
      }
      continue;
    }
    const auto fields = split_csv(t);
    if (!header_seen) {
      if (fields.size() < 3 || fields[0] != "image_path" || fields[1] != "mask_path" ||
          fields[2] != "label")
        fail("expected header image_path,mask_path,label[,split]");
      has_split = fields.size() == 4 && fields[3] == "split";
      if (fields.size() > 3 && !has_split) fail("unexpected header column '" + fields[3] + "'");
      header_seen = true;
      continue;
    }
    if (fields.size() != (has_split ? 4u : 3u))
      fail("expected " + std::to_string(has_split ? 4 : 3) + " fields, got " +
           std::to_string(fields.size()));
    ManifestRecord r;
    r.image_path = fields[0];
    r.mask_path = fields[1];
    if (r.image_path.empty() || r.mask_path.empty()) fail("empty path field");
    try {
      r.label = parse_label(fields[2]);
      if (has_split && !fields[3].empty()) r.split = parse_split(fields[3]);
    } catch (const Error& e) {
      fail(e.what());
    }
    m.records.push_back(std::move(r));
  }
  if (!header_seen) throw IngestionError(path.string() + ": empty manifest");
  return m;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IngestionError("cannot write manifest " + path.string());
  const bool has_split = std::any_of(manifest.records.begin(), manifest.records.end(),
                                     [](const auto& r) { return r.split.has_value(); });
  if (manifest.shuffle_seed) out << "# shuffle_seed=" << *manifest.shuffle_seed << "\n";
  out << "image_path,mask_path,label" << (has_split ? ",split" : "") << "\n";
  for (const auto& r : manifest.records) {
    out << r.image_path << "," << r.mask_path << ","
        << label_word(LabelScheme::Seven, static_cast<int>(r.label));
    if (has_split) out << "," << (r.split ? split_name(*r.split) : "");
    out << "\n";
  }
}

LabeledSegment load_segment(const DatasetManifest& manifest, std::size_t index) {
  const auto& r = manifest.records.at(index);
  const auto resolve = [&](const std::string& p) {
    std::filesystem::path fp(p);
    return fp.is_absolute() ? fp : manifest.root / fp;
  };
  LabeledSegment s;
  s.image = read_netpbm(resolve(r.image_path));
  s.mask = read_netpbm(resolve(r.mask_path));
  s.label = r.label;
  s.source_id = std::filesystem::path(r.image_path).stem().string();
  if (s.image.channels != 3) throw IngestionError(r.image_path + ": segment image must be RGB");
  if (s.mask.channels != 1) throw IngestionError(r.mask_path + ": mask must be single-channel");
  if (s.image.height != s.image.width)
    throw IngestionError(r.image_path + ": segment is not square (" +
                         std::to_string(s.image.height) + "x" + std::to_string(s.image.width) + ")");
  if (s.mask.height != s.image.height || s.mask.width != s.image.width)
    throw IngestionError(r.mask_path + ": mask size differs from its image");
  return s;
}

// ---------------------------------------------------------------------------

Tensor resize_image(const Image8& image, std::size_t size) {
  if (size == 0) throw ParameterError("resize: target size must be positive");
  const std::size_t ch = image.channels, ih = image.height, iw = image.width;
  Tensor out({ch, size, size});
  const double sy = static_cast<double>(ih) / static_cast<double>(size);
  const double sx = static_cast<double>(iw) / static_cast<double>(size);
  const auto source = [](std::size_t dst, double scale, std::size_t extent) {
    double s = (static_cast<double>(dst) + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(extent - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(s));
    const std::size_t i1 = std::min(i0 + 1, extent - 1);
    return std::tuple{i0, i1, s - static_cast<double>(i0)};
  };
  for (std::size_t y = 0; y < size; ++y) {
    const auto [y0, y1, wy] = source(y, sy, ih);
    for (std::size_t x = 0; x < size; ++x) {
      const auto [x0, x1, wx] = source(x, sx, iw);
      for (std::size_t c = 0; c < ch; ++c) {
        const double a = image.at(y0, x0, c), b = image.at(y0, x1, c);
        const double d = image.at(y1, x0, c), e = image.at(y1, x1, c);
        const double top = a + (b - a) * wx;
        const double bottom = d + (e - d) * wx;
        out[(c * size + y) * size + x] = static_cast<float>((top + (bottom - top) * wy) / 255.0);
      }
    }
  }
  return out;
}

Tensor resize_segment(const LabeledSegment& segment, std::size_t size) {
  if (segment.image.height != segment.image.width)
    throw IngestionError("segment " + segment.source_id + " is not square");
  if (segment.image.channels != 3)
    throw IngestionError("segment " + segment.source_id + " is not RGB");
  return resize_image(apply_mask(segment), size);
}

SampleSet SampleSet::subset(std::span<const std::size_t> indices) const {
  SampleSet out;
  out.scheme = scheme;
  out.images = images.gather_batch(indices);
  for (auto i : indices) {
    out.labels.push_back(labels.at(i));
    out.ids.push_back(ids.at(i));
  }
  return out;
}

SampleSet SampleSet::merged() const {
  if (scheme != LabelScheme::Seven) throw SchemeError("sample set is already in the 4-class scheme");
  SampleSet out = *this;
  out.labels = merge_labels(labels);
  out.scheme = LabelScheme::Four;
  return out;
}

SampleSet make_sample_set(std::span<const LabeledSegment> segments, std::size_t size) {
  if (segments.empty()) throw DataError("make_sample_set: no segments");
  SampleSet set;
  set.images = Tensor({segments.size(), 3, size, size});
  const std::size_t stride = 3 * size * size;
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const Tensor t = resize_segment(segments[i], size);
    std::copy(t.data(), t.data() + stride, set.images.data() + i * stride);
    set.labels.push_back(static_cast<int>(segments[i].label));
    set.ids.push_back(segments[i].source_id);
  }
  return set;
}

SampleSet load_samples(const DatasetManifest& manifest, std::span<const std::size_t> indices,
                       std::size_t size) {
  if (indices.empty()) throw DataError("load_samples: no records selected");
  SampleSet set;
  set.images = Tensor({indices.size(), 3, size, size});
  const std::size_t stride = 3 * size * size;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const LabeledSegment seg = load_segment(manifest, indices[i]);
    const Tensor t = resize_segment(seg, size);
    std::copy(t.data(), t.data() + stride, set.images.data() + i * stride);
    set.labels.push_back(static_cast<int>(seg.label));
    set.ids.push_back(seg.source_id);
  }
  return set;
}

ChannelStats compute_channel_stats(const Tensor& images) {
  if (images.rank() != 4 || images.dim(1) != 3)
    throw DimensionError("compute_channel_stats: expected N x 3 x H x W, got " +
                         shape_string(images.shape()));
  const std::size_t n = images.dim(0), area = images.dim(2) * images.dim(3);
  ChannelStats s;
  std::string zero_channels;
  for (std::size_t c = 0; c < 3; ++c) {
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const float* p = images.data() + (i * 3 + c) * area;
      for (std::size_t k = 0; k < area; ++k) sum += p[k];
    }
    const double mean = sum / static_cast<double>(n * area);
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const float* p = images.data() + (i * 3 + c) * area;
      for (std::size_t k = 0; k < area; ++k) sq += (p[k] - mean) * (p[k] - mean);
    }
    s.mean[c] = mean;
    s.stddev[c] = std::sqrt(sq / static_cast<double>(n * area));
    if (!(s.stddev[c] > 0.0)) zero_channels += (zero_channels.empty() ? "" : ", ") + std::to_string(c);
  }
  if (!zero_channels.empty())
    throw NormalizationError("zero standard deviation in channel(s) " + zero_channels);
  return s;
}

void normalize_in_place(Tensor& images, const ChannelStats& stats) {
  if (images.rank() != 4 || images.dim(1) != 3)
    throw DimensionError("normalize: expected N x 3 x H x W");
  const std::size_t n = images.dim(0), area = images.dim(2) * images.dim(3);
  for (std::size_t c = 0; c < 3; ++c)
    if (!(stats.stddev[c] > 0.0))
      throw NormalizationError("zero standard deviation in channel " + std::to_string(c));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      float* p = images.data() + (i * 3 + c) * area;
      for (std::size_t k = 0; k < area; ++k)
        p[k] = static_cast<float>((p[k] - stats.mean[c]) / stats.stddev[c]);
    }
}

// ---------------------------------------------------------------------------

SplitCounts split_counts(std::size_t n) {
  if (n < 5) throw SplitError("class has " + std::to_string(n) + " records; at least 5 needed");
  // Distances are compared in tenths: |10 t - 6 n|.
  std::size_t train = (6 * n + 5) / 10;
  if ((n - train) % 2 == 1) {
    const auto dist = [n](std::size_t t) {
      const long long d = 10LL * static_cast<long long>(t) - 6LL * static_cast<long long>(n);
      return d < 0 ? -d : d;
    };
    train = dist(train - 1) <= dist(train + 1) ? train - 1 : train + 1;
  }
  const std::size_t rest = n - train;
  return {train, rest / 2, rest / 2};
}

std::vector<Split> stratified_split(std::span<const ClassLabel> labels, std::uint64_t seed) {
  std::array<std::vector<std::size_t>, kSevenClasses> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i)
    by_class.at(static_cast<std::size_t>(labels[i])).push_back(i);
  std::vector<Split> out(labels.size(), Split::Train);
  const Rng base(seed);
  for (std::size_t c = 0; c < kSevenClasses; ++c) {
    auto& idx = by_class[c];
    if (idx.empty()) continue;
    if (idx.size() < 5)
      throw SplitError("class " + std::string(label_display_name(LabelScheme::Seven, int(c))) +
                       " has " + std::to_string(idx.size()) + " records; at least 5 needed");
    const SplitCounts counts = split_counts(idx.size());
    Rng rng = base.fork(c);
    rng.shuffle(std::span(idx));
    for (std::size_t k = 0; k < idx.size(); ++k)
      out[idx[k]] = k < counts.train                  ? Split::Train
                    : k < counts.train + counts.valid ? Split::Valid
                                                      : Split::Test;
  }
  return out;
}

void assign_splits(DatasetManifest& manifest, std::uint64_t seed) {
  const auto labels = manifest.labels();
  const auto splits = stratified_split(labels, seed);
  for (std::size_t i = 0; i < splits.size(); ++i) manifest.records[i].split = splits[i];
  manifest.shuffle_seed = seed;
}

std::vector<std::size_t> downsample_balanced(std::span<const int> labels, std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) throw LabelError("downsample_balanced: negative label");
    const auto c = static_cast<std::size_t>(labels[i]);
    if (c >= by_class.size()) by_class.resize(c + 1);
    by_class[c].push_back(i);
  }
  std::size_t smallest = labels.size();
  for (const auto& v : by_class)
    if (!v.empty()) smallest = std::min(smallest, v.size());
  std::vector<std::size_t> kept;
  const Rng base(seed);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    Rng rng = base.fork(c);
    rng.shuffle(std::span(idx));
    kept.insert(kept.end(), idx.begin(), idx.begin() + std::min(smallest, idx.size()));
  }
  std::sort(kept.begin(), kept.end());
  return kept;
}

// ---------------------------------------------------------------------------

void SynthConfig::validate() const {
  if (canvas_size < 32) throw ParameterError("synth: canvas_size must be at least 32");
  if (!(colony_radius_min > 0.0) || colony_radius_max < colony_radius_min)
    throw ParameterError("synth: colony radius range must be positive and ordered");
  if (2.0 * colony_radius_max + 4.0 > static_cast<double>(canvas_size))
    throw ParameterError("synth: colonies do not fit the canvas");
  if (overlap_probability < 0.0 || overlap_probability > 1.0)
    throw ParameterError("synth: overlap_probability must be in [0, 1]");
  if (neighbour_probability < 0.0 || neighbour_probability > 1.0)
    throw ParameterError("synth: neighbour_probability must be in [0, 1]");
  if (noise_std < 0.0 || edge_softness <= 0.0 || colony_color_jitter < 0.0)
    throw ParameterError("synth: noise, softness and jitter must be non-negative");
}

namespace {

struct Disc {
  double x, y, r;
  Rgb color;
};

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

double clamp_channel(double v) { return std::clamp(v, 0.0, 255.0); }

Rgb jitter(const Rgb& base, double amount, Rng& rng) {
  return {clamp_channel(base.r + rng.uniform(-amount, amount)),
          clamp_channel(base.g + rng.uniform(-amount, amount)),
          clamp_channel(base.b + rng.uniform(-amount, amount))};
}

bool fits(const Disc& d, std::span<const Disc> placed, double min_gap) {
  for (const auto& o : placed)
    if (std::hypot(d.x - o.x, d.y - o.y) < d.r + o.r + min_gap) return false;
  return true;
}

// Places `count` colonies; returns false when the retry budget is exhausted.
bool place_colonies(const SynthConfig& cfg, std::size_t count, Rng& rng, std::vector<Disc>& out) {
  constexpr int kTriesPerColony = 400;
  const double size = static_cast<double>(cfg.canvas_size);
  out.clear();
  for (std::size_t k = 0; k < count; ++k) {
    const double r = rng.uniform(cfg.colony_radius_min, cfg.colony_radius_max);
    const Rgb color = jitter(cfg.colony_color, cfg.colony_color_jitter, rng);
    const bool touch = !out.empty() && rng.bernoulli(cfg.overlap_probability);
    bool ok = false;
    for (int t = 0; t < kTriesPerColony && !ok; ++t) {
      Disc d{0, 0, r, color};
      if (touch) {
        const Disc& anchor = out[rng.below(out.size())];
        const double dist = rng.uniform(0.75, 1.0) * (anchor.r + r);
        const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
        d.x = anchor.x + dist * std::cos(angle);
        d.y = anchor.y + dist * std::sin(angle);
        if (d.x < r + 1 || d.y < r + 1 || d.x > size - r - 1 || d.y > size - r - 1) continue;
        bool clear = true;
        for (const auto& o : out)
          if (&o != &anchor && std::hypot(d.x - o.x, d.y - o.y) < d.r + o.r + 2.0) clear = false;
        ok = clear;
      } else {
        d.x = rng.uniform(r + 1, size - r - 1);
        d.y = rng.uniform(r + 1, size - r - 1);
        ok = fits(d, out, 2.0);
      }
      if (ok) out.push_back(d);
    }
    if (!ok) return false;
  }
  return true;
}

void render_disc(const Disc& d, double softness, std::vector<double>& canvas, std::size_t size) {
  const double reach = d.r + 4.0 * softness;
  const auto lo_y = static_cast<long>(std::max(0.0, std::floor(d.y - reach)));
  const auto hi_y = static_cast<long>(std::min(double(size - 1), std::ceil(d.y + reach)));
  const auto lo_x = static_cast<long>(std::max(0.0, std::floor(d.x - reach)));
  const auto hi_x = static_cast<long>(std::min(double(size - 1), std::ceil(d.x + reach)));
  for (long y = lo_y; y <= hi_y; ++y)
    for (long x = lo_x; x <= hi_x; ++x) {
      const double dist = std::hypot(x + 0.5 - d.x, y + 0.5 - d.y);
      // Gaussian-blurred edge: alpha = Phi((r - dist) / softness).
      const double alpha = 0.5 * std::erfc((dist - d.r) / (std::numbers::sqrt2 * softness));
      if (alpha < 1e-4) continue;
      const double dome = 1.0 + 0.15 * std::max(0.0, 1.0 - (dist * dist) / (d.r * d.r));
      const std::size_t p = (static_cast<std::size_t>(y) * size + static_cast<std::size_t>(x)) * 3;
      const double col[3] = {d.color.r * dome, d.color.g * dome, d.color.b * dome};
      for (int c = 0; c < 3; ++c) canvas[p + c] = canvas[p + c] * (1.0 - alpha) + col[c] * alpha;
    }
}

void mark_disc(const Disc& d, double pad, Image8& mask) {
  const std::size_t size = mask.width;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x)
      if (std::hypot(x + 0.5 - d.x, y + 0.5 - d.y) <= d.r + pad) mask.at(y, x) = 255;
}

LabeledSegment synthesize_one(const SynthConfig& cfg, ClassLabel label, std::size_t ordinal,
                              Rng rng) {
  const std::size_t size = cfg.canvas_size;
  const Rgb bg{rng.uniform(cfg.background_min.r, cfg.background_max.r),
               rng.uniform(cfg.background_min.g, cfg.background_max.g),
               rng.uniform(cfg.background_min.b, cfg.background_max.b)};
  std::vector<double> canvas(size * size * 3);
  for (std::size_t p = 0; p < size * size; ++p) {
    canvas[p * 3] = bg.r;
    canvas[p * 3 + 1] = bg.g;
    canvas[p * 3 + 2] = bg.b;
  }
  LabeledSegment seg;
  seg.label = label;
  seg.mask = Image8(size, size, 1);

  std::vector<Disc> colonies;
  if (label == ClassLabel::Outlier) {
    // Dust or debris: a tight cluster of tiny grey specks near the centre.
    const double cx = rng.uniform(size * 0.35, size * 0.65);
    const double cy = rng.uniform(size * 0.35, size * 0.65);
    const auto specks = 3 + rng.below(6);
    const double grey = rng.uniform(60.0, 130.0);
    for (std::size_t k = 0; k < specks; ++k) {
      const double r = rng.uniform(1.0, 3.0);
      const double a = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double dist = rng.uniform(0.0, 8.0);
      colonies.push_back({cx + dist * std::cos(a), cy + dist * std::sin(a), r,
                          jitter({grey, grey, grey}, 10.0, rng)});
    }
  } else {
    const std::size_t count = static_cast<std::size_t>(label);
    constexpr int kLayoutAttempts = 50;
    bool placed = false;
    for (int attempt = 0; attempt < kLayoutAttempts && !placed; ++attempt)
      placed = place_colonies(cfg, count, rng, colonies);
    if (!placed)
      throw GenerationError("synth: could not place " + std::to_string(count) +
                            " colonies on a " + std::to_string(size) + " px canvas");
  }

  // A clipped neighbour near an edge, deliberately left out of the mask.
  if (label != ClassLabel::Outlier && rng.bernoulli(cfg.neighbour_probability)) {
    const double r = rng.uniform(cfg.colony_radius_min, cfg.colony_radius_max);
    for (int t = 0; t < 100; ++t) {
      const double along = rng.uniform(0.0, double(size));
      const double across = rng.uniform(-0.5 * r, 0.3 * r);
      Disc d{0, 0, r, jitter(cfg.colony_color, cfg.colony_color_jitter, rng)};
      switch (rng.below(4)) {
        case 0: d.x = along, d.y = across; break;
        case 1: d.x = along, d.y = size - across; break;
        case 2: d.x = across, d.y = along; break;
        default: d.x = size - across, d.y = along; break;
      }
      if (fits(d, colonies, 3.0)) {
        render_disc(d, cfg.edge_softness, canvas, size);
        break;
      }
    }
  }

  for (const auto& d : colonies) {
    render_disc(d, label == ClassLabel::Outlier ? 0.6 : cfg.edge_softness, canvas, size);
    mark_disc(d, label == ClassLabel::Outlier ? 1.0 : 0.5, seg.mask);
  }

  seg.image = Image8(size, size, 3);
  for (std::size_t i = 0; i < canvas.size(); ++i)
    seg.image.pixels[i] = to_byte(canvas[i] + (cfg.noise_std > 0 ? rng.normal(0.0, cfg.noise_std) : 0.0));

  char id[64];
  std::snprintf(id, sizeof id, "synth_%s_%05zu",
                std::string(label_word(LabelScheme::Seven, static_cast<int>(label))).c_str(), ordinal);
  seg.source_id = id;
  return seg;
}

}  // namespace

std::vector<LabeledSegment> generate_synthetic(const SynthConfig& config) {
  config.validate();
  std::vector<LabeledSegment> out;
  const Rng base(config.seed);
  std::size_t record = 0;
  for (std::size_t c = 0; c < kSevenClasses; ++c)
    for (std::size_t k = 0; k < config.class_counts[c]; ++k, ++record)
      out.push_back(synthesize_one(config, static_cast<ClassLabel>(c), k, base.fork(record)));
  return out;
}

DatasetManifest write_dataset(const std::filesystem::path& dir,
                              std::span<const LabeledSegment> segments) {
  DatasetManifest m;
  m.root = dir;
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  for (const auto& s : segments) {
    ManifestRecord r;
    r.image_path = "images/" + s.source_id + ".ppm";
    r.mask_path = "masks/" + s.source_id + ".pgm";
    r.label = s.label;
    write_ppm(dir / r.image_path, s.image);
    write_pgm(dir / r.mask_path, s.mask);
    m.records.push_back(std::move(r));
  }
  save_manifest(m, dir / "manifest.csv");
  return m;
}

}  // namespace microbia
