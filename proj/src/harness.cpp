#include "microbia/harness.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <ostream>
#include <regex>
#include <sstream>

#include "microbia/reports.hpp"

namespace microbia {

namespace fs = std::filesystem;

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// IniFile

IniFile IniFile::parse(const std::string& text, const std::string& origin) {
  IniFile ini;
  ini.origin_ = origin;
  std::istringstream in(text);
  std::string line, section;
  std::size_t line_no = 0;
  const auto fail = [&](const std::string& msg) {
    throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t[0] == '[') {
      if (t.back() != ']') fail("unterminated section header");
      section = trim(std::string_view(t).substr(1, t.size() - 2));
      if (section.empty()) fail("empty section name");
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) fail("expected 'key = value', got '" + t + "'");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    if (key.empty()) fail("missing key before '='");
    const std::string full = section.empty() ? key : section + "." + key;
    if (ini.values_.count(full)) fail("duplicate key '" + full + "'");
    ini.values_[full] = trim(std::string_view(t).substr(eq + 1));
    ini.lines_[full] = line_no;
  }
  return ini;
}

IniFile IniFile::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

std::optional<std::string> IniFile::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  used_[key] = true;
  return it->second;
}

std::size_t IniFile::line_of(const std::string& key) const {
  const auto it = lines_.find(key);
  return it == lines_.end() ? 0 : it->second;
}

std::vector<std::string> IniFile::unused_keys() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : values_)
    if (!used_.count(k)) out.push_back(k);
  return out;
}

void IniFile::fail(const std::string& key, const std::string& message) const {
  const std::size_t line = line_of(key);
  throw ConfigError(origin_ + (line ? ":" + std::to_string(line) : std::string()) + ": " + key +
                    ": " + message);
}

void IniFile::set(const std::string& key, const std::string& value) {
  values_[key] = value;
  lines_.erase(key);
}

std::string IniFile::get_string(const std::string& key, const std::string& fallback) const {
  return get(key).value_or(fallback);
}

double IniFile::get_double(const std::string& key, double fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  double out = 0;
  const auto r = std::from_chars(v->data(), v->data() + v->size(), out);
  if (r.ec != std::errc() || r.ptr != v->data() + v->size() || !std::isfinite(out))
    fail(key, "expected a number, got '" + *v + "'");
  return out;
}

std::uint64_t IniFile::get_uint(const std::string& key, std::uint64_t fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  std::uint64_t out = 0;
  const auto r = std::from_chars(v->data(), v->data() + v->size(), out);
  if (r.ec != std::errc() || r.ptr != v->data() + v->size())
    fail(key, "expected a non-negative integer, got '" + *v + "'");
  return out;
}

bool IniFile::get_bool(const std::string& key, bool fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  std::string w = *v;
  std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return std::tolower(c); });
  if (w == "true" || w == "yes" || w == "on" || w == "1") return true;
  if (w == "false" || w == "no" || w == "off" || w == "0") return false;
  fail(key, "expected true or false, got '" + *v + "'");
}

std::vector<std::uint64_t> IniFile::get_uint_list(
    const std::string& key, const std::vector<std::uint64_t>& fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  std::vector<std::uint64_t> out;
  for (const auto& item : split_list(*v)) {
    std::uint64_t x = 0;
    const auto r = std::from_chars(item.data(), item.data() + item.size(), x);
    if (r.ec != std::errc() || r.ptr != item.data() + item.size())
      fail(key, "expected a list of non-negative integers, got '" + item + "'");
    out.push_back(x);
  }
  return out;
}

std::vector<double> IniFile::get_double_list(const std::string& key,
                                             const std::vector<double>& fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  std::vector<double> out;
  for (const auto& item : split_list(*v)) {
    double x = 0;
    const auto r = std::from_chars(item.data(), item.data() + item.size(), x);
    if (r.ec != std::errc() || r.ptr != item.data() + item.size())
      fail(key, "expected a list of numbers, got '" + item + "'");
    out.push_back(x);
  }
  return out;
}

// ---------------------------------------------------------------------------
// ExperimentConfig

std::string_view experiment_kind_name(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::Baseline: return "baseline";
    case ExperimentKind::Balanced: return "balanced";
    case ExperimentKind::Merged: return "merged";
    case ExperimentKind::Explain: return "explain";
  }
  return "?";
}

ExperimentConfig ExperimentConfig::from_ini(const IniFile& ini) {
  ExperimentConfig c;
  const std::string kind = ini.get_string("experiment.kind", "baseline");
  bool known = false;
  for (auto k : {ExperimentKind::Baseline, ExperimentKind::Balanced, ExperimentKind::Merged,
                 ExperimentKind::Explain})
    if (experiment_kind_name(k) == kind) c.kind = k, known = true;
  if (!known) ini.fail("experiment.kind", "must be baseline, balanced, merged or explain");
  c.output = ini.get_string("experiment.output", c.output.string());
  c.model_seed = ini.get_uint("experiment.model_seed", c.model_seed);
  c.baseline_report = ini.get_string("experiment.baseline_report", "");

  c.dataset = ini.get_string("data.dataset", "");

  SynthConfig& s = c.synth;
  s.seed = ini.get_uint("synth.seed", s.seed);
  s.canvas_size = ini.get_uint("synth.canvas_size", s.canvas_size);
  s.colony_radius_min = ini.get_double("synth.radius_min", s.colony_radius_min);
  s.colony_radius_max = ini.get_double("synth.radius_max", s.colony_radius_max);
  s.overlap_probability = ini.get_double("synth.overlap_probability", s.overlap_probability);
  s.neighbour_probability = ini.get_double("synth.neighbour_probability", s.neighbour_probability);
  s.colony_color_jitter = ini.get_double("synth.colour_jitter", s.colony_color_jitter);
  s.edge_softness = ini.get_double("synth.edge_softness", s.edge_softness);
  s.noise_std = ini.get_double("synth.noise_std", s.noise_std);
  for (int i = 0; i < static_cast<int>(kSevenClasses); ++i) {
    const std::string key = "synth.counts." + std::string(label_word(LabelScheme::Seven, i));
    auto& n = s.class_counts[static_cast<std::size_t>(i)];
    n = ini.get_uint(key, n);
  }
  try {
    s.validate();
  } catch (const Error& e) {
    throw ConfigError(ini.origin() + ": [synth] " + e.what());
  }

  c.split_seeds = ini.get_uint_list("seeds.split", c.split_seeds);
  c.downsample_seeds = ini.get_uint_list("seeds.downsample", c.downsample_seeds);
  if (c.split_seeds.empty()) ini.fail("seeds.split", "needs at least one seed");
  if (c.downsample_seeds.empty()) ini.fail("seeds.downsample", "needs at least one seed");

  TrainConfig& t = c.train;
  t.learning_rate = ini.get_double("train.learning_rate", t.learning_rate);
  t.batch_size = ini.get_uint("train.batch_size", t.batch_size);
  t.max_epochs = ini.get_uint("train.max_epochs", t.max_epochs);
  t.weight_decay = ini.get_double("train.weight_decay", t.weight_decay);
  t.decoupled_weight_decay = ini.get_bool("train.decoupled_weight_decay", t.decoupled_weight_decay);
  t.early_stop_patience = ini.get_uint("train.early_stop_patience", t.early_stop_patience);
  t.early_stop_min_delta = ini.get_double("train.early_stop_min_delta", t.early_stop_min_delta);
  t.relative_min_delta = ini.get_bool("train.relative_min_delta", t.relative_min_delta);
  t.warmup_steps = ini.get_uint("train.warmup_steps", t.warmup_steps);
  t.target_valid_f1 = ini.get_double("train.target_valid_f1", t.target_valid_f1);
  t.time_budget_seconds = ini.get_double("train.time_budget_seconds", t.time_budget_seconds);
  t.seed = ini.get_uint("train.seed", t.seed);
  try {
    t.validate();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    const std::string key = "train." + msg.substr(0, msg.find(' '));
    if (ini.has(key)) ini.fail(key, msg);
    throw ConfigError(ini.origin() + ": " + msg);
  }

  ExplainSettings& x = c.explain;
  x.checkpoint = ini.get_string("explain.checkpoint", "");
  x.classes = ini.get_uint("explain.classes", x.classes);
  if (x.classes != kSevenClasses && x.classes != kFourClasses)
    ini.fail("explain.classes", "must be 7 or 4");
  x.perplexity = ini.get_double("explain.perplexity", x.perplexity);
  x.perplexity_sweep = ini.get_double_list("explain.perplexity_sweep", x.perplexity_sweep);
  x.tsne_iterations = ini.get_uint("explain.tsne_iterations", x.tsne_iterations);
  {
    std::vector<std::uint64_t> k(x.featviz_kernels.begin(), x.featviz_kernels.end());
    k = ini.get_uint_list("explain.featviz_kernels", k);
    x.featviz_kernels.assign(k.begin(), k.end());
  }
  x.featviz.images = ini.get_uint("explain.featviz_images", x.featviz.images);
  x.featviz.iterations = ini.get_uint("explain.featviz_iterations", x.featviz.iterations);
  x.featviz.step = ini.get_double("explain.featviz_step", x.featviz.step);
  x.featviz.init_stddev = ini.get_double("explain.featviz_init_stddev", x.featviz.init_stddev);
  x.cam_per_class = ini.get_uint("explain.cam_per_class", x.cam_per_class);
  x.seed = ini.get_uint("explain.seed", x.seed);
  x.embeddings = ini.get_bool("explain.embeddings", x.embeddings);
  x.feature_viz = ini.get_bool("explain.feature_viz", x.feature_viz);
  x.cams = ini.get_bool("explain.cams", x.cams);
  if (!(x.perplexity > 0)) ini.fail("explain.perplexity", "must be positive");
  for (double p : x.perplexity_sweep)
    if (!(p > 0)) ini.fail("explain.perplexity_sweep", "perplexities must be positive");
  if (x.tsne_iterations == 0) ini.fail("explain.tsne_iterations", "must be positive");
  if (x.featviz.images == 0) ini.fail("explain.featviz_images", "must be positive");
  if (!(x.featviz.step > 0)) ini.fail("explain.featviz_step", "must be positive");

  const auto unused = ini.unused_keys();
  if (!unused.empty()) ini.fail(unused.front(), "unknown key");
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  return from_ini(IniFile::load(path));
}

void ExperimentConfig::validate() const {
  if (split_seeds.empty()) throw ConfigError("seeds.split needs at least one seed");
  if (downsample_seeds.empty()) throw ConfigError("seeds.downsample needs at least one seed");
  train.validate();
  synth.validate();
}

fs::path resolve_output(const fs::path& output) {
  const char* root = std::getenv("MICROBIA_OUTPUT_ROOT");
  if (root && *root && output.is_relative()) return fs::path(root) / output;
  return output;
}

// ---------------------------------------------------------------------------
// Summaries

MetricStats summarize(const std::vector<double>& values) {
  if (values.empty()) throw DataError("summarize: no values");
  MetricStats s;
  const double n = static_cast<double>(values.size());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(ss / n);
  s.min = *std::min_element(values.begin(), values.end());
  s.max = *std::max_element(values.begin(), values.end());
  // Keep the mean inside [min, max] despite rounding.
  s.mean = std::clamp(s.mean, s.min, s.max);
  return s;
}

std::size_t representative_index(const std::vector<SeedRun>& runs, double mean_f1) {
  if (runs.empty()) throw DataError("representative_index: no runs");
  std::size_t best = 0;
  for (std::size_t i = 1; i < runs.size(); ++i) {
    const double d = std::abs(runs[i].valid.f1 - mean_f1);
    const double b = std::abs(runs[best].valid.f1 - mean_f1);
    if (d < b || (d == b && runs[i].seed < runs[best].seed)) best = i;
  }
  return best;
}

void finalize_summary(RunSummary& s) {
  std::vector<double> p, r, f, a, tf;
  for (const auto& run : s.runs) {
    p.push_back(run.valid.precision);
    r.push_back(run.valid.recall);
    f.push_back(run.valid.f1);
    a.push_back(run.valid.accuracy);
    tf.push_back(run.train.f1);
  }
  s.precision = summarize(p);
  s.recall = summarize(r);
  s.f1 = summarize(f);
  s.accuracy = summarize(a);
  s.train_f1 = summarize(tf);
  s.representative = representative_index(s.runs, s.f1.mean);
}

// ---------------------------------------------------------------------------
// Data

Corpus load_corpus(const ExperimentConfig& config) {
  Corpus c;
  if (!config.dataset.empty()) {
    const auto manifest = load_manifest(config.dataset / "manifest.csv");
    if (manifest.records.empty()) throw DataError("dataset has no records");
    std::vector<std::size_t> all(manifest.records.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    c.samples = load_samples(manifest, all);
    c.labels = manifest.labels();
  } else {
    const auto segments = generate_synthetic(config.synth);
    c.samples = make_sample_set(segments);
    for (const auto& s : segments) c.labels.push_back(s.label);
  }
  return c;
}

namespace {

PreparedSplit split_with(const Corpus& corpus, std::uint64_t seed,
                         const std::optional<ChannelStats>& stats) {
  const auto splits = stratified_split(corpus.labels, seed);
  std::vector<std::size_t> tr, va;
  for (std::size_t i = 0; i < splits.size(); ++i) {
    if (splits[i] == Split::Train) tr.push_back(i);
    if (splits[i] == Split::Valid) va.push_back(i);
  }
  PreparedSplit p;
  p.train = corpus.samples.subset(tr);
  p.valid = corpus.samples.subset(va);
  p.stats = stats ? *stats : compute_channel_stats(p.train.images);
  normalize_in_place(p.train.images, p.stats);
  normalize_in_place(p.valid.images, p.stats);
  return p;
}

}  // namespace

PreparedSplit prepare_split(const Corpus& corpus, std::uint64_t seed) {
  return split_with(corpus, seed, std::nullopt);
}

SampleSet split_samples(const Corpus& corpus, std::uint64_t seed, Split which,
                        const ChannelStats& stats) {
  const auto splits = stratified_split(corpus.labels, seed);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < splits.size(); ++i)
    if (splits[i] == which) keep.push_back(i);
  SampleSet out = corpus.samples.subset(keep);
  normalize_in_place(out.images, stats);
  return out;
}

// ---------------------------------------------------------------------------
// Runs

namespace {

std::string seed_tag(const std::string& kind, std::uint64_t seed) {
  return kind + "_seed" + std::to_string(seed);
}

void say(std::ostream* log, const std::string& line) {
  if (log) *log << line << std::endl;
}

SeedRun train_one(const ExperimentConfig& config, const std::string& kind, std::uint64_t seed,
                  std::uint64_t model_seed, const SampleSet& train_set, const SampleSet& valid_set,
                  const ChannelStats& stats, const fs::path& out, std::ostream* log) {
  Rng init(model_seed);
  auto model =
      ModelState::initialize(Architecture::microbianet(num_classes(train_set.scheme)), init);
  model.normalization = stats;
  TrainConfig tc = config.train;
  tc.seed = config.train.seed + seed;
  const std::string tag = seed_tag(kind, seed);
  say(log, tag + ": training on " + std::to_string(train_set.size()) + " images, validating on " +
               std::to_string(valid_set.size()));
  auto result = train(model, train_set, valid_set, tc, [&](const EpochRecord& r) {
    std::ostringstream s;
    s << tag << " epoch " << r.epoch << " train_loss " << format_number(r.train_loss)
      << " valid_loss " << format_number(r.valid_loss) << " valid_f1 "
      << format_number(r.valid_f1) << (r.best ? " *" : "");
    say(log, s.str());
  });

  SeedRun run;
  run.seed = seed;
  run.log = result.log;
  run.train = evaluate(result.model, train_set);
  run.valid = evaluate(result.model, valid_set);
  std::vector<double> class_f1;
  for (const auto& m : run.train.per_class) class_f1.push_back(m.f1);
  run.train_class_f1_std = summarize(class_f1).std;

  run.checkpoint = out / "checkpoints" / (tag + ".ckpt");
  fs::create_directories(run.checkpoint.parent_path());
  checkpoint_save(run.checkpoint, result.model, &result.optimizer);
  const fs::path reports = out / "reports";
  write_report_json(reports / (tag + "_valid.json"), run.valid);
  write_report_csv(reports / (tag + "_valid.csv"), run.valid);
  write_confusion_csv(reports / (tag + "_valid_confusion.csv"), run.valid.confusion,
                      run.valid.scheme);
  write_report_json(reports / (tag + "_train.json"), run.train);
  write_report_csv(reports / (tag + "_train.csv"), run.train);
  write_epoch_log_csv(reports / (tag + "_epochs.csv"), run.log);
  write_epoch_log_svg(out / "figures" / (tag + "_curves.svg"), run.log);
  say(log, tag + ": best epoch " + std::to_string(run.log.best_epoch) + ", validation F1 " +
               format_number(run.valid.f1) + " (" + run.log.stop_reason + ")");
  return run;
}

}  // namespace

RunSummary run_baseline(const ExperimentConfig& config, std::ostream* log) {
  config.validate();
  const fs::path out = resolve_output(config.output);
  const Corpus corpus = load_corpus(config);
  RunSummary summary;
  summary.kind = "baseline";
  for (const auto seed : config.split_seeds) {
    const auto split = prepare_split(corpus, seed);
    try {
      summary.runs.push_back(train_one(config, summary.kind, seed, config.model_seed + seed,
                                       split.train, split.valid, split.stats, out, log));
    } catch (const DivergenceError& e) {
      throw DivergenceError("split seed " + std::to_string(seed) + ": " + e.what());
    }
  }
  finalize_summary(summary);
  write_summary(out, summary);
  return summary;
}

RunSummary run_balanced(const ExperimentConfig& config, std::ostream* log) {
  config.validate();
  const fs::path out = resolve_output(config.output);
  const Corpus corpus = load_corpus(config);
  const std::uint64_t split_seed = config.split_seeds.front();
  const auto split = prepare_split(corpus, split_seed);
  RunSummary summary;
  summary.kind = "balanced";
  for (const auto seed : config.downsample_seeds) {
    const auto keep = downsample_balanced(split.train.labels, seed);
    const SampleSet train_set = split.train.subset(keep);
    try {
      summary.runs.push_back(train_one(config, summary.kind, seed, config.model_seed + split_seed,
                                       train_set, split.valid, split.stats, out, log));
    } catch (const DivergenceError& e) {
      throw DivergenceError("downsample seed " + std::to_string(seed) + ": " + e.what());
    }
  }
  finalize_summary(summary);
  write_summary(out, summary);
  std::ostringstream ids;
  for (const auto& id : split.valid.ids) ids << id << '\n';
  write_text(out / "reports" / "balanced_valid_ids.txt", ids.str());
  return summary;
}

MergedComparison run_merged(const ExperimentConfig& config, std::ostream* log) {
  config.validate();
  const fs::path out = resolve_output(config.output);
  const Corpus corpus = load_corpus(config);
  const std::uint64_t seed = config.split_seeds.front();
  const auto split = prepare_split(corpus, seed);
  MergedComparison cmp;
  cmp.run = train_one(config, "merged", seed, config.model_seed + seed, split.train.merged(),
                      split.valid.merged(), split.stats, out, log);
  cmp.merged = cmp.run.valid;

  fs::path baseline = config.baseline_report;
  if (baseline.empty()) baseline = out / "reports" / (seed_tag("baseline", seed) + "_valid.json");
  std::ostringstream csv;
  csv << "model,precision,recall,f1,accuracy\n";
  csv << "merged," << format_number(cmp.merged.precision) << ',' << format_number(cmp.merged.recall)
      << ',' << format_number(cmp.merged.f1) << ',' << format_number(cmp.merged.accuracy) << '\n';
  if (fs::exists(baseline)) {
    const EvalReport seven = read_report_json(baseline);
    cmp.converted_baseline = convert_report_7_to_4(seven);
    cmp.delta_f1 = cmp.merged.f1 - cmp.converted_baseline->f1;
    write_report_json(out / "reports" / "merged_converted_baseline.json", *cmp.converted_baseline);
    write_report_csv(out / "reports" / "merged_converted_baseline.csv", *cmp.converted_baseline);
    write_confusion_csv(out / "reports" / "merged_converted_baseline_confusion.csv",
                        cmp.converted_baseline->confusion, LabelScheme::Four);
    const auto& b = *cmp.converted_baseline;
    csv << "converted_baseline," << format_number(b.precision) << ',' << format_number(b.recall)
        << ',' << format_number(b.f1) << ',' << format_number(b.accuracy) << '\n';
    csv << "delta_f1,,," << format_number(*cmp.delta_f1) << ",\n";
  } else {
    say(log, "warning: no baseline report at " + baseline.string() +
                 "; writing the merged model's report only");
  }
  write_text(out / "reports" / "merged_comparison.csv", csv.str());
  return cmp;
}

namespace {

void write_kl_log(const fs::path& path, const TsneResult& r) {
  std::ostringstream s;
  s << "iteration,kl\n";
  for (const auto& k : r.kl_log) s << k.iteration << ',' << format_number(k.kl) << '\n';
  write_text(path, s.str());
}

}  // namespace

fs::path run_explain(const ExperimentConfig& config, std::ostream* log) {
  config.validate();
  const fs::path out = resolve_output(config.output);
  const auto& x = config.explain;
  const std::uint64_t seed = config.split_seeds.front();
  const fs::path ck_path = x.checkpoint.empty()
                               ? out / "checkpoints" / (seed_tag("baseline", seed) + ".ckpt")
                               : x.checkpoint;
  const Checkpoint ck = checkpoint_load(ck_path, x.classes);
  const ModelState& model = ck.model;
  if (!model.normalization)
    throw CheckpointError(ck_path.string() + ": checkpoint carries no normalisation statistics");
  const Corpus corpus = load_corpus(config);
  auto split = split_with(corpus, seed, model.normalization);
  if (model.scheme() == LabelScheme::Four) {
    split.train = split.train.merged();
    split.valid = split.valid.merged();
  }

  if (x.embeddings) {
    const fs::path dir = out / "embeddings";
    for (const auto& [name, set] : {std::pair<std::string, const SampleSet*>{"train", &split.train},
                                    {"valid", &split.valid}}) {
      for (Tap tap : {Tap::Fc1Out, Tap::FlattenOut}) {
        const auto feats = extract_layer_outputs(model, *set, tap);
        const std::string base = name + "_" + std::string(tap_name(tap));
        auto pca = pca_embed(feats.features, 2);
        pca.embedding.labels = feats.labels;
        pca.embedding.scheme = feats.scheme;
        pca.embedding.source = std::string(tap_name(tap));
        if (pca.degenerate) say(log, "warning: " + base + " PCA is rank deficient");
        write_embedding_csv(dir / (base + "_pca.csv"), pca.embedding);
        write_embedding_svg(dir / (base + "_pca.svg"), pca.embedding,
                            base + " PCA (top 2 components)");
        const std::vector<double> perplexities =
            tap == Tap::Fc1Out ? std::vector<double>{x.perplexity} : x.perplexity_sweep;
        for (double p : perplexities) {
          const std::string tag = base + "_tsne_p" + format_number(p);
          if (!(static_cast<double>(feats.features.rows()) > 3.0 * p)) {
            say(log, "warning: skipping " + tag + ": too few samples for this perplexity");
            continue;
          }
          TsneConfig tc;
          tc.perplexity = p;
          tc.iterations = x.tsne_iterations;
          tc.seed = x.seed;
          say(log, "t-SNE " + tag);
          auto r = tsne_embed(feats.features, tc);
          r.embedding.labels = feats.labels;
          r.embedding.scheme = feats.scheme;
          r.embedding.source = std::string(tap_name(tap));
          write_embedding_csv(dir / (tag + ".csv"), r.embedding);
          write_embedding_svg(dir / (tag + ".svg"), r.embedding,
                              tag + " (learning rate " + format_number(r.embedding.learning_rate) +
                                  ")");
          write_kl_log(dir / (tag + "_kl.csv"), r);
        }
      }
    }
  }

  if (x.feature_viz) {
    const fs::path dir = out / "featviz";
    std::ostringstream summary;
    summary << "layer,kernel,dead,initial_objective,final_objective\n";
    for (std::size_t layer = 0; layer < 4; ++layer)
      for (std::size_t kernel : x.featviz_kernels) {
        if (kernel >= model.arch.channels[layer]) {
          say(log, "warning: layer " + std::to_string(layer + 1) + " has no kernel " +
                       std::to_string(kernel));
          continue;
        }
        say(log, "feature visualisation layer " + std::to_string(layer + 1) + " kernel " +
                     std::to_string(kernel));
        FeatureVizConfig fc = x.featviz;
        fc.seed = x.seed + 1000 * layer + kernel;
        const auto r = feature_visualize(model, layer, kernel, fc);
        write_feature_viz(dir, r, model.normalization);
        std::ostringstream obj;
        obj << "iteration";
        for (std::size_t i = 0; i < r.objective.size(); ++i) obj << ",img" << i;
        obj << '\n';
        for (std::size_t it = 0; it < r.objective.front().size(); ++it) {
          obj << it;
          for (const auto& o : r.objective) obj << ',' << format_number(o[it]);
          obj << '\n';
        }
        const std::string base =
            "layer" + std::to_string(layer + 1) + "_kernel" + std::to_string(kernel);
        write_text(dir / (base + "_objective.csv"), obj.str());
        double first = 0, last = 0;
        for (const auto& o : r.objective) first += o.front(), last += o.back();
        const double n = static_cast<double>(r.objective.size());
        summary << layer + 1 << ',' << kernel << ',' << (r.dead ? 1 : 0) << ','
                << format_number(first / n) << ',' << format_number(last / n) << '\n';
      }
    write_text(dir / "summary.csv", summary.str());
  }

  if (x.cams) {
    const fs::path dir = out / "cams";
    const SampleSet& valid = split.valid;
    const std::size_t classes = model.num_outputs();
    const auto predicted = predict(model, valid).labels;
    std::ostringstream index;
    index << "id,label,predicted,method,heat,overlay\n";
    const Rng base(x.seed);
    const std::size_t s = model.arch.input_size;
    for (std::size_t c = 0; c < classes; ++c) {
      std::vector<std::size_t> members;
      for (std::size_t i = 0; i < valid.size(); ++i)
        if (valid.labels[i] == static_cast<int>(c)) members.push_back(i);
      Rng rng = base.fork(c);
      rng.shuffle(std::span(members));
      members.resize(std::min(members.size(), x.cam_per_class));
      std::sort(members.begin(), members.end());
      const std::string word(label_word(valid.scheme, static_cast<int>(c)));
      for (std::size_t i : members) {
        const Tensor img = valid.images.slice_batch(i).reshaped({3, s, s});
        const Image8 rgb = tensor_to_image(img, model.normalization);
        const std::string stem = word + "_" + valid.ids[i];
        write_ppm(dir / (stem + "_input.ppm"), rgb);
        for (CamMethod m : kAllCamMethods) {
          const auto map = cam(model, img, c, m);
          const std::string name(cam_method_name(m));
          write_pgm(dir / (stem + "_" + name + ".pgm"), heat_to_gray(map.upsampled));
          write_ppm(dir / (stem + "_" + name + "_overlay.ppm"), heat_overlay(rgb, map.upsampled));
          index << valid.ids[i] << ',' << word << ','
                << label_word(valid.scheme, predicted[i]) << ',' << name << ','
                << stem + "_" + name + ".pgm" << ',' << stem + "_" + name + "_overlay.ppm"
                << '\n';
        }
      }
    }
    write_text(dir / "index.csv", index.str());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Summaries on disk

void write_summary(const fs::path& dir, const RunSummary& summary) {
  std::ostringstream csv;
  csv << "seed,precision,recall,f1,accuracy,train_f1,train_class_f1_std,best_epoch,epochs\n";
  for (const auto& r : summary.runs)
    csv << r.seed << ',' << format_number(r.valid.precision) << ','
        << format_number(r.valid.recall) << ',' << format_number(r.valid.f1) << ','
        << format_number(r.valid.accuracy) << ',' << format_number(r.train.f1) << ','
        << format_number(r.train_class_f1_std) << ',' << r.log.best_epoch << ','
        << r.log.epochs.size() << '\n';
  const auto row = [&](const std::string& name, double MetricStats::*field) {
    csv << name << ',' << format_number(summary.precision.*field) << ','
        << format_number(summary.recall.*field) << ',' << format_number(summary.f1.*field) << ','
        << format_number(summary.accuracy.*field) << ',' << format_number(summary.train_f1.*field)
        << ",,,\n";
  };
  row("mean", &MetricStats::mean);
  row("std", &MetricStats::std);
  write_text(dir / "reports" / (summary.kind + "_summary.csv"), csv.str());

  nlohmann::ordered_json j;
  j["kind"] = summary.kind;
  j["seeds"] = nlohmann::ordered_json::array();
  for (const auto& r : summary.runs) j["seeds"].push_back(r.seed);
  const auto stats = [](const MetricStats& m) {
    return nlohmann::ordered_json{{"mean", m.mean}, {"std", m.std}, {"min", m.min}, {"max", m.max}};
  };
  j["precision"] = stats(summary.precision);
  j["recall"] = stats(summary.recall);
  j["f1"] = stats(summary.f1);
  j["accuracy"] = stats(summary.accuracy);
  j["train_f1"] = stats(summary.train_f1);
  if (!summary.runs.empty()) j["representative_seed"] = summary.runs[summary.representative].seed;
  write_text(dir / "reports" / (summary.kind + "_summary.json"), j.dump(2) + "\n");
}

RunSummary summarize_reports(const fs::path& output, const std::string& kind) {
  const fs::path dir = output / "reports";
  if (!fs::is_directory(dir)) throw DataError("no reports directory under " + output.string());
  const std::regex pattern(kind + "_seed([0-9]+)_valid\\.json");
  RunSummary s;
  s.kind = kind;
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (!std::regex_match(name, m, pattern)) continue;
    SeedRun r;
    r.seed = std::stoull(m[1].str());
    r.valid = read_report_json(entry.path());
    const fs::path train = dir / (kind + "_seed" + m[1].str() + "_train.json");
    if (fs::exists(train)) r.train = read_report_json(train);
    s.runs.push_back(std::move(r));
  }
  if (s.runs.empty()) throw DataError("no " + kind + " reports under " + dir.string());
  std::sort(s.runs.begin(), s.runs.end(), [](auto& a, auto& b) { return a.seed < b.seed; });
  finalize_summary(s);
  return s;
}

// ---------------------------------------------------------------------------
// Hashes and manifests

namespace {

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr))
    throw Error("SHA-256 failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) out += kHex[md[i] >> 4], out += kHex[md[i] & 15];
  return out;
}

std::vector<std::pair<std::string, std::string>> hash_tree(const fs::path& dir,
                                                           const std::string& skip_prefix) {
  std::vector<std::pair<std::string, std::string>> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).generic_string();
    if (!skip_prefix.empty() && rel.rfind(skip_prefix, 0) == 0) continue;
    files.emplace_back(rel, sha256_file(e.path()));
  }
  std::sort(files.begin(), files.end());
  return files;
}

}  // namespace

std::string sha256_file(const fs::path& path) { return sha256_hex(read_text(path)); }

std::string directory_hash(const fs::path& dir) {
  std::string listing;
  for (const auto& [rel, h] : hash_tree(dir, "")) listing += rel + '\t' + h + '\n';
  return sha256_hex(listing);
}

void write_run_manifest(const fs::path& output, const std::string& command,
                        const std::map<std::string, std::string>& settings) {
  fs::create_directories(output);
  nlohmann::ordered_json j;
  j["tool"] = "microbia";
  j["command"] = command;
  j["settings"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : settings) j["settings"][k] = v;
  j["artifacts"] = nlohmann::ordered_json::array();
  for (const auto& [rel, h] : hash_tree(output, "manifest_"))
    j["artifacts"].push_back({{"path", rel}, {"sha256", h}});
  write_text(output / ("manifest_" + command + ".json"), j.dump(2) + "\n");
}

}  // namespace microbia
