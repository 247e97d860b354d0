// Command-line front end for dataset generation, training and explanation runs.

#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "microbia/harness.hpp"
#include "microbia/reports.hpp"

namespace fs = std::filesystem;
using namespace microbia;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string output;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Experiment config file (sectioned key = value)");
  cmd->add_option("--set", c.sets, "Override a config key, e.g. --set train.max_epochs=5");
  cmd->add_option("--output", c.output, "Output directory (overrides experiment.output)");
}

IniFile load_ini(const Common& c) {
  IniFile ini = c.config.empty() ? IniFile::parse("", "<defaults>") : IniFile::load(c.config);
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ConfigError("--set expects key=value, got '" + s + "'");
    ini.set(s.substr(0, eq), s.substr(eq + 1));
  }
  if (!c.output.empty()) ini.set("experiment.output", c.output);
  return ini;
}

std::map<std::string, std::string> settings_of(const IniFile& ini) {
  return {ini.values().begin(), ini.values().end()};
}

void print_summary(const RunSummary& s) {
  std::cout << "seed,precision,recall,f1,accuracy\n";
  for (const auto& r : s.runs)
    std::cout << r.seed << ',' << format_number(r.valid.precision) << ','
              << format_number(r.valid.recall) << ',' << format_number(r.valid.f1) << ','
              << format_number(r.valid.accuracy) << '\n';
  std::cout << "mean," << format_number(s.precision.mean) << ',' << format_number(s.recall.mean)
            << ',' << format_number(s.f1.mean) << ',' << format_number(s.accuracy.mean) << '\n';
  std::cout << "std," << format_number(s.precision.std) << ',' << format_number(s.recall.std)
            << ',' << format_number(s.f1.std) << ',' << format_number(s.accuracy.std) << '\n';
  std::cout << "representative seed: " << s.runs[s.representative].seed << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  reuse_large_allocations();
  CLI::App app{"Colony cardinality classification: data, training and explanations", "microbia"};
  app.require_subcommand(1);

  // gen-data
  Common gen_common;
  std::string gen_out;
  std::optional<std::uint64_t> gen_seed;
  std::optional<std::size_t> gen_per_class;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic segment dataset");
  gen->add_option("--config", gen_common.config, "Config file; only [synth] is read");
  gen->add_option("--set", gen_common.sets, "Override a config key");
  gen->add_option("--out", gen_out, "Dataset directory")->required();
  gen->add_option("--seed", gen_seed, "Generator seed");
  gen->add_option("--per-class", gen_per_class, "Segments per class");

  // split
  std::string split_dataset;
  std::uint64_t split_seed = 1;
  auto* split = app.add_subcommand("split", "Write a seeded 6:2:2 split into a manifest");
  split->add_option("--dataset", split_dataset, "Dataset directory holding manifest.csv")
      ->required();
  split->add_option("--seed", split_seed, "Shuffle seed");

  Common train_c, balanced_c, merged_c, explain_c, eval_c;
  auto* train_cmd = app.add_subcommand("train", "Baseline runs over every split seed");
  add_common(train_cmd, train_c);
  auto* balanced = app.add_subcommand("balanced", "Runs on downsampled training splits");
  add_common(balanced, balanced_c);
  auto* merged = app.add_subcommand("merged", "Four-class run and baseline comparison");
  add_common(merged, merged_c);
  auto* explain = app.add_subcommand("explain", "Embeddings, feature visualisation and CAMs");
  add_common(explain, explain_c);

  // eval
  std::string eval_checkpoint, eval_split = "valid";
  bool unlock_test = false;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
  add_common(eval, eval_c);
  eval->add_option("--checkpoint", eval_checkpoint, "Checkpoint file")->required();
  eval->add_option("--split", eval_split, "train or valid (test needs --unlock-test)")
      ->check(CLI::IsMember({"train", "valid", "test"}));
  eval->add_flag("--unlock-test", unlock_test, "Allow evaluation on the withheld test split");

  // report
  std::string report_dir, report_kind = "baseline";
  auto* report = app.add_subcommand("report", "Re-aggregate per-seed reports of a finished run");
  report->add_option("--output", report_dir, "Run output directory")->required();
  report->add_option("--kind", report_kind, "Run kind")
      ->check(CLI::IsMember({"baseline", "balanced", "merged"}));

  if (argc <= 1) {
    std::cerr << app.help();
    return 2;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) {
      IniFile ini = load_ini(gen_common);
      if (gen_seed) ini.set("synth.seed", std::to_string(*gen_seed));
      if (gen_per_class)
        for (int i = 0; i < static_cast<int>(kSevenClasses); ++i)
          ini.set("synth.counts." + std::string(label_word(LabelScheme::Seven, i)),
                  std::to_string(*gen_per_class));
      const auto config = ExperimentConfig::from_ini(ini);
      const auto segments = generate_synthetic(config.synth);
      const fs::path out = resolve_output(gen_out);
      write_dataset(out, segments);
      auto settings = settings_of(ini);
      settings["synth.seed"] = std::to_string(config.synth.seed);
      write_run_manifest(out, "gen-data", settings);
      std::cout << "wrote " << segments.size() << " segments to " << out.string() << '\n';
      std::cout << "directory hash " << directory_hash(out) << '\n';
    } else if (*split) {
      const fs::path path = fs::path(split_dataset) / "manifest.csv";
      auto manifest = load_manifest(path);
      assign_splits(manifest, split_seed);
      save_manifest(manifest, path);
      std::cout << "class,train,valid,test\n";
      const auto labels = manifest.labels();
      for (int c = 0; c < static_cast<int>(kSevenClasses); ++c) {
        std::size_t n[3] = {0, 0, 0};
        for (std::size_t i = 0; i < labels.size(); ++i)
          if (static_cast<int>(labels[i]) == c) ++n[static_cast<int>(*manifest.records[i].split)];
        std::cout << label_word(LabelScheme::Seven, c) << ',' << n[0] << ',' << n[1] << ','
                  << n[2] << '\n';
      }
    } else if (*train_cmd || *balanced) {
      const Common& c = *train_cmd ? train_c : balanced_c;
      const IniFile ini = load_ini(c);
      const auto config = ExperimentConfig::from_ini(ini);
      const auto summary =
          *train_cmd ? run_baseline(config, &std::cerr) : run_balanced(config, &std::cerr);
      const fs::path out = resolve_output(config.output);
      write_run_manifest(out, *train_cmd ? "train" : "balanced", settings_of(ini));
      print_summary(summary);
    } else if (*merged) {
      const IniFile ini = load_ini(merged_c);
      const auto config = ExperimentConfig::from_ini(ini);
      const auto cmp = run_merged(config, &std::cerr);
      write_run_manifest(resolve_output(config.output), "merged", settings_of(ini));
      std::cout << "merged f1 " << format_number(cmp.merged.f1) << '\n';
      if (cmp.converted_baseline)
        std::cout << "converted baseline f1 " << format_number(cmp.converted_baseline->f1)
                  << "\ndelta f1 " << format_number(*cmp.delta_f1) << '\n';
    } else if (*explain) {
      const IniFile ini = load_ini(explain_c);
      const auto config = ExperimentConfig::from_ini(ini);
      const fs::path out = run_explain(config, &std::cerr);
      write_run_manifest(out, "explain", settings_of(ini));
      std::cout << "artifacts in " << out.string() << '\n';
    } else if (*eval) {
      if (eval_split == "test" && !unlock_test)
        throw ConfigError("the test split is withheld; pass --unlock-test to evaluate it");
      const IniFile ini = load_ini(eval_c);
      const auto config = ExperimentConfig::from_ini(ini);
      const Checkpoint ck = checkpoint_load(eval_checkpoint);
      if (!ck.model.normalization)
        throw CheckpointError(eval_checkpoint + ": checkpoint carries no normalisation statistics");
      const Corpus corpus = load_corpus(config);
      SampleSet samples = split_samples(corpus, config.split_seeds.front(),
                                        parse_split(eval_split), *ck.model.normalization);
      if (ck.model.scheme() == LabelScheme::Four) samples = samples.merged();
      const EvalReport r = evaluate(ck.model, samples);
      const fs::path out = resolve_output(config.output);
      const std::string stem = "eval_" + fs::path(eval_checkpoint).stem().string() + "_" + eval_split;
      write_report_json(out / "reports" / (stem + ".json"), r);
      write_report_csv(out / "reports" / (stem + ".csv"), r);
      write_confusion_csv(out / "reports" / (stem + "_confusion.csv"), r.confusion, r.scheme);
      auto settings = settings_of(ini);
      settings["eval.checkpoint"] = eval_checkpoint;
      settings["eval.split"] = eval_split;
      write_run_manifest(out, "eval", settings);
      std::cout << "precision " << format_number(r.precision) << "\nrecall "
                << format_number(r.recall) << "\nf1 " << format_number(r.f1) << "\naccuracy "
                << format_number(r.accuracy) << '\n';
    } else if (*report) {
      const fs::path out = resolve_output(report_dir);
      const auto s = summarize_reports(out, report_kind);
      print_summary(s);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
