#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "microbia/training.hpp"

namespace microbia {

/// Shortest decimal text that round-trips the double ("nan" for NaN).
std::string format_number(double v);

nlohmann::ordered_json report_to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::ordered_json& j);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

void write_report_json(const std::filesystem::path& path, const EvalReport& report);
EvalReport read_report_json(const std::filesystem::path& path);
/// class,precision,recall,f1,support rows plus a trailing "weighted" row.
void write_report_csv(const std::filesystem::path& path, const EvalReport& report);
/// Header row of predicted class words, one row per true class.
void write_confusion_csv(const std::filesystem::path& path, const ConfusionMatrix& confusion,
                         LabelScheme scheme);
/// epoch,train_loss,valid_loss,train_f1,valid_f1,best
void write_epoch_log_csv(const std::filesystem::path& path, const EpochLog& log);

struct ChartSeries {
  std::string name;
  std::string color;  // any SVG colour
  std::vector<double> x;
  std::vector<double> y;
};

/// Minimal standalone SVG line chart with axes, ticks and a legend.
std::string svg_line_chart(const std::vector<ChartSeries>& series, const std::string& title,
                           const std::string& x_label, const std::string& y_label);
/// Loss and F1 curves side by side.
void write_epoch_log_svg(const std::filesystem::path& path, const EpochLog& log);

}  // namespace microbia
