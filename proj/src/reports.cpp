#include "microbia/reports.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace microbia {

namespace fs = std::filesystem;

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

namespace {

nlohmann::ordered_json number_or_null(double v) {
  return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr);
}

std::string scheme_tag(LabelScheme s) { return s == LabelScheme::Seven ? "seven" : "four"; }

}  // namespace

nlohmann::ordered_json report_to_json(const EvalReport& report) {
  using json = nlohmann::ordered_json;
  json j;
  j["scheme"] = scheme_tag(report.scheme);
  j["classes"] = report.confusion.classes();
  j["accuracy"] = report.accuracy;
  j["precision"] = report.precision;
  j["recall"] = report.recall;
  j["f1"] = report.f1;
  j["loss"] = number_or_null(report.loss);
  json per = json::array();
  for (std::size_t c = 0; c < report.per_class.size(); ++c) {
    const auto& m = report.per_class[c];
    per.push_back({{"class", label_word(report.scheme, static_cast<int>(c))},
                   {"precision", m.precision},
                   {"recall", m.recall},
                   {"f1", m.f1},
                   {"support", m.support}});
  }
  j["per_class"] = per;
  json rows = json::array();
  const auto n = report.confusion.classes();
  for (std::size_t t = 0; t < n; ++t) {
    json row = json::array();
    for (std::size_t p = 0; p < n; ++p) row.push_back(report.confusion.at(t, p));
    rows.push_back(row);
  }
  j["confusion"] = rows;
  return j;
}

EvalReport report_from_json(const nlohmann::ordered_json& j) {
  try {
    const std::string tag = j.at("scheme").get<std::string>();
    if (tag != "seven" && tag != "four") throw DataError("report: unknown scheme '" + tag + "'");
    const LabelScheme scheme = tag == "seven" ? LabelScheme::Seven : LabelScheme::Four;
    const std::size_t n = num_classes(scheme);
    const auto& rows = j.at("confusion");
    if (rows.size() != n) throw DataError("report: confusion has the wrong number of rows");
    std::vector<std::uint64_t> counts;
    for (const auto& row : rows) {
      if (row.size() != n) throw DataError("report: confusion row has the wrong length");
      for (const auto& v : row) counts.push_back(v.get<std::uint64_t>());
    }
    const auto& loss = j.at("loss");
    return metrics_from_confusion(ConfusionMatrix(n, std::move(counts)), scheme,
                                  loss.is_null() ? std::numeric_limits<double>::quiet_NaN()
                                                 : loss.get<double>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("report: ") + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("cannot write " + path.string());
  out << text;
  if (!out) throw IngestionError("failed writing " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_report_json(const fs::path& path, const EvalReport& report) {
  write_text(path, report_to_json(report).dump(2) + "\n");
}

EvalReport read_report_json(const fs::path& path) {
  const std::string text = read_text(path);
  try {
    return report_from_json(nlohmann::ordered_json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_report_csv(const fs::path& path, const EvalReport& report) {
  std::ostringstream s;
  s << "class,precision,recall,f1,support\n";
  std::uint64_t total = 0;
  for (std::size_t c = 0; c < report.per_class.size(); ++c) {
    const auto& m = report.per_class[c];
    total += m.support;
    s << label_word(report.scheme, static_cast<int>(c)) << ',' << format_number(m.precision) << ','
      << format_number(m.recall) << ',' << format_number(m.f1) << ',' << m.support << '\n';
  }
  s << "weighted," << format_number(report.precision) << ',' << format_number(report.recall) << ','
    << format_number(report.f1) << ',' << total << '\n';
  write_text(path, s.str());
}

void write_confusion_csv(const fs::path& path, const ConfusionMatrix& confusion,
                         LabelScheme scheme) {
  if (confusion.classes() != num_classes(scheme))
    throw SchemeError("confusion matrix does not match the label scheme");
  std::ostringstream s;
  s << "true\\predicted";
  for (std::size_t p = 0; p < confusion.classes(); ++p)
    s << ',' << label_word(scheme, static_cast<int>(p));
  s << '\n';
  for (std::size_t t = 0; t < confusion.classes(); ++t) {
    s << label_word(scheme, static_cast<int>(t));
    for (std::size_t p = 0; p < confusion.classes(); ++p) s << ',' << confusion.at(t, p);
    s << '\n';
  }
  write_text(path, s.str());
}

void write_epoch_log_csv(const fs::path& path, const EpochLog& log) {
  std::ostringstream s;
  s << "epoch,train_loss,valid_loss,train_f1,valid_f1,best\n";
  for (const auto& e : log.epochs)
    s << e.epoch << ',' << format_number(e.train_loss) << ',' << format_number(e.valid_loss) << ','
      << format_number(e.train_f1) << ',' << format_number(e.valid_f1) << ',' << (e.best ? 1 : 0)
      << '\n';
  write_text(path, s.str());
}

// ---------------------------------------------------------------------------
// SVG

namespace {

std::string fixed(double v, int digits = 2) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

// Tick step of the form {1, 2, 5} x 10^k giving roughly five ticks.
double nice_step(double span) {
  if (!(span > 0)) return 1.0;
  const double raw = span / 5.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  const double f = raw / mag;
  return (f < 1.5 ? 1.0 : f < 3.5 ? 2.0 : f < 7.5 ? 5.0 : 10.0) * mag;
}

std::string chart_body(const std::vector<ChartSeries>& series, const std::string& title,
                       const std::string& x_label, const std::string& y_label, double ox,
                       double oy, double w, double h) {
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw DimensionError("chart series x/y lengths differ");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 - x0 < 1e-12) x0 -= 0.5, x1 += 0.5;
  if (y1 - y0 < 1e-12) y0 -= 0.5, y1 += 0.5;
  const double ys = nice_step(y1 - y0);
  y0 = std::floor(y0 / ys) * ys;
  y1 = std::ceil(y1 / ys) * ys;
  const double xs = nice_step(x1 - x0);

  const double left = ox + 60, right = ox + w - 20, top = oy + 40, bottom = oy + h - 50;
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * (right - left); };
  auto py = [&](double y) { return bottom - (y - y0) / (y1 - y0) * (bottom - top); };

  std::ostringstream s;
  s << "<text x=\"" << fixed(ox + w / 2) << "\" y=\"" << fixed(oy + 22)
    << "\" text-anchor=\"middle\" font-size=\"15\">" << escape_xml(title) << "</text>\n";
  s << "<rect x=\"" << fixed(left) << "\" y=\"" << fixed(top) << "\" width=\""
    << fixed(right - left) << "\" height=\"" << fixed(bottom - top)
    << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (double t = y0; t <= y1 + ys * 1e-6; t += ys) {
    s << "<line x1=\"" << fixed(left) << "\" x2=\"" << fixed(right) << "\" y1=\"" << fixed(py(t))
      << "\" y2=\"" << fixed(py(t)) << "\" stroke=\"#ddd\"/>\n";
    s << "<text x=\"" << fixed(left - 6) << "\" y=\"" << fixed(py(t) + 4)
      << "\" text-anchor=\"end\" font-size=\"11\">" << format_number(std::round(t / ys) * ys)
      << "</text>\n";
  }
  for (double t = std::ceil(x0 / xs) * xs; t <= x1 + xs * 1e-6; t += xs)
    s << "<text x=\"" << fixed(px(t)) << "\" y=\"" << fixed(bottom + 16)
      << "\" text-anchor=\"middle\" font-size=\"11\">" << format_number(std::round(t / xs) * xs)
      << "</text>\n";
  s << "<text x=\"" << fixed((left + right) / 2) << "\" y=\"" << fixed(bottom + 36)
    << "\" text-anchor=\"middle\" font-size=\"12\">" << escape_xml(x_label) << "</text>\n";
  s << "<text transform=\"translate(" << fixed(ox + 16) << ' ' << fixed((top + bottom) / 2)
    << ") rotate(-90)\" text-anchor=\"middle\" font-size=\"12\">" << escape_xml(y_label)
    << "</text>\n";

  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& sr = series[k];
    s << "<polyline fill=\"none\" stroke=\"" << escape_xml(sr.color)
      << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < sr.x.size(); ++i)
      if (std::isfinite(sr.x[i]) && std::isfinite(sr.y[i]))
        s << fixed(px(sr.x[i])) << ',' << fixed(py(sr.y[i])) << ' ';
    s << "\"/>\n";
    const double ly = top + 14 + 16 * static_cast<double>(k);
    s << "<line x1=\"" << fixed(right - 110) << "\" x2=\"" << fixed(right - 90) << "\" y1=\""
      << fixed(ly - 4) << "\" y2=\"" << fixed(ly - 4) << "\" stroke=\"" << escape_xml(sr.color)
      << "\" stroke-width=\"2\"/>\n";
    s << "<text x=\"" << fixed(right - 85) << "\" y=\"" << fixed(ly)
      << "\" font-size=\"11\">" << escape_xml(sr.name) << "</text>\n";
  }
  return s.str();
}

std::string svg_open(double w, double h) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fixed(w, 0) + "\" height=\"" +
         fixed(h, 0) + "\" viewBox=\"0 0 " + fixed(w, 0) + ' ' + fixed(h, 0) +
         "\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

}  // namespace

std::string svg_line_chart(const std::vector<ChartSeries>& series, const std::string& title,
                           const std::string& x_label, const std::string& y_label) {
  return svg_open(640, 400) + chart_body(series, title, x_label, y_label, 0, 0, 640, 400) +
         "</svg>\n";
}

void write_epoch_log_svg(const fs::path& path, const EpochLog& log) {
  ChartSeries tl{"train", "#1f77b4", {}, {}}, vl{"validation", "#d62728", {}, {}};
  ChartSeries tf{"train", "#1f77b4", {}, {}}, vf{"validation", "#d62728", {}, {}};
  for (const auto& e : log.epochs) {
    const double x = static_cast<double>(e.epoch);
    tl.x.push_back(x), tl.y.push_back(e.train_loss);
    vl.x.push_back(x), vl.y.push_back(e.valid_loss);
    tf.x.push_back(x), tf.y.push_back(e.train_f1);
    vf.x.push_back(x), vf.y.push_back(e.valid_f1);
  }
  std::string svg = svg_open(1280, 400);
  svg += chart_body({tl, vl}, "Loss", "epoch", "cross-entropy", 0, 0, 640, 400);
  svg += chart_body({tf, vf}, "Weighted F1", "epoch", "F1", 640, 0, 640, 400);
  svg += "</svg>\n";
  write_text(path, svg);
}

}  // namespace microbia
