#include "senformer/report.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "senformer/format.hpp"
#include "senformer/tensor_io.hpp"

namespace senf {

namespace {

std::string cell_text(const Cell& c) {
  if (const auto* s = std::get_if<std::string>(&c)) return *s;
  return format_number(std::get<double>(c));
}

std::string xml_escape(const std::string& s) {
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

std::string fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

std::string short_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  try {
    write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  } catch (const std::exception& e) {
    throw std::runtime_error("cannot write report file " + path.string() + ": " + e.what());
  }
}

std::string level_name(std::size_t i, const std::vector<std::size_t>& levels) {
  return i < levels.size() ? "d" + std::to_string(levels[i]) + (std::count(levels.begin(), levels.end(), levels[i]) > 1
                                                                   ? "_" + std::to_string(i)
                                                                   : "")
                           : "learner" + std::to_string(i);
}

}  // namespace

std::string table_csv(const ReportTable& table) {
  std::ostringstream os;
  for (std::size_t i = 0; i < table.columns.size(); ++i) os << (i ? "," : "") << table.columns[i];
  os << '\n';
  for (const auto& row : table.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << cell_text(row[i]);
    os << '\n';
  }
  return os.str();
}

std::string table_svg(const ReportTable& table, std::size_t series, const Provenance& provenance) {
  constexpr double width = 520, height = 320, left = 60, right = 20, top = 40, bottom = 60;
  const double plot_w = width - left - right, plot_h = height - top - bottom;
  std::vector<double> values;
  std::vector<std::string> labels;
  for (const auto& row : table.rows) {
    if (series >= row.size()) continue;
    const auto* v = std::get_if<double>(&row[series]);
    if (!v) continue;
    values.push_back(*v);
    labels.push_back(row.empty() ? "" : cell_text(row[0]));
  }
  double lo = 0.0, hi = 0.0;
  for (double v : values) {
    if (std::isfinite(v)) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (hi == lo) hi = lo + 1.0;
  auto y_of = [&](double v) { return top + plot_h * (1.0 - (v - lo) / (hi - lo)); };

  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fixed(width, 0) << "\" height=\"" << fixed(height, 0)
     << "\" viewBox=\"0 0 " << fixed(width, 0) << ' ' << fixed(height, 0) << "\">\n"
     << "<desc>checkpoint " << xml_escape(provenance.checkpoint_id) << "; dataset "
     << xml_escape(provenance.dataset_id) << "; seed " << provenance.seed << "</desc>\n"
     << "<rect x=\"0\" y=\"0\" width=\"" << fixed(width, 0) << "\" height=\"" << fixed(height, 0)
     << "\" fill=\"white\"/>\n"
     << "<text x=\"" << fixed(width / 2) << "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" "
     << "font-size=\"14\">" << xml_escape(table.title + " - " + table.columns.at(series)) << "</text>\n";
  // axes
  os << "<line x1=\"" << fixed(left) << "\" y1=\"" << fixed(top) << "\" x2=\"" << fixed(left) << "\" y2=\""
     << fixed(top + plot_h) << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << fixed(left) << "\" y1=\"" << fixed(y_of(0.0)) << "\" x2=\"" << fixed(left + plot_w)
     << "\" y2=\"" << fixed(y_of(0.0)) << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * t / 4.0;
    os << "<text x=\"" << fixed(left - 6) << "\" y=\"" << fixed(y_of(v) + 4) << "\" text-anchor=\"end\" "
       << "font-family=\"sans-serif\" font-size=\"10\">" << xml_escape(short_number(v)) << "</text>\n";
  }
  const std::size_t n = values.size();
  const double slot = n ? plot_w / static_cast<double>(n) : plot_w;
  const bool sparse_labels = n > 12;
  if (table.chart == ChartKind::kBar) {
    for (std::size_t i = 0; i < n; ++i) {
      const double v = std::isfinite(values[i]) ? values[i] : 0.0;
      const double x = left + slot * static_cast<double>(i) + slot * 0.15;
      const double y0 = y_of(std::max(v, 0.0)), y1 = y_of(std::min(v, 0.0));
      os << "<rect x=\"" << fixed(x) << "\" y=\"" << fixed(y0) << "\" width=\"" << fixed(slot * 0.7)
         << "\" height=\"" << fixed(y1 - y0) << "\" fill=\"#4878a8\"/>\n";
    }
  } else if (n > 0) {
    os << "<polyline fill=\"none\" stroke=\"#c0504d\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < n; ++i) {
      const double v = std::isfinite(values[i]) ? values[i] : 0.0;
      os << (i ? " " : "") << fixed(left + slot * (static_cast<double>(i) + 0.5)) << ',' << fixed(y_of(v));
    }
    os << "\"/>\n";
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (sparse_labels && i % (n / 8 + 1) != 0) continue;
    os << "<text x=\"" << fixed(left + slot * (static_cast<double>(i) + 0.5)) << "\" y=\""
       << fixed(top + plot_h + 16) << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">"
       << xml_escape(labels[i]) << "</text>\n";
  }
  if (!table.note.empty()) {
    os << "<text x=\"" << fixed(left) << "\" y=\"" << fixed(height - 12) << "\" font-family=\"sans-serif\" "
       << "font-size=\"10\">" << xml_escape(table.note) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

namespace {

std::vector<std::size_t> numeric_columns(const ReportTable& table) {
  std::vector<std::size_t> out;
  for (std::size_t c = 1; c < table.columns.size(); ++c) {
    bool numeric = false;
    for (const auto& row : table.rows) {
      if (c < row.size() && std::holds_alternative<double>(row[c])) numeric = true;
    }
    if (numeric) out.push_back(c);
  }
  return out;
}

std::string svg_name(const ReportTable& table, std::size_t column) {
  return table.name + "_" + table.columns[column] + ".svg";
}

}  // namespace

std::string report_manifest(const AnalysisReport& report) {
  const nlohmann::json prov = {{"checkpoint_id", report.provenance.checkpoint_id},
                               {"dataset_id", report.provenance.dataset_id},
                               {"seed", report.provenance.seed}};
  nlohmann::json tables = nlohmann::json::array();
  for (const auto& t : report.tables) {
    nlohmann::json charts = nlohmann::json::array();
    for (std::size_t c : numeric_columns(t)) charts.push_back(svg_name(t, c));
    tables.push_back({{"name", t.name},
                      {"title", t.title},
                      {"note", t.note},
                      {"csv", t.name + ".csv"},
                      {"charts", charts},
                      {"columns", t.columns},
                      {"rows", t.rows.size()},
                      {"provenance", prov}});
  }
  return nlohmann::json({{"provenance", prov}, {"tables", tables}}).dump(2) + "\n";
}

std::vector<std::filesystem::path> emit_report(const AnalysisReport& report, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) {
    throw std::runtime_error("cannot create report directory " + out_dir.string());
  }
  std::vector<std::filesystem::path> written;
  for (const auto& t : report.tables) {
    written.push_back(out_dir / (t.name + ".csv"));
    write_text(written.back(), table_csv(t));
    for (std::size_t c : numeric_columns(t)) {
      written.push_back(out_dir / svg_name(t, c));
      write_text(written.back(), table_svg(t, c, report.provenance));
    }
  }
  written.push_back(out_dir / "manifest.json");
  write_text(written.back(), report_manifest(report));
  return written;
}

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(std::move(cells));
  }
  return rows;
}

ReportTable ablation_report_table(const AblationTable& table) {
  ReportTable t;
  t.name = "ablation";
  t.title = "Learner subset ablation";
  t.note = "mIoU of merged predictions over learner subsets";
  t.columns = {"subset", "strategy", "miou"};
  for (const auto& row : table.rows) t.rows.push_back({row.label, std::string(to_string(row.strategy)), row.miou});
  t.rows.push_back({std::string("learner_mean"), std::string("-"), table.learner_mean});
  return t;
}

ReportTable variance_report_table(const VarianceTable& table, const std::vector<std::size_t>& levels) {
  ReportTable t;
  t.name = "variance";
  t.title = "Channel variance of predictions";
  t.note = "population variance (1/N) over softmax probabilities, averaged over pixels and images";
  t.columns = {"output", "variance"};
  t.rows.push_back({std::string("ensemble"), table.ensemble});
  for (std::size_t i = 0; i < table.learners.size(); ++i) t.rows.push_back({level_name(i, levels), table.learners[i]});
  return t;
}

ReportTable cosine_histogram_table(const std::vector<CosineStats>& stats, const std::vector<std::size_t>& levels) {
  ReportTable t;
  t.name = "cosine_histogram";
  t.title = "Class embedding cosine similarity";
  t.note = "pair counts per bin, 40 bins on [-1, 1]";
  t.chart = ChartKind::kLine;
  t.columns = {"bin_center"};
  for (std::size_t i = 0; i < stats.size(); ++i) t.columns.push_back(level_name(i, levels));
  for (std::size_t b = 0; b < kCosineBins; ++b) {
    std::vector<Cell> row{-1.0 + (2.0 * static_cast<double>(b) + 1.0) / static_cast<double>(kCosineBins)};
    for (const auto& s : stats) row.emplace_back(static_cast<double>(s.histogram[b]));
    t.rows.push_back(std::move(row));
  }
  return t;
}

ReportTable cosine_summary_table(const std::vector<CosineStats>& stats, const std::vector<std::size_t>& levels) {
  ReportTable t;
  t.name = "cosine_summary";
  t.title = "Class embedding cosine similarity";
  t.note = "mean |cos| over pairs k < l; zero-norm rows skipped";
  t.columns = {"learner", "pairs", "skipped", "mean_abs_cos"};
  for (std::size_t i = 0; i < stats.size(); ++i) {
    t.rows.push_back({level_name(i, levels), static_cast<double>(stats[i].pairs),
                      static_cast<double>(stats[i].skipped), stats[i].mean_abs});
  }
  return t;
}

ReportTable miou_report_table(const EvalResult& eval, const std::vector<std::size_t>& levels) {
  ReportTable t;
  t.name = "miou";
  t.title = "Validation mIoU";
  t.columns = {"output", "miou"};
  for (std::size_t i = 0; i < eval.learner_miou.size(); ++i) {
    t.rows.push_back({level_name(i, levels), eval.learner_miou[i]});
  }
  t.rows.push_back({std::string("ensemble"), eval.ensemble_miou});
  return t;
}

}  // namespace senf
