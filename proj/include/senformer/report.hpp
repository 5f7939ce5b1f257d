#pragma once

// Analysis reports: named tables written as CSV, one SVG chart per numeric
// series and a manifest.json with provenance. Output is byte-for-byte
// deterministic for a given report.

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "senformer/analysis.hpp"

namespace senf {

using Cell = std::variant<std::string, double>;

enum class ChartKind { kBar, kLine };

struct ReportTable {
  std::string name;  // file stem
  std::string title;
  std::string note;
  std::vector<std::string> columns;
  std::vector<std::vector<Cell>> rows;
  ChartKind chart = ChartKind::kBar;
};

struct Provenance {
  std::string checkpoint_id;
  std::string dataset_id;
  std::uint64_t seed = 0;
};

struct AnalysisReport {
  Provenance provenance;
  std::vector<ReportTable> tables;
};

// Numbers use the shortest round-trip decimal form.
std::string table_csv(const ReportTable& table);
// Chart of column `series` (numeric) against the first column.
std::string table_svg(const ReportTable& table, std::size_t series, const Provenance& provenance);
std::string report_manifest(const AnalysisReport& report);

// Creates out_dir if needed and overwrites earlier output. Returns the files
// written. IO failures throw std::runtime_error naming the path.
std::vector<std::filesystem::path> emit_report(const AnalysisReport& report, const std::filesystem::path& out_dir);

// Minimal reader for the CSV written above (no quoting).
std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path);

ReportTable ablation_report_table(const AblationTable& table);
ReportTable variance_report_table(const VarianceTable& table, const std::vector<std::size_t>& levels);
ReportTable cosine_histogram_table(const std::vector<CosineStats>& stats, const std::vector<std::size_t>& levels);
ReportTable cosine_summary_table(const std::vector<CosineStats>& stats, const std::vector<std::size_t>& levels);
ReportTable miou_report_table(const EvalResult& eval, const std::vector<std::size_t>& levels);

}  // namespace senf
