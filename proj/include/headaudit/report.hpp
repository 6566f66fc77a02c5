#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "headaudit/audit.hpp"

namespace headaudit {

struct ReportSections {
  bool baseline = true;     // global bias and per-class statistics
  bool grid = true;         // chosen thresholds and the grid summary
  bool candidates = true;   // evidence and TextSpan labels
  bool suspected = true;    // suspected-set ablation and per-class deltas
  bool attribution = true;  // per-head rows per significant class
  bool control = true;      // layer-matched random control
  bool cross = true;        // effect on the other attributes

  // Comma-separated subset of the names above, or "all".
  static ReportSections parse(const std::string& list);
};

nlohmann::ordered_json config_to_json(const AuditConfig& config);
nlohmann::ordered_json report_to_json(const AuditReport& report,
                                      const ReportSections& sections = {});
std::string report_to_text(const AuditReport& report,
                           const ReportSections& sections = {});

// One row per grid cell, gap-major.
std::string grid_trace_csv(const GridResult& grid);
// Per-class statistics with the three most frequent predictions and their
// per-group rates.
std::string class_table_csv(const GlobalBias& bias,
                            const std::vector<std::string>& class_names);
std::string textspan_csv(const std::vector<TextSpanResult>& results);

// Writes report.json, report.txt, grid_trace.csv, classes.csv and
// textspan.csv into `dir`.
void write_report(const AuditReport& report, const std::filesystem::path& dir,
                  const ReportSections& sections = {});

void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace headaudit
