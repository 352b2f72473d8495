#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "remedi/eval.hpp"
#include "remedi/probe.hpp"

namespace remedi {

struct ReportMeta {
  uint64_t seed = 0;
  uint64_t config_hash = 0;
};

// Writers re-derive every aggregate from the per-sample rows and refuse to
// emit a report whose stored aggregates disagree.
nlohmann::json edit_report_json(const EditReport& report, const ReportMeta& meta);
void write_edit_report(const EditReport& report, const ReportMeta& meta,
                       const std::string& json_path, const std::string& csv_path);

nlohmann::json probe_report_json(const ProbeReport& report, const ReportMeta& meta);
void write_probe_reports(const std::vector<ProbeReport>& reports, const ReportMeta& meta,
                         const std::string& json_path, const std::string& csv_path);

nlohmann::json concept_report_json(const ConceptEditReport& report, const ReportMeta& meta);
void write_concept_report(const ConceptEditReport& report, const ReportMeta& meta,
                          const std::string& json_path, const std::string& csv_path,
                          const std::string& svg_path);

void write_occupation_reports(const std::vector<OccupationReport>& reports, const ReportMeta& meta,
                              const std::string& json_path, const std::string& csv_path);

void write_sweep_result(const LayerSweepResult& sweep, const ReportMeta& meta,
                        const std::string& csv_path, const std::string& svg_path);

void write_norm_profile(const NormProfile& profile, const ReportMeta& meta,
                        const std::string& csv_path, const std::string& svg_path);

// Standalone SVG plots.
std::string svg_line_chart(const std::string& title, const std::vector<double>& xs,
                           const std::vector<std::pair<std::string, std::vector<double>>>& series,
                           const ReportMeta& meta);
std::string svg_scatter(const std::string& title,
                        const std::vector<std::tuple<double, double, std::string>>& points,
                        const std::string& x_label, const std::string& y_label,
                        const ReportMeta& meta);

// Structural check against the subset of JSON Schema the shipped schema files
// use: type, required, properties, items.
bool validate_schema(const nlohmann::json& doc, const nlohmann::json& schema, std::string* error);

void write_text_file(const std::string& path, const std::string& content);

}  // namespace remedi
