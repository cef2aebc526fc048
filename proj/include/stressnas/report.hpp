#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "stressnas/harness.hpp"

namespace stressnas::report {

/// One row per fold plus a final "mean" row holding mean and population
/// standard deviation. Columns: subject, accuracy, macro_recall,
/// accuracy_std, macro_recall_std, n_test, chosen_rank. Values use %.17g
/// so a round trip is exact.
std::string to_csv(const harness::ReportTable& t);
harness::ReportTable from_csv(const std::string& text);

std::string to_markdown(const harness::ReportTable& t);

/// Run metadata: configuration hash, seed, family, sensors, profile and a
/// UTC timestamp. Timestamps appear here only, never in the tables.
std::string metadata_json(const harness::ReportTable& t, const std::string& config_json);

/// Writes report.csv, report.md and report.json into `dir`.
void write_reports(const harness::ReportTable& t, const std::string& config_json,
                   const std::filesystem::path& dir);

harness::ReportTable read_csv(const std::filesystem::path& file);

/// Sensor rows by model-family columns, cells "mean ± std" in percent.
/// Missing cells render as "n/a".
std::string grid_markdown(const std::vector<harness::ReportTable>& runs);

}  // namespace stressnas::report
