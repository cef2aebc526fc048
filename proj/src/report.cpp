#include "stressnas/report.hpp"

#include <chrono>
#include <cstdio>
#include <fmt/chrono.h>
#include <fmt/format.h>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "stressnas/error.hpp"

namespace stressnas::report {

namespace {

constexpr const char* kHeader =
    "subject,accuracy,macro_recall,accuracy_std,macro_recall_std,n_test,chosen_rank";

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, sep)) out.push_back(cell);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

std::string percent(double mean, double sd) {
  return fmt::format("{:.2f} ± {:.2f}", 100.0 * mean, 100.0 * sd);
}

}  // namespace

std::string to_csv(const harness::ReportTable& t) {
  std::string s = std::string(kHeader) + "\n";
  for (const auto& f : t.folds) {
    s += std::to_string(f.held_out_subject_id) + "," + g17(f.accuracy) + "," +
         g17(f.macro_recall) + ",,," + std::to_string(f.n_test) + "," +
         std::to_string(f.chosen_rank) + "\n";
  }
  std::size_t n_test = 0;
  for (const auto& f : t.folds) n_test += f.n_test;
  s += "mean," + g17(t.mean_accuracy) + "," + g17(t.mean_macro_recall) + "," +
       g17(t.std_accuracy) + "," + g17(t.std_macro_recall) + "," + std::to_string(n_test) +
       ",\n";
  return s;
}

harness::ReportTable from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kHeader)
    throw DataError("report CSV has an unexpected header");
  harness::ReportTable t;
  bool summary = false;
  try {
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto c = split(line, ',');
      if (c.size() != 7) throw DataError("report CSV row has " + std::to_string(c.size()) + " cells");
      if (c[0] == "mean") {
        t.mean_accuracy = std::stod(c[1]);
        t.mean_macro_recall = std::stod(c[2]);
        t.std_accuracy = std::stod(c[3]);
        t.std_macro_recall = std::stod(c[4]);
        summary = true;
        continue;
      }
      harness::FoldResult f;
      f.held_out_subject_id = std::stoi(c[0]);
      f.accuracy = std::stod(c[1]);
      f.macro_recall = std::stod(c[2]);
      f.n_test = std::stoull(c[5]);
      f.chosen_rank = std::stoi(c[6]);
      t.folds.push_back(std::move(f));
    }
  } catch (const std::logic_error& e) {
    throw DataError(std::string("malformed report CSV: ") + e.what());
  }
  if (!summary) throw DataError("report CSV has no summary row");
  return t;
}

std::string to_markdown(const harness::ReportTable& t) {
  std::string s = fmt::format("# {} on {} ({})\n\n", t.family, t.combination, t.task);
  s += fmt::format("profile `{}`, seed {}, config `{}`\n\n", t.profile, t.seed, t.config_hash);
  s += "| subject | accuracy (%) | macro recall (%) | test windows | rank |\n";
  s += "|---|---|---|---|---|\n";
  for (const auto& f : t.folds) {
    s += fmt::format("| S{} | {:.2f} | {:.2f} | {} | {} |\n", f.held_out_subject_id,
                     100.0 * f.accuracy, 100.0 * f.macro_recall, f.n_test,
                     f.chosen_rank < 0 ? std::string("-") : std::to_string(f.chosen_rank));
  }
  s += fmt::format("| mean | {} | {} | | |\n", percent(t.mean_accuracy, t.std_accuracy),
                   percent(t.mean_macro_recall, t.std_macro_recall));
  return s;
}

std::string metadata_json(const harness::ReportTable& t, const std::string& config_json) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  nlohmann::json j;
  j["created_at"] = fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", fmt::gmtime(now));
  j["config_hash"] = t.config_hash;
  j["seed"] = t.seed;
  j["family"] = t.family;
  j["combination"] = t.combination;
  j["task"] = t.task;
  j["profile"] = t.profile;
  j["mean_accuracy"] = t.mean_accuracy;
  j["std_accuracy"] = t.std_accuracy;
  j["config"] = nlohmann::json::parse(config_json);
  j["folds"] = nlohmann::json::array();
  for (const auto& f : t.folds) {
    nlohmann::json fj{{"subject", f.held_out_subject_id},
                      {"accuracy", f.accuracy},
                      {"macro_recall", f.macro_recall},
                      {"confusion", f.confusion.counts},
                      {"chosen_rank", f.chosen_rank},
                      {"assembly_val_accuracy", f.assembly_val_accuracy},
                      {"best_epoch", f.history.best_epoch}};
    for (const auto& s : f.searches) {
      auto& arr = fj["search"][std::string(models::branch_name(s.branch))];
      for (const auto& c : s.top)
        arr.push_back({{"genotype_index", c.index},
                       {"genotype", c.genotype.to_string()},
                       {"score", c.degenerate ? nlohmann::json(nullptr) : nlohmann::json(c.score)}});
    }
    j["folds"].push_back(std::move(fj));
  }
  return j.dump(2);
}

void write_reports(const harness::ReportTable& t, const std::string& config_json,
                   const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_file(dir / "report.csv", to_csv(t));
  write_file(dir / "report.md", to_markdown(t));
  write_file(dir / "report.json", metadata_json(t, config_json));
}

harness::ReportTable read_csv(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError("cannot open report " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_csv(ss.str());
}

std::string grid_markdown(const std::vector<harness::ReportTable>& runs) {
  constexpr models::ModelFamily kFamilies[] = {models::ModelFamily::MLP, models::ModelFamily::FCN,
                                               models::ModelFamily::RESNET,
                                               models::ModelFamily::STRESSNAS};
  std::string s = "| sensors |";
  for (auto f : kFamilies) s += fmt::format(" {} |", models::family_name(f));
  s += "\n|---|---|---|---|---|\n";
  for (auto row : models::kTableRows) {
    s += fmt::format("| {} |", row);
    for (auto fam : kFamilies) {
      const auto want = models::to_string(models::branches_for_row(row, fam));
      std::string cell = "n/a";
      for (const auto& r : runs)
        if (r.family == models::family_name(fam) && r.combination == want)
          cell = percent(r.mean_accuracy, r.std_accuracy);
      s += " " + cell + " |";
    }
    s += "\n";
  }
  return s;
}

}  // namespace stressnas::report
