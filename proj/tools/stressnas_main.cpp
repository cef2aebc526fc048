// Command-line front end: synth, features, search, train, loso, report.

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>

#include "stressnas/checkpoint.hpp"
#include "stressnas/config.hpp"
#include "stressnas/error.hpp"
#include "stressnas/harness.hpp"
#include "stressnas/report.hpp"
#include "stressnas/seed.hpp"

namespace fs = std::filesystem;
using namespace stressnas;

namespace {

struct Common {
  std::string config_file;
  std::string profile = "desk";
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string data_dir;
  std::optional<std::size_t> threads;
  std::string family;
  std::string combination;
  std::string task;
};

void add_common(CLI::App* app, Common& c, bool with_model) {
  app->add_option("--config", c.config_file, "JSON configuration file");
  app->add_option("--profile", c.profile, "desk or full")->check(CLI::IsMember({"desk", "full"}));
  app->add_option("--seed", c.seed, "master seed");
  app->add_option("--data", c.data_dir, "dataset root (default: synthetic)");
  app->add_option("--threads", c.threads, "worker threads");
  if (with_model) {
    app->add_option("--family", c.family, "MLP, FCN, RESNET or STRESSNAS");
    app->add_option("--combination", c.combination, "branches, e.g. EDA+BVP+TEMP+MIXED");
    app->add_option("--task", c.task, "three_state or binary");
  }
}

ExperimentConfig resolve(const Common& c) {
  auto cfg = profile_by_name(c.profile);
  if (!c.config_file.empty()) cfg = load_config(c.config_file, cfg);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.data_dir.empty()) cfg.data_dir = c.data_dir;
  if (c.threads) cfg.threads = *c.threads;
  if (!c.family.empty()) cfg.family = models::parse_family(c.family);
  if (!c.combination.empty()) cfg.combination = models::parse_combination(c.combination);
  if (!c.task.empty()) cfg.task = data::parse_task_mode(c.task);
  cfg.validate();
  return cfg;
}

void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + p.string());
  out << s;
}

harness::FeatureTable table_for(const ExperimentConfig& cfg) {
  const auto recs = harness::load_recordings(cfg);
  return harness::featurize(recs, cfg.combination, cfg.window, cfg.filterbank, cfg.task,
                            cfg.threads);
}

int cmd_synth(int subjects, double duration, std::uint64_t seed, const std::string& out) {
  data::SynthConfig sc;
  sc.n_subjects = subjects;
  sc.duration_s = duration;
  sc.seed = seed;
  for (const auto& rec : data::synth_dataset(sc))
    data::write_subject(rec, fs::path(out) / ("S" + std::to_string(rec.subject_id)));
  std::printf("wrote %d subjects to %s\n", subjects, out.c_str());
  return 0;
}

int cmd_features(const Common& c) {
  const auto cfg = resolve(c);
  const auto t = table_for(cfg);
  fs::create_directories(c.out);
  nlohmann::json j;
  j["n_windows"] = t.size();
  for (const auto& bi : t.branches) {
    const std::string name(models::branch_name(bi.branch));
    j["branches"].push_back({{"branch", name}, {"shape", bi.shape}, {"file", name + ".f64"}});
    const auto& v = t.values.at(bi.branch);
    std::ofstream out(fs::path(c.out) / (name + ".f64"), std::ios::binary);
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  std::string idx = "subject,label,start_time_s\n";
  for (const auto& s : t.samples)
    idx += std::to_string(s.subject_id) + "," + std::to_string(s.label) + "," +
           std::to_string(s.start_time_s) + "\n";
  write_text(fs::path(c.out) / "windows.csv", idx);
  write_text(fs::path(c.out) / "features.json", j.dump(2));
  std::printf("%zu windows\n", t.size());
  return 0;
}

int cmd_search(Common c, const std::string& modality, std::size_t n, std::size_t k,
               std::optional<int> exclude) {
  c.combination = modality;
  c.family = "STRESSNAS";
  auto cfg = resolve(c);
  cfg.n_candidates = n;
  cfg.top_k = k;
  cfg.validate();
  const auto t = table_for(cfg);
  const auto branch = models::parse_branch(modality);
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < t.size(); ++i)
    if (!exclude || t.samples[i].subject_id != *exclude) pool.push_back(i);
  const harness::TableBatches batches(t, cfg.family, {}, std::nullopt, exclude);
  const auto searches =
      harness::search_fold(cfg, t, batches, pool, exclude.value_or(-1));
  std::string csv = "genotype_index,score,degenerate_flag\n";
  for (const auto& s : searches) {
    if (s.branch != branch) continue;
    char buf[64];
    for (const auto& cand : s.top) {
      std::snprintf(buf, sizeof buf, "%.17g", cand.score);
      csv += std::to_string(cand.index) + "," + buf + "," + (cand.degenerate ? "1" : "0") + "\n";
    }
  }
  write_text(c.out, csv);
  return 0;
}

int cmd_train(const Common& c, int holdout) {
  const auto cfg = resolve(c);
  const auto t = table_for(cfg);
  std::vector<int> ids;
  for (const auto& s : t.samples) ids.push_back(s.subject_id);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  std::optional<data::Fold> fold;
  for (const auto& f : data::loso_folds(ids))
    if (f.held_out_subject_id == holdout) fold = f;
  if (!fold) throw DataError("subject " + std::to_string(holdout) + " has no windows");
  const auto r = harness::run_fold(cfg, t, *fold);
  std::printf("subject %d accuracy %.4f macro recall %.4f (rank %d)\n", holdout, r.accuracy,
              r.macro_recall, r.chosen_rank);
  std::string hist = "epoch,learning_rate,train_loss,val_accuracy\n";
  char buf[128];
  for (const auto& e : r.history.epochs) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g\n", e.epoch, e.learning_rate,
                  e.train_loss, e.val_accuracy);
    hist += buf;
  }
  write_text(fs::path(c.out) / "history.csv", hist);
  write_text(fs::path(c.out) / "model.json", r.spec.to_json());
  auto net = models::build(r.spec);
  net.load_state(r.state);
  nn::save_checkpoint(net, fs::path(c.out) / "checkpoint");
  return 0;
}

int cmd_loso(const Common& c) {
  const auto cfg = resolve(c);
  const auto table = harness::run_loso(cfg);
  report::write_reports(table, to_json(cfg), c.out);
  std::printf("%s %s: mean accuracy %.4f +- %.4f over %zu folds\n", table.family.c_str(),
              table.combination.c_str(), table.mean_accuracy, table.std_accuracy,
              table.folds.size());
  return 0;
}

int cmd_report(const std::vector<std::string>& runs, const std::string& out) {
  std::vector<harness::ReportTable> tables;
  for (const auto& dir : runs) {
    auto t = report::read_csv(fs::path(dir) / "report.csv");
    std::ifstream in(fs::path(dir) / "report.json");
    if (!in) throw DataError("missing report.json in " + dir);
    try {
      const auto meta = nlohmann::json::parse(in);
      t.family = meta.at("family").get<std::string>();
      t.combination = meta.at("combination").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError("malformed report.json in " + dir + ": " + e.what());
    }
    tables.push_back(std::move(t));
  }
  write_text(out, report::grid_markdown(tables));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Filter-bank features, training-free architecture search and LOSO evaluation"};
  app.require_subcommand(1);

  Common c;
  int subjects = 5;
  double duration = 600.0;
  std::uint64_t synth_seed = 0;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "write a synthetic dataset");
  synth->add_option("--subjects", subjects)->check(CLI::PositiveNumber);
  synth->add_option("--duration", duration, "seconds per subject")->check(CLI::PositiveNumber);
  synth->add_option("--seed", synth_seed);
  synth->add_option("--out", synth_out)->required();

  auto* features = app.add_subcommand("features", "extract filter-bank and mixed features");
  add_common(features, c, true);
  features->add_option("--out", c.out)->required();

  std::string modality;
  std::size_t n = 10000, k = 10;
  std::optional<int> exclude;
  auto* search = app.add_subcommand("search", "score sampled genotypes for one modality");
  add_common(search, c, false);
  search->add_option("--modality", modality)->required();
  search->add_option("--n", n);
  search->add_option("--k", k);
  search->add_option("--exclude-subject", exclude, "keep this subject out of the batch");
  search->add_option("--out", c.out)->required();

  int holdout = 0;
  auto* train = app.add_subcommand("train", "train and evaluate one LOSO fold");
  add_common(train, c, true);
  train->add_option("--holdout", holdout)->required();
  train->add_option("--out", c.out)->required();

  auto* loso = app.add_subcommand("loso", "full leave-one-subject-out evaluation");
  add_common(loso, c, true);
  loso->add_option("--out", c.out)->required();

  std::vector<std::string> runs;
  auto* report = app.add_subcommand("report", "merge LOSO runs into a results grid");
  report->add_option("--runs", runs, "run directories holding report.csv and report.json")
      ->required();
  report->add_option("--out", c.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::config);
  }

  try {
    if (*synth) return cmd_synth(subjects, duration, synth_seed, synth_out);
    if (*features) return cmd_features(c);
    if (*search) return cmd_search(c, modality, n, k, exclude);
    if (*train) return cmd_train(c, holdout);
    if (*loso) return cmd_loso(c);
    if (*report) return cmd_report(runs, c.out);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return static_cast<int>(ExitCode::config);
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return static_cast<int>(ExitCode::data);
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return static_cast<int>(ExitCode::numerical);
  }
  return 0;
}
