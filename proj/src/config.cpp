#include "stressnas/config.hpp"

#include <algorithm>

#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "stressnas/error.hpp"
#include "stressnas/seed.hpp"

namespace stressnas {

using nlohmann::json;

void ExperimentConfig::validate() const {
  if (profile != "desk" && profile != "full")
    throw ConfigError("profile must be 'desk' or 'full', got '" + profile + "'");
  if (combination.empty()) throw ConfigError("combination is empty");
  const bool image_only =
      family == models::ModelFamily::FCN || family == models::ModelFamily::RESNET;
  if (image_only && std::find(combination.begin(), combination.end(), models::Branch::MIXED) !=
                        combination.end())
    throw ConfigError(std::string(models::family_name(family)) +
                      " takes filter-bank branches only; drop MIXED from the combination");
  window.validate();
  score.validate();
  train.validate();
  macro.validate();
  if (space.n_nodes != 3 && space.n_nodes != 4)
    throw ConfigError("cell nodes must be 3 or 4");
  if (family == models::ModelFamily::STRESSNAS) {
    if (n_candidates == 0 || n_candidates > space.size())
      throw ConfigError("n_candidates must lie in [1, " + std::to_string(space.size()) + "]");
    if (top_k == 0 || top_k > n_candidates)
      throw ConfigError("top_k must lie in [1, n_candidates]");
  }
  if (!(inner_val_fraction > 0.0 && inner_val_fraction < 1.0))
    throw ConfigError("inner_val_fraction must lie in (0, 1)");
  if (data_dir.empty() && synth.n_subjects < 2)
    throw ConfigError("synthetic data needs at least 2 subjects");
  if (threads == 0) throw ConfigError("threads must be positive");
}

ExperimentConfig desk_profile() {
  ExperimentConfig c;
  c.profile = "desk";
  c.space = nas::CellSpace::reduced();
  c.n_candidates = c.space.size();
  c.top_k = 3;
  c.macro = {8, 1};
  c.train.epochs = 10;
  c.window.shift_s = 4.0;
  return c;
}

ExperimentConfig full_profile() {
  ExperimentConfig c;
  c.profile = "full";
  c.space = nas::CellSpace::full();
  c.n_candidates = 10000;
  c.top_k = 10;
  c.macro = {16, 5};
  c.train.epochs = 50;
  return c;
}

ExperimentConfig profile_by_name(std::string_view name) {
  if (name == "desk") return desk_profile();
  if (name == "full") return full_profile();
  throw ConfigError("unknown profile '" + std::string(name) + "'");
}

namespace {

template <class T>
void take(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

json to_json_object(const ExperimentConfig& c) {
  json j;
  j["profile"] = c.profile;
  j["task"] = data::to_string(c.task);
  j["combination"] = models::to_string(c.combination);
  j["family"] = models::family_name(c.family);
  j["window"] = {{"window_len_s", c.window.window_len_s}, {"shift_s", c.window.shift_s}};
  j["filterbank"] = {{"pre_emphasis_alpha", c.filterbank.pre_emphasis_alpha},
                     {"frame_len_s", c.filterbank.frame_len_s},
                     {"frame_shift_s", c.filterbank.frame_shift_s},
                     {"nfft", c.filterbank.nfft},
                     {"n_filters", c.filterbank.n_filters},
                     {"mean_normalize", c.filterbank.mean_normalize}};
  j["score"] = {{"batch_size", c.score.batch_size}, {"eps", c.score.eps}};
  j["train"] = {{"epochs", c.train.epochs},
                {"batch_size", c.train.batch_size},
                {"learning_rate", c.train.learning_rate},
                {"momentum", c.train.momentum},
                {"weight_decay", c.train.weight_decay}};
  j["macro"] = {{"channels", c.macro.channels}, {"cells_per_stage", c.macro.cells_per_stage}};
  j["cell_nodes"] = c.space.n_nodes;
  j["n_candidates"] = c.n_candidates;
  j["top_k"] = c.top_k;
  j["inner_val_fraction"] = c.inner_val_fraction;
  j["seed"] = c.seed;
  j["data_dir"] = c.data_dir;
  j["synth"] = {{"n_subjects", c.synth.n_subjects},
                {"duration_s", c.synth.duration_s},
                {"block_s", c.synth.block_s},
                {"seed", c.synth.seed},
                {"noise_std", c.synth.noise_std},
                {"freq_jitter", c.synth.freq_jitter},
                {"modulation_period_s", c.synth.modulation_period_s}};
  j["interpolate_nan"] = c.interpolate_nan;
  j["threads"] = c.threads;
  return j;
}

// Every accepted key appears in the canonical form, so it doubles as the schema.
void reject_unknown_keys(const json& given, const json& schema, const std::string& path) {
  for (const auto& [key, value] : given.items()) {
    if (!schema.contains(key)) throw ConfigError("unknown config key '" + path + key + "'");
    if (schema.at(key).is_object()) {
      if (!value.is_object()) throw ConfigError("config key '" + path + key + "' must be an object");
      reject_unknown_keys(value, schema.at(key), path + key + ".");
    }
  }
}

}  // namespace

ExperimentConfig apply_json(ExperimentConfig c, std::string_view json_text) {
  try {
    const auto j = json::parse(json_text);
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    reject_unknown_keys(j, to_json_object(c), "");
    if (j.contains("profile")) {
      // A profile key resets every default before the other keys apply.
      c = profile_by_name(j.at("profile").get<std::string>());
    }
    if (j.contains("task")) c.task = data::parse_task_mode(j.at("task").get<std::string>());
    if (j.contains("combination"))
      c.combination = models::parse_combination(j.at("combination").get<std::string>());
    if (j.contains("family"))
      c.family = models::parse_family(j.at("family").get<std::string>());
    if (j.contains("window")) {
      const auto& w = j.at("window");
      take(w, "window_len_s", c.window.window_len_s);
      take(w, "shift_s", c.window.shift_s);
    }
    if (j.contains("filterbank")) {
      const auto& f = j.at("filterbank");
      take(f, "pre_emphasis_alpha", c.filterbank.pre_emphasis_alpha);
      take(f, "frame_len_s", c.filterbank.frame_len_s);
      take(f, "frame_shift_s", c.filterbank.frame_shift_s);
      take(f, "nfft", c.filterbank.nfft);
      take(f, "n_filters", c.filterbank.n_filters);
      take(f, "mean_normalize", c.filterbank.mean_normalize);
    }
    if (j.contains("score")) {
      take(j.at("score"), "batch_size", c.score.batch_size);
      take(j.at("score"), "eps", c.score.eps);
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      take(t, "epochs", c.train.epochs);
      take(t, "batch_size", c.train.batch_size);
      take(t, "learning_rate", c.train.learning_rate);
      take(t, "momentum", c.train.momentum);
      take(t, "weight_decay", c.train.weight_decay);
    }
    if (j.contains("macro")) {
      take(j.at("macro"), "channels", c.macro.channels);
      take(j.at("macro"), "cells_per_stage", c.macro.cells_per_stage);
    }
    take(j, "cell_nodes", c.space.n_nodes);
    take(j, "n_candidates", c.n_candidates);
    take(j, "top_k", c.top_k);
    take(j, "inner_val_fraction", c.inner_val_fraction);
    take(j, "seed", c.seed);
    take(j, "data_dir", c.data_dir);
    if (j.contains("synth")) {
      const auto& s = j.at("synth");
      take(s, "n_subjects", c.synth.n_subjects);
      take(s, "duration_s", c.synth.duration_s);
      take(s, "block_s", c.synth.block_s);
      take(s, "seed", c.synth.seed);
      take(s, "noise_std", c.synth.noise_std);
      take(s, "freq_jitter", c.synth.freq_jitter);
      take(s, "modulation_period_s", c.synth.modulation_period_s);
    }
    take(j, "interpolate_nan", c.interpolate_nan);
    take(j, "threads", c.threads);
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
}

ExperimentConfig load_config(const std::filesystem::path& file, ExperimentConfig base) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open config file " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return apply_json(std::move(base), ss.str());
}

std::string to_json(const ExperimentConfig& cfg) { return to_json_object(cfg).dump(2); }

std::string config_hash(const ExperimentConfig& cfg) {
  auto j = to_json_object(cfg);
  j.erase("threads");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(j.dump())));
  return buf;
}

}  // namespace stressnas
