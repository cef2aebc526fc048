#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "stressnas/dataset.hpp"
#include "stressnas/featbank.hpp"
#include "stressnas/models.hpp"
#include "stressnas/nas.hpp"
#include "stressnas/optim.hpp"

namespace stressnas {

struct ExperimentConfig {
  std::string profile = "desk";
  data::TaskMode task = data::TaskMode::three_state;
  models::SensorCombination combination =
      models::parse_combination("EDA+BVP+TEMP+MIXED");
  models::ModelFamily family = models::ModelFamily::STRESSNAS;

  data::WindowConfig window;
  features::FilterBankConfig filterbank;
  nas::ScoreConfig score;
  nn::TrainConfig train;
  nas::MacroConfig macro;
  nas::CellSpace space = nas::CellSpace::full();
  std::size_t n_candidates = 10000;
  std::size_t top_k = 10;
  double inner_val_fraction = 0.1;

  std::uint64_t seed = 0;
  std::string data_dir;        // empty: generate `synth` in memory
  data::SynthConfig synth;
  bool interpolate_nan = false;
  std::size_t threads = 1;

  void validate() const;
};

/// Synthetic 5-subject data, 125-genotype reduced space, C=8, one cell per
/// stage, 10 epochs, top-3 assemblies.
ExperimentConfig desk_profile();

/// Real data, 10000 candidates from the full space, C=16, five cells per
/// stage, 50 epochs, top-10 assemblies.
ExperimentConfig full_profile();

ExperimentConfig profile_by_name(std::string_view name);

/// Overlays the keys present in `json_text` onto `base`.
ExperimentConfig apply_json(ExperimentConfig base, std::string_view json_text);
ExperimentConfig load_config(const std::filesystem::path& file,
                             ExperimentConfig base);

std::string to_json(const ExperimentConfig& cfg);

/// Hex FNV-1a of the canonical JSON form, excluding the thread count.
std::string config_hash(const ExperimentConfig& cfg);

}  // namespace stressnas
