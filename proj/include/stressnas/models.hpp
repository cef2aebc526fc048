#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "stressnas/nas.hpp"
#include "stressnas/network.hpp"

namespace stressnas::models {

enum class Branch { ACC, EDA, BVP, TEMP, MIXED };

std::string_view branch_name(Branch b);
Branch parse_branch(std::string_view name);

/// Ordered, duplicate-free set of branches.
using SensorCombination = std::vector<Branch>;

/// Parses "EDA+BVP+TEMP+MIXED" (any order) into a sorted combination.
SensorCombination parse_combination(std::string_view text);
std::string to_string(const SensorCombination& c);

enum class ModelFamily { MLP, FCN, RESNET, STRESSNAS };

std::string_view family_name(ModelFamily f);
ModelFamily parse_family(std::string_view name);

/// Sensor rows of the result tables.
inline constexpr std::string_view kTableRows[] = {
    "ACC+EDA+BVP+TEMP", "EDA+BVP+TEMP", "ACC", "EDA", "BVP", "TEMP"};

/// Branches a model family consumes for one table row. The all-sensor
/// StressNAS row feeds ACC through the mixed-feature branch; every other
/// row uses one filter-bank branch per sensor (ACC as a 3-axis image).
SensorCombination branches_for_row(std::string_view row, ModelFamily family);

struct BranchInput {
  Branch branch;
  nn::Shape shape;  // per sample: (C, H, W) for filter banks, (36) for MIXED
};

inline constexpr std::size_t kMlpHidden1 = 256;
inline constexpr std::size_t kMlpHidden2 = 128;
inline constexpr std::size_t kConvWidths[3] = {8, 16, 32};
inline constexpr std::size_t kMixedWidth = 32;

/// FC-ReLU-FC-ReLU-FC over one flat input named "flat".
nn::Network build_mlp(std::size_t input_dim, std::size_t n_classes);

/// Per branch 3 x (conv3x3 -> ReLU) with 8/16/32 channels and GAP; concat;
/// FC head.
nn::Network build_fcn(const std::vector<BranchInput>& branches,
                      std::size_t n_classes);

/// 4 x (conv-BN-ReLU) with the skip added before the last ReLU; 1x1
/// projection on the skip when channel counts differ.
nn::NodeId add_res_block(nn::Network& net, nn::NodeId in, std::size_t c_in,
                         std::size_t c_out, const std::string& prefix);

/// Per branch 3 res-blocks (8/16/32) and GAP; concat; FC head.
nn::Network build_resnet(const std::vector<BranchInput>& branches,
                         std::size_t n_classes);

/// Per-branch ranked genotypes from the search, best first.
using RankedGenotypes = std::map<Branch, std::vector<nas::Genotype>>;

/// Filter-bank branches use the rank-`rank` genotype of their own search;
/// MIXED is FC(36->32)-ReLU-FC(32->32)-ReLU; concat; FC head.
nn::Network build_stressnas(const std::vector<BranchInput>& branches,
                            const RankedGenotypes& genotypes, std::size_t rank,
                            const nas::MacroConfig& macro, std::size_t n_classes);

/// Everything needed to rebuild a network; serialised beside checkpoints.
struct ModelSpec {
  ModelFamily family = ModelFamily::FCN;
  std::vector<BranchInput> branches;  // MLP: flattened and concatenated in order
  std::size_t n_classes = 3;
  std::size_t rank = 0;
  nas::MacroConfig macro;
  std::map<Branch, nas::Genotype> genotypes;  // STRESSNAS only

  std::string to_json() const;
  static ModelSpec from_json(std::string_view text);
};

nn::Network build(const ModelSpec& spec);

}  // namespace stressnas::models
