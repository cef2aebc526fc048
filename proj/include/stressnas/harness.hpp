#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stressnas/config.hpp"
#include "stressnas/dataset.hpp"
#include "stressnas/models.hpp"
#include "stressnas/nas.hpp"
#include "stressnas/network.hpp"
#include "stressnas/optim.hpp"

namespace stressnas::harness {

// ---------------------------------------------------------------------------
// Features

struct SampleInfo {
  int subject_id = 0;
  int label = 0;
  double start_time_s = 0.0;
};

/// Per-window inputs for a set of branches, stored contiguously per branch.
/// ACC is the three axis images stacked as channels; filter-bank branches
/// are (C, frames, filters); MIXED is the 36-vector.
struct FeatureTable {
  std::vector<models::BranchInput> branches;
  std::vector<SampleInfo> samples;
  std::map<models::Branch, std::vector<double>> values;

  std::size_t size() const { return samples.size(); }
  std::size_t dim(models::Branch b) const;
  std::span<const double> row(models::Branch b, std::size_t i) const;
  const models::BranchInput& input(models::Branch b) const;
};

FeatureTable featurize(const std::vector<data::RawRecording>& recordings,
                       const models::SensorCombination& branches,
                       const data::WindowConfig& window,
                       const features::FilterBankConfig& filterbank,
                       data::TaskMode task, std::size_t threads = 1);

/// Per-feature affine map fitted on training rows (std floored to 1 when a
/// feature is constant).
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> inv_std;

  static Standardizer fit(const FeatureTable& t, models::Branch b,
                          std::span<const std::size_t> rows);
  void apply(std::span<double> x) const;
};

// ---------------------------------------------------------------------------
// Batches

/// Supplies network inputs and labels by sample index.
class BatchSource {
 public:
  virtual ~BatchSource() = default;
  virtual std::size_t size() const = 0;
  virtual nn::TensorMap inputs(std::span<const std::size_t> idx) const = 0;
  virtual int label(std::size_t i) const = 0;
};

/// Batches over a FeatureTable for one model family. MLP receives every
/// branch flattened and concatenated as "flat"; the other families receive
/// one input per branch. Standardizers apply to the matching branch (MLP:
/// key MIXED is ignored, the flat vector uses `flat`). When
/// `excluded_subject` is set, requesting any of its samples throws.
class TableBatches final : public BatchSource {
 public:
  TableBatches(const FeatureTable& table, models::ModelFamily family,
               std::map<models::Branch, Standardizer> standardizers = {},
               std::optional<Standardizer> flat = std::nullopt,
               std::optional<int> excluded_subject = std::nullopt);

  std::size_t size() const override { return table_->size(); }
  nn::TensorMap inputs(std::span<const std::size_t> idx) const override;
  int label(std::size_t i) const override { return table_->samples[i].label; }

  /// Single-branch batch named "x" (used for scoring).
  nn::Tensor branch_batch(models::Branch b, std::span<const std::size_t> idx) const;

 private:
  void check(std::span<const std::size_t> idx) const;

  const FeatureTable* table_;
  models::ModelFamily family_;
  std::map<models::Branch, Standardizer> standardizers_;
  std::optional<Standardizer> flat_;
  std::optional<int> excluded_;
};

/// Flat MLP input layout for a table: branches concatenated in order.
std::size_t flat_dim(const FeatureTable& t);
void flat_row(const FeatureTable& t, std::size_t i, std::span<double> out);
Standardizer fit_flat(const FeatureTable& t, std::span<const std::size_t> rows);

// ---------------------------------------------------------------------------
// Training and evaluation

struct EpochLog {
  int epoch = 0;
  double learning_rate = 0.0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainHistory {
  std::vector<EpochLog> epochs;
  int best_epoch = -1;  // -1: no epoch ran, parameters are the initial ones
  double best_val_accuracy = 0.0;
};

/// Minibatch SGD with per-epoch reshuffling. Restores the parameters of the
/// epoch with the best validation accuracy (earliest on ties). Throws
/// NumericalError on a non-finite loss.
TrainHistory train(nn::Network& net, const BatchSource& src,
                   std::span<const std::size_t> train_idx,
                   std::span<const std::size_t> val_idx, const nn::TrainConfig& cfg);

struct ConfusionMatrix {
  std::size_t n_classes = 0;
  std::vector<std::size_t> counts;  // row: true class, column: predicted

  explicit ConfusionMatrix(std::size_t n = 0) : n_classes(n), counts(n * n, 0) {}
  std::size_t& at(std::size_t truth, std::size_t pred) { return counts[truth * n_classes + pred]; }
  std::size_t at(std::size_t truth, std::size_t pred) const { return counts[truth * n_classes + pred]; }
  std::size_t total() const;
};

/// Index of the largest value; ties go to the lower index.
std::size_t argmax(std::span<const double> v);

/// Predicts in inference mode and tallies predictions against labels.
ConfusionMatrix evaluate(nn::Network& net, const BatchSource& src,
                         std::span<const std::size_t> idx, std::size_t n_classes,
                         std::size_t batch_size = 256);

/// Correct predictions over all predictions.
double subject_accuracy(const ConfusionMatrix& cm);
/// Mean per-class recall over classes with at least one true sample.
double macro_recall(const ConfusionMatrix& cm);

// ---------------------------------------------------------------------------
// Leave-one-subject-out

/// Splits training subjects into train and inner-validation groups so that
/// the validation group holds at least `fraction` of the training windows
/// (one subject minimum, one subject always left for training).
struct InnerSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<int> val_subjects;
};
InnerSplit inner_split(const FeatureTable& t, const data::Fold& fold, double fraction,
                       std::uint64_t seed);

struct SearchSummary {
  models::Branch branch;
  std::vector<nas::ScoredCandidate> top;  // best first
};

struct FoldResult {
  int held_out_subject_id = 0;
  ConfusionMatrix confusion;
  double accuracy = 0.0;
  double macro_recall = 0.0;
  std::size_t n_test = 0;
  int chosen_rank = -1;  // StressNAS only
  std::vector<double> assembly_val_accuracy;
  std::vector<SearchSummary> searches;
  TrainHistory history;  // of the chosen model
  models::ModelSpec spec;  // of the chosen model
  std::vector<nn::Tensor> state;
};

struct ReportTable {
  std::string family;
  std::string combination;
  std::string task;
  std::string profile;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<FoldResult> folds;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;  // population standard deviation over folds
  double mean_macro_recall = 0.0;
  double std_macro_recall = 0.0;

  void summarize();
};

/// Loads the configured dataset (or synthesises it).
std::vector<data::RawRecording> load_recordings(const ExperimentConfig& cfg);

/// Model-specific part of a fold. Inputs shapes come from the table.
models::ModelSpec base_spec(const ExperimentConfig& cfg, const FeatureTable& t);

/// Runs the per-branch search on training-fold windows only.
std::vector<SearchSummary> search_fold(const ExperimentConfig& cfg, const FeatureTable& t,
                                       const TableBatches& train_batches,
                                       std::span<const std::size_t> pool,
                                       int held_out);

/// Trains and evaluates one fold.
FoldResult run_fold(const ExperimentConfig& cfg, const FeatureTable& t,
                    const data::Fold& fold);

ReportTable run_loso(const ExperimentConfig& cfg, const FeatureTable& t);
ReportTable run_loso(const ExperimentConfig& cfg);

}  // namespace stressnas::harness
