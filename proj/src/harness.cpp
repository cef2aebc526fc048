#include "stressnas/harness.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "stressnas/error.hpp"
#include "stressnas/featbank.hpp"
#include "stressnas/parallel.hpp"
#include "stressnas/seed.hpp"

namespace stressnas::harness {

using models::Branch;

namespace {

std::vector<std::string_view> branch_channels(Branch b) {
  switch (b) {
    case Branch::ACC: return {"ACC_x", "ACC_y", "ACC_z"};
    case Branch::EDA: return {"EDA"};
    case Branch::BVP: return {"BVP"};
    case Branch::TEMP: return {"TEMP"};
    case Branch::MIXED: return {};
  }
  return {};
}

// Fills `out` with the branch features of one window.
void branch_features(const data::Window& w, Branch b,
                     const features::FilterBankConfig& fb, std::span<double> out) {
  if (b == Branch::MIXED) {
    const auto m = features::mixed_features(w);
    std::copy(m.begin(), m.end(), out.begin());
    return;
  }
  std::size_t offset = 0;
  for (auto name : branch_channels(b)) {
    const auto& ch = w.channel(name);
    const auto img = features::compute_filterbank(ch.samples, ch.sample_rate_hz, fb);
    if (offset + img.values.size() > out.size())
      throw DataError("filter-bank image size differs between windows");
    std::copy(img.values.begin(), img.values.end(), out.begin() + offset);
    offset += img.values.size();
  }
}

nn::Shape branch_shape(const data::Window& w, Branch b,
                       const features::FilterBankConfig& fb) {
  if (b == Branch::MIXED) return {features::kMixedFeatureDim};
  const auto names = branch_channels(b);
  const auto& ch = w.channel(names.front());
  const auto geo = features::resolve(fb, ch.sample_rate_hz);
  return {names.size(), geo.frame_count(ch.samples.size()), geo.n_filters};
}

std::vector<std::size_t> indices_of(const FeatureTable& t, auto&& pred) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < t.size(); ++i)
    if (pred(t.samples[i])) idx.push_back(i);
  return idx;
}

}  // namespace

// ---------------------------------------------------------------------------

std::size_t FeatureTable::dim(Branch b) const { return nn::element_count(input(b).shape); }

std::span<const double> FeatureTable::row(Branch b, std::size_t i) const {
  const auto d = dim(b);
  return std::span<const double>(values.at(b)).subspan(i * d, d);
}

const models::BranchInput& FeatureTable::input(Branch b) const {
  for (const auto& bi : branches)
    if (bi.branch == b) return bi;
  throw ConfigError("feature table has no branch " + std::string(models::branch_name(b)));
}

FeatureTable featurize(const std::vector<data::RawRecording>& recordings,
                       const models::SensorCombination& branches,
                       const data::WindowConfig& window,
                       const features::FilterBankConfig& filterbank,
                       data::TaskMode task, std::size_t threads) {
  if (branches.empty()) throw ConfigError("no branches to featurize");
  FeatureTable t;
  for (const auto& rec : recordings) {
    const auto windows = data::segment_windows(rec, window, task);
    if (windows.empty()) continue;
    if (t.branches.empty()) {
      for (auto b : branches) t.branches.push_back({b, branch_shape(windows[0], b, filterbank)});
    }
    const std::size_t first = t.samples.size();
    for (const auto& w : windows) t.samples.push_back({w.subject_id, w.class_label, w.start_time_s});
    for (const auto& bi : t.branches) {
      const auto d = nn::element_count(bi.shape);
      auto& v = t.values[bi.branch];
      v.resize(t.samples.size() * d);
      parallel_for(windows.size(), threads, [&](std::size_t i) {
        branch_features(windows[i], bi.branch, filterbank,
                        std::span<double>(v).subspan((first + i) * d, d));
      });
    }
  }
  if (t.samples.empty()) throw DataError("no homogeneous windows in the dataset");
  return t;
}

Standardizer Standardizer::fit(const FeatureTable& t, Branch b,
                               std::span<const std::size_t> rows) {
  const auto d = t.dim(b);
  if (rows.empty()) throw DataError("cannot fit a standardizer on zero rows");
  Standardizer s{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  for (auto i : rows) {
    const auto r = t.row(b, i);
    for (std::size_t k = 0; k < d; ++k) s.mean[k] += r[k];
  }
  for (auto& m : s.mean) m /= static_cast<double>(rows.size());
  for (auto i : rows) {
    const auto r = t.row(b, i);
    for (std::size_t k = 0; k < d; ++k) s.inv_std[k] += (r[k] - s.mean[k]) * (r[k] - s.mean[k]);
  }
  for (auto& v : s.inv_std) {
    const double sd = std::sqrt(v / static_cast<double>(rows.size()));
    v = sd > 1e-12 ? 1.0 / sd : 1.0;
  }
  return s;
}

void Standardizer::apply(std::span<double> x) const {
  for (std::size_t k = 0; k < x.size(); ++k) x[k] = (x[k] - mean[k]) * inv_std[k];
}

std::size_t flat_dim(const FeatureTable& t) {
  std::size_t d = 0;
  for (const auto& bi : t.branches) d += nn::element_count(bi.shape);
  return d;
}

void flat_row(const FeatureTable& t, std::size_t i, std::span<double> out) {
  std::size_t off = 0;
  for (const auto& bi : t.branches) {
    const auto r = t.row(bi.branch, i);
    std::copy(r.begin(), r.end(), out.begin() + off);
    off += r.size();
  }
}

Standardizer fit_flat(const FeatureTable& t, std::span<const std::size_t> rows) {
  // Route through a one-branch table view so the statistics code is shared.
  FeatureTable flat;
  const auto d = flat_dim(t);
  flat.branches = {{Branch::MIXED, {d}}};
  flat.samples.resize(rows.size());
  auto& v = flat.values[Branch::MIXED];
  v.resize(rows.size() * d);
  for (std::size_t r = 0; r < rows.size(); ++r)
    flat_row(t, rows[r], std::span<double>(v).subspan(r * d, d));
  std::vector<std::size_t> all(rows.size());
  std::iota(all.begin(), all.end(), 0);
  return Standardizer::fit(flat, Branch::MIXED, all);
}

// ---------------------------------------------------------------------------

TableBatches::TableBatches(const FeatureTable& table, models::ModelFamily family,
                           std::map<Branch, Standardizer> standardizers,
                           std::optional<Standardizer> flat,
                           std::optional<int> excluded_subject)
    : table_(&table),
      family_(family),
      standardizers_(std::move(standardizers)),
      flat_(std::move(flat)),
      excluded_(excluded_subject) {}

void TableBatches::check(std::span<const std::size_t> idx) const {
  for (auto i : idx) {
    if (i >= table_->size()) throw std::out_of_range("sample index out of range");
    if (excluded_ && table_->samples[i].subject_id == *excluded_)
      throw std::logic_error("held-out subject " + std::to_string(*excluded_) +
                             " leaked into a training batch");
  }
}

nn::Tensor TableBatches::branch_batch(Branch b, std::span<const std::size_t> idx) const {
  check(idx);
  const auto& bi = table_->input(b);
  nn::Shape shape{idx.size()};
  shape.insert(shape.end(), bi.shape.begin(), bi.shape.end());
  nn::Tensor x(shape);
  const auto d = nn::element_count(bi.shape);
  const auto it = standardizers_.find(b);
  for (std::size_t n = 0; n < idx.size(); ++n) {
    const auto r = table_->row(b, idx[n]);
    auto dst = std::span<double>(x.data() + n * d, d);
    std::copy(r.begin(), r.end(), dst.begin());
    if (it != standardizers_.end()) it->second.apply(dst);
  }
  return x;
}

nn::TensorMap TableBatches::inputs(std::span<const std::size_t> idx) const {
  check(idx);
  nn::TensorMap m;
  if (family_ == models::ModelFamily::MLP) {
    const auto d = flat_dim(*table_);
    nn::Tensor x({idx.size(), d});
    for (std::size_t n = 0; n < idx.size(); ++n) {
      auto dst = std::span<double>(x.data() + n * d, d);
      flat_row(*table_, idx[n], dst);
      if (flat_) flat_->apply(dst);
    }
    m.emplace("flat", std::move(x));
    return m;
  }
  for (const auto& bi : table_->branches)
    m.emplace(std::string(models::branch_name(bi.branch)), branch_batch(bi.branch, idx));
  return m;
}

// ---------------------------------------------------------------------------

std::size_t ConfusionMatrix::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::size_t{0});
}

std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < v.size(); ++k)
    if (v[k] > v[best]) best = k;
  return best;
}

ConfusionMatrix evaluate(nn::Network& net, const BatchSource& src,
                         std::span<const std::size_t> idx, std::size_t n_classes,
                         std::size_t batch_size) {
  ConfusionMatrix cm(n_classes);
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const auto chunk = idx.subspan(start, std::min(batch_size, idx.size() - start));
    const auto& logits = net.forward(src.inputs(chunk), false);
    const auto width = logits.row_size();
    for (std::size_t n = 0; n < chunk.size(); ++n) {
      const auto pred = argmax(std::span<const double>(logits.data() + n * width, width));
      const auto truth = static_cast<std::size_t>(src.label(chunk[n]));
      if (truth >= n_classes) throw DataError("label outside the class range");
      ++cm.at(truth, pred);
    }
  }
  return cm;
}

double subject_accuracy(const ConfusionMatrix& cm) {
  const auto total = cm.total();
  if (total == 0) throw DataError("accuracy of an empty confusion matrix");
  std::size_t diag = 0;
  for (std::size_t c = 0; c < cm.n_classes; ++c) diag += cm.at(c, c);
  return static_cast<double>(diag) / static_cast<double>(total);
}

double macro_recall(const ConfusionMatrix& cm) {
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < cm.n_classes; ++c) {
    std::size_t support = 0;
    for (std::size_t p = 0; p < cm.n_classes; ++p) support += cm.at(c, p);
    if (support == 0) continue;
    sum += static_cast<double>(cm.at(c, c)) / static_cast<double>(support);
    ++present;
  }
  if (present == 0) throw DataError("macro recall of an empty confusion matrix");
  return sum / static_cast<double>(present);
}

TrainHistory train(nn::Network& net, const BatchSource& src,
                   std::span<const std::size_t> train_idx,
                   std::span<const std::size_t> val_idx, const nn::TrainConfig& cfg) {
  cfg.validate();
  TrainHistory h;
  if (cfg.epochs == 0) return h;
  if (train_idx.empty()) throw DataError("empty training set");
  if (val_idx.empty()) throw DataError("empty validation set");
  const auto n_classes = net.output_shape().back();

  nn::SgdState sgd;
  std::vector<nn::Tensor> best_state;
  std::vector<std::size_t> order(train_idx.begin(), train_idx.end());
  std::vector<int> labels;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const auto batch = std::span<const std::size_t>(order).subspan(
          start, std::min(cfg.batch_size, order.size() - start));
      labels.resize(batch.size());
      for (std::size_t n = 0; n < batch.size(); ++n) labels[n] = src.label(batch[n]);
      const auto& logits = net.forward(src.inputs(batch), true);
      auto loss = nn::cross_entropy(logits, labels);
      if (!std::isfinite(loss.loss))
        throw NumericalError("non-finite training loss at epoch " + std::to_string(epoch) +
                             ", batch starting at " + std::to_string(start));
      net.backward(loss.grad, nn::GradTarget::params);
      nn::sgd_step(net, sgd, cfg, epoch);
      loss_sum += loss.loss * static_cast<double>(batch.size());
      seen += batch.size();
    }
    const double val = subject_accuracy(evaluate(net, src, val_idx, n_classes));
    h.epochs.push_back({epoch, nn::cosine_lr(cfg, epoch), loss_sum / static_cast<double>(seen), val});
    if (h.best_epoch < 0 || val > h.best_val_accuracy) {
      h.best_epoch = epoch;
      h.best_val_accuracy = val;
      best_state = net.state();
    }
  }
  net.load_state(best_state);
  return h;
}

// ---------------------------------------------------------------------------

InnerSplit inner_split(const FeatureTable& t, const data::Fold& fold, double fraction,
                       std::uint64_t seed) {
  if (fold.train_subject_ids.size() < 2)
    throw DataError("inner validation needs at least two training subjects");
  std::map<int, std::size_t> count;
  for (const auto& s : t.samples) ++count[s.subject_id];
  std::size_t total = 0;
  for (int id : fold.train_subject_ids) total += count[id];

  auto subjects = fold.train_subject_ids;
  std::mt19937_64 rng(seed);
  std::shuffle(subjects.begin(), subjects.end(), rng);
  InnerSplit split;
  std::size_t val_windows = 0;
  for (int id : subjects) {
    if (split.val_subjects.size() + 1 >= subjects.size()) break;
    if (!split.val_subjects.empty() &&
        static_cast<double>(val_windows) >= fraction * static_cast<double>(total))
      break;
    split.val_subjects.push_back(id);
    val_windows += count[id];
  }
  const std::set<int> val_set(split.val_subjects.begin(), split.val_subjects.end());
  const std::set<int> train_set(fold.train_subject_ids.begin(), fold.train_subject_ids.end());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const int id = t.samples[i].subject_id;
    if (val_set.count(id)) split.val.push_back(i);
    else if (train_set.count(id)) split.train.push_back(i);
  }
  if (split.train.empty() || split.val.empty())
    throw DataError("inner split left an empty partition");
  return split;
}

void ReportTable::summarize() {
  const double n = static_cast<double>(folds.size());
  if (folds.empty()) return;
  double a = 0.0, r = 0.0;
  for (const auto& f : folds) {
    a += f.accuracy;
    r += f.macro_recall;
  }
  mean_accuracy = a / n;
  mean_macro_recall = r / n;
  double va = 0.0, vr = 0.0;
  for (const auto& f : folds) {
    va += (f.accuracy - mean_accuracy) * (f.accuracy - mean_accuracy);
    vr += (f.macro_recall - mean_macro_recall) * (f.macro_recall - mean_macro_recall);
  }
  std_accuracy = std::sqrt(va / n);
  std_macro_recall = std::sqrt(vr / n);
}

std::vector<data::RawRecording> load_recordings(const ExperimentConfig& cfg) {
  if (cfg.data_dir.empty()) return data::synth_dataset(cfg.synth);
  return data::load_dataset(cfg.data_dir, {cfg.interpolate_nan});
}

models::ModelSpec base_spec(const ExperimentConfig& cfg, const FeatureTable& t) {
  models::ModelSpec spec;
  spec.family = cfg.family;
  spec.branches = t.branches;
  spec.n_classes = static_cast<std::size_t>(data::n_classes(cfg.task));
  spec.macro = cfg.macro;
  return spec;
}

std::vector<SearchSummary> search_fold(const ExperimentConfig& cfg, const FeatureTable& t,
                                       const TableBatches& train_batches,
                                       std::span<const std::size_t> pool, int held_out) {
  std::vector<SearchSummary> out;
  for (const auto& bi : t.branches) {
    if (bi.branch == Branch::MIXED) continue;
    const std::string name(models::branch_name(bi.branch));
    if (pool.size() < cfg.score.batch_size)
      throw DataError("training fold has fewer windows than the scoring batch");
    std::vector<std::size_t> picked(pool.begin(), pool.end());
    std::mt19937_64 rng(derive_seed(cfg.seed, held_out, "score-batch/" + name));
    for (std::size_t i = 0; i < cfg.score.batch_size; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, picked.size() - 1);
      std::swap(picked[i], picked[pick(rng)]);
    }
    picked.resize(cfg.score.batch_size);

    nas::SearchRequest req;
    req.space = cfg.space;
    req.n_candidates = cfg.n_candidates;
    req.macro = cfg.macro;
    req.n_classes = static_cast<std::size_t>(data::n_classes(cfg.task));
    req.score = cfg.score;
    req.seed = derive_seed(cfg.seed, held_out, "search/" + name);
    req.threads = cfg.threads;
    auto ranked = nas::search(req, train_batches.branch_batch(bi.branch, picked));
    ranked.resize(std::min(ranked.size(), cfg.top_k));
    out.push_back({bi.branch, std::move(ranked)});
  }
  return out;
}

FoldResult run_fold(const ExperimentConfig& cfg, const FeatureTable& t,
                    const data::Fold& fold) {
  const int held = fold.held_out_subject_id;
  const auto split = inner_split(t, fold, cfg.inner_val_fraction,
                                 derive_seed(cfg.seed, held, "inner-val"));
  const auto test = indices_of(t, [&](const SampleInfo& s) { return s.subject_id == held; });
  if (test.empty()) throw DataError("held-out subject " + std::to_string(held) + " has no windows");

  std::map<Branch, Standardizer> stdz;
  std::optional<Standardizer> flat;
  if (cfg.family == models::ModelFamily::MLP) {
    flat = fit_flat(t, split.train);
  } else {
    for (const auto& bi : t.branches)
      if (bi.branch == Branch::MIXED) stdz[Branch::MIXED] = Standardizer::fit(t, Branch::MIXED, split.train);
  }
  const TableBatches train_src(t, cfg.family, stdz, flat, held);
  const TableBatches test_src(t, cfg.family, stdz, flat);
  const auto n_classes = static_cast<std::size_t>(data::n_classes(cfg.task));
  auto spec = base_spec(cfg, t);

  FoldResult r;
  r.held_out_subject_id = held;
  r.n_test = test.size();

  nn::TrainConfig tc = cfg.train;
  tc.seed = derive_seed(cfg.seed, held, "train");
  std::optional<nn::Network> chosen;
  if (cfg.family != models::ModelFamily::STRESSNAS) {
    chosen = models::build(spec);
    nn::init_params(*chosen, derive_seed(cfg.seed, held, "init"));
    r.history = train(*chosen, train_src, split.train, split.val, tc);
    r.spec = spec;
  } else {
    std::vector<std::size_t> pool = split.train;
    pool.insert(pool.end(), split.val.begin(), split.val.end());
    std::sort(pool.begin(), pool.end());
    r.searches = search_fold(cfg, t, train_src, pool, held);
    std::size_t k = cfg.top_k;
    for (const auto& s : r.searches) k = std::min(k, s.top.size());
    if (r.searches.empty()) k = 1;  // MIXED only: a single fixed assembly

    std::vector<std::optional<nn::Network>> nets(k);
    std::vector<models::ModelSpec> specs(k, spec);
    std::vector<TrainHistory> histories(k);
    parallel_for(k, cfg.threads, [&](std::size_t rank) {
      auto& s = specs[rank];
      s.rank = rank;
      for (const auto& search : r.searches) s.genotypes[search.branch] = search.top[rank].genotype;
      nets[rank] = models::build(s);
      nn::init_params(*nets[rank], derive_seed(derive_seed(cfg.seed, held, "assembly-init"), rank));
      auto rtc = tc;
      rtc.seed = derive_seed(tc.seed, static_cast<std::uint64_t>(rank));
      histories[rank] = train(*nets[rank], train_src, split.train, split.val, rtc);
    });
    std::size_t best = 0;
    for (std::size_t rank = 0; rank < k; ++rank) {
      r.assembly_val_accuracy.push_back(histories[rank].best_val_accuracy);
      if (histories[rank].best_val_accuracy > histories[best].best_val_accuracy) best = rank;
    }
    r.chosen_rank = static_cast<int>(best);
    r.history = histories[best];
    r.spec = specs[best];
    chosen = std::move(nets[best]);
  }
  r.state = chosen->state();
  r.confusion = evaluate(*chosen, test_src, test, n_classes);
  r.accuracy = subject_accuracy(r.confusion);
  r.macro_recall = macro_recall(r.confusion);
  return r;
}

ReportTable run_loso(const ExperimentConfig& cfg, const FeatureTable& t) {
  cfg.validate();
  std::vector<int> ids;
  for (const auto& s : t.samples)
    if (ids.empty() || ids.back() != s.subject_id) ids.push_back(s.subject_id);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());

  ReportTable table;
  table.family = models::family_name(cfg.family);
  table.combination = models::to_string(cfg.combination);
  table.task = data::to_string(cfg.task);
  table.profile = cfg.profile;
  table.config_hash = config_hash(cfg);
  table.seed = cfg.seed;
  for (const auto& fold : data::loso_folds(ids)) {
    const auto where = [&](const std::exception& e) {
      return "fold S" + std::to_string(fold.held_out_subject_id) + ": " + e.what();
    };
    try {
      table.folds.push_back(run_fold(cfg, t, fold));
    } catch (const ConfigError& e) {
      throw ConfigError(where(e));
    } catch (const DataError& e) {
      throw DataError(where(e));
    } catch (const NumericalError& e) {
      throw NumericalError(where(e));
    }
  }
  table.summarize();
  return table;
}

ReportTable run_loso(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto recordings = load_recordings(cfg);
  const auto t = featurize(recordings, cfg.combination, cfg.window, cfg.filterbank, cfg.task,
                           cfg.threads);
  return run_loso(cfg, t);
}

}  // namespace stressnas::harness
