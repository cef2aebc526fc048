#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "stressnas/config.hpp"
#include "stressnas/error.hpp"
#include "stressnas/featbank.hpp"
#include "stressnas/harness.hpp"
#include "stressnas/report.hpp"

using namespace stressnas;
using namespace stressnas::harness;
using models::Branch;

namespace {

// Two Gaussian blobs in 2-D, labels alternate.
class ToySource final : public BatchSource {
 public:
  ToySource(std::size_t n, std::uint64_t seed, double gap = 3.0) : x_({n, 2}), y_(n) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 0.5);
    for (std::size_t i = 0; i < n; ++i) {
      y_[i] = static_cast<int>(i % 2);
      x_[i * 2] = g(rng) + (y_[i] ? gap : -gap);
      x_[i * 2 + 1] = g(rng);
    }
  }
  std::size_t size() const override { return y_.size(); }
  nn::TensorMap inputs(std::span<const std::size_t> idx) const override {
    nn::Tensor t({idx.size(), 2});
    for (std::size_t n = 0; n < idx.size(); ++n) {
      t[n * 2] = x_[idx[n] * 2];
      t[n * 2 + 1] = x_[idx[n] * 2 + 1];
    }
    return {{"x", std::move(t)}};
  }
  int label(std::size_t i) const override { return y_[i]; }
  nn::Tensor& raw() { return x_; }

 private:
  nn::Tensor x_;
  std::vector<int> y_;
};

nn::Network toy_net(std::uint64_t seed) {
  nn::Network net;
  auto x = net.add_input("x", {2});
  auto h = net.add(nn::Dense{2, 8}, {x});
  h = net.add(nn::ReLU{}, {h});
  net.set_output(net.add(nn::Dense{8, 2}, {h}));
  nn::init_params(net, seed);
  return net;
}

std::vector<std::size_t> range(std::size_t a, std::size_t b) {
  std::vector<std::size_t> v(b - a);
  std::iota(v.begin(), v.end(), a);
  return v;
}

ExperimentConfig tiny_config(models::ModelFamily family) {
  auto c = desk_profile();
  c.family = family;
  c.synth.n_subjects = 3;
  c.synth.duration_s = 300.0;
  c.window.shift_s = 10.0;
  c.train.epochs = 2;
  c.n_candidates = 4;
  c.top_k = 2;
  c.score.batch_size = 8;
  c.macro = {4, 1};
  c.inner_val_fraction = 0.3;
  return c;
}

}  // namespace

TEST_CASE("training loop") {
  ToySource src(200, 1);
  const auto tr = range(0, 160), va = range(160, 200);
  nn::TrainConfig cfg;
  cfg.epochs = 10;
  cfg.batch_size = 16;
  cfg.seed = 3;

  SUBCASE("separable data reaches 0.99 within ten epochs") {
    auto net = toy_net(2);
    const auto h = train(net, src, tr, va, cfg);
    CHECK(h.epochs.size() == 10);
    CHECK(h.best_val_accuracy >= 0.99);
    CHECK(subject_accuracy(evaluate(net, src, va, 2)) == h.best_val_accuracy);
  }
  SUBCASE("zero epochs keep the initialisation") {
    auto net = toy_net(2);
    const auto init = net.state();
    cfg.epochs = 0;
    const auto h = train(net, src, tr, va, cfg);
    CHECK(h.best_epoch == -1);
    CHECK(h.epochs.empty());
    CHECK(net.state() == init);
  }
  SUBCASE("same seed, same history") {
    auto a = toy_net(2), b = toy_net(2);
    const auto ha = train(a, src, tr, va, cfg);
    const auto hb = train(b, src, tr, va, cfg);
    for (std::size_t e = 0; e < ha.epochs.size(); ++e) {
      CHECK(ha.epochs[e].train_loss == hb.epochs[e].train_loss);
      CHECK(ha.epochs[e].val_accuracy == hb.epochs[e].val_accuracy);
    }
    CHECK(a.state() == b.state());
  }
  SUBCASE("best epoch is restored") {
    auto net = toy_net(2);
    cfg.learning_rate = 0.5;  // noisy enough that the last epoch is not always best
    const auto h = train(net, src, tr, va, cfg);
    CHECK(subject_accuracy(evaluate(net, src, va, 2)) == h.best_val_accuracy);
    for (const auto& e : h.epochs) {
      CHECK(e.val_accuracy <= h.best_val_accuracy);
      if (e.epoch < h.best_epoch) CHECK(e.val_accuracy < h.best_val_accuracy);
    }
  }
  SUBCASE("non-finite inputs abort") {
    auto net = toy_net(2);
    src.raw()[7] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(train(net, src, tr, va, cfg), NumericalError);
  }
  SUBCASE("empty sets") {
    auto net = toy_net(2);
    CHECK_THROWS_AS(train(net, src, {}, va, cfg), DataError);
    CHECK_THROWS_AS(train(net, src, tr, {}, cfg), DataError);
  }
}

TEST_CASE("evaluation and metrics") {
  // One-hot inputs through an identity layer predict their own class.
  class OneHot final : public BatchSource {
   public:
    std::size_t size() const override { return 30; }
    nn::TensorMap inputs(std::span<const std::size_t> idx) const override {
      nn::Tensor t({idx.size(), 3});
      for (std::size_t n = 0; n < idx.size(); ++n) t[n * 3 + idx[n] % 3] = 1.0;
      return {{"x", std::move(t)}};
    }
    int label(std::size_t i) const override { return static_cast<int>(i % 3); }
  } src;
  nn::Network net;
  net.set_output(net.add(nn::Dense{3, 3}, {net.add_input("x", {3})}));
  const auto idx = range(0, 30);

  SUBCASE("perfect predictor") {
    net.load_state({nn::Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}), nn::Tensor({3})});
    const auto cm = evaluate(net, src, idx, 3, 7);
    CHECK(cm.total() == 30);
    for (std::size_t t = 0; t < 3; ++t)
      for (std::size_t p = 0; p < 3; ++p) CHECK(cm.at(t, p) == (t == p ? 10u : 0u));
    CHECK(subject_accuracy(cm) == 1.0);
    CHECK(macro_recall(cm) == 1.0);
  }
  SUBCASE("constant predictor") {
    net.load_state({nn::Tensor({3, 3}), nn::Tensor({3}, {0.0, 1.0, 0.0})});
    const auto cm = evaluate(net, src, idx, 3);
    for (std::size_t t = 0; t < 3; ++t) CHECK(cm.at(t, 1) == 10u);
    CHECK(subject_accuracy(cm) == doctest::Approx(1.0 / 3.0));
    CHECK(macro_recall(cm) == doctest::Approx(1.0 / 3.0));
  }
  SUBCASE("exact ties go to the lower class") {
    net.load_state({nn::Tensor({3, 3}), nn::Tensor({3})});
    const auto cm = evaluate(net, src, idx, 3);
    for (std::size_t t = 0; t < 3; ++t) CHECK(cm.at(t, 0) == 10u);
    CHECK(argmax(std::vector<double>{2.0, 5.0, 5.0}) == 1);
  }
  SUBCASE("random matrices against per-class recall") {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 50; ++trial) {
      ConfusionMatrix cm(3);
      for (auto& c : cm.counts) c = std::uniform_int_distribution<std::size_t>(0, 20)(rng);
      if (trial % 5 == 0) cm.at(1, 0) = cm.at(1, 1) = cm.at(1, 2) = 0;  // a class with no support
      double diag = 0.0, total = 0.0, recall = 0.0;
      int present = 0;
      for (std::size_t t = 0; t < 3; ++t) {
        double row = 0.0;
        for (std::size_t p = 0; p < 3; ++p) {
          row += static_cast<double>(cm.at(t, p));
          total += static_cast<double>(cm.at(t, p));
        }
        diag += static_cast<double>(cm.at(t, t));
        if (row > 0) {
          recall += static_cast<double>(cm.at(t, t)) / row;
          ++present;
        }
      }
      CHECK(std::abs(subject_accuracy(cm) - diag / total) < 1e-12);
      CHECK(std::abs(macro_recall(cm) - recall / present) < 1e-12);
    }
  }
  CHECK_THROWS_AS(subject_accuracy(ConfusionMatrix(3)), DataError);
  CHECK_THROWS_AS(macro_recall(ConfusionMatrix(3)), DataError);
}

TEST_CASE("features, standardisation and batches") {
  data::SynthConfig sc;
  sc.n_subjects = 3;
  sc.duration_s = 200.0;
  const auto recs = data::synth_dataset(sc);
  const data::WindowConfig wc{60.0, 20.0};
  const features::FilterBankConfig fb;
  const auto t = featurize(recs, models::parse_combination("ACC+EDA+MIXED"), wc, fb,
                           data::TaskMode::three_state, 2);

  SUBCASE("shapes and contents match direct computation") {
    CHECK(t.input(Branch::ACC).shape == nn::Shape{3, 27, 16});
    CHECK(t.input(Branch::EDA).shape == nn::Shape{1, 27, 16});
    CHECK(t.input(Branch::MIXED).shape == nn::Shape{36});
    std::size_t i = 0;
    for (const auto& rec : recs)
      for (const auto& w : data::segment_windows(rec, wc, data::TaskMode::three_state)) {
        REQUIRE(i < t.size());
        CHECK(t.samples[i].subject_id == w.subject_id);
        CHECK(t.samples[i].label == w.class_label);
        const auto eda = features::compute_filterbank(w.channel("EDA").samples, 4.0, fb);
        const auto row = t.row(Branch::EDA, i);
        CHECK(std::equal(row.begin(), row.end(), eda.values.begin()));
        const auto accz = features::compute_filterbank(w.channel("ACC_z").samples, 32.0, fb);
        const auto arow = t.row(Branch::ACC, i);
        CHECK(std::equal(accz.values.begin(), accz.values.end(), arow.begin() + 2 * 27 * 16));
        const auto mixed = features::mixed_features(w);
        const auto mrow = t.row(Branch::MIXED, i);
        CHECK(std::equal(mrow.begin(), mrow.end(), mixed.begin()));
        ++i;
      }
    CHECK(i == t.size());
  }
  SUBCASE("threads do not change features") {
    const auto serial = featurize(recs, models::parse_combination("ACC+EDA+MIXED"), wc, fb,
                                  data::TaskMode::three_state, 1);
    CHECK(serial.values == t.values);
  }
  SUBCASE("standardizer") {
    const auto rows = range(0, t.size() / 2);
    const auto s = Standardizer::fit(t, Branch::MIXED, rows);
    std::vector<double> mean(36, 0.0), sq(36, 0.0);
    for (auto r : rows) {
      std::vector<double> x(t.row(Branch::MIXED, r).begin(), t.row(Branch::MIXED, r).end());
      s.apply(x);
      for (std::size_t k = 0; k < 36; ++k) {
        mean[k] += x[k] / static_cast<double>(rows.size());
        sq[k] += x[k] * x[k] / static_cast<double>(rows.size());
      }
    }
    for (std::size_t k = 0; k < 36; ++k) {
      CHECK(std::abs(mean[k]) < 1e-9);
      const double var = sq[k] - mean[k] * mean[k];
      CHECK((std::abs(var - 1.0) < 1e-9 || var < 1e-12));
    }
  }
  SUBCASE("MLP batches concatenate every branch") {
    const TableBatches b(t, models::ModelFamily::MLP);
    CHECK(flat_dim(t) == 3 * 27 * 16 + 27 * 16 + 36);
    const std::vector<std::size_t> idx = {1, 4};
    const auto in = b.inputs(idx);
    REQUIRE(in.count("flat") == 1);
    const auto& x = in.at("flat");
    CHECK(x[flat_dim(t) + 3 * 27 * 16] == t.row(Branch::EDA, 4)[0]);
    CHECK(x[flat_dim(t) - 1] == t.row(Branch::MIXED, 1)[35]);
  }
  SUBCASE("leakage guard") {
    const int held = t.samples.back().subject_id;
    const TableBatches guarded(t, models::ModelFamily::FCN, {}, std::nullopt, held);
    const std::vector<std::size_t> ok = {0, 1};
    const std::vector<std::size_t> bad = {0, t.size() - 1};
    CHECK_NOTHROW(guarded.inputs(ok));
    CHECK_THROWS_AS(guarded.inputs(bad), std::logic_error);
    CHECK_THROWS_AS(guarded.branch_batch(Branch::EDA, bad), std::logic_error);
  }
  SUBCASE("inner split") {
    const data::Fold fold{recs[0].subject_id, {recs[1].subject_id, recs[2].subject_id}};
    const auto s = inner_split(t, fold, 0.1, 7);
    CHECK(s.val_subjects.size() == 1);
    std::set<int> tr, va;
    for (auto i : s.train) tr.insert(t.samples[i].subject_id);
    for (auto i : s.val) va.insert(t.samples[i].subject_id);
    CHECK(tr.size() == 1);
    CHECK(va.size() == 1);
    CHECK(*tr.begin() != *va.begin());
    CHECK_FALSE(tr.count(fold.held_out_subject_id));
    CHECK_FALSE(va.count(fold.held_out_subject_id));
    const auto again = inner_split(t, fold, 0.1, 7);
    CHECK(again.val == s.val);
    // A large fraction still leaves one training subject.
    const auto greedy = inner_split(t, fold, 0.99, 7);
    CHECK(greedy.val_subjects.size() == 1);
    CHECK_THROWS_AS(inner_split(t, {fold.held_out_subject_id, {recs[1].subject_id}}, 0.1, 7),
                    DataError);
  }
}

TEST_CASE("configuration") {
  const auto desk = desk_profile();
  CHECK(desk.space.size() == 125);
  CHECK(desk.n_candidates == 125);
  CHECK(desk.macro.channels == 8);
  CHECK(desk.macro.cells_per_stage == 1);
  CHECK(desk.train.epochs == 10);
  const auto full = full_profile();
  CHECK(full.space.size() == 15625);
  CHECK(full.n_candidates == 10000);
  CHECK(full.top_k == 10);
  CHECK(full.macro.channels == 16);
  CHECK(full.macro.cells_per_stage == 5);
  CHECK(full.train.epochs == 50);
  CHECK(full.window.shift_s == 0.25);

  SUBCASE("JSON overlay") {
    const auto c = apply_json(
        desk, R"({"seed": 9, "train": {"epochs": 3}, "family": "FCN", "combination": "EDA+BVP"})");
    CHECK(c.seed == 9);
    CHECK(c.train.epochs == 3);
    CHECK(c.family == models::ModelFamily::FCN);
    CHECK(c.train.batch_size == desk.train.batch_size);
    CHECK(apply_json(desk, R"({"profile": "full"})").n_candidates == 10000);
  }
  SUBCASE("round trip through canonical JSON") {
    auto c = desk;
    c.seed = 123;
    c.task = data::TaskMode::binary;
    const auto back = apply_json(ExperimentConfig{}, to_json(c));
    CHECK(config_hash(back) == config_hash(c));
  }
  SUBCASE("hash") {
    auto a = desk, b = desk;
    b.threads = 8;
    CHECK(config_hash(a) == config_hash(b));
    b.seed = 1;
    CHECK(config_hash(a) != config_hash(b));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(apply_json(desk, R"({"family": "FCN"})"), ConfigError);  // MIXED is not an image
    CHECK_THROWS_AS(apply_json(desk, "{not json"), ConfigError);
    CHECK_THROWS_AS(apply_json(desk, R"({"epochs": 3})"), ConfigError);
    CHECK_THROWS_AS(apply_json(desk, R"({"train": {"epoch": 3}})"), ConfigError);
    CHECK_THROWS_AS(apply_json(desk, R"({"train": {"epochs": -1}})"), ConfigError);
    CHECK_THROWS_AS(apply_json(desk, R"({"family": "VGG"})"), ConfigError);
    CHECK_THROWS_AS(apply_json(desk, R"({"n_candidates": 126})"), ConfigError);
    CHECK_THROWS_AS(profile_by_name("huge"), ConfigError);
  }
}

TEST_CASE("reports") {
  ReportTable t;
  t.family = "STRESSNAS";
  t.combination = "EDA+BVP+TEMP+MIXED";
  t.task = "three_state";
  t.profile = "desk";
  const auto ids = data::wrist_subject_ids();
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.3, 1.0);
  for (int id : ids) {
    FoldResult f;
    f.held_out_subject_id = id;
    f.accuracy = u(rng);
    f.macro_recall = u(rng);
    f.n_test = 100 + static_cast<std::size_t>(id);
    f.chosen_rank = id % 3;
    t.folds.push_back(f);
  }
  t.summarize();

  SUBCASE("summary is the unweighted mean and population std") {
    double m = 0.0;
    for (const auto& f : t.folds) m += f.accuracy / 15.0;
    double v = 0.0;
    for (const auto& f : t.folds) v += (f.accuracy - m) * (f.accuracy - m) / 15.0;
    CHECK(t.mean_accuracy == doctest::Approx(m).epsilon(1e-14));
    CHECK(t.std_accuracy == doctest::Approx(std::sqrt(v)).epsilon(1e-12));
  }
  SUBCASE("CSV round trip") {
    const auto csv = report::to_csv(t);
    std::istringstream in(csv);
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(in, line))
      if (!line.empty()) lines.push_back(line);
    CHECK(lines.size() == 17);  // header + 15 folds + summary
    CHECK(lines.front() == "subject,accuracy,macro_recall,accuracy_std,macro_recall_std,n_test,chosen_rank");
    const auto back = report::from_csv(csv);
    REQUIRE(back.folds.size() == 15);
    for (std::size_t i = 0; i < 15; ++i) {
      CHECK(back.folds[i].held_out_subject_id == t.folds[i].held_out_subject_id);
      CHECK(back.folds[i].accuracy == t.folds[i].accuracy);
      CHECK(back.folds[i].macro_recall == t.folds[i].macro_recall);
      CHECK(back.folds[i].n_test == t.folds[i].n_test);
      CHECK(back.folds[i].chosen_rank == t.folds[i].chosen_rank);
    }
    CHECK(back.mean_accuracy == t.mean_accuracy);
    CHECK(back.std_accuracy == t.std_accuracy);
    CHECK_THROWS_AS(report::from_csv("subject,accuracy\n2,abc\n"), DataError);
  }
  SUBCASE("markdown and metadata") {
    const auto md = report::to_markdown(t);
    CHECK(md.find("| S17 |") != std::string::npos);
    const auto meta = report::metadata_json(t, to_json(desk_profile()));
    CHECK(meta.find("created_at") != std::string::npos);
    CHECK(report::to_csv(t).find("created_at") == std::string::npos);
  }
  SUBCASE("grid of sensor rows by families") {
    std::vector<ReportTable> runs;
    for (auto row : models::kTableRows)
      for (auto fam : {models::ModelFamily::MLP, models::ModelFamily::FCN,
                       models::ModelFamily::RESNET, models::ModelFamily::STRESSNAS}) {
        ReportTable r = t;
        r.family = models::family_name(fam);
        r.combination = models::to_string(models::branches_for_row(row, fam));
        runs.push_back(r);
      }
    const auto md = report::grid_markdown(runs);
    std::size_t cells = 0;
    for (auto p = md.find("±"); p != std::string::npos; p = md.find("±", p + 1)) ++cells;
    CHECK(cells == 24);
    runs.pop_back();
    CHECK(report::grid_markdown(runs).find("n/a") != std::string::npos);
  }
}

TEST_CASE("leave-one-subject-out runs") {
  SUBCASE("FCN bookkeeping, determinism and fold independence") {
    auto cfg = tiny_config(models::ModelFamily::FCN);
    cfg.combination = models::parse_combination("EDA+BVP+TEMP");
    const auto recs = load_recordings(cfg);
    const auto t = featurize(recs, cfg.combination, cfg.window, cfg.filterbank, cfg.task);
    const auto a = run_loso(cfg, t);
    REQUIRE(a.folds.size() == 3);
    double m = 0.0;
    std::size_t windows = 0;
    for (const auto& f : a.folds) {
      m += f.accuracy / 3.0;
      windows += f.n_test;
      CHECK(f.confusion.total() == f.n_test);
      CHECK(f.accuracy >= 0.0);
      CHECK(f.accuracy <= 1.0);
    }
    CHECK(windows == t.size());
    CHECK(a.mean_accuracy == doctest::Approx(m).epsilon(1e-14));
    CHECK(a.config_hash == config_hash(cfg));

    const auto b = run_loso(cfg, t);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(a.folds[i].accuracy == b.folds[i].accuracy);
      CHECK(a.folds[i].state == b.folds[i].state);
    }
    // The last fold run alone matches the same fold inside the full run.
    std::vector<int> ids;
    for (const auto& f : a.folds) ids.push_back(f.held_out_subject_id);
    const auto folds = data::loso_folds(ids);
    const auto alone = run_fold(cfg, t, folds[2]);
    CHECK(alone.accuracy == a.folds[2].accuracy);
    CHECK(alone.state == a.folds[2].state);
  }
  SUBCASE("StressNAS searches inside the fold") {
    auto cfg = tiny_config(models::ModelFamily::STRESSNAS);
    cfg.combination = models::parse_combination("EDA+TEMP+MIXED");
    const auto t = featurize(load_recordings(cfg), cfg.combination, cfg.window, cfg.filterbank,
                             cfg.task);
    const auto r = run_loso(cfg, t);
    REQUIRE(r.folds.size() == 3);
    for (const auto& f : r.folds) {
      REQUIRE(f.searches.size() == 2);
      for (const auto& s : f.searches) CHECK(s.top.size() == 2);
      CHECK(f.assembly_val_accuracy.size() == 2);
      CHECK(f.chosen_rank >= 0);
      CHECK(f.chosen_rank < 2);
      CHECK(f.spec.genotypes.size() == 2);
      const auto best = *std::max_element(f.assembly_val_accuracy.begin(),
                                          f.assembly_val_accuracy.end());
      CHECK(f.assembly_val_accuracy[static_cast<std::size_t>(f.chosen_rank)] == best);
    }
  }
  SUBCASE("fold failures name the fold") {
    auto cfg = tiny_config(models::ModelFamily::STRESSNAS);
    cfg.score.batch_size = 10000;
    try {
      run_loso(cfg);
      FAIL("expected a data error");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("fold S") != std::string::npos);
    }
  }
}
