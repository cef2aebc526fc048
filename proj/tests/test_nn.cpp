#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "stressnas/checkpoint.hpp"
#include "stressnas/error.hpp"
#include "stressnas/network.hpp"
#include "stressnas/optim.hpp"

using namespace stressnas;
using namespace stressnas::nn;

namespace {

Network single_layer(LayerSpec spec, Shape in_shape, bool two_inputs = false) {
  Network net;
  auto a = net.add_input("a", in_shape);
  std::vector<NodeId> ins{a};
  if (two_inputs) ins.push_back(net.add_input("b", in_shape));
  net.set_output(net.add(std::move(spec), ins));
  return net;
}

}  // namespace

TEST_CASE("tensor basics") {
  Tensor t({2, 3, 4});
  CHECK(t.size() == 24);
  CHECK(t.row_size() == 12);
  CHECK(element_count({5, 1, 2}) == 10);
  CHECK(t.all_finite());
  t[3] = std::nan("");
  CHECK_FALSE(t.all_finite());
  CHECK_THROWS(Tensor({2, 2}, std::vector<double>(3)));
}

TEST_CASE("initialisation") {
  Network net = single_layer(Dense{100, 10}, {100});
  SUBCASE("same seed, same parameters") {
    Network other = single_layer(Dense{100, 10}, {100});
    init_params(net, 7);
    init_params(other, 7);
    CHECK(net.state() == other.state());
  }
  SUBCASE("He variance and zero bias") {
    double var_sum = 0.0;
    const int seeds = 20;
    for (int s = 0; s < seeds; ++s) {
      init_params(net, static_cast<std::uint64_t>(s));
      const auto params = net.parameters();
      const auto w = params[0].value->values();
      const double mean = std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(w.size());
      double v = 0.0;
      for (double x : w) v += (x - mean) * (x - mean);
      var_sum += v / static_cast<double>(w.size() - 1);
      for (double b : params[1].value->values()) CHECK(b == 0.0);
    }
    CHECK(std::abs(var_sum / seeds - 0.02) < 0.2 * 0.02);
  }
  SUBCASE("batchnorm starts as identity affine") {
    Network bn = single_layer(BatchNorm{3}, {3, 2, 2});
    init_params(bn, 1);
    const auto st = bn.state();
    for (double v : st[0].values()) CHECK(v == 1.0);
    for (double v : st[1].values()) CHECK(v == 0.0);
  }
}

TEST_CASE("forward worked examples") {
  SUBCASE("identity dense") {
    Network net = single_layer(Dense{3, 3}, {3});
    auto st = net.state();
    for (std::size_t i = 0; i < 3; ++i) st[0][i * 3 + i] = 1.0;
    net.load_state(st);
    const Tensor x({2, 3}, {1.5, -2.0, 0.25, 4.0, 5.0, -6.0});
    CHECK(net.forward({{"a", x}}, false) == x);
  }
  SUBCASE("relu") {
    Network net = single_layer(ReLU{}, {2});
    const auto& y = net.forward({{"a", Tensor({1, 2}, {-1.0, 2.0})}}, false);
    CHECK(y[0] == 0.0);
    CHECK(y[1] == 2.0);
  }
  SUBCASE("zeroize keeps the shape") {
    Network net = single_layer(Zeroize{}, {2, 3, 3});
    const auto& y = net.forward({{"a", oracle::random_tensor({4, 2, 3, 3}, 1)}}, false);
    CHECK(y.shape() == Shape{4, 2, 3, 3});
    for (double v : y.values()) CHECK(v == 0.0);
  }
  SUBCASE("shape algebra") {
    CHECK(single_layer(Conv2D{2, 5, 3, 3}, {2, 7, 6}).output_shape() == Shape{5, 7, 6});
    CHECK(single_layer(Conv2D{2, 5, 3, 3, 2}, {2, 7, 6}).output_shape() == Shape{5, 4, 3});
    CHECK(single_layer(Conv2D{2, 5, 3, 3, 1, Padding::valid}, {2, 7, 6}).output_shape() ==
          Shape{5, 5, 4});
    CHECK(single_layer(GlobalAvgPool{}, {4, 3, 3}).output_shape() == Shape{4});
    CHECK(single_layer(AvgPool{}, {4, 3, 5}).output_shape() == Shape{4, 3, 5});
  }
  SUBCASE("build-time shape errors name the node") {
    Network net;
    auto a = net.add_input("a", {4});
    try {
      net.add(Dense{5, 2}, {a}, "wrong_fc");
      FAIL("expected an error");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("wrong_fc") != std::string::npos);
    }
  }
  SUBCASE("runtime input mismatch") {
    Network net = single_layer(ReLU{}, {3});
    CHECK_THROWS_AS(net.forward({{"a", Tensor({2, 4})}}, false), DataError);
    CHECK_THROWS_AS(net.forward({{"zzz", Tensor({2, 3})}}, false), DataError);
  }
  SUBCASE("backward before forward") {
    Network net = single_layer(ReLU{}, {3});
    CHECK_THROWS_AS(net.backward(Tensor({1, 3})), std::logic_error);
  }
  SUBCASE("unreachable input is rejected") {
    Network net;
    auto a = net.add_input("a", {3});
    net.add_input("b", {3});
    net.set_output(net.add(ReLU{}, {a}));
    CHECK_THROWS_AS(net.validate(), ConfigError);
  }
}

TEST_CASE("forward matches a direct per-node evaluator") {
  // conv3x3(same) -> BN (running stats) -> ReLU -> avgpool -> GAP -> dense
  Network net;
  auto x = net.add_input("x", {2, 5, 4});
  auto c = net.add(Conv2D{2, 3, 3, 3}, {x});
  auto b = net.add(BatchNorm{3}, {c});
  auto r = net.add(ReLU{}, {b});
  auto p = net.add(AvgPool{}, {r});
  auto g = net.add(GlobalAvgPool{}, {p});
  net.set_output(net.add(Dense{3, 2}, {g}));
  auto st = net.state();
  for (std::size_t i = 0; i < st.size(); ++i) st[i] = oracle::random_tensor(st[i].shape(), 100 + i);
  for (auto& v : st[7].values()) v = std::abs(v) + 0.5;  // running variance
  net.load_state(st);
  const Tensor in = oracle::random_tensor({3, 2, 5, 4}, 9);
  const Tensor& got = net.forward({{"x", in}}, false);

  const auto& W = st[0];
  const auto& cb = st[1];
  const auto &gamma = st[2], &beta = st[3], &D = st[4], &db = st[5];
  const auto &rm = st[6], &rv = st[7];
  const int H = 5, Wd = 4;
  double worst = 0.0;
  for (int n = 0; n < 3; ++n) {
    std::vector<double> act(3 * H * Wd);
    for (int o = 0; o < 3; ++o)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < Wd; ++j) {
          double s = cb[o];
          for (int ci = 0; ci < 2; ++ci)
            for (int ki = 0; ki < 3; ++ki)
              for (int kj = 0; kj < 3; ++kj) {
                const int ii = i + ki - 1, jj = j + kj - 1;
                if (ii < 0 || ii >= H || jj < 0 || jj >= Wd) continue;
                s += W[o * 18 + ci * 9 + ki * 3 + kj] * in[((n * 2 + ci) * H + ii) * Wd + jj];
              }
          s = gamma[o] * (s - rm[o]) / std::sqrt(rv[o] + 1e-5) + beta[o];
          act[(o * H + i) * Wd + j] = std::max(0.0, s);
        }
    std::vector<double> feat(3, 0.0);
    for (int o = 0; o < 3; ++o) {
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < Wd; ++j) {
          double s = 0.0;
          int cnt = 0;
          for (int di = -1; di <= 1; ++di)
            for (int dj = -1; dj <= 1; ++dj) {
              const int ii = i + di, jj = j + dj;
              if (ii < 0 || ii >= H || jj < 0 || jj >= Wd) continue;
              s += act[(o * H + ii) * Wd + jj];
              ++cnt;
            }
          feat[o] += s / cnt;
        }
      feat[o] /= H * Wd;
    }
    for (int k = 0; k < 2; ++k) {
      double y = db[k];
      for (int o = 0; o < 3; ++o) y += D[k * 3 + o] * feat[o];
      worst = std::max(worst, std::abs(y - got[n * 2 + k]));
    }
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("batchnorm statistics") {
  Network net = single_layer(BatchNorm{2}, {2, 1, 3});
  init_params(net, 0);
  const Tensor x = oracle::random_tensor({4, 2, 1, 3}, 3, 2.0);
  const Tensor y = net.forward({{"a", x}}, true);
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0.0, v = 0.0, bm = 0.0, bv = 0.0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t k = 0; k < 3; ++k) {
        m += y[(n * 2 + c) * 3 + k] / 12.0;
        bm += x[(n * 2 + c) * 3 + k] / 12.0;
      }
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t k = 0; k < 3; ++k) {
        v += std::pow(y[(n * 2 + c) * 3 + k] - m, 2) / 12.0;
        bv += std::pow(x[(n * 2 + c) * 3 + k] - bm, 2) / 12.0;
      }
    CHECK(std::abs(m) < 1e-12);
    CHECK(v == doctest::Approx(bv / (bv + 1e-5)).epsilon(1e-10));
    // running stats moved 10% of the way from (0, 1)
    const auto st = net.state();
    CHECK(st[2][c] == doctest::Approx(0.1 * bm).epsilon(1e-12));
  }
}

TEST_CASE("gradients of every layer type match central differences") {
  struct Case {
    const char* name;
    LayerSpec spec;
    Shape in;
    bool two = false;
  };
  const std::vector<Case> cases = {
      {"dense", Dense{6, 4}, {6}},
      {"conv3x3 same", Conv2D{2, 3, 3, 3}, {2, 5, 4}},
      {"conv3x3 stride 2", Conv2D{2, 3, 3, 3, 2}, {2, 5, 6}},
      {"conv valid no bias", Conv2D{2, 3, 2, 3, 1, Padding::valid, false}, {2, 4, 5}},
      {"conv1x1", Conv2D{3, 2, 1, 1, 1, Padding::valid}, {3, 3, 3}},
      {"batchnorm", BatchNorm{3}, {3, 2, 3}},
      {"batchnorm flat", BatchNorm{4}, {4}},
      {"relu", ReLU{}, {3, 2, 2}},
      {"avgpool", AvgPool{}, {2, 4, 3}},
      {"avgpool stride 2", AvgPool{2, 2, 0}, {2, 4, 4}},
      {"global avgpool", GlobalAvgPool{}, {3, 3, 2}},
      {"softmax", Softmax{}, {5}},
      {"add", Add{}, {2, 3, 3}, true},
      {"concat", Concat{}, {2, 2, 3}, true},
      {"zeroize", Zeroize{}, {2, 3, 3}},
  };
  for (const auto& c : cases) {
    CAPTURE(c.name);
    Network net = single_layer(c.spec, c.in, c.two);
    init_params(net, 11);
    auto st = net.state();
    for (auto& t : st)  // perturb biases / BN affine away from trivial values
      for (auto& v : t.values()) v += 0.1;
    net.load_state(st);
    Shape batch{3};
    batch.insert(batch.end(), c.in.begin(), c.in.end());
    TensorMap in{{"a", oracle::random_tensor(batch, 5)}};
    if (c.two) in.emplace("b", oracle::random_tensor(batch, 6));
    const auto res = oracle::check_gradients(net, in, 17);
    CAPTURE(res.worst_name);
    CHECK(res.worst < 1e-4);
    CHECK(res.kink_fraction() < 0.01);
  }
  SUBCASE("zeroize passes no gradient") {
    Network net = single_layer(Zeroize{}, {3});
    net.forward({{"a", Tensor({2, 3}, 1.0)}}, true);
    const auto g = net.backward(Tensor({2, 3}, 1.0));
    for (double v : g.at("a").values()) CHECK(v == 0.0);
  }
  SUBCASE("dense with quadratic loss, closed form") {
    // L = 0.5 ||W x + b||^2 -> dL/dW = (W x + b) x^T, dL/dx = W^T (W x + b)
    Network net = single_layer(Dense{2, 2}, {2});
    net.load_state({Tensor({2, 2}, {1.0, 2.0, -1.0, 0.5}), Tensor({2}, {0.5, -0.25})});
    const Tensor x({1, 2}, {3.0, -1.0});
    const Tensor y = net.forward({{"a", x}}, true);
    CHECK(y[0] == doctest::Approx(1.5));
    CHECK(y[1] == doctest::Approx(-3.75));
    const auto g = net.backward(y);
    const auto p = net.parameters();
    CHECK((*p[0].grad)[0] == doctest::Approx(4.5));
    CHECK((*p[0].grad)[1] == doctest::Approx(-1.5));
    CHECK((*p[0].grad)[2] == doctest::Approx(-11.25));
    CHECK((*p[0].grad)[3] == doctest::Approx(3.75));
    CHECK((*p[1].grad)[1] == doctest::Approx(-3.75));
    CHECK(g.at("a")[0] == doctest::Approx(1.5 + 3.75));
    CHECK(g.at("a")[1] == doctest::Approx(3.0 - 1.875));
  }
}

TEST_CASE("cross entropy") {
  const std::vector<int> labels = {0, 2};
  SUBCASE("uniform logits") {
    const auto r = cross_entropy(Tensor({2, 3}, 0.7), labels);
    CHECK(r.loss == doctest::Approx(std::log(3.0)).epsilon(1e-14));
  }
  SUBCASE("confident and correct") {
    const auto r = cross_entropy(Tensor({2, 3}, {800.0, 0.0, 0.0, 0.0, 0.0, 900.0}), labels);
    CHECK(r.loss < 1e-12);
    CHECK(std::isfinite(r.loss));
  }
  SUBCASE("random logits against a direct softmax") {
    const Tensor z = oracle::random_tensor({2, 3}, 44, 3.0);
    const auto r = cross_entropy(z, labels);
    long double want = 0.0L;
    for (std::size_t n = 0; n < 2; ++n) {
      long double den = 0.0L;
      for (std::size_t k = 0; k < 3; ++k) den += std::exp(static_cast<long double>(z[n * 3 + k]));
      want -= std::log(std::exp(static_cast<long double>(z[n * 3 + labels[n]])) / den) / 2.0L;
      for (std::size_t k = 0; k < 3; ++k) {
        const long double pk = std::exp(static_cast<long double>(z[n * 3 + k])) / den;
        const long double gk = (pk - (static_cast<int>(k) == labels[n] ? 1.0L : 0.0L)) / 2.0L;
        CHECK(std::abs(r.grad[n * 3 + k] - static_cast<double>(gk)) < 1e-12);
      }
    }
    CHECK(std::abs(r.loss - static_cast<double>(want)) < 1e-10);
  }
}

TEST_CASE("softmax rows sum to one") {
  Network net = single_layer(Softmax{}, {7});
  const auto& y = net.forward({{"a", oracle::random_tensor({5, 7}, 2, 10.0)}}, false);
  for (std::size_t n = 0; n < 5; ++n) {
    double s = 0.0;
    for (std::size_t k = 0; k < 7; ++k) s += y[n * 7 + k];
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("SGD and the cosine schedule") {
  TrainConfig cfg;
  cfg.epochs = 10;
  CHECK(cosine_lr(cfg, 0) == doctest::Approx(0.01));
  CHECK(cosine_lr(cfg, 5) == doctest::Approx(0.005));
  CHECK(std::abs(cosine_lr(cfg, 10)) < 1e-18);

  SUBCASE("zero gradient and zero decay leave parameters unchanged") {
    Network net = single_layer(Dense{3, 2}, {3});
    init_params(net, 3);
    const auto before = net.state();
    for (auto& p : net.parameters()) p.grad->fill(0.0);
    cfg.weight_decay = 0.0;
    SgdState s;
    for (int e = 0; e < 3; ++e) sgd_step(net, s, cfg, e);
    CHECK(net.state() == before);
  }
  SUBCASE("momentum update against a scalar simulation") {
    // One weight, loss 0.5 * a * w^2; gradient a * w.
    Network net = single_layer(Dense{1, 1}, {1});
    net.load_state({Tensor({1, 1}, 2.0), Tensor({1}, 0.0)});
    cfg.epochs = 100;
    cfg.learning_rate = 0.01;
    const double a = 3.0;
    double w = 2.0, v = 0.0;
    SgdState s;
    for (int step = 0; step < 100; ++step) {
      auto params = net.parameters();
      const double cur = (*params[0].value)[0];
      (*params[0].grad)[0] = a * cur;
      params[1].grad->fill(0.0);
      sgd_step(net, s, cfg, step);
      v = cfg.momentum * v + a * w + cfg.weight_decay * w;
      w -= cosine_lr(cfg, step) * v;
      CHECK((*params[0].value)[0] == doctest::Approx(w).epsilon(1e-12));
    }
  }
  SUBCASE("small steps without momentum decrease a quadratic monotonically") {
    Network net = single_layer(Dense{1, 1}, {1});
    net.load_state({Tensor({1, 1}, 2.0), Tensor({1}, 0.0)});
    cfg.epochs = 100;
    cfg.momentum = 0.0;
    const double a = 3.0;
    double prev = 0.5 * a * 4.0;
    SgdState s;
    for (int step = 0; step < 100; ++step) {
      auto params = net.parameters();
      (*params[0].grad)[0] = a * (*params[0].value)[0];
      params[1].grad->fill(0.0);
      sgd_step(net, s, cfg, step);
      const double w = (*params[0].value)[0];
      CHECK(0.5 * a * w * w < prev);
      prev = 0.5 * a * w * w;
    }
  }
  SUBCASE("invalid configuration") {
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
}

TEST_CASE("training a separable toy reaches a small loss") {
  Network net;
  auto x = net.add_input("x", {2});
  auto h = net.add(Dense{2, 8}, {x});
  h = net.add(ReLU{}, {h});
  net.set_output(net.add(Dense{8, 2}, {h}));
  init_params(net, 1);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  Tensor in({64, 2});
  std::vector<int> y(64);
  for (std::size_t n = 0; n < 64; ++n) {
    y[n] = static_cast<int>(n % 2);
    in[n * 2] = g(rng) * 0.3 + (y[n] ? 2.0 : -2.0);
    in[n * 2 + 1] = g(rng) * 0.3;
  }
  TrainConfig cfg;
  cfg.epochs = 500;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0.0;
  SgdState s;
  double loss = 1.0;
  int step = 0;
  for (; step < 500 && loss >= 0.01; ++step) {
    const auto r = cross_entropy(net.forward({{"x", in}}, true), y);
    loss = r.loss;
    net.backward(r.grad, GradTarget::params);
    sgd_step(net, s, cfg, 0);
  }
  CHECK(loss < 0.01);
}

TEST_CASE("deterministic training trajectory") {
  auto run = [] {
    Network net;
    auto x = net.add_input("x", {2, 4, 4});
    auto c = net.add(Conv2D{2, 3, 3, 3}, {x});
    c = net.add(BatchNorm{3}, {c});
    c = net.add(ReLU{}, {c});
    c = net.add(GlobalAvgPool{}, {c});
    net.set_output(net.add(Dense{3, 3}, {c}));
    init_params(net, 5);
    TrainConfig cfg;
    SgdState s;
    const Tensor in = oracle::random_tensor({6, 2, 4, 4}, 8);
    const std::vector<int> y = {0, 1, 2, 0, 1, 2};
    for (int e = 0; e < 5; ++e) {
      const auto r = cross_entropy(net.forward({{"x", in}}, true), y);
      net.backward(r.grad, GradTarget::params);
      sgd_step(net, s, cfg, e);
    }
    return net.state();
  };
  CHECK(run() == run());
}

TEST_CASE("checkpoint round trip") {
  Network net;
  auto x = net.add_input("x", {1, 3, 3});
  auto c = net.add(Conv2D{1, 2, 3, 3}, {x});
  c = net.add(BatchNorm{2}, {c});
  net.set_output(net.add(GlobalAvgPool{}, {c}));
  init_params(net, 12);
  net.forward({{"x", oracle::random_tensor({4, 1, 3, 3}, 1)}}, true);  // moves running stats
  const auto dir = std::filesystem::temp_directory_path() / "stressnas_ckpt_test";
  std::filesystem::remove_all(dir);
  save_checkpoint(net, dir);

  Network other;
  auto x2 = other.add_input("x", {1, 3, 3});
  auto c2 = other.add(Conv2D{1, 2, 3, 3}, {x2});
  c2 = other.add(BatchNorm{2}, {c2});
  other.set_output(other.add(GlobalAvgPool{}, {c2}));
  load_checkpoint(other, dir);
  CHECK(other.state() == net.state());

  Network wrong = single_layer(Dense{3, 2}, {3});
  CHECK_THROWS(load_checkpoint(wrong, dir));
  std::filesystem::remove_all(dir);
}
