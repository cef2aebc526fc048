#include "stressnas/nas.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "stressnas/error.hpp"
#include "stressnas/parallel.hpp"
#include "stressnas/seed.hpp"

namespace stressnas::nas {

namespace {

constexpr std::string_view kOpNames[kNumOps] = {
    "none", "skip_connect", "conv_1x1", "conv_3x3", "avg_pool_3x3"};

using nn::NodeId;

// ReLU -> Conv(k x k, stride 1, same) -> BN, C -> C.
NodeId add_relu_conv_bn(nn::Network& net, NodeId in, std::size_t c_in,
                        std::size_t c_out, std::size_t k, std::size_t stride,
                        const std::string& prefix) {
  auto r = net.add(nn::ReLU{}, {in}, prefix + "/relu");
  auto cv = net.add(nn::Conv2D{c_in, c_out, k, k, stride, nn::Padding::same, false},
                    {r}, prefix + "/conv");
  return net.add(nn::BatchNorm{c_out}, {cv}, prefix + "/bn");
}

// Residual reduction block: stride-2 ReLU-conv-BN, ReLU-conv-BN, plus a
// stride-2 1x1 projection on the shortcut.
NodeId add_reduction(nn::Network& net, NodeId in, std::size_t c_in,
                     std::size_t c_out, const std::string& prefix) {
  auto a = add_relu_conv_bn(net, in, c_in, c_out, 3, 2, prefix + "/a");
  auto b = add_relu_conv_bn(net, a, c_out, c_out, 3, 1, prefix + "/b");
  auto sc = net.add(nn::Conv2D{c_in, c_out, 1, 1, 2, nn::Padding::valid, false},
                    {in}, prefix + "/shortcut");
  return net.add(nn::Add{}, {b, sc}, prefix + "/sum");
}

}  // namespace

std::string_view op_name(Op op) { return kOpNames[static_cast<std::size_t>(op)]; }

Op parse_op(std::string_view name) {
  for (std::size_t i = 0; i < kNumOps; ++i)
    if (kOpNames[i] == name) return static_cast<Op>(i);
  throw ConfigError("unknown operation '" + std::string(name) + "'");
}

std::size_t CellSpace::n_edges() const {
  return static_cast<std::size_t>(n_nodes * (n_nodes - 1) / 2);
}

std::size_t CellSpace::size() const {
  std::size_t s = 1;
  for (std::size_t e = 0; e < n_edges(); ++e) s *= kNumOps;
  return s;
}

std::vector<Edge> CellSpace::edges() const {
  std::vector<Edge> out;
  for (int to = 1; to < n_nodes; ++to)
    for (int from = 0; from < to; ++from) out.push_back({from, to});
  return out;
}

Genotype::Genotype(std::vector<Op> ops) : ops_(std::move(ops)) {
  if (ops_.size() != CellSpace::full().n_edges() &&
      ops_.size() != CellSpace::reduced().n_edges())
    throw ConfigError("genotype must have 3 or 6 edges, got " +
                      std::to_string(ops_.size()));
  for (auto op : ops_)
    if (static_cast<std::size_t>(op) >= kNumOps)
      throw ConfigError("genotype operation out of range");
}

CellSpace Genotype::space() const {
  return ops_.size() == CellSpace::full().n_edges() ? CellSpace::full()
                                                    : CellSpace::reduced();
}

std::string Genotype::to_string() const {
  const auto edges = space().edges();
  std::string s;
  int current = 0;
  for (std::size_t e = 0; e < edges.size(); ++e) {
    if (edges[e].to != current) {
      if (current != 0) s += "+";
      s += "|";
      current = edges[e].to;
    }
    s += std::string(op_name(ops_[e])) + "~" + std::to_string(edges[e].from) + "|";
  }
  return s;
}

Genotype Genotype::parse(std::string_view text) {
  std::vector<Op> ops;
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] == '|' || text[i] == '+') {
      ++i;
      continue;
    }
    const auto end = text.find('|', i);
    const auto token = text.substr(i, end == std::string_view::npos ? end : end - i);
    const auto tilde = token.find('~');
    if (tilde == std::string_view::npos)
      throw ConfigError("malformed genotype token '" + std::string(token) + "'");
    ops.push_back(parse_op(token.substr(0, tilde)));
    i = end == std::string_view::npos ? text.size() : end;
  }
  Genotype g(std::move(ops));
  if (g.to_string() != text)
    throw ConfigError("malformed genotype '" + std::string(text) + "'");
  return g;
}

std::size_t encode(const Genotype& g) {
  std::size_t index = 0;
  for (auto op : g.ops()) index = index * kNumOps + static_cast<std::size_t>(op);
  return index;
}

Genotype decode(std::size_t index, const CellSpace& space) {
  if (index >= space.size())
    throw ConfigError("genotype index " + std::to_string(index) +
                      " outside space of " + std::to_string(space.size()));
  std::vector<Op> ops(space.n_edges());
  for (std::size_t e = ops.size(); e-- > 0;) {
    ops[e] = static_cast<Op>(index % kNumOps);
    index /= kNumOps;
  }
  return Genotype(std::move(ops));
}

std::vector<Genotype> sample_genotypes(std::size_t n, std::uint64_t seed,
                                       const CellSpace& space) {
  const std::size_t total = space.size();
  if (n > total)
    throw ConfigError("cannot draw " + std::to_string(n) + " distinct genotypes from " +
                      std::to_string(total));
  std::vector<std::size_t> pool(total);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::vector<Genotype> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, total - 1);
    std::swap(pool[i], pool[pick(rng)]);
    out.push_back(decode(pool[i], space));
  }
  return out;
}

void MacroConfig::validate() const {
  if (channels < 1) throw ConfigError("macro channels must be >= 1");
  if (cells_per_stage < 1) throw ConfigError("cells_per_stage must be >= 1");
}

NodeId add_cell(nn::Network& net, NodeId input, const Genotype& g,
                std::size_t channels, const std::string& prefix) {
  const auto space = g.space();
  std::vector<NodeId> nodes{input};
  std::size_t e = 0;
  for (int to = 1; to < space.n_nodes; ++to) {
    std::vector<NodeId> terms;
    NodeId zero_source = nodes[0];
    for (int from = 0; from < to; ++from, ++e) {
      const NodeId src = nodes[static_cast<std::size_t>(from)];
      const std::string tag = prefix + "/e" + std::to_string(from) + std::to_string(to);
      switch (g.ops()[e]) {
        case Op::none:
          zero_source = src;
          break;
        case Op::skip_connect:
          terms.push_back(src);
          break;
        case Op::conv_1x1:
          terms.push_back(add_relu_conv_bn(net, src, channels, channels, 1, 1, tag));
          break;
        case Op::conv_3x3:
          terms.push_back(add_relu_conv_bn(net, src, channels, channels, 3, 1, tag));
          break;
        case Op::avg_pool_3x3:
          terms.push_back(net.add(nn::AvgPool{3, 1, 1}, {src}, tag + "/pool"));
          break;
      }
    }
    // "none" edges contribute exact zeros; a node fed only by them is a Zeroize.
    const std::string node_tag = prefix + "/n" + std::to_string(to);
    if (terms.empty())
      nodes.push_back(net.add(nn::Zeroize{}, {zero_source}, node_tag + "/zero"));
    else if (terms.size() == 1)
      nodes.push_back(terms[0]);
    else
      nodes.push_back(net.add(nn::Add{}, terms, node_tag + "/sum"));
  }
  return nodes.back();
}

NodeId add_cell_backbone(nn::Network& net, NodeId input, const Genotype& g,
                         const MacroConfig& macro, const std::string& prefix) {
  macro.validate();
  const auto& in_shape = net.node(input).shape;
  if (in_shape.size() != 3) throw ConfigError("cell backbone expects (C, H, W) input");
  std::size_t c = macro.channels;
  auto stem = net.add(nn::Conv2D{in_shape[0], c, 3, 3, 1, nn::Padding::same, false},
                      {input}, prefix + "/stem/conv");
  NodeId x = net.add(nn::BatchNorm{c}, {stem}, prefix + "/stem/bn");
  for (int stage = 0; stage < 3; ++stage) {
    if (stage > 0) {
      x = add_reduction(net, x, c, 2 * c, prefix + "/reduce" + std::to_string(stage));
      c *= 2;
    }
    for (std::size_t k = 0; k < macro.cells_per_stage; ++k)
      x = add_cell(net, x, g, c,
                   prefix + "/s" + std::to_string(stage) + "c" + std::to_string(k));
  }
  x = net.add(nn::BatchNorm{c}, {x}, prefix + "/last/bn");
  x = net.add(nn::ReLU{}, {x}, prefix + "/last/relu");
  return net.add(nn::GlobalAvgPool{}, {x}, prefix + "/gap");
}

nn::Network instantiate(const Genotype& g, const MacroConfig& macro,
                        const nn::Shape& input_shape, const Head& head) {
  nn::Network net;
  auto x = net.add_input("x", input_shape);
  auto features = add_cell_backbone(net, x, g, macro, "cell");
  if (const auto* cls = std::get_if<ClassifierHead>(&head)) {
    auto logits = net.add(nn::Dense{macro.feature_dim(), cls->n_classes}, {features},
                          "classifier");
    net.set_output(logits);
    net.set_probabilities(net.add(nn::Softmax{}, {logits}, "softmax"));
  } else {
    net.set_output(features);
  }
  net.validate();
  return net;
}

void ScoreConfig::validate() const {
  if (batch_size < 2) throw ConfigError("score batch size must be >= 2");
  if (!(eps > 0.0)) throw ConfigError("score eps must be positive");
}

ScoreResult score_from_correlation(std::span<const double> corr, std::size_t n,
                                   double eps) {
  if (corr.size() != n * n) throw DataError("correlation matrix size mismatch");
  Eigen::Map<const Eigen::MatrixXd> m(corr.data(), static_cast<Eigen::Index>(n),
                                      static_cast<Eigen::Index>(n));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m, Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success)
    throw NumericalError("eigen-solver failed to converge on the correlation matrix");
  ScoreResult r;
  r.eigenvalues.assign(solver.eigenvalues().data(), solver.eigenvalues().data() + n);
  double s = 0.0;
  for (double lambda : r.eigenvalues) {
    const double v = lambda + eps;
    s -= std::log(v) + 1.0 / v;
  }
  if (!std::isfinite(s)) throw NumericalError("non-finite architecture score");
  r.score = s;
  return r;
}

ScoreResult score_from_jacobian(std::span<const double> rows, std::size_t n,
                                std::size_t dim, double eps) {
  if (rows.size() != n * dim) throw DataError("jacobian size mismatch");
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  RowMat j = Eigen::Map<const RowMat>(rows.data(), static_cast<Eigen::Index>(n),
                                      static_cast<Eigen::Index>(dim));
  j.colwise() -= j.rowwise().mean();
  const Eigen::MatrixXd c = j * j.transpose();
  const Eigen::VectorXd diag = c.diagonal();
  if ((diag.array() < kDegenerateRowNorm).any())
    return {-std::numeric_limits<double>::infinity(), true, {}};
  const Eigen::VectorXd inv = diag.array().sqrt().inverse();
  const Eigen::MatrixXd m = inv.asDiagonal() * c * inv.asDiagonal();
  return score_from_correlation(std::span<const double>(m.data(), n * n), n, eps);
}

std::vector<double> input_jacobian(nn::Network& net, const nn::TensorMap& batch,
                                   std::size_t* dim) {
  const auto& logits = net.forward(batch, /*training=*/false);
  const auto grads = net.backward(nn::Tensor(logits.shape(), 1.0), nn::GradTarget::inputs);
  const std::size_t n = logits.dim(0);
  std::size_t d = 0;
  for (const auto& [name, g] : grads) d += g.row_size();
  std::vector<double> rows(n * d);
  std::size_t offset = 0;
  for (const auto& [name, g] : grads) {
    const auto part = g.row_size();
    for (std::size_t s = 0; s < n; ++s)
      std::copy_n(g.data() + s * part, part, rows.data() + s * d + offset);
    offset += part;
  }
  if (dim) *dim = d;
  return rows;
}

ScoreResult naswot_score(nn::Network& net, const nn::TensorMap& batch,
                         const ScoreConfig& cfg) {
  cfg.validate();
  std::size_t dim = 0;
  const auto rows = input_jacobian(net, batch, &dim);
  const std::size_t n = dim == 0 ? 0 : rows.size() / dim;
  if (n < 2) throw DataError("score needs at least two samples");
  return score_from_jacobian(rows, n, dim, cfg.eps);
}

std::vector<ScoredCandidate> rank_candidates(std::vector<ScoredCandidate> scored,
                                             std::size_t k) {
  std::sort(scored.begin(), scored.end(),
            [](const ScoredCandidate& a, const ScoredCandidate& b) {
              if (a.degenerate != b.degenerate) return !a.degenerate;
              if (!a.degenerate && a.score != b.score) return a.score > b.score;
              return a.index < b.index;
            });
  if (k < scored.size()) scored.resize(k);
  return scored;
}

std::vector<ScoredCandidate> search(const SearchRequest& req,
                                    const nn::Tensor& batch) {
  req.macro.validate();
  req.score.validate();
  if (batch.rank() != 4) throw DataError("search batch must be (N, C, H, W)");
  const auto genotypes =
      sample_genotypes(req.n_candidates, derive_seed(req.seed, -1, "sample"), req.space);
  const nn::Shape sample_shape(batch.shape().begin() + 1, batch.shape().end());
  const nn::TensorMap inputs{{"x", batch}};

  std::vector<ScoredCandidate> scored(genotypes.size());
  parallel_for(genotypes.size(), req.threads, [&](std::size_t i) {
    ScoredCandidate c;
    c.genotype = genotypes[i];
    c.index = encode(c.genotype);
    c.init_seed = derive_seed(req.seed, c.index);
    c.batch_id = req.score.seed;
    auto net = instantiate(c.genotype, req.macro, sample_shape,
                           ClassifierHead{req.n_classes});
    nn::init_params(net, c.init_seed);
    const auto r = naswot_score(net, inputs, req.score);
    c.score = r.score;
    c.degenerate = r.degenerate;
    scored[i] = std::move(c);
  });
  const auto n = scored.size();
  return rank_candidates(std::move(scored), n);
}

}  // namespace stressnas::nas
