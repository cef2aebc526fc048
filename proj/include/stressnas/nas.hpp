#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "stressnas/network.hpp"

namespace stressnas::nas {

enum class Op : std::uint8_t {
  none = 0,
  skip_connect = 1,
  conv_1x1 = 2,
  conv_3x3 = 3,
  avg_pool_3x3 = 4,
};
inline constexpr std::size_t kNumOps = 5;

std::string_view op_name(Op op);
Op parse_op(std::string_view name);

struct Edge {
  int from;
  int to;
};

/// A densely connected cell with `n_nodes` nodes (node 0 is the cell input,
/// the last node is the cell output). Edges are ordered by target node, then
/// by source: 0->1, 0->2, 1->2, 0->3, 1->3, 2->3.
struct CellSpace {
  int n_nodes = 4;

  static CellSpace full() { return {4}; }
  static CellSpace reduced() { return {3}; }

  std::size_t n_edges() const;
  std::size_t size() const;  // kNumOps ^ n_edges
  std::vector<Edge> edges() const;

  friend bool operator==(const CellSpace&, const CellSpace&) = default;
};

/// One operation per edge, in CellSpace edge order.
class Genotype {
 public:
  Genotype() = default;
  explicit Genotype(std::vector<Op> ops);

  const std::vector<Op>& ops() const { return ops_; }
  CellSpace space() const;
  /// "|conv_3x3~0|+|none~0|skip_connect~1|+|...|" with one group per node.
  std::string to_string() const;
  static Genotype parse(std::string_view text);

  friend bool operator==(const Genotype&, const Genotype&) = default;

 private:
  std::vector<Op> ops_;
};

/// Base-5 positional code; the first edge is the most significant digit.
std::size_t encode(const Genotype& g);
Genotype decode(std::size_t index, const CellSpace& space);

/// n distinct genotypes drawn uniformly without replacement, in draw order.
std::vector<Genotype> sample_genotypes(std::size_t n, std::uint64_t seed,
                                       const CellSpace& space = CellSpace::full());

struct MacroConfig {
  std::size_t channels = 8;          // stem width C
  std::size_t cells_per_stage = 1;

  void validate() const;
  std::size_t feature_dim() const { return 4 * channels; }
};

struct FeatureHead {};
struct ClassifierHead {
  std::size_t n_classes = 3;
};
using Head = std::variant<FeatureHead, ClassifierHead>;

/// Appends one cell (every op maps C -> C at stride 1) and returns the
/// node holding the cell output.
nn::NodeId add_cell(nn::Network& net, nn::NodeId input, const Genotype& g,
                    std::size_t channels, const std::string& prefix);

/// Appends stem -> cells -> reduction -> cells -> reduction -> cells ->
/// BN-ReLU -> GlobalAvgPool and returns the feature node (4C wide).
nn::NodeId add_cell_backbone(nn::Network& net, nn::NodeId input,
                             const Genotype& g, const MacroConfig& macro,
                             const std::string& prefix);

/// Single-input network for one genotype; input is named "x".
nn::Network instantiate(const Genotype& g, const MacroConfig& macro,
                        const nn::Shape& input_shape, const Head& head);

struct ScoreConfig {
  std::size_t batch_size = 32;
  double eps = 1e-5;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ScoreResult {
  double score = 0.0;
  bool degenerate = false;
  std::vector<double> eigenvalues;  // of the correlation matrix, ascending
};

inline constexpr double kDegenerateRowNorm = 1e-12;

/// -sum_i [log(lambda_i + eps) + 1 / (lambda_i + eps)] over the eigenvalues
/// of a symmetric N x N matrix (row-major).
ScoreResult score_from_correlation(std::span<const double> corr, std::size_t n,
                                   double eps);

/// Centres each Jacobian row, forms C = J J^T, normalises to a correlation
/// matrix and scores it. Rows with C_ii < 1e-12 yield a degenerate result
/// with score -inf.
ScoreResult score_from_jacobian(std::span<const double> rows, std::size_t n,
                                std::size_t dim, double eps);

/// Per-sample gradients of sum(logits) w.r.t. every input, concatenated per
/// sample in input-name order. Batchnorm runs on running statistics so each
/// row depends on its own sample only.
std::vector<double> input_jacobian(nn::Network& net, const nn::TensorMap& batch,
                                   std::size_t* dim = nullptr);

/// Training-free score of a freshly initialised network on one batch.
ScoreResult naswot_score(nn::Network& net, const nn::TensorMap& batch,
                         const ScoreConfig& cfg);

struct ScoredCandidate {
  Genotype genotype;
  std::size_t index = 0;  // encode(genotype)
  double score = 0.0;
  bool degenerate = false;
  std::uint64_t init_seed = 0;
  std::uint64_t batch_id = 0;
};

/// Top-k by descending score; ties by ascending genotype index; degenerate
/// candidates after all finite ones.
std::vector<ScoredCandidate> rank_candidates(std::vector<ScoredCandidate> scored,
                                             std::size_t k);

struct SearchRequest {
  CellSpace space = CellSpace::full();
  std::size_t n_candidates = 10000;
  MacroConfig macro;
  std::size_t n_classes = 3;
  ScoreConfig score;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

/// Samples candidates, scores each on `batch` (input "x") with its own
/// initialisation, and returns every candidate in rank order.
std::vector<ScoredCandidate> search(const SearchRequest& req,
                                    const nn::Tensor& batch);

}  // namespace stressnas::nas
