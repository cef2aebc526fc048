#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "stressnas/tensor.hpp"

namespace stressnas::nn {

enum class Padding { same, valid };

struct InputSpec {
  std::string name;
};
struct Dense {
  std::size_t in = 0;
  std::size_t out = 0;
};
struct Conv2D {
  std::size_t in_ch = 0;
  std::size_t out_ch = 0;
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 3;
  std::size_t stride = 1;
  Padding padding = Padding::same;
  bool bias = true;
};
struct BatchNorm {
  std::size_t channels = 0;
  double eps = 1e-5;
  double momentum = 0.9;  // weight kept on the running statistics
};
struct ReLU {};
/// Average over the valid (unpadded) taps only.
struct AvgPool {
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;
};
struct GlobalAvgPool {};
struct Softmax {};
struct Add {};
struct Concat {};
struct Zeroize {};

using LayerSpec = std::variant<InputSpec, Dense, Conv2D, BatchNorm, ReLU,
                               AvgPool, GlobalAvgPool, Softmax, Add, Concat,
                               Zeroize>;

std::string_view layer_kind(const LayerSpec& spec);

using NodeId = std::size_t;
using TensorMap = std::map<std::string, Tensor, std::less<>>;

struct Node {
  LayerSpec spec;
  std::vector<NodeId> inputs;
  Shape shape;  // per-sample output shape
  std::string name;
  std::vector<Tensor> params;
  std::vector<Tensor> grads;
  std::vector<Tensor> buffers;  // batchnorm running mean / variance
};

struct ParamRef {
  std::string name;
  Tensor* value;
  Tensor* grad;
};

enum class GradTarget { all, params, inputs };

/// A DAG of layers. Nodes are appended in topological order; a node may
/// only consume earlier nodes, so the graph is acyclic by construction.
class Network {
 public:
  NodeId add_input(std::string name, Shape sample_shape);
  NodeId add(LayerSpec spec, std::vector<NodeId> inputs, std::string name = {});

  void set_output(NodeId id);
  void set_probabilities(NodeId id);
  NodeId output() const;
  std::optional<NodeId> probabilities_node() const { return probs_; }

  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<NodeId>& input_nodes() const { return inputs_; }
  const Shape& input_shape(std::string_view name) const;
  const Shape& output_shape() const { return node(output()).shape; }

  /// Checks the output is set and every input reaches it.
  void validate() const;

  /// Evaluates every node. Batchnorm uses batch statistics (and updates its
  /// running statistics) when `training`, running statistics otherwise.
  const Tensor& forward(const TensorMap& inputs, bool training);

  /// Reverse pass from d(loss)/d(output). Parameter gradients are
  /// overwritten; the returned map holds d(loss)/d(input) per input name.
  TensorMap backward(const Tensor& upstream,
                     GradTarget target = GradTarget::all);

  /// Cached output of a node from the last forward pass.
  const Tensor& activation(NodeId id) const;
  bool has_cache() const { return has_cache_; }
  /// Softmax output from the last forward pass.
  const Tensor& probabilities() const;

  std::vector<ParamRef> parameters();
  std::size_t parameter_count() const;

  /// Parameters followed by buffers, in node order.
  std::vector<Tensor> state() const;
  void load_state(const std::vector<Tensor>& state);
  /// Names matching state(), e.g. "conv_3.weight".
  std::vector<std::string> state_names() const;

 private:
  std::vector<Node> nodes_;
  std::vector<NodeId> inputs_;
  std::optional<NodeId> output_;
  std::optional<NodeId> probs_;

  std::vector<Tensor> outputs_;
  std::vector<std::vector<Tensor>> aux_;  // per-node backward caches
  bool has_cache_ = false;
  bool cache_training_ = false;
};

/// He-normal weights (std sqrt(2 / fan_in)), zero biases, unit batchnorm
/// scale, zero shift; deterministic per seed.
void init_params(Network& net, std::uint64_t seed);

}  // namespace stressnas::nn
