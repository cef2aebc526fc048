#include "stressnas/network.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "stressnas/error.hpp"

namespace stressnas::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using MapVec = Eigen::Map<Eigen::VectorXd>;
using ConstMapVec = Eigen::Map<const Eigen::VectorXd>;

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

struct ConvGeometry {
  std::size_t in_ch, height, width;
  std::size_t kh, kw, stride, pad_h, pad_w;
  std::size_t out_h, out_w;

  std::size_t patch() const { return in_ch * kh * kw; }
  std::size_t positions() const { return out_h * out_w; }
  bool is_pointwise() const {
    return kh == 1 && kw == 1 && stride == 1 && pad_h == 0 && pad_w == 0;
  }
};

ConvGeometry conv_geometry(const Conv2D& c, const Shape& in) {
  ConvGeometry g{};
  g.in_ch = in[0];
  g.height = in[1];
  g.width = in[2];
  g.kh = c.kernel_h;
  g.kw = c.kernel_w;
  g.stride = c.stride;
  g.pad_h = c.padding == Padding::same ? (c.kernel_h - 1) / 2 : 0;
  g.pad_w = c.padding == Padding::same ? (c.kernel_w - 1) / 2 : 0;
  const auto span_h = g.height + 2 * g.pad_h;
  const auto span_w = g.width + 2 * g.pad_w;
  g.out_h = span_h >= g.kh ? (span_h - g.kh) / g.stride + 1 : 0;
  g.out_w = span_w >= g.kw ? (span_w - g.kw) / g.stride + 1 : 0;
  return g;
}

void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const std::size_t p = g.positions();
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    const double* xc = x + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* row = cols + ((c * g.kh + ki) * g.kw + kj) * p;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.pad_h);
          double* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          const double* src = xc + static_cast<std::size_t>(ih) * g.width;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.pad_w);
            dst[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.width))
                          ? 0.0
                          : src[iw];
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* dx) {
  const std::size_t p = g.positions();
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    double* dxc = dx + c * g.height * g.width;
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* row = cols + ((c * g.kh + ki) * g.kw + kj) * p;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.pad_h);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) continue;
          double* dst = dxc + static_cast<std::size_t>(ih) * g.width;
          const double* src = row + oh * g.out_w;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.pad_w);
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.width))
              dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

Shape with_batch(std::size_t batch, const Shape& sample) {
  Shape s{batch};
  s.insert(s.end(), sample.begin(), sample.end());
  return s;
}

void accumulate(Tensor& dst, Tensor&& src) {
  if (dst.empty()) {
    dst = std::move(src);
    return;
  }
  auto d = dst.values();
  auto s = src.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// Spatial size per channel for batchnorm: 1 for (C), H*W for (C, H, W).
std::size_t per_channel_extent(const Shape& sample) {
  std::size_t p = 1;
  for (std::size_t i = 1; i < sample.size(); ++i) p *= sample[i];
  return p;
}

std::string param_name(const Node& n, std::size_t i) {
  const bool norm = std::holds_alternative<BatchNorm>(n.spec);
  const char* suffix = norm ? (i == 0 ? "gamma" : "beta") : (i == 0 ? "weight" : "bias");
  return n.name + "." + suffix;
}

}  // namespace

std::string_view layer_kind(const LayerSpec& spec) {
  return std::visit(
      overloaded{[](const InputSpec&) { return std::string_view("Input"); },
                 [](const Dense&) { return std::string_view("Dense"); },
                 [](const Conv2D&) { return std::string_view("Conv2D"); },
                 [](const BatchNorm&) { return std::string_view("BatchNorm"); },
                 [](const ReLU&) { return std::string_view("ReLU"); },
                 [](const AvgPool&) { return std::string_view("AvgPool"); },
                 [](const GlobalAvgPool&) { return std::string_view("GlobalAvgPool"); },
                 [](const Softmax&) { return std::string_view("Softmax"); },
                 [](const Add&) { return std::string_view("Add"); },
                 [](const Concat&) { return std::string_view("Concat"); },
                 [](const Zeroize&) { return std::string_view("Zeroize"); }},
      spec);
}

NodeId Network::add_input(std::string name, Shape sample_shape) {
  if (sample_shape.empty() || sample_shape.size() > 3)
    throw ConfigError("input '" + name + "' must have rank 1 to 3 per sample");
  for (auto id : inputs_)
    if (nodes_[id].name == name)
      throw ConfigError("duplicate input name '" + name + "'");
  Node n;
  n.spec = InputSpec{name};
  n.shape = std::move(sample_shape);
  n.name = std::move(name);
  nodes_.push_back(std::move(n));
  inputs_.push_back(nodes_.size() - 1);
  has_cache_ = false;
  return nodes_.size() - 1;
}

NodeId Network::add(LayerSpec spec, std::vector<NodeId> inputs,
                    std::string name) {
  const NodeId id = nodes_.size();
  if (name.empty()) name = std::string(layer_kind(spec)) + "_" + std::to_string(id);
  auto fail = [&](const std::string& why) {
    return ConfigError("node '" + name + "' (" + std::string(layer_kind(spec)) +
                       "): " + why);
  };
  if (std::holds_alternative<InputSpec>(spec))
    throw fail("use add_input for graph inputs");
  if (inputs.empty()) throw fail("no inputs");
  for (auto in : inputs)
    if (in >= id) throw fail("input id " + std::to_string(in) + " does not exist");
  const bool variadic =
      std::holds_alternative<Add>(spec) || std::holds_alternative<Concat>(spec);
  if (!variadic && inputs.size() != 1) throw fail("expects exactly one input");

  const Shape& in0 = nodes_[inputs[0]].shape;
  Node n;
  n.inputs = inputs;
  n.name = name;

  std::visit(
      overloaded{
          [&](const InputSpec&) {},
          [&](const Dense& d) {
            if (in0.size() != 1 || in0[0] != d.in)
              throw fail("expects flat input of " + std::to_string(d.in) +
                         ", got " + to_string(in0));
            if (d.out == 0) throw fail("zero output width");
            n.shape = {d.out};
            n.params = {Tensor({d.out, d.in}), Tensor({d.out})};
          },
          [&](const Conv2D& c) {
            if (in0.size() != 3 || in0[0] != c.in_ch)
              throw fail("expects (" + std::to_string(c.in_ch) +
                         ", H, W) input, got " + to_string(in0));
            if (c.kernel_h == 0 || c.kernel_w == 0 || c.stride == 0 || c.out_ch == 0)
              throw fail("degenerate kernel, stride or channel count");
            const auto g = conv_geometry(c, in0);
            if (g.out_h == 0 || g.out_w == 0)
              throw fail("input " + to_string(in0) + " smaller than kernel");
            n.shape = {c.out_ch, g.out_h, g.out_w};
            n.params = {Tensor({c.out_ch, g.patch()})};
            if (c.bias) n.params.emplace_back(Shape{c.out_ch});
          },
          [&](const BatchNorm& b) {
            if (in0.empty() || in0[0] != b.channels)
              throw fail("expects " + std::to_string(b.channels) +
                         " channels, got " + to_string(in0));
            n.shape = in0;
            n.params = {Tensor({b.channels}, 1.0), Tensor({b.channels})};
            n.buffers = {Tensor({b.channels}), Tensor({b.channels}, 1.0)};
          },
          [&](const ReLU&) { n.shape = in0; },
          [&](const AvgPool& p) {
            if (in0.size() != 3) throw fail("expects (C, H, W) input");
            if (p.kernel == 0 || p.stride == 0 || p.pad >= p.kernel)
              throw fail("invalid pooling window");
            const auto h = in0[1] + 2 * p.pad, w = in0[2] + 2 * p.pad;
            if (h < p.kernel || w < p.kernel) throw fail("input smaller than window");
            n.shape = {in0[0], (h - p.kernel) / p.stride + 1,
                       (w - p.kernel) / p.stride + 1};
          },
          [&](const GlobalAvgPool&) {
            if (in0.size() != 3) throw fail("expects (C, H, W) input");
            n.shape = {in0[0]};
          },
          [&](const Softmax&) {
            if (in0.size() != 1) throw fail("expects flat input");
            n.shape = in0;
          },
          [&](const Add&) {
            for (auto in : inputs)
              if (nodes_[in].shape != in0)
                throw fail("shape mismatch " + to_string(nodes_[in].shape) +
                           " vs " + to_string(in0));
            n.shape = in0;
          },
          [&](const Concat&) {
            std::size_t total = 0;
            for (auto in : inputs) {
              const auto& s = nodes_[in].shape;
              if (s.size() != in0.size() ||
                  !std::equal(s.begin() + 1, s.end(), in0.begin() + 1))
                throw fail("incompatible shape " + to_string(s) + " vs " +
                           to_string(in0));
              total += s[0];
            }
            n.shape = in0;
            n.shape[0] = total;
          },
          [&](const Zeroize&) { n.shape = in0; },
      },
      spec);
  for (const auto& p : n.params) n.grads.emplace_back(p.shape());
  n.spec = std::move(spec);
  nodes_.push_back(std::move(n));
  has_cache_ = false;
  return id;
}

void Network::set_output(NodeId id) {
  if (id >= nodes_.size()) throw ConfigError("output node does not exist");
  output_ = id;
}

void Network::set_probabilities(NodeId id) {
  if (id >= nodes_.size() || !std::holds_alternative<Softmax>(nodes_[id].spec))
    throw ConfigError("probabilities node must be a Softmax");
  probs_ = id;
}

NodeId Network::output() const {
  if (!output_) throw ConfigError("network output not set");
  return *output_;
}

const Shape& Network::input_shape(std::string_view name) const {
  for (auto id : inputs_)
    if (nodes_[id].name == name) return nodes_[id].shape;
  throw ConfigError("no input named '" + std::string(name) + "'");
}

void Network::validate() const {
  const NodeId out = output();
  std::vector<bool> reaches(nodes_.size(), false);
  reaches[out] = true;
  for (NodeId id = out + 1; id-- > 0;)
    if (reaches[id])
      for (auto in : nodes_[id].inputs) reaches[in] = true;
  for (auto id : inputs_)
    if (!reaches[id])
      throw ConfigError("input '" + nodes_[id].name + "' does not reach the output");
  for (const auto& n : nodes_)
    for (std::size_t i = 0; i < n.params.size(); ++i)
      if (n.params[i].shape() != n.grads[i].shape())
        throw ConfigError("parameter shape drift at node '" + n.name + "'");
}

const Tensor& Network::forward(const TensorMap& inputs, bool training) {
  const NodeId out = output();
  outputs_.assign(nodes_.size(), Tensor());
  aux_.assign(nodes_.size(), {});
  has_cache_ = false;
  std::optional<std::size_t> batch;

  for (NodeId id = 0; id < nodes_.size(); ++id) {
    Node& n = nodes_[id];
    Tensor y;
    std::visit(
        overloaded{
            [&](const InputSpec& s) {
              auto it = inputs.find(s.name);
              if (it == inputs.end())
                throw DataError("missing input '" + s.name + "'");
              const Tensor& x = it->second;
              if (x.rank() != n.shape.size() + 1 ||
                  !std::equal(n.shape.begin(), n.shape.end(), x.shape().begin() + 1))
                throw DataError("input '" + s.name + "' expects per-sample shape " +
                                to_string(n.shape) + ", got " + to_string(x.shape()));
              if (batch && *batch != x.dim(0))
                throw DataError("input '" + s.name + "' has inconsistent batch size");
              batch = x.dim(0);
              y = x;
            },
            [&](const Dense& d) {
              const Tensor& x = outputs_[n.inputs[0]];
              const auto b = x.dim(0);
              y = Tensor({b, d.out});
              ConstMapMat X(x.data(), b, d.in);
              ConstMapMat W(n.params[0].data(), d.out, d.in);
              MapMat Y(y.data(), b, d.out);
              Y.noalias() = X * W.transpose();
              Y.rowwise() += ConstMapVec(n.params[1].data(), d.out).transpose();
            },
            [&](const Conv2D& c) {
              const Tensor& x = outputs_[n.inputs[0]];
              const auto b = x.dim(0);
              const auto g = conv_geometry(c, nodes_[n.inputs[0]].shape);
              const auto k = g.patch(), p = g.positions();
              const auto in_stride = x.row_size();
              y = Tensor(with_batch(b, n.shape));
              ConstMapMat W(n.params[0].data(), c.out_ch, k);
              std::vector<double> cols(g.is_pointwise() ? 0 : k * p);
              for (std::size_t s = 0; s < b; ++s) {
                const double* xs = x.data() + s * in_stride;
                if (!g.is_pointwise()) im2col(xs, g, cols.data());
                ConstMapMat X(g.is_pointwise() ? xs : cols.data(), k, p);
                MapMat Y(y.data() + s * c.out_ch * p, c.out_ch, p);
                Y.noalias() = W * X;
                if (c.bias) Y.colwise() += ConstMapVec(n.params[1].data(), c.out_ch);
              }
            },
            [&](const BatchNorm& bn) {
              const Tensor& x = outputs_[n.inputs[0]];
              const auto b = x.dim(0), ch = bn.channels;
              const auto p = per_channel_extent(n.shape);
              const double m = static_cast<double>(b * p);
              y = Tensor(x.shape());
              Tensor xhat(x.shape());
              Tensor inv_std({ch});
              for (std::size_t c = 0; c < ch; ++c) {
                double mean, var;
                if (training) {
                  double sum = 0.0;
                  for (std::size_t s = 0; s < b; ++s)
                    for (std::size_t i = 0; i < p; ++i) sum += x[(s * ch + c) * p + i];
                  mean = sum / m;
                  double ss = 0.0;
                  for (std::size_t s = 0; s < b; ++s)
                    for (std::size_t i = 0; i < p; ++i) {
                      const double d = x[(s * ch + c) * p + i] - mean;
                      ss += d * d;
                    }
                  var = ss / m;
                  const double unbiased = m > 1.0 ? ss / (m - 1.0) : var;
                  n.buffers[0][c] = bn.momentum * n.buffers[0][c] + (1.0 - bn.momentum) * mean;
                  n.buffers[1][c] = bn.momentum * n.buffers[1][c] + (1.0 - bn.momentum) * unbiased;
                } else {
                  mean = n.buffers[0][c];
                  var = n.buffers[1][c];
                }
                const double is = 1.0 / std::sqrt(var + bn.eps);
                inv_std[c] = is;
                const double gamma = n.params[0][c], beta = n.params[1][c];
                for (std::size_t s = 0; s < b; ++s)
                  for (std::size_t i = 0; i < p; ++i) {
                    const auto at = (s * ch + c) * p + i;
                    xhat[at] = (x[at] - mean) * is;
                    y[at] = gamma * xhat[at] + beta;
                  }
              }
              aux_[id] = {std::move(xhat), std::move(inv_std)};
            },
            [&](const ReLU&) {
              const Tensor& x = outputs_[n.inputs[0]];
              y = Tensor(x.shape());
              for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
            },
            [&](const AvgPool& ap) {
              const Tensor& x = outputs_[n.inputs[0]];
              const auto& is = nodes_[n.inputs[0]].shape;
              const auto b = x.dim(0), ch = is[0], h = is[1], w = is[2];
              const auto oh = n.shape[1], ow = n.shape[2];
              y = Tensor(with_batch(b, n.shape));
              for (std::size_t s = 0; s < b; ++s)
                for (std::size_t c = 0; c < ch; ++c) {
                  const double* xc = x.data() + (s * ch + c) * h * w;
                  double* yc = y.data() + (s * ch + c) * oh * ow;
                  for (std::size_t i = 0; i < oh; ++i)
                    for (std::size_t j = 0; j < ow; ++j) {
                      double sum = 0.0;
                      std::size_t count = 0;
                      for (std::size_t ki = 0; ki < ap.kernel; ++ki) {
                        const auto r = static_cast<std::ptrdiff_t>(i * ap.stride + ki) -
                                       static_cast<std::ptrdiff_t>(ap.pad);
                        if (r < 0 || r >= static_cast<std::ptrdiff_t>(h)) continue;
                        for (std::size_t kj = 0; kj < ap.kernel; ++kj) {
                          const auto q = static_cast<std::ptrdiff_t>(j * ap.stride + kj) -
                                         static_cast<std::ptrdiff_t>(ap.pad);
                          if (q < 0 || q >= static_cast<std::ptrdiff_t>(w)) continue;
                          sum += xc[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(q)];
                          ++count;
                        }
                      }
                      yc[i * ow + j] = sum / static_cast<double>(count);
                    }
                }
            },
            [&](const GlobalAvgPool&) {
              const Tensor& x = outputs_[n.inputs[0]];
              const auto& is = nodes_[n.inputs[0]].shape;
              const auto b = x.dim(0), ch = is[0], p = is[1] * is[2];
              y = Tensor({b, ch});
              for (std::size_t s = 0; s < b; ++s)
                for (std::size_t c = 0; c < ch; ++c) {
                  const double* xc = x.data() + (s * ch + c) * p;
                  double sum = 0.0;
                  for (std::size_t i = 0; i < p; ++i) sum += xc[i];
                  y[s * ch + c] = sum / static_cast<double>(p);
                }
            },
            [&](const Softmax&) {
              const Tensor& x = outputs_[n.inputs[0]];
              const auto b = x.dim(0), f = n.shape[0];
              y = Tensor(x.shape());
              for (std::size_t s = 0; s < b; ++s) {
                const double* xs = x.data() + s * f;
                double* ys = y.data() + s * f;
                const double mx = *std::max_element(xs, xs + f);
                double z = 0.0;
                for (std::size_t i = 0; i < f; ++i) z += (ys[i] = std::exp(xs[i] - mx));
                for (std::size_t i = 0; i < f; ++i) ys[i] /= z;
              }
            },
            [&](const Add&) {
              y = outputs_[n.inputs[0]];
              for (std::size_t k = 1; k < n.inputs.size(); ++k) {
                const Tensor& x = outputs_[n.inputs[k]];
                for (std::size_t i = 0; i < y.size(); ++i) y[i] += x[i];
              }
            },
            [&](const Concat&) {
              const auto b = outputs_[n.inputs[0]].dim(0);
              y = Tensor(with_batch(b, n.shape));
              const auto row = y.row_size();
              std::size_t offset = 0;
              for (auto in : n.inputs) {
                const Tensor& x = outputs_[in];
                const auto part = x.row_size();
                for (std::size_t s = 0; s < b; ++s)
                  std::copy_n(x.data() + s * part, part, y.data() + s * row + offset);
                offset += part;
              }
            },
            [&](const Zeroize&) { y = Tensor(outputs_[n.inputs[0]].shape()); },
        },
        n.spec);
    if (!y.all_finite())
      throw NumericalError("non-finite output at node '" + n.name + "'");
    outputs_[id] = std::move(y);
  }
  has_cache_ = true;
  cache_training_ = training;
  return outputs_[out];
}

const Tensor& Network::activation(NodeId id) const {
  if (!has_cache_) throw std::logic_error("no forward pass cached");
  return outputs_.at(id);
}

const Tensor& Network::probabilities() const {
  if (!probs_) throw ConfigError("network has no probabilities node");
  return activation(*probs_);
}

TensorMap Network::backward(const Tensor& upstream, GradTarget target) {
  if (!has_cache_) throw std::logic_error("backward called without a forward pass");
  const NodeId out = output();
  if (upstream.shape() != outputs_[out].shape())
    throw DataError("upstream gradient shape " + to_string(upstream.shape()) +
                    " does not match output " + to_string(outputs_[out].shape()));
  const bool want_params = target != GradTarget::inputs;
  const bool want_inputs = target != GradTarget::params;

  // needs[i]: some gradient the caller asked for flows through node i.
  std::vector<bool> needs(nodes_.size(), false);
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    const Node& n = nodes_[id];
    bool need = std::holds_alternative<InputSpec>(n.spec) ? want_inputs
                                                          : want_params && !n.params.empty();
    for (auto in : n.inputs) need = need || needs[in];
    needs[id] = need;
  }

  if (want_params)
    for (auto& n : nodes_)
      for (auto& g : n.grads) g.fill(0.0);

  std::vector<Tensor> grad(nodes_.size());
  grad[out] = upstream;

  for (NodeId id = out + 1; id-- > 0;) {
    if (grad[id].empty() || !needs[id]) continue;
    Node& n = nodes_[id];
    const Tensor& dy = grad[id];
    const NodeId in0 = n.inputs.empty() ? 0 : n.inputs[0];
    const bool need_dx = !n.inputs.empty() && needs[in0];

    std::visit(
        overloaded{
            [&](const InputSpec&) {},
            [&](const Dense& d) {
              const Tensor& x = outputs_[in0];
              const auto b = x.dim(0);
              ConstMapMat X(x.data(), b, d.in);
              ConstMapMat W(n.params[0].data(), d.out, d.in);
              ConstMapMat dY(dy.data(), b, d.out);
              if (want_params) {
                MapMat(n.grads[0].data(), d.out, d.in).noalias() = dY.transpose() * X;
                // Plain loops: Eigen's vectorised reductions peel by address
                // alignment, which would make the bits depend on the heap.
                double* gb = n.grads[1].data();
                std::fill(gb, gb + d.out, 0.0);
                for (std::size_t r = 0; r < b; ++r)
                  for (std::size_t o = 0; o < d.out; ++o) gb[o] += dy[r * d.out + o];
              }
              if (need_dx) {
                Tensor dx(x.shape());
                MapMat(dx.data(), b, d.in).noalias() = dY * W;
                accumulate(grad[in0], std::move(dx));
              }
            },
            [&](const Conv2D& c) {
              const Tensor& x = outputs_[in0];
              const auto b = x.dim(0);
              const auto g = conv_geometry(c, nodes_[in0].shape);
              const auto k = g.patch(), p = g.positions();
              const auto in_stride = x.row_size();
              ConstMapMat W(n.params[0].data(), c.out_ch, k);
              std::vector<double> cols(g.is_pointwise() ? 0 : k * p);
              std::vector<double> dcols(g.is_pointwise() ? 0 : k * p);
              Tensor dx;
              if (need_dx) dx = Tensor(x.shape());
              for (std::size_t s = 0; s < b; ++s) {
                ConstMapMat dY(dy.data() + s * c.out_ch * p, c.out_ch, p);
                const double* xs = x.data() + s * in_stride;
                if (want_params) {
                  if (!g.is_pointwise()) im2col(xs, g, cols.data());
                  ConstMapMat X(g.is_pointwise() ? xs : cols.data(), k, p);
                  MapMat(n.grads[0].data(), c.out_ch, k).noalias() += dY * X.transpose();
                  if (c.bias) {
                    const double* d0 = dy.data() + s * c.out_ch * p;
                    for (std::size_t o = 0; o < c.out_ch; ++o) {
                      double acc = 0.0;
                      for (std::size_t q = 0; q < p; ++q) acc += d0[o * p + q];
                      n.grads[1][o] += acc;
                    }
                  }
                }
                if (need_dx) {
                  if (g.is_pointwise()) {
                    MapMat(dx.data() + s * in_stride, k, p).noalias() = W.transpose() * dY;
                  } else {
                    MapMat(dcols.data(), k, p).noalias() = W.transpose() * dY;
                    col2im_add(dcols.data(), g, dx.data() + s * in_stride);
                  }
                }
              }
              if (need_dx) accumulate(grad[in0], std::move(dx));
            },
            [&](const BatchNorm& bn) {
              const Tensor& xhat = aux_[id][0];
              const Tensor& inv_std = aux_[id][1];
              const auto b = dy.dim(0), ch = bn.channels;
              const auto p = per_channel_extent(n.shape);
              const double m = static_cast<double>(b * p);
              Tensor dx;
              if (need_dx) dx = Tensor(dy.shape());
              for (std::size_t c = 0; c < ch; ++c) {
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (std::size_t s = 0; s < b; ++s)
                  for (std::size_t i = 0; i < p; ++i) {
                    const auto at = (s * ch + c) * p + i;
                    sum_dy += dy[at];
                    sum_dy_xhat += dy[at] * xhat[at];
                  }
                if (want_params) {
                  n.grads[0][c] = sum_dy_xhat;
                  n.grads[1][c] = sum_dy;
                }
                if (!need_dx) continue;
                const double scale = n.params[0][c] * inv_std[c];
                for (std::size_t s = 0; s < b; ++s)
                  for (std::size_t i = 0; i < p; ++i) {
                    const auto at = (s * ch + c) * p + i;
                    dx[at] = cache_training_
                                 ? scale * (dy[at] - sum_dy / m - xhat[at] * sum_dy_xhat / m)
                                 : scale * dy[at];
                  }
              }
              if (need_dx) accumulate(grad[in0], std::move(dx));
            },
            [&](const ReLU&) {
              if (!need_dx) return;
              const Tensor& y = outputs_[id];
              Tensor dx(dy.shape());
              for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = y[i] > 0.0 ? dy[i] : 0.0;
              accumulate(grad[in0], std::move(dx));
            },
            [&](const AvgPool& ap) {
              if (!need_dx) return;
              const auto& is = nodes_[in0].shape;
              const auto b = dy.dim(0), ch = is[0], h = is[1], w = is[2];
              const auto oh = n.shape[1], ow = n.shape[2];
              Tensor dx(with_batch(b, is));
              for (std::size_t s = 0; s < b; ++s)
                for (std::size_t c = 0; c < ch; ++c) {
                  double* dxc = dx.data() + (s * ch + c) * h * w;
                  const double* dyc = dy.data() + (s * ch + c) * oh * ow;
                  for (std::size_t i = 0; i < oh; ++i)
                    for (std::size_t j = 0; j < ow; ++j) {
                      const auto r0 = static_cast<std::ptrdiff_t>(i * ap.stride) -
                                      static_cast<std::ptrdiff_t>(ap.pad);
                      const auto q0 = static_cast<std::ptrdiff_t>(j * ap.stride) -
                                      static_cast<std::ptrdiff_t>(ap.pad);
                      const auto r_lo = std::max<std::ptrdiff_t>(r0, 0);
                      const auto r_hi = std::min<std::ptrdiff_t>(r0 + static_cast<std::ptrdiff_t>(ap.kernel),
                                                                 static_cast<std::ptrdiff_t>(h));
                      const auto q_lo = std::max<std::ptrdiff_t>(q0, 0);
                      const auto q_hi = std::min<std::ptrdiff_t>(q0 + static_cast<std::ptrdiff_t>(ap.kernel),
                                                                 static_cast<std::ptrdiff_t>(w));
                      const double share =
                          dyc[i * ow + j] / static_cast<double>((r_hi - r_lo) * (q_hi - q_lo));
                      for (auto r = r_lo; r < r_hi; ++r)
                        for (auto q = q_lo; q < q_hi; ++q)
                          dxc[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(q)] += share;
                    }
                }
              accumulate(grad[in0], std::move(dx));
            },
            [&](const GlobalAvgPool&) {
              if (!need_dx) return;
              const auto& is = nodes_[in0].shape;
              const auto b = dy.dim(0), ch = is[0], p = is[1] * is[2];
              Tensor dx(with_batch(b, is));
              for (std::size_t s = 0; s < b; ++s)
                for (std::size_t c = 0; c < ch; ++c) {
                  const double share = dy[s * ch + c] / static_cast<double>(p);
                  std::fill_n(dx.data() + (s * ch + c) * p, p, share);
                }
              accumulate(grad[in0], std::move(dx));
            },
            [&](const Softmax&) {
              if (!need_dx) return;
              const Tensor& y = outputs_[id];
              const auto b = dy.dim(0), f = n.shape[0];
              Tensor dx(dy.shape());
              for (std::size_t s = 0; s < b; ++s) {
                double dot = 0.0;
                for (std::size_t i = 0; i < f; ++i) dot += dy[s * f + i] * y[s * f + i];
                for (std::size_t i = 0; i < f; ++i)
                  dx[s * f + i] = y[s * f + i] * (dy[s * f + i] - dot);
              }
              accumulate(grad[in0], std::move(dx));
            },
            [&](const Add&) {
              for (auto in : n.inputs)
                if (needs[in]) accumulate(grad[in], Tensor(dy));
            },
            [&](const Concat&) {
              const auto b = dy.dim(0);
              const auto row = dy.row_size();
              std::size_t offset = 0;
              for (auto in : n.inputs) {
                const auto part = outputs_[in].row_size();
                if (needs[in]) {
                  Tensor dx(outputs_[in].shape());
                  for (std::size_t s = 0; s < b; ++s)
                    std::copy_n(dy.data() + s * row + offset, part, dx.data() + s * part);
                  accumulate(grad[in], std::move(dx));
                }
                offset += part;
              }
            },
            [&](const Zeroize&) {
              if (need_dx) accumulate(grad[in0], Tensor(outputs_[in0].shape()));
            },
        },
        n.spec);
  }

  TensorMap result;
  if (want_inputs)
    for (auto id : inputs_) {
      Tensor g = grad[id].empty() ? Tensor(outputs_[id].shape()) : std::move(grad[id]);
      result.emplace(nodes_[id].name, std::move(g));
    }
  return result;
}

std::vector<ParamRef> Network::parameters() {
  std::vector<ParamRef> refs;
  for (auto& n : nodes_)
    for (std::size_t i = 0; i < n.params.size(); ++i)
      refs.push_back({param_name(n, i), &n.params[i], &n.grads[i]});
  return refs;
}

std::size_t Network::parameter_count() const {
  std::size_t total = 0;
  for (const auto& n : nodes_)
    for (const auto& p : n.params) total += p.size();
  return total;
}

std::vector<Tensor> Network::state() const {
  std::vector<Tensor> s;
  for (const auto& n : nodes_)
    for (const auto& p : n.params) s.push_back(p);
  for (const auto& n : nodes_)
    for (const auto& b : n.buffers) s.push_back(b);
  return s;
}

std::vector<std::string> Network::state_names() const {
  std::vector<std::string> names;
  for (const auto& n : nodes_)
    for (std::size_t i = 0; i < n.params.size(); ++i) names.push_back(param_name(n, i));
  for (const auto& n : nodes_)
    if (!n.buffers.empty()) {
      names.push_back(n.name + ".running_mean");
      names.push_back(n.name + ".running_var");
    }
  return names;
}

void Network::load_state(const std::vector<Tensor>& state) {
  std::size_t i = 0;
  auto take = [&](Tensor& dst, const std::string& owner) {
    if (i >= state.size() || state[i].shape() != dst.shape())
      throw DataError("state tensor " + std::to_string(i) + " does not fit node '" +
                      owner + "'");
    dst = state[i++];
  };
  for (auto& n : nodes_)
    for (auto& p : n.params) take(p, n.name);
  for (auto& n : nodes_)
    for (auto& b : n.buffers) take(b, n.name);
  if (i != state.size()) throw DataError("state has extra tensors");
  has_cache_ = false;
}

void init_params(Network& net, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Tensor> state = net.state();
  std::size_t slot = 0;
  for (NodeId id = 0; id < net.size(); ++id) {
    const Node& n = net.node(id);
    std::size_t fan_in = 0;
    if (const auto* d = std::get_if<Dense>(&n.spec)) fan_in = d->in;
    if (const auto* c = std::get_if<Conv2D>(&n.spec))
      fan_in = c->in_ch * c->kernel_h * c->kernel_w;
    if (std::holds_alternative<BatchNorm>(n.spec)) {
      state[slot++].fill(1.0);
      state[slot++].fill(0.0);
      continue;
    }
    for (std::size_t i = 0; i < n.params.size(); ++i) {
      Tensor& t = state[slot++];
      if (i == 0 && fan_in > 0) {
        std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
        for (auto& v : t.values()) v = normal(rng);
      } else {
        t.fill(0.0);
      }
    }
  }
  for (NodeId id = 0; id < net.size(); ++id) {
    const Node& n = net.node(id);
    if (n.buffers.empty()) continue;
    state[slot++].fill(0.0);
    state[slot++].fill(1.0);
  }
  net.load_state(state);
}

}  // namespace stressnas::nn
