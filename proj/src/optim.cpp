#include "stressnas/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "stressnas/error.hpp"

namespace stressnas::nn {

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
}

double cosine_lr(const TrainConfig& cfg, int epoch) {
  if (cfg.epochs <= 0) return 0.0;
  return cfg.learning_rate * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) /
                         static_cast<double>(cfg.epochs)));
}

LossResult cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw DataError("cross_entropy expects (batch, classes) logits");
  const auto b = logits.dim(0), c = logits.dim(1);
  if (labels.size() != b) throw DataError("label count does not match batch");
  LossResult r{0.0, Tensor(logits.shape())};
  const double inv_b = 1.0 / static_cast<double>(b);
  for (std::size_t s = 0; s < b; ++s) {
    const int y = labels[s];
    if (y < 0 || static_cast<std::size_t>(y) >= c)
      throw DataError("label " + std::to_string(y) + " out of range");
    const double* z = logits.data() + s * c;
    const double mx = *std::max_element(z, z + c);
    double sum = 0.0;
    for (std::size_t k = 0; k < c; ++k) sum += std::exp(z[k] - mx);
    const double log_sum = std::log(sum) + mx;
    r.loss += (log_sum - z[y]) * inv_b;
    for (std::size_t k = 0; k < c; ++k) {
      const double p = std::exp(z[k] - log_sum);
      r.grad[s * c + k] = (p - (static_cast<int>(k) == y ? 1.0 : 0.0)) * inv_b;
    }
  }
  return r;
}

void sgd_step(Network& net, SgdState& state, const TrainConfig& cfg, int epoch) {
  auto params = net.parameters();
  if (state.velocity.empty())
    for (const auto& p : params) state.velocity.emplace_back(p.value->shape());
  if (state.velocity.size() != params.size())
    throw DataError("optimizer state does not match network");
  const double lr = cosine_lr(cfg, epoch);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].value->values();
    auto g = params[i].grad->values();
    auto v = state.velocity[i].values();
    for (std::size_t k = 0; k < theta.size(); ++k) {
      v[k] = cfg.momentum * v[k] + g[k] + cfg.weight_decay * theta[k];
      theta[k] -= lr * v[k];
    }
  }
}

}  // namespace stressnas::nn
