#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "stressnas/network.hpp"

namespace stressnas::nn {

struct TrainConfig {
  int epochs = 10;
  std::size_t batch_size = 64;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;

  void validate() const;
};

/// lr0 * 0.5 * (1 + cos(pi * epoch / epochs)); reaches 0 at epoch == epochs.
double cosine_lr(const TrainConfig& cfg, int epoch);

struct LossResult {
  double loss = 0.0;
  Tensor grad;  // d(loss)/d(logits)
};

/// Mean softmax cross-entropy over the batch, stabilised by max subtraction.
LossResult cross_entropy(const Tensor& logits, std::span<const int> labels);

struct SgdState {
  std::vector<Tensor> velocity;
};

/// v <- m v + g + wd theta ; theta <- theta - lr(epoch) v.
void sgd_step(Network& net, SgdState& state, const TrainConfig& cfg, int epoch);

}  // namespace stressnas::nn
