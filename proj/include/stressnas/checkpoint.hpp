#pragma once

#include <filesystem>

#include "stressnas/network.hpp"

namespace stressnas::nn {

/// Writes every parameter and buffer as raw f64le plus a JSON manifest of
/// names and shapes.
void save_checkpoint(const Network& net, const std::filesystem::path& dir);

/// Loads a checkpoint into a network of identical structure.
void load_checkpoint(Network& net, const std::filesystem::path& dir);

}  // namespace stressnas::nn
