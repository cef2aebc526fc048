#include "stressnas/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>

#include "stressnas/error.hpp"

namespace stressnas::nn {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

}  // namespace

void save_checkpoint(const Network& net, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto state = net.state();
  const auto names = net.state_names();
  nlohmann::json manifest;
  manifest["dtype"] = "f64le";
  manifest["tensors"] = nlohmann::json::array();
  for (std::size_t i = 0; i < state.size(); ++i) {
    const std::string file = "t" + std::to_string(i) + ".f64";
    std::ofstream out(dir / file, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + (dir / file).string());
    out.write(reinterpret_cast<const char*>(state[i].data()),
              static_cast<std::streamsize>(state[i].size() * sizeof(double)));
    manifest["tensors"].push_back(
        {{"name", names[i]}, {"shape", state[i].shape()}, {"file", file}});
  }
  std::ofstream out(dir / "checkpoint.json", std::ios::trunc);
  out << manifest.dump(2) << "\n";
}

void load_checkpoint(Network& net, const std::filesystem::path& dir) {
  std::ifstream in(dir / "checkpoint.json");
  if (!in) throw DataError("cannot open " + (dir / "checkpoint.json").string());
  nlohmann::json manifest;
  in >> manifest;
  const auto names = net.state_names();
  const auto& entries = manifest.at("tensors");
  if (entries.size() != names.size())
    throw DataError("checkpoint tensor count does not match network");
  std::vector<Tensor> state;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    if (e.at("name").get<std::string>() != names[i])
      throw DataError("checkpoint tensor " + e.at("name").get<std::string>() +
                      " where " + names[i] + " was expected");
    Tensor t(e.at("shape").get<Shape>());
    std::ifstream f(dir / e.at("file").get<std::string>(), std::ios::binary);
    if (!f.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.size() * sizeof(double))))
      throw DataError("truncated checkpoint tensor " + names[i]);
    state.push_back(std::move(t));
  }
  net.load_state(state);
}

}  // namespace stressnas::nn
