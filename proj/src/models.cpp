#include "stressnas/models.hpp"

#include <algorithm>
#include <json.hpp>

#include "stressnas/error.hpp"

namespace stressnas::models {

namespace {

constexpr std::string_view kBranchNames[] = {"ACC", "EDA", "BVP", "TEMP", "MIXED"};
constexpr std::string_view kFamilyNames[] = {"MLP", "FCN", "RESNET", "STRESSNAS"};

nn::NodeId add_head(nn::Network& net, std::vector<nn::NodeId> features,
                    std::size_t width, std::size_t n_classes) {
  const auto joined =
      features.size() == 1 ? features[0] : net.add(nn::Concat{}, features, "concat");
  auto logits = net.add(nn::Dense{width, n_classes}, {joined}, "head/fc");
  net.set_output(logits);
  net.set_probabilities(net.add(nn::Softmax{}, {logits}, "head/softmax"));
  return logits;
}

void require_image(const BranchInput& b) {
  if (b.branch == Branch::MIXED || b.shape.size() != 3)
    throw ConfigError("branch " + std::string(branch_name(b.branch)) +
                      " is not a 2D filter-bank input");
}

}  // namespace

std::string_view branch_name(Branch b) { return kBranchNames[static_cast<int>(b)]; }

Branch parse_branch(std::string_view name) {
  for (int i = 0; i < 5; ++i)
    if (kBranchNames[i] == name) return static_cast<Branch>(i);
  throw ConfigError("unknown branch '" + std::string(name) + "'");
}

SensorCombination parse_combination(std::string_view text) {
  SensorCombination c;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('+', start);
    if (end == std::string_view::npos) end = text.size();
    c.push_back(parse_branch(text.substr(start, end - start)));
    start = end + 1;
  }
  std::sort(c.begin(), c.end());
  if (std::adjacent_find(c.begin(), c.end()) != c.end())
    throw ConfigError("duplicate branch in combination '" + std::string(text) + "'");
  return c;
}

std::string to_string(const SensorCombination& c) {
  std::string s;
  for (auto b : c) {
    if (!s.empty()) s += "+";
    s += branch_name(b);
  }
  return s;
}

std::string_view family_name(ModelFamily f) { return kFamilyNames[static_cast<int>(f)]; }

ModelFamily parse_family(std::string_view name) {
  for (int i = 0; i < 4; ++i)
    if (kFamilyNames[i] == name) return static_cast<ModelFamily>(i);
  throw ConfigError("unknown model family '" + std::string(name) + "'");
}

SensorCombination branches_for_row(std::string_view row, ModelFamily family) {
  if (family == ModelFamily::STRESSNAS && row == "ACC+EDA+BVP+TEMP")
    return parse_combination("EDA+BVP+TEMP+MIXED");
  return parse_combination(row);
}

nn::Network build_mlp(std::size_t input_dim, std::size_t n_classes) {
  nn::Network net;
  auto x = net.add_input("flat", {input_dim});
  auto h = net.add(nn::Dense{input_dim, kMlpHidden1}, {x}, "fc1");
  h = net.add(nn::ReLU{}, {h}, "relu1");
  h = net.add(nn::Dense{kMlpHidden1, kMlpHidden2}, {h}, "fc2");
  h = net.add(nn::ReLU{}, {h}, "relu2");
  auto logits = net.add(nn::Dense{kMlpHidden2, n_classes}, {h}, "fc3");
  net.set_output(logits);
  net.set_probabilities(net.add(nn::Softmax{}, {logits}, "softmax"));
  net.validate();
  return net;
}

nn::Network build_fcn(const std::vector<BranchInput>& branches,
                      std::size_t n_classes) {
  if (branches.empty()) throw ConfigError("FCN needs at least one branch");
  nn::Network net;
  std::vector<nn::NodeId> features;
  for (const auto& b : branches) {
    require_image(b);
    const std::string p(branch_name(b.branch));
    nn::NodeId x = net.add_input(p, b.shape);
    std::size_t c_in = b.shape[0];
    for (std::size_t layer = 0; layer < 3; ++layer) {
      const auto c_out = kConvWidths[layer];
      const std::string tag = p + "/conv" + std::to_string(layer + 1);
      x = net.add(nn::Conv2D{c_in, c_out, 3, 3, 1, nn::Padding::same, true}, {x}, tag);
      x = net.add(nn::ReLU{}, {x}, tag + "/relu");
      c_in = c_out;
    }
    features.push_back(net.add(nn::GlobalAvgPool{}, {x}, p + "/gap"));
  }
  add_head(net, features, kConvWidths[2] * branches.size(), n_classes);
  net.validate();
  return net;
}

nn::NodeId add_res_block(nn::Network& net, nn::NodeId in, std::size_t c_in,
                         std::size_t c_out, const std::string& prefix) {
  nn::NodeId x = in;
  std::size_t c = c_in;
  for (int layer = 0; layer < 4; ++layer) {
    const std::string tag = prefix + "/conv" + std::to_string(layer + 1);
    x = net.add(nn::Conv2D{c, c_out, 3, 3, 1, nn::Padding::same, false}, {x}, tag);
    x = net.add(nn::BatchNorm{c_out}, {x}, tag + "/bn");
    if (layer < 3) x = net.add(nn::ReLU{}, {x}, tag + "/relu");
    c = c_out;
  }
  nn::NodeId skip = in;
  if (c_in != c_out)
    skip = net.add(nn::Conv2D{c_in, c_out, 1, 1, 1, nn::Padding::valid, false}, {in},
                   prefix + "/projection");
  auto sum = net.add(nn::Add{}, {x, skip}, prefix + "/sum");
  return net.add(nn::ReLU{}, {sum}, prefix + "/relu");
}

nn::Network build_resnet(const std::vector<BranchInput>& branches,
                         std::size_t n_classes) {
  if (branches.empty()) throw ConfigError("ResNet needs at least one branch");
  nn::Network net;
  std::vector<nn::NodeId> features;
  for (const auto& b : branches) {
    require_image(b);
    const std::string p(branch_name(b.branch));
    nn::NodeId x = net.add_input(p, b.shape);
    std::size_t c_in = b.shape[0];
    for (std::size_t block = 0; block < 3; ++block) {
      x = add_res_block(net, x, c_in, kConvWidths[block],
                        p + "/block" + std::to_string(block + 1));
      c_in = kConvWidths[block];
    }
    features.push_back(net.add(nn::GlobalAvgPool{}, {x}, p + "/gap"));
  }
  add_head(net, features, kConvWidths[2] * branches.size(), n_classes);
  net.validate();
  return net;
}

nn::Network build_stressnas(const std::vector<BranchInput>& branches,
                            const RankedGenotypes& genotypes, std::size_t rank,
                            const nas::MacroConfig& macro, std::size_t n_classes) {
  if (branches.empty()) throw ConfigError("StressNAS needs at least one branch");
  nn::Network net;
  std::vector<nn::NodeId> features;
  std::size_t width = 0;
  for (const auto& b : branches) {
    const std::string p(branch_name(b.branch));
    auto x = net.add_input(p, b.shape);
    if (b.branch == Branch::MIXED) {
      if (b.shape.size() != 1) throw ConfigError("MIXED branch expects a flat vector");
      auto h = net.add(nn::Dense{b.shape[0], kMixedWidth}, {x}, p + "/fc1");
      h = net.add(nn::ReLU{}, {h}, p + "/relu1");
      h = net.add(nn::Dense{kMixedWidth, kMixedWidth}, {h}, p + "/fc2");
      features.push_back(net.add(nn::ReLU{}, {h}, p + "/relu2"));
      width += kMixedWidth;
      continue;
    }
    require_image(b);
    auto it = genotypes.find(b.branch);
    if (it == genotypes.end() || it->second.size() <= rank)
      throw ConfigError("no rank-" + std::to_string(rank) + " genotype for branch " + p);
    features.push_back(nas::add_cell_backbone(net, x, it->second[rank], macro, p));
    width += macro.feature_dim();
  }
  add_head(net, features, width, n_classes);
  net.validate();
  return net;
}

std::string ModelSpec::to_json() const {
  nlohmann::json j;
  j["builder"] = family_name(family);
  j["n_classes"] = n_classes;
  j["rank"] = rank;
  j["macro"] = {{"channels", macro.channels}, {"cells_per_stage", macro.cells_per_stage}};
  j["branches"] = nlohmann::json::array();
  for (const auto& b : branches) {
    nlohmann::json e{{"branch", branch_name(b.branch)}, {"shape", b.shape}};
    if (auto it = genotypes.find(b.branch); it != genotypes.end()) {
      e["genotype"] = it->second.to_string();
      e["genotype_index"] = nas::encode(it->second);
    }
    j["branches"].push_back(std::move(e));
  }
  return j.dump(2);
}

ModelSpec ModelSpec::from_json(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    ModelSpec s;
    s.family = parse_family(j.at("builder").get<std::string>());
    s.n_classes = j.at("n_classes").get<std::size_t>();
    s.rank = j.at("rank").get<std::size_t>();
    s.macro.channels = j.at("macro").at("channels").get<std::size_t>();
    s.macro.cells_per_stage = j.at("macro").at("cells_per_stage").get<std::size_t>();
    for (const auto& e : j.at("branches")) {
      const auto b = parse_branch(e.at("branch").get<std::string>());
      s.branches.push_back({b, e.at("shape").get<nn::Shape>()});
      if (e.contains("genotype"))
        s.genotypes.emplace(b, nas::Genotype::parse(e.at("genotype").get<std::string>()));
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model spec: ") + e.what());
  }
}

nn::Network build(const ModelSpec& spec) {
  switch (spec.family) {
    case ModelFamily::MLP: {
      if (spec.branches.empty()) throw ConfigError("MLP needs at least one branch");
      std::size_t dim = 0;
      for (const auto& b : spec.branches) dim += nn::element_count(b.shape);
      return build_mlp(dim, spec.n_classes);
    }
    case ModelFamily::FCN:
      return build_fcn(spec.branches, spec.n_classes);
    case ModelFamily::RESNET:
      return build_resnet(spec.branches, spec.n_classes);
    case ModelFamily::STRESSNAS: {
      RankedGenotypes ranked;
      for (const auto& [b, g] : spec.genotypes) ranked[b] = {g};
      return build_stressnas(spec.branches, ranked, 0, spec.macro, spec.n_classes);
    }
  }
  throw ConfigError("unknown model family");
}

}  // namespace stressnas::models
