#pragma once

#include <filesystem>
#include <string>

#include "ilcot/net.hpp"
#include "ilcot/rng.hpp"
#include "ilcot/world.hpp"

namespace testing {

// Random trunk and random heads, so outputs depend on every parameter.
inline ilcot::Params<float> random_model(std::uint64_t seed, int d = 32, int layers = 2, int heads = 4) {
  ilcot::ModelConfig cfg;
  cfg.d = d;
  cfg.layers = layers;
  cfg.heads = heads;
  auto p = ilcot::Params<float>::init(cfg, seed);
  ilcot::Rng rng(seed ^ 0xabcdef);
  for (int idx : {p.layout.text_head, p.layout.text_head_b, p.layout.vel_head, p.layout.vel_head_b})
    for (Eigen::Index i = 0; i < p[idx].size(); ++i) p[idx].data()[i] = static_cast<float>(0.5 * rng.normal());
  return p;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("ilcot_test_" + name);
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace testing
