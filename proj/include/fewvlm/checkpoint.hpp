#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "fewvlm/tensor.hpp"
#include "json.hpp"

namespace fewvlm::nn {

// Single-file container: u64 little-endian header length, a JSON header
// {"config": ..., "tensors": [{"name", "shape", "offset", "nbytes"}]}, then
// the raw little-endian f32 tensor data. Offsets are relative to the start
// of the data section.
struct Checkpoint {
  nlohmann::json config;
  std::map<std::string, Tensor<float>> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& config,
                     const std::vector<std::pair<std::string, Tensor<float>>>& tensors);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace fewvlm::nn
