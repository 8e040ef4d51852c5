#include "fewvlm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "fewvlm/error.hpp"

namespace fewvlm::nn {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& config,
                     const std::vector<std::pair<std::string, Tensor<float>>>& tensors) {
  nlohmann::json header;
  header["config"] = config;
  header["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    const std::size_t nbytes = t.numel() * sizeof(float);
    header["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIoError, "cannot write checkpoint " + path.string());
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : tensors) {
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
  }
  if (!out) fail(ErrorCode::kIoError, "short write on checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIoError, "cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  std::uint64_t len = 0;
  if (bytes.size() < sizeof(len)) fail(ErrorCode::kBadMagic, path.string() + " is too short for a checkpoint");
  std::memcpy(&len, bytes.data(), sizeof(len));
  if (len > bytes.size() - sizeof(len)) fail(ErrorCode::kBadMagic, path.string() + ": bad header length");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(sizeof(len), len));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::kParseError, path.string() + ": checkpoint header: " + e.what());
  }
  const std::size_t data_start = sizeof(len) + len;
  Checkpoint ck;
  ck.config = header.value("config", nlohmann::json::object());
  for (const auto& entry : header.at("tensors")) {
    const auto shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto nbytes = entry.at("nbytes").get<std::size_t>();
    if (nbytes != shape_numel(shape) * sizeof(float) || data_start + offset + nbytes > bytes.size()) {
      fail(ErrorCode::kShapeMismatch, path.string() + ": tensor " + entry.at("name").get<std::string>() +
                                          " does not fit the data section");
    }
    std::vector<float> values(shape_numel(shape));
    std::memcpy(values.data(), bytes.data() + data_start + offset, nbytes);
    ck.tensors.emplace(entry.at("name").get<std::string>(), Tensor<float>::from(shape, std::move(values)));
  }
  return ck;
}

}  // namespace fewvlm::nn
