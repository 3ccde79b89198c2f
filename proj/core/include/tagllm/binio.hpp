#pragma once

// Artifact file helpers.
//
// Tensor files are manifest-prefixed: an 8-byte little-endian header length
// H, then H bytes of JSON {"format": "tagllm-f32", "tensors": [{"name",
// "shape", "offset"}...]}, then raw little-endian float32 data, row-major, in
// header order. Offsets are byte offsets from the start of the data section.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace tagllm {

using Json = nlohmann::json;

struct TensorRecord {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> values;
};

void write_tensor_file(const std::filesystem::path& path, std::span<const TensorRecord> tensors);
std::vector<TensorRecord> read_tensor_file(const std::filesystem::path& path);

Json read_json(const std::filesystem::path& path);
// Pretty-printed with a trailing newline; key order is preserved by callers
// that use ordered_json.
void write_json(const std::filesystem::path& path, const Json& value);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace tagllm
