#include "tagllm/binio.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "tagllm/error.hpp"

namespace tagllm {

namespace {

static_assert(std::endian::native == std::endian::little,
              "tensor files are written in host order; big-endian hosts are unsupported");

[[noreturn]] void format_error(const std::filesystem::path& path, const std::string& what) {
  throw Error(ErrorCode::format, path.string() + ": " + what);
}

}  // namespace

void write_tensor_file(const std::filesystem::path& path, std::span<const TensorRecord> tensors) {
  Json header;
  header["format"] = "tagllm-f32";
  header["tensors"] = Json::array();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    std::size_t n = 1;
    for (auto e : t.shape) n *= e;
    if (n != t.values.size()) {
      throw Error(ErrorCode::dimension, "tensor '" + t.name + "' shape does not match data");
    }
    header["tensors"].push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    offset += n * sizeof(float);
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot open " + path.string() + " for writing");
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors) {
    out.write(reinterpret_cast<const char*>(t.values.data()),
              static_cast<std::streamsize>(t.values.size() * sizeof(float)));
  }
  if (!out) throw Error(ErrorCode::io, "write failed for " + path.string());
}

std::vector<TensorRecord> read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::missing_artifact, "cannot open " + path.string());
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len == 0 || len > (1ULL << 30)) format_error(path, "bad manifest length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) format_error(path, "truncated manifest");
  Json header;
  try {
    header = Json::parse(text);
  } catch (const Json::exception& e) {
    format_error(path, std::string("manifest is not JSON: ") + e.what());
  }
  if (header.value("format", "") != "tagllm-f32" || !header.contains("tensors")) {
    format_error(path, "unexpected manifest format");
  }
  std::vector<char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<TensorRecord> out;
  for (const auto& entry : header["tensors"]) {
    TensorRecord rec;
    try {
      rec.name = entry.at("name").get<std::string>();
      rec.shape = entry.at("shape").get<std::vector<std::size_t>>();
    } catch (const Json::exception& e) {
      format_error(path, std::string("bad tensor entry: ") + e.what());
    }
    const auto offset = entry.at("offset").get<std::uint64_t>();
    std::size_t n = 1;
    for (auto e : rec.shape) n *= e;
    if (offset + n * sizeof(float) > payload.size()) format_error(path, "tensor data out of range");
    rec.values.resize(n);
    std::memcpy(rec.values.data(), payload.data() + offset, n * sizeof(float));
    out.push_back(std::move(rec));
  }
  return out;
}

Json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::missing_artifact, "cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    format_error(path, std::string("malformed JSON: ") + e.what());
  }
}

void write_json(const std::filesystem::path& path, const Json& value) {
  write_text(path, value.dump(2) + "\n");
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw Error(ErrorCode::io, "write failed for " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::missing_artifact, "cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorCode::state, "sha256 failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) {
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return os.str();
}

std::string sha256_file(const std::filesystem::path& path) {
  const auto text = read_text(path);
  return sha256_hex({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

}  // namespace tagllm
