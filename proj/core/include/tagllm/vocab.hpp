#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace tagllm {

// Character vocabulary shared by the backbone and every domain: id 0 is the
// end-of-text/stop token ('\n'), ids 1..95 are printable ASCII ' '..'~'.
namespace vocab {

inline constexpr std::size_t kSize = 96;
inline constexpr std::int32_t kStop = 0;

bool contains(char c);
std::int32_t id_of(char c);  // throws Error(vocabulary)
char char_of(std::int32_t id);
std::vector<std::int32_t> encode(std::string_view text);
std::string decode(std::span<const std::int32_t> ids);

}  // namespace vocab
}  // namespace tagllm
