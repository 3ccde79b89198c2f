#include "tagllm/vocab.hpp"

#include "tagllm/error.hpp"

namespace tagllm::vocab {

bool contains(char c) { return c == '\n' || (c >= ' ' && c <= '~'); }

std::int32_t id_of(char c) {
  if (c == '\n') return kStop;
  if (c >= ' ' && c <= '~') return static_cast<std::int32_t>(c - ' ') + 1;
  throw Error(ErrorCode::vocabulary,
              "character code " + std::to_string(static_cast<int>(static_cast<unsigned char>(c))) +
                  " is not in the vocabulary");
}

char char_of(std::int32_t id) {
  if (id == kStop) return '\n';
  if (id >= 1 && id < static_cast<std::int32_t>(kSize)) return static_cast<char>(' ' + id - 1);
  throw Error(ErrorCode::vocabulary, "token id " + std::to_string(id) + " has no character");
}

std::vector<std::int32_t> encode(std::string_view text) {
  std::vector<std::int32_t> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(id_of(c));
  return ids;
}

std::string decode(std::span<const std::int32_t> ids) {
  std::string out;
  out.reserve(ids.size());
  for (auto id : ids) out.push_back(char_of(id));
  return out;
}

}  // namespace tagllm::vocab
