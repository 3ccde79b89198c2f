#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tagllm/backbone.hpp"
#include "tagllm/binio.hpp"
#include "tagllm/tags.hpp"

namespace tagllm {

enum class Tokenization { standard, per_character };
enum class SegmentKind { literal, tag, payload, output };
enum class OutputMode { tokens, numeric };

// Segment text is the literal string, the tag name, or the record field,
// depending on kind. "{key}" placeholders are filled from bindings first and
// then from the record.
struct Segment {
  SegmentKind kind = SegmentKind::literal;
  std::string text;
  Tokenization tokenization = Tokenization::per_character;
  OutputMode mode = OutputMode::tokens;

  static Segment literal(std::string text);
  static Segment tag(std::string name);
  static Segment payload(std::string field, Tokenization t = Tokenization::per_character);
  static Segment output(std::string field, OutputMode mode);
  friend bool operator==(const Segment&, const Segment&) = default;
};

struct Template {
  std::string name;
  std::vector<Segment> segments;
  // Payload fields whose tokens contribute to l_M; defaults to every payload
  // field in the prompt when left empty at construction.
  std::vector<std::string> lm_loss_scope;

  void validate() const;
  const Segment* output_segment() const;
  Json to_json() const;
  static Template from_json(const Json& j);
};

// "{key}" -> value in every segment text and scope entry.
Template instantiate(const Template& tmpl, const std::map<std::string, std::string>& bindings);

// translate, scalar_property, pair_combination, cross_affinity, domain_lm.
std::map<std::string, Template> builtin_templates();
const Template& builtin_template(std::string_view name);

std::vector<std::int32_t> tokenize(std::string_view text, Tokenization mode);

// Fixed-precision decimal text: optional '-', integer digits, '.', exactly
// `precision` digits. Values with magnitude above kMaxDecimal are rejected.
inline constexpr double kMaxDecimal = 1e6;
std::string serialize_decimal(double value, int precision);
std::optional<double> parse_decimal(std::string_view text);

struct RenderOptions {
  // Numeric outputs are appended as decimal text (digit-generation path)
  // instead of becoming a numeric target for a regression head.
  bool numeric_as_digits = false;
  int precision = 2;
  std::size_t max_len = 0;  // 0: unchecked
};

struct RenderedExample {
  std::vector<InputToken> ids;
  // Per position: next base token (or -1), and the two disjoint loss masks.
  std::vector<std::int32_t> next_ids;
  std::vector<float> lm_mask;
  std::vector<float> target_mask;
  std::vector<double> numeric_target;
  std::vector<std::int32_t> output_tokens;  // expected generation, ends with the stop token
  std::size_t prompt_length = 0;            // positions before the first output token
  std::size_t readout_index = 0;
  bool has_function_tag = false;
  Json meta = Json::object();

  std::span<const InputToken> prompt() const { return {ids.data(), prompt_length}; }
};

RenderedExample render(const Template& tmpl, const Json& record, const TagTable& tags,
                       const RenderOptions& options = {});

// Template surgery used by the ablations and baselines. Tag kinds are looked
// up in the table, so placeholders must already be instantiated.
Template without_tags(const Template& tmpl, const TagTable& tags, TagKind kind);
// "<protein>" style literal text in place of each domain tag.
Template with_text_domain_info(const Template& tmpl, const TagTable& tags);
Template with_prefix_tag(const Template& tmpl, std::string tag_name);

}  // namespace tagllm
