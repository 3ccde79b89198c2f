#include "tagllm/templates.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>

#include "tagllm/domains.hpp"
#include "tagllm/error.hpp"
#include "tagllm/vocab.hpp"

namespace tagllm {

Segment Segment::literal(std::string text) {
  return {SegmentKind::literal, std::move(text), Tokenization::standard, OutputMode::tokens};
}
Segment Segment::tag(std::string name) {
  return {SegmentKind::tag, std::move(name), Tokenization::standard, OutputMode::tokens};
}
Segment Segment::payload(std::string field, Tokenization t) {
  return {SegmentKind::payload, std::move(field), t, OutputMode::tokens};
}
Segment Segment::output(std::string field, OutputMode mode) {
  return {SegmentKind::output, std::move(field), Tokenization::per_character, mode};
}

namespace {

std::string_view kind_name(SegmentKind k) {
  switch (k) {
    case SegmentKind::literal: return "literal";
    case SegmentKind::tag: return "tag";
    case SegmentKind::payload: return "payload";
    case SegmentKind::output: return "output";
  }
  return "?";
}

std::string fill_placeholders(std::string_view text,
                              const std::map<std::string, std::string>& bindings,
                              const Json* record) {
  std::string out;
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] != '{') {
      out.push_back(text[i++]);
      continue;
    }
    const auto close = text.find('}', i);
    if (close == std::string_view::npos) {
      throw Error(ErrorCode::config, "unterminated placeholder in '" + std::string(text) + "'");
    }
    const std::string key(text.substr(i + 1, close - i - 1));
    if (auto it = bindings.find(key); it != bindings.end()) {
      out += it->second;
    } else if (record != nullptr && record->contains(key) && (*record)[key].is_string()) {
      out += (*record)[key].get<std::string>();
    } else if (record != nullptr) {
      throw Error(ErrorCode::value, "placeholder {" + key + "} has no binding or record field");
    } else {
      out += std::string(text.substr(i, close - i + 1));
    }
    i = close + 1;
  }
  return out;
}

bool has_placeholder(std::string_view text) { return text.find('{') != std::string_view::npos; }

}  // namespace

void Template::validate() const {
  std::size_t outputs = 0;
  bool output_seen = false;
  for (const auto& s : segments) {
    if (s.text.empty()) {
      throw Error(ErrorCode::config, "template '" + name + "' has an empty " +
                                         std::string(kind_name(s.kind)) + " segment");
    }
    if (s.kind == SegmentKind::output) {
      ++outputs;
      output_seen = true;
    } else if (output_seen) {
      throw Error(ErrorCode::config,
                  "template '" + name + "': the output segment must be the last segment");
    }
  }
  if (outputs > 1) {
    throw Error(ErrorCode::config, "template '" + name + "' has more than one output segment");
  }
}

const Segment* Template::output_segment() const {
  for (const auto& s : segments) {
    if (s.kind == SegmentKind::output) return &s;
  }
  return nullptr;
}

Json Template::to_json() const {
  nlohmann::ordered_json j;
  j["name"] = name;
  j["segments"] = nlohmann::ordered_json::array();
  for (const auto& s : segments) {
    nlohmann::ordered_json e;
    e[std::string(kind_name(s.kind))] = s.text;
    if (s.kind == SegmentKind::payload) {
      e["tokenization"] = s.tokenization == Tokenization::standard ? "standard" : "per_character";
    }
    if (s.kind == SegmentKind::output) {
      e["mode"] = s.mode == OutputMode::tokens ? "tokens" : "numeric";
    }
    j["segments"].push_back(std::move(e));
  }
  j["lm_loss_scope"] = lm_loss_scope;
  return Json::parse(j.dump());
}

Template Template::from_json(const Json& j) {
  Template t;
  try {
    t.name = j.value("name", std::string("custom"));
    for (const auto& e : j.at("segments")) {
      Segment s;
      if (e.contains("literal")) {
        s = Segment::literal(e.at("literal").get<std::string>());
      } else if (e.contains("tag")) {
        s = Segment::tag(e.at("tag").get<std::string>());
      } else if (e.contains("payload")) {
        const auto tok = e.value("tokenization", std::string("per_character"));
        if (tok != "standard" && tok != "per_character") {
          throw Error(ErrorCode::config, "unknown tokenization '" + tok + "'");
        }
        s = Segment::payload(e.at("payload").get<std::string>(),
                             tok == "standard" ? Tokenization::standard
                                               : Tokenization::per_character);
      } else if (e.contains("output")) {
        const auto mode = e.value("mode", std::string("tokens"));
        if (mode != "tokens" && mode != "numeric") {
          throw Error(ErrorCode::config, "unknown output mode '" + mode + "'");
        }
        s = Segment::output(e.at("output").get<std::string>(),
                            mode == "tokens" ? OutputMode::tokens : OutputMode::numeric);
      } else {
        throw Error(ErrorCode::config, "template segment without a known kind: " + e.dump());
      }
      t.segments.push_back(std::move(s));
    }
    if (j.contains("lm_loss_scope")) {
      t.lm_loss_scope = j.at("lm_loss_scope").get<std::vector<std::string>>();
    } else {
      for (const auto& s : t.segments) {
        if (s.kind == SegmentKind::payload) t.lm_loss_scope.push_back(s.text);
      }
    }
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::format, std::string("template: ") + e.what());
  }
  t.validate();
  return t;
}

Template instantiate(const Template& tmpl, const std::map<std::string, std::string>& bindings) {
  Template out = tmpl;
  for (auto& s : out.segments) s.text = fill_placeholders(s.text, bindings, nullptr);
  for (auto& f : out.lm_loss_scope) f = fill_placeholders(f, bindings, nullptr);
  return out;
}

std::map<std::string, Template> builtin_templates() {
  using S = Segment;
  const std::string in(kPromptIn), out(kPromptOut), sep(kPairSeparator);
  std::map<std::string, Template> t;
  t["translate"] = {"translate",
                    {S::literal(in), S::tag("lang-{src_lang}"), S::payload("src_text"),
                     S::literal(out), S::tag("lang-{tgt_lang}"), S::tag("{function}"),
                     S::output("tgt_text", OutputMode::tokens)},
                    {"src_text"}};
  t["scalar_property"] = {"scalar_property",
                          {S::literal(in), S::tag("{domain}"), S::payload("{x}"),
                           S::literal(out), S::tag("{function}"),
                           S::output("label", OutputMode::numeric)},
                          {"{x}"}};
  t["pair_combination"] = {"pair_combination",
                           {S::literal(in), S::tag("{domain}"), S::payload("{a}"),
                            S::literal(sep), S::tag("{domain}"), S::payload("{b}"),
                            S::literal(out), S::tag("{function}"),
                            S::output("label", OutputMode::numeric)},
                           {"{a}", "{b}"}};
  t["cross_affinity"] = {"cross_affinity",
                         {S::literal(in), S::tag("{domain_a}"), S::payload("{a}"),
                          S::literal(sep), S::tag("{domain_b}"), S::payload("{b}"),
                          S::literal(out), S::tag("{function}"),
                          S::output("label", OutputMode::numeric)},
                         {"{a}", "{b}"}};
  t["domain_lm"] = {"domain_lm", {S::tag("{domain}"), S::payload("text")}, {"text"}};
  return t;
}

const Template& builtin_template(std::string_view name) {
  static const auto all = builtin_templates();
  auto it = all.find(std::string(name));
  if (it == all.end()) {
    throw Error(ErrorCode::config, "no builtin template named '" + std::string(name) + "'");
  }
  return it->second;
}

std::vector<std::int32_t> tokenize(std::string_view text, Tokenization) {
  // Both modes are character level over the shared vocabulary.
  return vocab::encode(text);
}

std::string serialize_decimal(double value, int precision) {
  if (!std::isfinite(value) || std::abs(value) > kMaxDecimal) {
    throw Error(ErrorCode::value, "value outside the decimal range");
  }
  if (precision < 0 || precision > 9) throw Error(ErrorCode::value, "precision must be 0..9");
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, value);
  std::string s(buf);
  // "-0.00" carries no sign information at this precision.
  if (s[0] == '-' && s.find_first_not_of("-0.") == std::string::npos) s.erase(0, 1);
  return s;
}

std::optional<double> parse_decimal(std::string_view text) {
  std::size_t i = 0;
  if (i < text.size() && text[i] == '-') ++i;
  const auto int_begin = i;
  while (i < text.size() && text[i] >= '0' && text[i] <= '9') ++i;
  if (i == int_begin) return std::nullopt;
  if (i < text.size()) {
    if (text[i] != '.') return std::nullopt;
    ++i;
    const auto frac_begin = i;
    while (i < text.size() && text[i] >= '0' && text[i] <= '9') ++i;
    if (i == frac_begin || i != text.size()) return std::nullopt;
  }
  double value = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) return std::nullopt;
  return value;
}

RenderedExample render(const Template& tmpl, const Json& record, const TagTable& tags,
                       const RenderOptions& options) {
  tmpl.validate();
  static const std::map<std::string, std::string> kNoBindings;
  RenderedExample ex;
  std::vector<char> is_scoped_payload;  // per position
  std::vector<char> is_output;
  std::size_t last_function_pos = 0;
  std::size_t payload_end = 0;
  std::vector<std::string> domains;

  auto field_string = [&](const std::string& key) {
    if (!record.contains(key)) {
      throw Error(ErrorCode::value, "record lacks field '" + key + "' for template '" +
                                        tmpl.name + "'");
    }
    const auto& v = record[key];
    if (!v.is_string()) throw Error(ErrorCode::value, "record field '" + key + "' is not text");
    return v.get<std::string>();
  };
  auto push_tokens = [&](const std::vector<std::int32_t>& toks, bool scoped, bool output) {
    for (auto t : toks) {
      ex.ids.push_back(InputToken::token(t));
      is_scoped_payload.push_back(scoped);
      is_output.push_back(output);
    }
  };

  for (const auto& seg : tmpl.segments) {
    const auto key = fill_placeholders(seg.text, kNoBindings, &record);
    switch (seg.kind) {
      case SegmentKind::literal:
        push_tokens(tokenize(key, Tokenization::standard), false, false);
        break;
      case SegmentKind::tag: {
        const auto& spec = tags.get(key);
        const auto id = tags.id_of(key);
        for (std::size_t r = 0; r < spec.length; ++r) {
          ex.ids.push_back(InputToken::tag(id, static_cast<std::int32_t>(r)));
          is_scoped_payload.push_back(false);
          is_output.push_back(false);
        }
        if (spec.kind == TagKind::function) {
          ex.has_function_tag = true;
          last_function_pos = ex.ids.size() - 1;
        } else {
          domains.push_back(spec.name);
        }
        break;
      }
      case SegmentKind::payload: {
        const auto scope = std::find(tmpl.lm_loss_scope.begin(), tmpl.lm_loss_scope.end(),
                                     seg.text) != tmpl.lm_loss_scope.end() ||
                           std::find(tmpl.lm_loss_scope.begin(), tmpl.lm_loss_scope.end(),
                                     key) != tmpl.lm_loss_scope.end();
        push_tokens(tokenize(field_string(key), seg.tokenization), scope, false);
        payload_end = ex.ids.size();
        break;
      }
      case SegmentKind::output: {
        ex.prompt_length = ex.ids.size();
        if (seg.mode == OutputMode::tokens) {
          ex.output_tokens = tokenize(field_string(key), Tokenization::per_character);
        } else {
          if (!record.contains(key)) {
            throw Error(ErrorCode::value, "record lacks numeric field '" + key + "'");
          }
          const auto& v = record[key];
          if (v.is_number()) {
            ex.numeric_target = {v.get<double>()};
          } else if (v.is_array()) {
            ex.numeric_target = v.get<std::vector<double>>();
          } else {
            throw Error(ErrorCode::value, "numeric field '" + key + "' is not a number");
          }
          if (options.numeric_as_digits) {
            if (ex.numeric_target.size() != 1) {
              throw Error(ErrorCode::value, "digit generation needs a scalar target");
            }
            ex.output_tokens = vocab::encode(serialize_decimal(ex.numeric_target[0],
                                                               options.precision));
          }
        }
        if (!ex.output_tokens.empty()) {
          ex.output_tokens.push_back(vocab::kStop);
          // The last output token (the stop) is never an input.
          for (std::size_t i = 0; i + 1 < ex.output_tokens.size(); ++i) {
            ex.ids.push_back(InputToken::token(ex.output_tokens[i]));
            is_scoped_payload.push_back(false);
            is_output.push_back(true);
          }
        }
        break;
      }
    }
  }
  if (tmpl.output_segment() == nullptr) ex.prompt_length = ex.ids.size();
  if (ex.ids.empty()) throw Error(ErrorCode::value, "template rendered an empty sequence");
  if (ex.prompt_length == 0) throw Error(ErrorCode::value, "template has an empty prompt");
  if (options.max_len > 0 && ex.ids.size() > options.max_len) {
    throw Error(ErrorCode::dimension, "rendered example has " + std::to_string(ex.ids.size()) +
                                          " positions, more than context_len " +
                                          std::to_string(options.max_len));
  }

  const auto n = ex.ids.size();
  const auto V = static_cast<std::int32_t>(tags.vocab_size());
  ex.next_ids.assign(n, -1);
  ex.lm_mask.assign(n, 0.0f);
  ex.target_mask.assign(n, 0.0f);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const auto& next = ex.ids[i + 1];
    if (next.id < V) ex.next_ids[i] = next.id;
    if (is_scoped_payload[i + 1]) ex.lm_mask[i] = 1.0f;
    if (is_output[i + 1]) ex.target_mask[i] = 1.0f;
  }
  if (!ex.output_tokens.empty()) {
    // The final input position predicts the stop token.
    ex.next_ids[n - 1] = vocab::kStop;
    ex.target_mask[n - 1] = 1.0f;
    // The position before the first output token predicts it.
    ex.target_mask[ex.prompt_length - 1] = 1.0f;
    ex.next_ids[ex.prompt_length - 1] = ex.output_tokens[0];
  }
  // A function tag placed before the payloads (a soft-prompt prefix) is not a
  // readout position; the last prompt token is used instead.
  const bool tag_readout = ex.has_function_tag && last_function_pos >= payload_end;
  ex.readout_index = tag_readout ? last_function_pos : ex.prompt_length - 1;
  ex.meta = {{"template", tmpl.name}, {"domains", domains}};
  return ex;
}

Template without_tags(const Template& tmpl, const TagTable& tags, TagKind kind) {
  Template out = tmpl;
  out.segments.clear();
  for (const auto& s : tmpl.segments) {
    if (s.kind == SegmentKind::tag && !has_placeholder(s.text) && tags.get(s.text).kind == kind) {
      continue;
    }
    out.segments.push_back(s);
  }
  return out;
}

Template with_text_domain_info(const Template& tmpl, const TagTable& tags) {
  Template out = tmpl;
  for (auto& s : out.segments) {
    if (s.kind == SegmentKind::tag && !has_placeholder(s.text) &&
        tags.get(s.text).kind == TagKind::domain) {
      s = Segment::literal("<" + s.text + ">");
    }
  }
  return out;
}

Template with_prefix_tag(const Template& tmpl, std::string tag_name) {
  Template out = tmpl;
  out.segments.insert(out.segments.begin(), Segment::tag(std::move(tag_name)));
  return out;
}

}  // namespace tagllm
