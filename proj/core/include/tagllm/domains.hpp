#pragma once

// Synthetic specialized domains with exact label oracles: a toy protein
// alphabet, a toy molecule alphabet with brackets, and a family of eight
// cipher languages that write one shared Markov source text, each in its own
// glyph set.

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tagllm/binio.hpp"
#include "tagllm/rng.hpp"

namespace tagllm {

inline constexpr std::string_view kProteinAlphabet = "ACDEFGHIKLMNPQRSTVWY";
inline constexpr std::string_view kMoleculeAlphabet = "bcfhiklnos()";
inline constexpr std::string_view kCipherAlphabet = "qtuvwxyz";
inline constexpr std::size_t kCipherLanguages = 8;

// First-order Markov source over an ordered alphabet; lengths are uniform in
// [min_len, max_len].
struct DomainSpec {
  std::string name;
  std::string alphabet;
  std::vector<double> initial;
  std::vector<std::vector<double>> transition;
  std::size_t min_len = 1;
  std::size_t max_len = 1;

  void validate() const;
  std::size_t index_of(char c) const;  // throws Error(vocabulary)
  std::vector<double> stationary() const;
  Json to_json() const;
  static DomainSpec from_json(const Json& j);
};

std::string sample_sequence(const DomainSpec& spec, Rng& rng);
std::string sample_sequence(const DomainSpec& spec, Rng& rng, std::size_t min_len,
                            std::size_t max_len);
std::vector<std::string> gen_corpus(const DomainSpec& spec, std::size_t count,
                                    std::uint64_t seed);

DomainSpec protein_domain();
DomainSpec molecule_domain();

// Language i writes sigma_i(x) for base text x; perms[i][k] is the image of
// base symbol k. Language A is the base alphabet itself; the glyph sets of
// the other languages are pairwise disjoint and avoid the protein and
// molecule letters, so every glyph names one (language, symbol) pair.
struct CipherFamily {
  DomainSpec base;
  std::vector<std::string> perms;

  std::size_t size() const { return perms.size(); }
  static std::string language_name(std::size_t i);  // "A", "B", ...
  std::size_t language_index(std::string_view name) const;
  std::string encode(std::size_t lang, std::string_view base_text) const;
  DomainSpec language_domain(std::size_t lang) const;
  std::string translate(std::string_view text, std::size_t src, std::size_t tgt) const;
};

CipherFamily cipher_family();

// ---------------------------------------------------------------- oracles

// Per-character sigma_tgt(sigma_src^-1(x)); src_perm[k] and tgt_perm[k] are
// the two languages' glyphs for base symbol k.
std::string cipher_translate_oracle(std::string_view text, std::string_view src_perm,
                                    std::string_view tgt_perm);
double descriptor_oracle(std::string_view protein);
double qed_oracle(std::string_view molecule);
double combination_oracle(std::string_view mol_a, std::string_view mol_b);
double affinity_oracle(std::string_view protein, std::string_view molecule);

// ---------------------------------------------------------------- tasks

enum class TaskShape {
  single_domain_single_instance,
  single_domain_multi_instance,
  multi_domain_multi_instance,
  translation
};
enum class Metric { mse, mae, pearson, token_accuracy, exact_match };

std::string_view to_string(TaskShape shape);
std::string_view to_string(Metric metric);
Metric metric_from_string(std::string_view text);

struct LabeledTask {
  std::string name;
  TaskShape shape = TaskShape::single_domain_single_instance;
  std::vector<std::string> domains;
  std::string template_name;
  std::string oracle;
  std::size_t d_t = 1;
  Metric metric = Metric::mse;
  // Record fields holding specialized payloads, in template order.
  std::vector<std::string> payload_fields;

  Json to_json() const;
};

// "descriptor", "qed", "combination", "affinity", "translate".
LabeledTask builtin_task(std::string_view name);
std::vector<std::string> builtin_task_names();

// Recomputes a record's label from its raw string fields.
double oracle_label(const LabeledTask& task, const Json& record);

struct DatasetSizes {
  std::size_t train = 1;
  std::size_t val = 1;
  std::size_t test = 1;
};

struct Dataset {
  std::string task;
  std::vector<Json> train, val, test;
};

// Disjoint, deterministic splits with oracle labels. With shift set, test
// records draw protein lengths from a window shifted upward by
// kShiftOffset (affinity only).
inline constexpr std::size_t kShiftOffset = 8;
Dataset build_task_datasets(const LabeledTask& task, DatasetSizes sizes, std::uint64_t seed,
                            bool shift = false);

// Translation records {src_lang, tgt_lang, src_text, tgt_text} for the given
// ordered language pairs, allocated round-robin.
using LanguagePair = std::pair<std::size_t, std::size_t>;
Dataset build_translation_dataset(const CipherFamily& family,
                                  std::span<const LanguagePair> pairs, DatasetSizes sizes,
                                  std::uint64_t seed);

void write_jsonl(const std::filesystem::path& path, std::span<const Json> records);
std::vector<Json> read_jsonl(const std::filesystem::path& path);

// ---------------------------------------------------------------- general corpus

// Literal markers shared between the general corpus and the templates.
inline constexpr std::string_view kPromptIn = "In:";
inline constexpr std::string_view kPromptOut = " Out:";
inline constexpr std::string_view kPairSeparator = ",";
inline constexpr std::string_view kTranslateMarker = "translate:";
std::string language_header(std::size_t lang);  // "<<lang-A>>", 10 characters

// The backbone's pretraining text: prose with decimals, monolingual cipher
// documents headed by a language marker, and translation documents laid out
// exactly like the tagged translation template with text in place of tags,
// and tally documents that count one symbol of a random string.
// Specialized protein/molecule text is deliberately absent.
struct GeneralCorpusConfig {
  std::size_t documents = 20000;
  double prose_weight = 0.4;
  double monolingual_weight = 0.3;
  double translation_weight = 0.3;
  double tally_weight = 0.0;
  std::size_t prose_min_len = 40;
  std::size_t prose_max_len = 140;
  std::uint64_t seed = 0;

  Json to_json() const;
  static GeneralCorpusConfig from_json(const Json& j);
};

std::vector<std::string> gen_general_corpus(const GeneralCorpusConfig& config,
                                            const CipherFamily& family);

// Text plus the terminating stop token.
std::vector<std::int32_t> encode_document(std::string_view text);

}  // namespace tagllm
