#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "tagllm/backbone.hpp"
#include "tagllm/numerics.hpp"

namespace tagllm {

enum class TagKind { domain, function };
enum class TagStatus { trainable, frozen };

std::string_view to_string(TagKind kind);
std::string_view to_string(TagStatus status);
TagKind tag_kind_from_string(std::string_view text);
TagStatus tag_status_from_string(std::string_view text);

struct LineageRecord {
  int stage = 0;
  std::string task;
  std::string parent;
  friend bool operator==(const LineageRecord&, const LineageRecord&) = default;
};

struct TagSpec {
  std::string name;
  TagKind kind = TagKind::domain;
  std::size_t length = 0;  // p
  Tensor embedding;        // p x d
  TagStatus status = TagStatus::trainable;
  std::vector<LineageRecord> lineage;
};

struct TagInitReport {
  std::vector<double> mean_embedding;  // v-hat
  double mean_norm = 0;                // average ||v|| over the base table
  double norm_of_mean = 0;             // ||v-hat||
  double scale = 0;                    // mean_norm / norm_of_mean
};

// Registry of appended tag embeddings. Tag i (registration order) has input
// id vocab_size + i; ids never change once assigned.
class TagTable {
 public:
  TagTable(std::size_t vocab_size, std::size_t embed_dim);

  std::size_t vocab_size() const { return vocab_size_; }
  std::size_t embed_dim() const { return embed_dim_; }
  std::size_t size() const { return specs_.size(); }
  bool empty() const { return specs_.empty(); }

  TagSpec& add(TagSpec spec);
  bool contains(std::string_view name) const;
  const TagSpec& get(std::string_view name) const;
  TagSpec& get(std::string_view name);
  std::int32_t id_of(std::string_view name) const;
  const TagSpec& by_id(std::int32_t id) const;
  const std::vector<TagSpec>& specs() const { return specs_; }

  void set_status(std::string_view name, TagStatus status);
  std::vector<std::string> trainable_names() const;
  std::size_t trainable_parameter_count() const;

  // Deep copy: embeddings are not shared with the original.
  TagTable clone() const;

  // tags.json + tags.bin
  void save(const std::filesystem::path& dir) const;
  // Throws Error(dimension) when the stored embed_dim differs from
  // expected_embed_dim.
  static TagTable load(const std::filesystem::path& dir, std::size_t expected_embed_dim);

 private:
  std::size_t vocab_size_;
  std::size_t embed_dim_;
  std::vector<TagSpec> specs_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

// Statistics of the base embedding table used for tag initialization.
TagInitReport mean_embedding_report(const Backbone& backbone);

struct InitResult {
  TagSpec* spec;
  TagInitReport report;
};

// Registers a tag whose p rows all equal the mean base embedding rescaled to
// the mean base-embedding norm. The tag starts trainable.
InitResult init_tag(TagTable& table, const Backbone& backbone, std::string name, TagKind kind,
                    std::size_t length);

// Registers a tag with i.i.d. normal rows (prompt-tuning style random init).
TagSpec& init_random_tag(TagTable& table, std::string name, TagKind kind, std::size_t length,
                         double stddev, Rng& rng);

TagSpec& set_status(TagTable& table, std::string_view name, TagStatus status);

// Creates "<parent>@<task>", a byte-identical trainable copy of a domain tag
// with a stage-2 lineage record; the parent is left untouched.
TagSpec& enrich_fork(TagTable& table, std::string_view parent, std::string_view task);

std::string enriched_name(std::string_view parent, std::string_view task);

}  // namespace tagllm
