#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tagllm/backbone.hpp"
#include "tagllm/numerics.hpp"
#include "tagllm/tags.hpp"

namespace tagllm {

enum class HeadKind { regression, classification, generation };
enum class LossKind { mse, cross_entropy };

std::string_view to_string(HeadKind kind);
std::string_view to_string(LossKind kind);

// Linear map from the readout hidden state to d_t outputs. Regression heads
// work in standardized target space: the stored mean/std come from the
// training split and are undone by destandardize().
struct TaskHead {
  std::string name;
  HeadKind kind = HeadKind::regression;
  std::size_t d_t = 1;
  LossKind loss = LossKind::mse;
  Tensor weight;  // d x d_t; undefined for generation heads
  double target_mean = 0.0;
  double target_std = 1.0;

  static TaskHead regression(std::string name, std::size_t embed_dim, std::size_t d_t = 1);
  static TaskHead classification(std::string name, std::size_t embed_dim, std::size_t classes);
  static TaskHead generation(std::string name);

  std::size_t parameter_count() const;
  void fit_standardization(std::span<const double> train_targets);
  double standardize(double y) const { return (y - target_mean) / target_std; }
  double destandardize(double z) const { return z * target_std + target_mean; }
};

// w_t^T h[readout_index] as a 1 x d_t tensor. Classification heads return
// softmax probabilities.
Tensor predict_numeric(const Tensor& hidden, std::size_t readout_index, const TaskHead& head);

// Argmax loop over the base vocabulary; stops after emitting stop_id (which
// is included) or after max_len tokens.
std::vector<std::int32_t> greedy_decode(const Backbone& backbone, const TagTable* tags,
                                        std::span<const InputToken> prompt, std::size_t max_len,
                                        std::int32_t stop_id);
// Same result as calling greedy_decode on each prompt, with all active
// prompts packed into one forward pass per step.
std::vector<std::vector<std::int32_t>> greedy_decode_batch(
    const Backbone& backbone, const TagTable* tags,
    std::span<const std::vector<InputToken>> prompts, std::size_t max_len, std::int32_t stop_id);

struct DigitRoundTrip {
  std::string text;
  std::vector<std::int32_t> tokens;
  double parsed = 0.0;
};
DigitRoundTrip digit_generation_roundtrip(double value, int precision);

struct ParsedNumber {
  double value = 0.0;
  bool failed = false;
};
// Parses generated tokens (a trailing stop token is ignored); unparseable
// text yields `fallback` with failed set.
ParsedNumber parse_generated_number(std::span<const std::int32_t> tokens, double fallback);

// heads.json + heads.bin
void save_heads(const std::filesystem::path& dir, std::span<const TaskHead> heads);
std::vector<TaskHead> load_heads(const std::filesystem::path& dir, std::size_t embed_dim);

}  // namespace tagllm
