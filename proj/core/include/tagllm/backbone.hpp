#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tagllm/binio.hpp"
#include "tagllm/numerics.hpp"
#include "tagllm/rng.hpp"

namespace tagllm {

class TagTable;

// One input position: a base-vocabulary token, or row `row` of a tag whose
// id is >= vocab_size.
struct InputToken {
  std::int32_t id = 0;
  std::int32_t row = 0;

  static InputToken token(std::int32_t id) { return {id, 0}; }
  static InputToken tag(std::int32_t id, std::int32_t row) { return {id, row}; }
  friend bool operator==(const InputToken&, const InputToken&) = default;
};

std::vector<InputToken> as_input(std::span<const std::int32_t> token_ids);

struct BackboneConfig {
  std::size_t vocab_size = 96;
  std::size_t embed_dim = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t context_len = 160;
  std::size_t ff_mult = 4;
  double norm_eps = 1e-5;

  void validate() const;
  Json to_json() const;
  static BackboneConfig from_json(const Json& j);
  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

// Pre-norm decoder-only transformer with learned absolute positions and an
// untied output projection over the base vocabulary only.
class Backbone {
 public:
  struct Output {
    Tensor logits;  // n x V
    Tensor hidden;  // n x d, final-norm output
  };
  struct Packed {
    Tensor embedded;
    std::vector<std::size_t> offsets;  // segment boundaries, 0..N
  };

  Backbone(const BackboneConfig& config, Rng& rng);

  const BackboneConfig& config() const { return config_; }
  std::size_t vocab_size() const { return config_.vocab_size; }
  std::size_t embed_dim() const { return config_.embed_dim; }

  // Row i is the token or tag-row embedding of ids[i] plus position i.
  Tensor embed(std::span<const InputToken> ids, const TagTable* tags = nullptr) const;
  Packed embed_batch(std::span<const std::vector<InputToken>> sequences,
                     const TagTable* tags = nullptr) const;

  Output forward(const Tensor& embedded) const;
  Output forward(const Tensor& embedded, std::span<const std::size_t> offsets) const;
  Tensor hidden_states(const Tensor& embedded, std::span<const std::size_t> offsets) const;
  Tensor project(const Tensor& hidden) const;

  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::size_t parameter_count() const;
  void set_trainable(bool trainable);
  const Tensor& token_embedding() const { return tok_emb_; }

  // SHA-256 over every parameter's name, shape and bytes.
  std::string param_hash() const;

  // Writes config.json + weights.bin into dir.
  void save(const std::filesystem::path& dir) const;
  static Backbone load(const std::filesystem::path& dir);

 private:
  struct Block {
    Tensor ln1_g, ln1_b;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b;
    Tensor w1, b1, w2, b2;
  };

  Backbone() = default;
  void init_parameters(Rng& rng);
  std::vector<std::pair<std::string, Tensor*>> parameter_slots();

  BackboneConfig config_;
  Tensor tok_emb_;
  Tensor pos_emb_;
  std::vector<Block> blocks_;
  Tensor lnf_g_, lnf_b_;
  Tensor out_proj_;
};

struct PretrainConfig {
  std::int64_t steps = 1500;
  std::size_t batch_size = 16;
  double lr = 3e-3;
  double warmup_fraction = 0.03;
  double weight_decay = 0.0;
  double held_out_fraction = 0.05;
  std::int64_t log_every = 50;
  std::uint64_t seed = 0;

  Json to_json() const;
  static PretrainConfig from_json(const Json& j);
};

struct PretrainResult {
  Backbone model;
  double initial_loss = 0;
  double final_train_loss = 0;
  double held_out_loss = 0;
  std::size_t train_docs = 0;
  std::size_t held_out_docs = 0;
  std::vector<std::pair<std::int64_t, double>> curve;
};

// Next-token cross-entropy training on a corpus of token-id documents. The
// last held_out_fraction of documents is held out.
PretrainResult pretrain(std::span<const std::vector<std::int32_t>> corpus,
                        const BackboneConfig& config, const PretrainConfig& train);

// Mean per-token negative log-likelihood of next-token prediction.
double mean_token_nll(const Backbone& model, std::span<const std::vector<std::int32_t>> docs);

}  // namespace tagllm
