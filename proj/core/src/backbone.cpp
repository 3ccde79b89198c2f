#include "tagllm/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <set>

#include "tagllm/error.hpp"
#include "tagllm/tags.hpp"
#include "tagllm/vocab.hpp"

namespace tagllm {

std::vector<InputToken> as_input(std::span<const std::int32_t> token_ids) {
  std::vector<InputToken> out;
  out.reserve(token_ids.size());
  for (auto id : token_ids) out.push_back(InputToken::token(id));
  return out;
}

void BackboneConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::config, msg); };
  if (vocab_size == 0 || embed_dim == 0 || n_layers == 0 || n_heads == 0 || context_len == 0 ||
      ff_mult == 0) {
    fail("backbone sizes must all be positive");
  }
  if (embed_dim % n_heads != 0) {
    fail("embed_dim " + std::to_string(embed_dim) + " is not divisible by n_heads " +
         std::to_string(n_heads));
  }
  if (!(norm_eps > 0)) fail("norm_eps must be positive");
}

Json BackboneConfig::to_json() const {
  return {{"vocab_size", vocab_size}, {"embed_dim", embed_dim}, {"n_layers", n_layers},
          {"n_heads", n_heads},       {"context_len", context_len}, {"ff_mult", ff_mult},
          {"norm_eps", norm_eps}};
}

BackboneConfig BackboneConfig::from_json(const Json& j) {
  BackboneConfig c;
  try {
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.context_len = j.value("context_len", c.context_len);
    c.ff_mult = j.value("ff_mult", c.ff_mult);
    c.norm_eps = j.value("norm_eps", c.norm_eps);
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::config, std::string("backbone config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<float>(rng.normal(0.0, stddev));
  return Tensor::from_data(std::move(shape), std::move(v), true);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return ops::add_bias(ops::matmul(x, w), b);
}

}  // namespace

Backbone::Backbone(const BackboneConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  if (config_.vocab_size < vocab::kSize) {
    throw Error(ErrorCode::config, "vocab_size must cover the " + std::to_string(vocab::kSize) +
                                       "-symbol character vocabulary");
  }
  init_parameters(rng);
}

void Backbone::init_parameters(Rng& rng) {
  const auto V = config_.vocab_size, d = config_.embed_dim, f = d * config_.ff_mult;
  const double std_w = 0.02;
  const double std_res = std_w / std::sqrt(2.0 * static_cast<double>(config_.n_layers));
  tok_emb_ = normal_tensor({V, d}, std_w, rng);
  pos_emb_ = normal_tensor({config_.context_len, d}, std_w, rng);
  blocks_.clear();
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    Block b;
    b.ln1_g = Tensor::full({d}, 1.0f, true);
    b.ln1_b = Tensor::zeros({d}, true);
    b.wq = normal_tensor({d, d}, std_w, rng);
    b.bq = Tensor::zeros({d}, true);
    b.wk = normal_tensor({d, d}, std_w, rng);
    b.bk = Tensor::zeros({d}, true);
    b.wv = normal_tensor({d, d}, std_w, rng);
    b.bv = Tensor::zeros({d}, true);
    b.wo = normal_tensor({d, d}, std_res, rng);
    b.bo = Tensor::zeros({d}, true);
    b.ln2_g = Tensor::full({d}, 1.0f, true);
    b.ln2_b = Tensor::zeros({d}, true);
    b.w1 = normal_tensor({d, f}, std_w, rng);
    b.b1 = Tensor::zeros({f}, true);
    b.w2 = normal_tensor({f, d}, std_res, rng);
    b.b2 = Tensor::zeros({d}, true);
    blocks_.push_back(std::move(b));
  }
  lnf_g_ = Tensor::full({d}, 1.0f, true);
  lnf_b_ = Tensor::zeros({d}, true);
  out_proj_ = normal_tensor({d, V}, std_w, rng);
}

std::vector<std::pair<std::string, Tensor*>> Backbone::parameter_slots() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("tok_emb", &tok_emb_);
  out.emplace_back("pos_emb", &pos_emb_);
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    auto& b = blocks_[l];
    const auto p = "blocks." + std::to_string(l) + ".";
    out.emplace_back(p + "ln1.g", &b.ln1_g);
    out.emplace_back(p + "ln1.b", &b.ln1_b);
    out.emplace_back(p + "attn.wq", &b.wq);
    out.emplace_back(p + "attn.bq", &b.bq);
    out.emplace_back(p + "attn.wk", &b.wk);
    out.emplace_back(p + "attn.bk", &b.bk);
    out.emplace_back(p + "attn.wv", &b.wv);
    out.emplace_back(p + "attn.bv", &b.bv);
    out.emplace_back(p + "attn.wo", &b.wo);
    out.emplace_back(p + "attn.bo", &b.bo);
    out.emplace_back(p + "ln2.g", &b.ln2_g);
    out.emplace_back(p + "ln2.b", &b.ln2_b);
    out.emplace_back(p + "ffn.w1", &b.w1);
    out.emplace_back(p + "ffn.b1", &b.b1);
    out.emplace_back(p + "ffn.w2", &b.w2);
    out.emplace_back(p + "ffn.b2", &b.b2);
  }
  out.emplace_back("lnf.g", &lnf_g_);
  out.emplace_back("lnf.b", &lnf_b_);
  out.emplace_back("out_proj", &out_proj_);
  return out;
}

std::vector<std::pair<std::string, Tensor>> Backbone::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (auto& [name, ptr] : const_cast<Backbone*>(this)->parameter_slots()) {
    out.emplace_back(name, *ptr);
  }
  return out;
}

std::size_t Backbone::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t.numel();
  return n;
}

void Backbone::set_trainable(bool trainable) {
  for (auto& [name, ptr] : parameter_slots()) {
    ptr->set_requires_grad(trainable);
    if (!trainable) ptr->clear_grad();
  }
}

Backbone::Packed Backbone::embed_batch(std::span<const std::vector<InputToken>> sequences,
                                       const TagTable* tags) const {
  if (sequences.empty()) throw Error(ErrorCode::dimension, "embed: empty batch");
  const auto V = static_cast<std::int32_t>(config_.vocab_size);

  // Only tags that occur in the batch join the lookup table, so unused tags
  // receive no gradient at all.
  std::map<std::int32_t, std::int32_t> tag_base;  // tag id -> first row in table
  std::vector<Tensor> parts{tok_emb_};
  std::int32_t next_row = V;
  for (const auto& seq : sequences) {
    for (const auto& t : seq) {
      if (t.id < 0) throw Error(ErrorCode::value, "embed: negative id");
      if (t.id < V) continue;
      if (tags == nullptr) {
        throw Error(ErrorCode::value,
                    "embed: tag id " + std::to_string(t.id) + " given without a tag table");
      }
      const auto& spec = tags->by_id(t.id);
      if (t.row < 0 || static_cast<std::size_t>(t.row) >= spec.length) {
        throw Error(ErrorCode::value, "embed: row " + std::to_string(t.row) +
                                          " out of range for tag '" + spec.name + "'");
      }
      if (tag_base.emplace(t.id, next_row).second) {
        if (spec.embedding.cols() != config_.embed_dim) {
          throw Error(ErrorCode::dimension, "tag '" + spec.name + "' has wrong embed_dim");
        }
        parts.push_back(spec.embedding);
        next_row += static_cast<std::int32_t>(spec.length);
      }
    }
  }

  Packed packed;
  packed.offsets.push_back(0);
  std::vector<std::int32_t> rows, positions;
  for (const auto& seq : sequences) {
    if (seq.empty()) throw Error(ErrorCode::dimension, "embed: empty sequence");
    if (seq.size() > config_.context_len) {
      throw Error(ErrorCode::dimension, "sequence length " + std::to_string(seq.size()) +
                                            " exceeds context_len " +
                                            std::to_string(config_.context_len));
    }
    for (std::size_t i = 0; i < seq.size(); ++i) {
      const auto& t = seq[i];
      rows.push_back(t.id < V ? t.id : tag_base.at(t.id) + t.row);
      positions.push_back(static_cast<std::int32_t>(i));
    }
    packed.offsets.push_back(rows.size());
  }
  const Tensor table = parts.size() == 1 ? tok_emb_ : ops::concat_rows<float>(parts);
  packed.embedded =
      ops::add(ops::embedding(table, std::span<const std::int32_t>(rows)),
               ops::embedding(pos_emb_, std::span<const std::int32_t>(positions)));
  return packed;
}

Tensor Backbone::embed(std::span<const InputToken> ids, const TagTable* tags) const {
  if (ids.empty()) throw Error(ErrorCode::dimension, "embed: empty sequence");
  std::vector<std::vector<InputToken>> one{std::vector<InputToken>(ids.begin(), ids.end())};
  return embed_batch(one, tags).embedded;
}

Tensor Backbone::hidden_states(const Tensor& embedded,
                               std::span<const std::size_t> offsets) const {
  if (embedded.rank() != 2 || embedded.cols() != config_.embed_dim) {
    throw Error(ErrorCode::dimension, "forward: embedded input must be n x " +
                                          std::to_string(config_.embed_dim));
  }
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    if (offsets[s + 1] - offsets[s] > config_.context_len) {
      throw Error(ErrorCode::dimension, "forward: segment longer than context_len");
    }
  }
  const double eps = config_.norm_eps;
  Tensor x = embedded;
  for (const auto& b : blocks_) {
    const Tensor h = ops::layer_norm(x, b.ln1_g, b.ln1_b, eps);
    const Tensor att = ops::causal_attention(linear(h, b.wq, b.bq), linear(h, b.wk, b.bk),
                                             linear(h, b.wv, b.bv), config_.n_heads, offsets);
    x = ops::add(x, linear(att, b.wo, b.bo));
    const Tensor h2 = ops::layer_norm(x, b.ln2_g, b.ln2_b, eps);
    x = ops::add(x, linear(ops::gelu(linear(h2, b.w1, b.b1)), b.w2, b.b2));
  }
  return ops::layer_norm(x, lnf_g_, lnf_b_, eps);
}

Tensor Backbone::project(const Tensor& hidden) const { return ops::matmul(hidden, out_proj_); }

Backbone::Output Backbone::forward(const Tensor& embedded,
                                   std::span<const std::size_t> offsets) const {
  Output out;
  out.hidden = hidden_states(embedded, offsets);
  out.logits = project(out.hidden);
  return out;
}

Backbone::Output Backbone::forward(const Tensor& embedded) const {
  if (embedded.rank() != 2) throw Error(ErrorCode::dimension, "forward: need a 2-D input");
  const std::size_t offsets[2] = {0, embedded.rows()};
  return forward(embedded, offsets);
}

std::string Backbone::param_hash() const {
  std::vector<std::uint8_t> bytes;
  for (const auto& [name, t] : named_parameters()) {
    bytes.insert(bytes.end(), name.begin(), name.end());
    bytes.push_back(0);
    for (auto extent : t.shape()) {
      const auto e = static_cast<std::uint64_t>(extent);
      for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(e >> (8 * i)));
    }
    const auto data = t.data();
    const auto* raw = reinterpret_cast<const std::uint8_t*>(data.data());
    bytes.insert(bytes.end(), raw, raw + data.size() * sizeof(float));
  }
  return sha256_hex(bytes);
}

void Backbone::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  write_json(dir / "config.json", config_.to_json());
  std::vector<TensorRecord> records;
  for (const auto& [name, t] : named_parameters()) {
    records.push_back({name, t.shape(), std::vector<float>(t.data().begin(), t.data().end())});
  }
  write_tensor_file(dir / "weights.bin", records);
}

Backbone Backbone::load(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "config.json") ||
      !std::filesystem::exists(dir / "weights.bin")) {
    throw Error(ErrorCode::missing_artifact,
                "backbone checkpoint " + (dir / "weights.bin").string() + " not found");
  }
  Backbone model;
  model.config_ = BackboneConfig::from_json(read_json(dir / "config.json"));
  Rng dummy(0);
  model.init_parameters(dummy);
  const auto records = read_tensor_file(dir / "weights.bin");
  std::map<std::string, const TensorRecord*> by_name;
  for (const auto& r : records) by_name[r.name] = &r;
  for (auto& [name, ptr] : model.parameter_slots()) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw Error(ErrorCode::format, "weights.bin lacks tensor '" + name + "'");
    }
    if (it->second->shape != ptr->shape()) {
      throw Error(ErrorCode::dimension, "weights.bin tensor '" + name + "' has shape " +
                                            shape_string(it->second->shape) + ", expected " +
                                            shape_string(ptr->shape()));
    }
    *ptr = Tensor::from_data(it->second->shape, it->second->values, true);
  }
  if (by_name.size() != model.parameter_slots().size()) {
    throw Error(ErrorCode::format, "weights.bin holds unexpected tensors");
  }
  return model;
}

// ------------------------------------------------------------------ pretraining

Json PretrainConfig::to_json() const {
  return {{"steps", steps},
          {"batch_size", batch_size},
          {"lr", lr},
          {"warmup_fraction", warmup_fraction},
          {"weight_decay", weight_decay},
          {"held_out_fraction", held_out_fraction},
          {"log_every", log_every},
          {"seed", seed}};
}

PretrainConfig PretrainConfig::from_json(const Json& j) {
  PretrainConfig c;
  try {
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.held_out_fraction = j.value("held_out_fraction", c.held_out_fraction);
    c.log_every = j.value("log_every", c.log_every);
    c.seed = j.value("seed", c.seed);
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::config, std::string("pretrain config: ") + e.what());
  }
  if (c.steps <= 0 || c.batch_size == 0) {
    throw Error(ErrorCode::config, "pretrain steps and batch_size must be positive");
  }
  if (c.held_out_fraction < 0 || c.held_out_fraction >= 1) {
    throw Error(ErrorCode::config, "held_out_fraction must lie in [0, 1)");
  }
  return c;
}

namespace {

// Next-token targets for a packed batch; the final position of every
// document has no target.
void next_token_targets(std::span<const std::vector<std::int32_t>> docs,
                        std::vector<std::int32_t>& targets, std::vector<float>& mask) {
  targets.clear();
  mask.clear();
  for (const auto& doc : docs) {
    for (std::size_t i = 0; i < doc.size(); ++i) {
      const bool has_next = i + 1 < doc.size();
      targets.push_back(has_next ? doc[i + 1] : -1);
      mask.push_back(has_next ? 1.0f : 0.0f);
    }
  }
}

void check_docs(std::span<const std::vector<std::int32_t>> docs, const BackboneConfig& config) {
  for (const auto& doc : docs) {
    if (doc.size() > config.context_len) {
      throw Error(ErrorCode::dimension, "document of length " + std::to_string(doc.size()) +
                                            " exceeds context_len " +
                                            std::to_string(config.context_len));
    }
    for (auto id : doc) {
      if (id < 0 || static_cast<std::size_t>(id) >= config.vocab_size) {
        throw Error(ErrorCode::vocabulary, "corpus token " + std::to_string(id) +
                                               " outside the base vocabulary");
      }
    }
  }
}

}  // namespace

double mean_token_nll(const Backbone& model, std::span<const std::vector<std::int32_t>> docs) {
  NoGradGuard no_grad;
  double total = 0, count = 0;
  constexpr std::size_t kChunk = 32;
  std::vector<std::int32_t> targets;
  std::vector<float> mask;
  for (std::size_t begin = 0; begin < docs.size(); begin += kChunk) {
    const auto chunk = docs.subspan(begin, std::min(kChunk, docs.size() - begin));
    std::vector<std::vector<InputToken>> inputs;
    for (const auto& d : chunk) inputs.push_back(as_input(d));
    next_token_targets(chunk, targets, mask);
    double n = 0;
    for (auto m : mask) n += m;
    if (n == 0) continue;
    const auto packed = model.embed_batch(inputs);
    const auto out = model.forward(packed.embedded, packed.offsets);
    const auto loss = ops::cross_entropy(out.logits, std::span<const std::int32_t>(targets),
                                         std::span<const float>(mask));
    total += static_cast<double>(loss.item()) * n;
    count += n;
  }
  if (count == 0) throw Error(ErrorCode::value, "mean_token_nll: no predictable tokens");
  return total / count;
}

PretrainResult pretrain(std::span<const std::vector<std::int32_t>> corpus,
                        const BackboneConfig& config, const PretrainConfig& train) {
  if (corpus.empty()) throw Error(ErrorCode::value, "pretrain: empty corpus");
  check_docs(corpus, config);
  Rng rng(train.seed);
  Rng init_rng = rng.fork("init");
  Rng batch_rng = rng.fork("batches");

  std::size_t held = static_cast<std::size_t>(
      std::floor(train.held_out_fraction * static_cast<double>(corpus.size())));
  if (train.held_out_fraction > 0 && held == 0 && corpus.size() > 1) held = 1;
  const auto n_train = corpus.size() - held;
  if (n_train == 0) throw Error(ErrorCode::value, "pretrain: no training documents");
  const auto train_docs = corpus.subspan(0, n_train);
  const auto held_docs = corpus.subspan(n_train);

  PretrainResult result{Backbone(config, init_rng), 0, 0, 0, 0, 0, {}};
  result.train_docs = n_train;
  result.held_out_docs = held;
  Backbone& model = result.model;

  AdamW<float> opt({train.lr, 0.9, 0.999, 1e-8, train.weight_decay});
  for (auto& [name, t] : model.named_parameters()) opt.add_param(t);

  std::vector<std::int32_t> targets;
  std::vector<float> mask;
  std::vector<double> tail;
  const auto tail_len = std::max<std::int64_t>(1, train.steps / 20);
  for (std::int64_t step = 0; step < train.steps; ++step) {
    std::vector<std::vector<std::int32_t>> batch;
    std::vector<std::vector<InputToken>> inputs;
    for (std::size_t b = 0; b < train.batch_size; ++b) {
      batch.push_back(train_docs[batch_rng.below(n_train)]);
      inputs.push_back(as_input(batch.back()));
    }
    next_token_targets(batch, targets, mask);
    const auto packed = model.embed_batch(inputs);
    const auto out = model.forward(packed.embedded, packed.offsets);
    const auto loss = ops::cross_entropy(out.logits, std::span<const std::int32_t>(targets),
                                         std::span<const float>(mask));
    const double value = loss.item();
    if (step == 0) result.initial_loss = value;
    if (train.steps - step <= tail_len) tail.push_back(value);
    if (train.log_every > 0 && (step % train.log_every == 0 || step + 1 == train.steps)) {
      result.curve.emplace_back(step, value);
    }
    backward(loss);
    opt.step(cosine_lr(step, train.steps, train.warmup_fraction, train.lr));
    opt.zero_grad();
  }
  double s = 0;
  for (auto v : tail) s += v;
  result.final_train_loss = s / static_cast<double>(tail.size());
  result.held_out_loss = held > 0 ? mean_token_nll(model, held_docs) : result.final_train_loss;
  return result;
}

}  // namespace tagllm
