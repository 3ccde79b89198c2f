#include "tagllm/heads.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "tagllm/binio.hpp"
#include "tagllm/error.hpp"
#include "tagllm/templates.hpp"
#include "tagllm/vocab.hpp"

namespace tagllm {

std::string_view to_string(HeadKind kind) {
  switch (kind) {
    case HeadKind::regression: return "regression";
    case HeadKind::classification: return "classification";
    case HeadKind::generation: return "generation";
  }
  return "?";
}

std::string_view to_string(LossKind kind) {
  return kind == LossKind::mse ? "mse" : "cross_entropy";
}

namespace {

HeadKind head_kind_from_string(std::string_view s) {
  for (auto k : {HeadKind::regression, HeadKind::classification, HeadKind::generation}) {
    if (to_string(k) == s) return k;
  }
  throw Error(ErrorCode::format, "unknown head kind '" + std::string(s) + "'");
}

}  // namespace

TaskHead TaskHead::regression(std::string name, std::size_t embed_dim, std::size_t d_t) {
  if (d_t == 0) throw Error(ErrorCode::value, "regression head needs d_t >= 1");
  TaskHead h;
  h.name = std::move(name);
  h.kind = HeadKind::regression;
  h.d_t = d_t;
  h.loss = LossKind::mse;
  h.weight = Tensor::zeros({embed_dim, d_t}, true);
  return h;
}

TaskHead TaskHead::classification(std::string name, std::size_t embed_dim, std::size_t classes) {
  if (classes < 2) throw Error(ErrorCode::value, "classification head needs >= 2 classes");
  TaskHead h;
  h.name = std::move(name);
  h.kind = HeadKind::classification;
  h.d_t = classes;
  h.loss = LossKind::cross_entropy;
  h.weight = Tensor::zeros({embed_dim, classes}, true);
  return h;
}

TaskHead TaskHead::generation(std::string name) {
  TaskHead h;
  h.name = std::move(name);
  h.kind = HeadKind::generation;
  h.d_t = 0;
  h.loss = LossKind::cross_entropy;
  return h;
}

std::size_t TaskHead::parameter_count() const { return weight.defined() ? weight.numel() : 0; }

void TaskHead::fit_standardization(std::span<const double> train_targets) {
  if (train_targets.empty()) throw Error(ErrorCode::value, "standardization needs targets");
  double mean = 0;
  for (double y : train_targets) mean += y;
  mean /= static_cast<double>(train_targets.size());
  double var = 0;
  for (double y : train_targets) var += (y - mean) * (y - mean);
  var /= static_cast<double>(train_targets.size());
  target_mean = mean;
  target_std = var > 0 ? std::sqrt(var) : 1.0;
}

Tensor predict_numeric(const Tensor& hidden, std::size_t readout_index, const TaskHead& head) {
  if (head.kind == HeadKind::generation || !head.weight.defined()) {
    throw Error(ErrorCode::value, "head '" + head.name + "' has no numeric output");
  }
  if (hidden.rank() != 2 || readout_index >= hidden.rows()) {
    throw Error(ErrorCode::dimension, "readout index " + std::to_string(readout_index) +
                                          " outside hidden states of " +
                                          shape_string(hidden.shape()));
  }
  const std::size_t idx[1] = {readout_index};
  const auto out = ops::matmul(ops::select_rows(hidden, std::span<const std::size_t>(idx)),
                               head.weight);
  return head.kind == HeadKind::classification ? ops::softmax(out, 1) : out;
}

std::vector<std::vector<std::int32_t>> greedy_decode_batch(
    const Backbone& backbone, const TagTable* tags,
    std::span<const std::vector<InputToken>> prompts, std::size_t max_len, std::int32_t stop_id) {
  NoGradGuard no_grad;
  const auto V = backbone.vocab_size();
  std::vector<std::vector<InputToken>> seqs(prompts.begin(), prompts.end());
  std::vector<std::vector<std::int32_t>> out(prompts.size());
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    if (seqs[i].empty()) throw Error(ErrorCode::value, "greedy_decode: empty prompt");
    if (max_len > 0) active.push_back(i);
  }
  while (!active.empty()) {
    std::vector<std::vector<InputToken>> batch;
    batch.reserve(active.size());
    for (auto i : active) batch.push_back(seqs[i]);
    const auto packed = backbone.embed_batch(batch, tags);
    const auto logits = backbone.forward(packed.embedded, packed.offsets).logits;
    const auto data = logits.data();
    std::vector<std::size_t> still;
    for (std::size_t b = 0; b < active.size(); ++b) {
      const auto row = data.subspan((packed.offsets[b + 1] - 1) * V, V);
      const auto best = static_cast<std::int32_t>(
          std::max_element(row.begin(), row.end()) - row.begin());
      const auto i = active[b];
      out[i].push_back(best);
      seqs[i].push_back(InputToken::token(best));
      const bool done = best == stop_id || out[i].size() >= max_len ||
                        seqs[i].size() > backbone.config().context_len;
      if (!done) still.push_back(i);
    }
    active.swap(still);
  }
  return out;
}

std::vector<std::int32_t> greedy_decode(const Backbone& backbone, const TagTable* tags,
                                        std::span<const InputToken> prompt, std::size_t max_len,
                                        std::int32_t stop_id) {
  const std::vector<std::vector<InputToken>> one{{prompt.begin(), prompt.end()}};
  return greedy_decode_batch(backbone, tags, one, max_len, stop_id)[0];
}

DigitRoundTrip digit_generation_roundtrip(double value, int precision) {
  DigitRoundTrip r;
  r.text = serialize_decimal(value, precision);
  r.tokens = vocab::encode(r.text);
  const auto parsed = parse_decimal(vocab::decode(r.tokens));
  if (!parsed) throw Error(ErrorCode::state, "serialized decimal failed to parse: " + r.text);
  r.parsed = *parsed;
  return r;
}

ParsedNumber parse_generated_number(std::span<const std::int32_t> tokens, double fallback) {
  auto body = tokens;
  if (!body.empty() && body.back() == vocab::kStop) body = body.first(body.size() - 1);
  std::string text;
  for (auto id : body) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab::kSize) return {fallback, true};
    text.push_back(vocab::char_of(id));
  }
  const auto v = parse_decimal(text);
  if (!v || !std::isfinite(*v)) return {fallback, true};
  return {*v, false};
}

void save_heads(const std::filesystem::path& dir, std::span<const TaskHead> heads) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  std::vector<TensorRecord> records;
  for (const auto& h : heads) {
    nlohmann::ordered_json e;
    e["name"] = h.name;
    e["kind"] = to_string(h.kind);
    e["d_t"] = h.d_t;
    e["loss"] = to_string(h.loss);
    e["target_mean"] = h.target_mean;
    e["target_std"] = h.target_std;
    j.push_back(std::move(e));
    if (h.weight.defined()) {
      records.push_back({h.name, h.weight.shape(),
                         std::vector<float>(h.weight.data().begin(), h.weight.data().end())});
    }
  }
  write_text(dir / "heads.json", nlohmann::ordered_json{{"heads", j}}.dump(2) + "\n");
  write_tensor_file(dir / "heads.bin", records);
}

std::vector<TaskHead> load_heads(const std::filesystem::path& dir, std::size_t embed_dim) {
  const auto j = read_json(dir / "heads.json");
  const auto records = read_tensor_file(dir / "heads.bin");
  std::map<std::string, const TensorRecord*> by_name;
  for (const auto& r : records) by_name[r.name] = &r;
  std::vector<TaskHead> heads;
  try {
    for (const auto& e : j.at("heads")) {
      TaskHead h;
      h.name = e.at("name").get<std::string>();
      h.kind = head_kind_from_string(e.at("kind").get<std::string>());
      h.d_t = e.at("d_t").get<std::size_t>();
      h.loss = e.at("loss").get<std::string>() == "mse" ? LossKind::mse : LossKind::cross_entropy;
      h.target_mean = e.at("target_mean").get<double>();
      h.target_std = e.at("target_std").get<double>();
      if (h.kind != HeadKind::generation) {
        auto it = by_name.find(h.name);
        if (it == by_name.end()) {
          throw Error(ErrorCode::format, "heads.bin lacks weights for '" + h.name + "'");
        }
        if (it->second->shape != std::vector<std::size_t>{embed_dim, h.d_t}) {
          throw Error(ErrorCode::dimension, "head '" + h.name + "' stored with shape " +
                                                shape_string(it->second->shape));
        }
        h.weight = Tensor::from_data(it->second->shape, it->second->values, true);
      }
      heads.push_back(std::move(h));
    }
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::format, dir.string() + "/heads.json: " + e.what());
  }
  return heads;
}

}  // namespace tagllm
