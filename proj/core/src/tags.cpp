#include "tagllm/tags.hpp"

#include <cmath>

#include "tagllm/binio.hpp"
#include "tagllm/error.hpp"

namespace tagllm {

std::string_view to_string(TagKind kind) {
  return kind == TagKind::domain ? "domain" : "function";
}

std::string_view to_string(TagStatus status) {
  return status == TagStatus::trainable ? "trainable" : "frozen";
}

TagKind tag_kind_from_string(std::string_view text) {
  if (text == "domain") return TagKind::domain;
  if (text == "function") return TagKind::function;
  throw Error(ErrorCode::format, "unknown tag kind '" + std::string(text) + "'");
}

TagStatus tag_status_from_string(std::string_view text) {
  if (text == "trainable") return TagStatus::trainable;
  if (text == "frozen") return TagStatus::frozen;
  throw Error(ErrorCode::format, "unknown tag status '" + std::string(text) + "'");
}

TagTable::TagTable(std::size_t vocab_size, std::size_t embed_dim)
    : vocab_size_(vocab_size), embed_dim_(embed_dim) {}

TagSpec& TagTable::add(TagSpec spec) {
  if (spec.name.empty()) throw Error(ErrorCode::value, "tag name must not be empty");
  if (contains(spec.name)) throw Error(ErrorCode::value, "tag '" + spec.name + "' already exists");
  if (spec.length == 0) throw Error(ErrorCode::value, "tag length must be >= 1");
  if (!spec.embedding.defined() || spec.embedding.rank() != 2 ||
      spec.embedding.rows() != spec.length || spec.embedding.cols() != embed_dim_) {
    throw Error(ErrorCode::dimension, "tag '" + spec.name + "' embedding must be " +
                                          std::to_string(spec.length) + "x" +
                                          std::to_string(embed_dim_));
  }
  spec.embedding.set_requires_grad(spec.status == TagStatus::trainable);
  index_.emplace(spec.name, specs_.size());
  specs_.push_back(std::move(spec));
  return specs_.back();
}

bool TagTable::contains(std::string_view name) const { return index_.find(name) != index_.end(); }

const TagSpec& TagTable::get(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw Error(ErrorCode::value, "tag '" + std::string(name) + "' is not registered");
  }
  return specs_[it->second];
}

TagSpec& TagTable::get(std::string_view name) {
  return const_cast<TagSpec&>(static_cast<const TagTable&>(*this).get(name));
}

std::int32_t TagTable::id_of(std::string_view name) const {
  get(name);
  return static_cast<std::int32_t>(vocab_size_ + index_.find(name)->second);
}

const TagSpec& TagTable::by_id(std::int32_t id) const {
  const auto v = static_cast<std::int64_t>(vocab_size_);
  if (id < v || id >= v + static_cast<std::int64_t>(specs_.size())) {
    throw Error(ErrorCode::value, "unknown tag id " + std::to_string(id));
  }
  return specs_[static_cast<std::size_t>(id - v)];
}

void TagTable::set_status(std::string_view name, TagStatus status) {
  auto& spec = get(name);
  spec.status = status;
  spec.embedding.set_requires_grad(status == TagStatus::trainable);
}

std::vector<std::string> TagTable::trainable_names() const {
  std::vector<std::string> names;
  for (const auto& s : specs_) {
    if (s.status == TagStatus::trainable) names.push_back(s.name);
  }
  return names;
}

std::size_t TagTable::trainable_parameter_count() const {
  std::size_t n = 0;
  for (const auto& s : specs_) {
    if (s.status == TagStatus::trainable) n += s.length * embed_dim_;
  }
  return n;
}

TagTable TagTable::clone() const {
  TagTable out(vocab_size_, embed_dim_);
  for (const auto& s : specs_) {
    TagSpec copy = s;
    copy.embedding = s.embedding.clone();
    out.add(std::move(copy));
  }
  return out;
}

void TagTable::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json j;
  j["vocab_size"] = vocab_size_;
  j["embed_dim"] = embed_dim_;
  j["tags"] = nlohmann::ordered_json::array();
  std::vector<TensorRecord> records;
  for (const auto& s : specs_) {
    nlohmann::ordered_json e;
    e["name"] = s.name;
    e["id"] = id_of(s.name);
    e["kind"] = to_string(s.kind);
    e["length"] = s.length;
    e["status"] = to_string(s.status);
    e["lineage"] = nlohmann::ordered_json::array();
    for (const auto& l : s.lineage) {
      e["lineage"].push_back({{"stage", l.stage}, {"task", l.task}, {"parent", l.parent}});
    }
    j["tags"].push_back(std::move(e));
    records.push_back({s.name, {s.length, embed_dim_},
                       std::vector<float>(s.embedding.data().begin(), s.embedding.data().end())});
  }
  write_text(dir / "tags.json", j.dump(2) + "\n");
  write_tensor_file(dir / "tags.bin", records);
}

TagTable TagTable::load(const std::filesystem::path& dir, std::size_t expected_embed_dim) {
  const Json j = read_json(dir / "tags.json");
  try {
    const auto d = j.at("embed_dim").get<std::size_t>();
    if (d != expected_embed_dim) {
      throw Error(ErrorCode::dimension, "tags in " + dir.string() + " have embed_dim " +
                                            std::to_string(d) + ", backbone expects " +
                                            std::to_string(expected_embed_dim));
    }
    TagTable table(j.at("vocab_size").get<std::size_t>(), d);
    const auto records = read_tensor_file(dir / "tags.bin");
    std::map<std::string, const TensorRecord*> by_name;
    for (const auto& r : records) by_name[r.name] = &r;
    for (const auto& e : j.at("tags")) {
      TagSpec spec;
      spec.name = e.at("name").get<std::string>();
      spec.kind = tag_kind_from_string(e.at("kind").get<std::string>());
      spec.length = e.at("length").get<std::size_t>();
      spec.status = tag_status_from_string(e.at("status").get<std::string>());
      for (const auto& l : e.at("lineage")) {
        spec.lineage.push_back({l.at("stage").get<int>(), l.at("task").get<std::string>(),
                                l.at("parent").get<std::string>()});
      }
      auto it = by_name.find(spec.name);
      if (it == by_name.end()) {
        throw Error(ErrorCode::format, "tags.bin lacks tensor for '" + spec.name + "'");
      }
      if (it->second->shape != std::vector<std::size_t>{spec.length, d}) {
        throw Error(ErrorCode::dimension, "tag '" + spec.name + "' stored with wrong shape");
      }
      spec.embedding = Tensor::from_data({spec.length, d}, it->second->values);
      const auto expected_id = static_cast<std::int32_t>(table.vocab_size() + table.size());
      if (e.at("id").get<std::int32_t>() != expected_id) {
        throw Error(ErrorCode::format, "tag '" + spec.name + "' id is out of registration order");
      }
      table.add(std::move(spec));
    }
    return table;
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::format, dir.string() + "/tags.json: " + e.what());
  }
}

TagInitReport mean_embedding_report(const Backbone& backbone) {
  const auto& table = backbone.token_embedding();
  const auto V = table.rows(), d = table.cols();
  const auto data = table.data();
  TagInitReport r;
  r.mean_embedding.assign(d, 0.0);
  double norm_sum = 0;
  for (std::size_t i = 0; i < V; ++i) {
    double sq = 0;
    for (std::size_t c = 0; c < d; ++c) {
      const double v = data[i * d + c];
      r.mean_embedding[c] += v;
      sq += v * v;
    }
    norm_sum += std::sqrt(sq);
  }
  double sq = 0;
  for (auto& m : r.mean_embedding) {
    m /= static_cast<double>(V);
    sq += m * m;
  }
  r.mean_norm = norm_sum / static_cast<double>(V);
  r.norm_of_mean = std::sqrt(sq);
  if (!(r.norm_of_mean > 0)) {
    throw Error(ErrorCode::numeric,
                "tag initialization undefined: the mean base embedding is the zero vector");
  }
  r.scale = r.mean_norm / r.norm_of_mean;
  return r;
}

InitResult init_tag(TagTable& table, const Backbone& backbone, std::string name, TagKind kind,
                    std::size_t length) {
  if (table.embed_dim() != backbone.embed_dim()) {
    throw Error(ErrorCode::dimension, "tag table and backbone disagree on embed_dim");
  }
  if (length == 0) throw Error(ErrorCode::value, "tag length must be >= 1");
  if (table.contains(name)) throw Error(ErrorCode::value, "tag '" + name + "' already exists");
  auto report = mean_embedding_report(backbone);
  const auto d = backbone.embed_dim();
  std::vector<float> rows(length * d);
  for (std::size_t r = 0; r < length; ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      rows[r * d + c] = static_cast<float>(report.scale * report.mean_embedding[c]);
    }
  }
  TagSpec spec;
  spec.name = std::move(name);
  spec.kind = kind;
  spec.length = length;
  spec.embedding = Tensor::from_data({length, d}, std::move(rows));
  spec.status = TagStatus::trainable;
  spec.lineage.push_back({kind == TagKind::domain ? 1 : 2, "", ""});
  return {&table.add(std::move(spec)), std::move(report)};
}

TagSpec& init_random_tag(TagTable& table, std::string name, TagKind kind, std::size_t length,
                         double stddev, Rng& rng) {
  const auto d = table.embed_dim();
  std::vector<float> rows(length * d);
  for (auto& v : rows) v = static_cast<float>(rng.normal(0.0, stddev));
  TagSpec spec;
  spec.name = std::move(name);
  spec.kind = kind;
  spec.length = length;
  spec.embedding = Tensor::from_data({length, d}, std::move(rows));
  spec.status = TagStatus::trainable;
  return table.add(std::move(spec));
}

TagSpec& set_status(TagTable& table, std::string_view name, TagStatus status) {
  table.set_status(name, status);
  return table.get(name);
}

std::string enriched_name(std::string_view parent, std::string_view task) {
  return std::string(parent) + "@" + std::string(task);
}

TagSpec& enrich_fork(TagTable& table, std::string_view parent, std::string_view task) {
  const auto& src = table.get(parent);
  if (src.kind != TagKind::domain) {
    throw Error(ErrorCode::value, "enrich_fork: '" + src.name + "' is a function tag");
  }
  TagSpec child;
  child.name = enriched_name(parent, task);
  child.kind = TagKind::domain;
  child.length = src.length;
  child.embedding = src.embedding.detach();
  child.status = TagStatus::trainable;
  child.lineage = src.lineage;
  child.lineage.push_back({2, std::string(task), src.name});
  return table.add(std::move(child));
}

}  // namespace tagllm
