#include "tagllm/domains.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "tagllm/error.hpp"
#include "tagllm/vocab.hpp"

namespace tagllm {

void DomainSpec::validate() const {
  const auto K = alphabet.size();
  if (K == 0) throw Error(ErrorCode::config, "domain '" + name + "' has an empty alphabet");
  if (std::set<char>(alphabet.begin(), alphabet.end()).size() != K) {
    throw Error(ErrorCode::config, "domain '" + name + "' alphabet has repeated characters");
  }
  for (char c : alphabet) {
    if (!vocab::contains(c) || c == '\n') {
      throw Error(ErrorCode::vocabulary, "domain '" + name + "' uses a non-printable character");
    }
  }
  auto check_row = [&](const std::vector<double>& row, const std::string& what) {
    if (row.size() != K) throw Error(ErrorCode::config, what + " has wrong length");
    double s = 0;
    for (double w : row) {
      if (!(w >= 0) || !std::isfinite(w)) throw Error(ErrorCode::config, what + " has bad entry");
      s += w;
    }
    if (std::abs(s - 1.0) > 1e-9) throw Error(ErrorCode::config, what + " does not sum to 1");
  };
  check_row(initial, "domain '" + name + "' initial distribution");
  if (transition.size() != K) throw Error(ErrorCode::config, "transition matrix must be KxK");
  for (std::size_t i = 0; i < K; ++i) {
    check_row(transition[i], "domain '" + name + "' transition row " + std::to_string(i));
  }
  if (min_len == 0 || min_len > max_len) {
    throw Error(ErrorCode::config, "domain '" + name + "' needs 1 <= min_len <= max_len");
  }
}

std::size_t DomainSpec::index_of(char c) const {
  const auto pos = alphabet.find(c);
  if (pos == std::string::npos) {
    throw Error(ErrorCode::vocabulary,
                std::string("character '") + c + "' is outside the " + name + " alphabet");
  }
  return pos;
}

std::vector<double> DomainSpec::stationary() const {
  const auto K = alphabet.size();
  std::vector<double> pi(K, 1.0 / static_cast<double>(K)), next(K);
  for (int it = 0; it < 10000; ++it) {
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t i = 0; i < K; ++i) {
      for (std::size_t j = 0; j < K; ++j) next[j] += pi[i] * transition[i][j];
    }
    double diff = 0;
    for (std::size_t j = 0; j < K; ++j) diff += std::abs(next[j] - pi[j]);
    pi.swap(next);
    if (diff < 1e-15) break;
  }
  return pi;
}

Json DomainSpec::to_json() const {
  return {{"name", name},         {"alphabet", alphabet}, {"initial", initial},
          {"transition", transition}, {"min_len", min_len},   {"max_len", max_len}};
}

DomainSpec DomainSpec::from_json(const Json& j) {
  DomainSpec s;
  try {
    s.name = j.at("name").get<std::string>();
    s.alphabet = j.at("alphabet").get<std::string>();
    s.initial = j.at("initial").get<std::vector<double>>();
    s.transition = j.at("transition").get<std::vector<std::vector<double>>>();
    s.min_len = j.at("min_len").get<std::size_t>();
    s.max_len = j.at("max_len").get<std::size_t>();
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::format, std::string("domain spec: ") + e.what());
  }
  s.validate();
  return s;
}

std::string sample_sequence(const DomainSpec& spec, Rng& rng, std::size_t min_len,
                            std::size_t max_len) {
  const auto n = static_cast<std::size_t>(
      rng.range(static_cast<std::int64_t>(min_len), static_cast<std::int64_t>(max_len)));
  std::string out;
  out.reserve(n);
  std::size_t state = rng.categorical(spec.initial);
  out.push_back(spec.alphabet[state]);
  while (out.size() < n) {
    state = rng.categorical(spec.transition[state]);
    out.push_back(spec.alphabet[state]);
  }
  return out;
}

std::string sample_sequence(const DomainSpec& spec, Rng& rng) {
  return sample_sequence(spec, rng, spec.min_len, spec.max_len);
}

std::vector<std::string> gen_corpus(const DomainSpec& spec, std::size_t count,
                                    std::uint64_t seed) {
  spec.validate();
  if (count == 0) throw Error(ErrorCode::value, "gen_corpus: count must be >= 1");
  Rng rng = Rng(seed).fork("corpus:" + spec.name);
  std::vector<std::string> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(sample_sequence(spec, rng));
  return out;
}

namespace {

// Rows are log-normal weights; larger sharpness gives lower-entropy chains.
DomainSpec random_chain(std::string name, std::string_view alphabet, double sharpness,
                        std::uint64_t seed, std::size_t min_len, std::size_t max_len) {
  Rng rng(seed);
  DomainSpec s;
  s.name = std::move(name);
  s.alphabet = std::string(alphabet);
  const auto K = alphabet.size();
  auto row = [&]() {
    std::vector<double> r(K);
    double total = 0;
    for (auto& w : r) total += (w = std::exp(sharpness * rng.normal()));
    for (auto& w : r) w /= total;
    return r;
  };
  s.initial = row();
  for (std::size_t i = 0; i < K; ++i) s.transition.push_back(row());
  s.min_len = min_len;
  s.max_len = max_len;
  return s;
}

void renormalize(std::vector<double>& row) {
  const double total = std::accumulate(row.begin(), row.end(), 0.0);
  for (auto& w : row) w /= total;
}

}  // namespace

DomainSpec protein_domain() {
  return random_chain("protein", kProteinAlphabet, 1.0, 0x70726f74ULL, 8, 24);
}

DomainSpec molecule_domain() {
  auto s = random_chain("molecule", kMoleculeAlphabet, 1.0, 0x6d6f6c65ULL, 6, 28);
  const auto open = s.index_of('('), close = s.index_of(')');
  // Brackets are kept near 10% each, and ')' never directly follows '('.
  auto shape = [&](std::vector<double>& row, bool after_open) {
    double rest = 0;
    for (std::size_t k = 0; k < row.size(); ++k) {
      if (k != open && k != close) rest += row[k];
    }
    for (std::size_t k = 0; k < row.size(); ++k) {
      if (k != open && k != close) row[k] *= 0.8 / rest;
    }
    row[open] = 0.1;
    row[close] = after_open ? 0.0 : 0.1;
    renormalize(row);
  };
  for (std::size_t k = 0; k < s.transition.size(); ++k) shape(s.transition[k], k == open);
  s.initial[open] = 0;
  s.initial[close] = 0;
  renormalize(s.initial);
  return s;
}

std::string CipherFamily::language_name(std::size_t i) {
  if (i >= 26) throw Error(ErrorCode::value, "language index out of range");
  return std::string(1, static_cast<char>('A' + i));
}

std::size_t CipherFamily::language_index(std::string_view name) const {
  for (std::size_t i = 0; i < perms.size(); ++i) {
    if (language_name(i) == name) return i;
  }
  throw Error(ErrorCode::value, "unknown cipher language '" + std::string(name) + "'");
}

std::string CipherFamily::encode(std::size_t lang, std::string_view base_text) const {
  return cipher_translate_oracle(base_text, base.alphabet, perms.at(lang));
}

std::string CipherFamily::translate(std::string_view text, std::size_t src, std::size_t tgt) const {
  return cipher_translate_oracle(text, perms.at(src), perms.at(tgt));
}

DomainSpec CipherFamily::language_domain(std::size_t lang) const {
  // Relabelling the base chain: glyph perm[k] behaves like base symbol k.
  DomainSpec s = base;
  s.name = "lang-" + language_name(lang);
  s.alphabet = perms.at(lang);
  return s;
}

CipherFamily cipher_family() {
  CipherFamily f;
  f.base = random_chain("cipher-base", kCipherAlphabet, 2.0, 0x63697068ULL, 12, 12);
  // Glyph pool: printable characters outside the base alphabet and the
  // protein/molecule letters. The molecule brackets are structural and may
  // be shared; space and the stop token are excluded.
  std::string pool;
  for (char c = '!'; c <= '~'; ++c) {
    const bool taken = kCipherAlphabet.find(c) != std::string_view::npos ||
                       kProteinAlphabet.find(c) != std::string_view::npos ||
                       (kMoleculeAlphabet.find(c) != std::string_view::npos && c != '(' &&
                        c != ')');
    if (!taken) pool.push_back(c);
  }
  const auto K = kCipherAlphabet.size();
  if (pool.size() < (kCipherLanguages - 1) * K) {
    throw Error(ErrorCode::config, "not enough glyphs for the cipher family");
  }
  Rng rng(0x7065726dULL);
  rng.shuffle(pool.begin(), pool.end());
  f.perms.push_back(std::string(kCipherAlphabet));
  for (std::size_t i = 1; i < kCipherLanguages; ++i) f.perms.push_back(pool.substr((i - 1) * K, K));
  return f;
}

// ---------------------------------------------------------------- oracles

std::string cipher_translate_oracle(std::string_view text, std::string_view src_perm,
                                    std::string_view tgt_perm) {
  if (src_perm.size() != tgt_perm.size()) {
    throw Error(ErrorCode::value, "cipher permutations differ in size");
  }
  std::string out;
  out.reserve(text.size());
  for (char c : text) {
    const auto k = src_perm.find(c);
    if (k == std::string_view::npos) {
      throw Error(ErrorCode::vocabulary,
                  std::string("character '") + c + "' is outside the cipher alphabet");
    }
    out.push_back(tgt_perm[k]);
  }
  return out;
}

double descriptor_oracle(std::string_view protein) {
  if (protein.empty()) throw Error(ErrorCode::value, "descriptor_oracle: empty sequence");
  const double K = static_cast<double>(kProteinAlphabet.size());
  std::vector<double> w;
  w.reserve(protein.size());
  for (char c : protein) {
    const auto idx = kProteinAlphabet.find(c);
    if (idx == std::string_view::npos) {
      throw Error(ErrorCode::vocabulary,
                  std::string("character '") + c + "' is outside the protein alphabet");
    }
    w.push_back(2.0 * static_cast<double>(idx) / (K - 1.0) - 1.0);
  }
  double mean = 0;
  for (double v : w) mean += v;
  mean /= static_cast<double>(w.size());
  double pair = 0;
  if (w.size() > 1) {
    for (std::size_t i = 0; i + 1 < w.size(); ++i) pair += w[i] * w[i + 1];
    pair /= static_cast<double>(w.size() - 1);
  }
  return mean + 0.5 * pair;
}

double qed_oracle(std::string_view molecule) {
  if (molecule.empty()) throw Error(ErrorCode::value, "qed_oracle: empty sequence");
  std::size_t depth = 0, matched = 0, opens = 0;
  for (char c : molecule) {
    if (kMoleculeAlphabet.find(c) == std::string_view::npos) {
      throw Error(ErrorCode::vocabulary,
                  std::string("character '") + c + "' is outside the molecule alphabet");
    }
    if (c == '(') {
      ++opens;
      ++depth;
    } else if (c == ')' && depth > 0) {
      --depth;
      ++matched;
    }
  }
  const double n = static_cast<double>(molecule.size());
  return (1.0 + static_cast<double>(matched)) / (2.0 + static_cast<double>(opens)) *
         std::exp(-std::abs(n - 16.0) / 16.0);
}

double combination_oracle(std::string_view mol_a, std::string_view mol_b) {
  const double q1 = qed_oracle(mol_a), q2 = qed_oracle(mol_b);
  return 50.0 * (q1 + q2) - 40.0 * std::abs(q1 - q2);
}

double affinity_oracle(std::string_view protein, std::string_view molecule) {
  return 5.0 * (descriptor_oracle(protein) + 1.0) * qed_oracle(molecule);
}

// ---------------------------------------------------------------- tasks

std::string_view to_string(TaskShape shape) {
  switch (shape) {
    case TaskShape::single_domain_single_instance: return "single_domain_single_instance";
    case TaskShape::single_domain_multi_instance: return "single_domain_multi_instance";
    case TaskShape::multi_domain_multi_instance: return "multi_domain_multi_instance";
    case TaskShape::translation: return "translation";
  }
  return "?";
}

std::string_view to_string(Metric metric) {
  switch (metric) {
    case Metric::mse: return "mse";
    case Metric::mae: return "mae";
    case Metric::pearson: return "pearson";
    case Metric::token_accuracy: return "token_accuracy";
    case Metric::exact_match: return "exact_match";
  }
  return "?";
}

Metric metric_from_string(std::string_view text) {
  for (auto m : {Metric::mse, Metric::mae, Metric::pearson, Metric::token_accuracy,
                 Metric::exact_match}) {
    if (to_string(m) == text) return m;
  }
  throw Error(ErrorCode::config, "unknown metric '" + std::string(text) + "'");
}

Json LabeledTask::to_json() const {
  return {{"name", name},
          {"shape", to_string(shape)},
          {"domains", domains},
          {"template", template_name},
          {"oracle", oracle},
          {"d_t", d_t},
          {"metric", to_string(metric)},
          {"payload_fields", payload_fields}};
}

std::vector<std::string> builtin_task_names() {
  return {"descriptor", "qed", "combination", "affinity", "translate"};
}

LabeledTask builtin_task(std::string_view name) {
  LabeledTask t;
  t.name = std::string(name);
  if (name == "descriptor") {
    t.shape = TaskShape::single_domain_single_instance;
    t.domains = {"protein"};
    t.template_name = "scalar_property";
    t.oracle = "descriptor";
    t.metric = Metric::mse;
    t.payload_fields = {"prot"};
  } else if (name == "qed") {
    t.shape = TaskShape::single_domain_single_instance;
    t.domains = {"molecule"};
    t.template_name = "scalar_property";
    t.oracle = "qed";
    t.metric = Metric::mse;
    t.payload_fields = {"mol"};
  } else if (name == "combination") {
    t.shape = TaskShape::single_domain_multi_instance;
    t.domains = {"molecule"};
    t.template_name = "pair_combination";
    t.oracle = "combination";
    t.metric = Metric::mae;
    t.payload_fields = {"mol_a", "mol_b"};
  } else if (name == "affinity") {
    t.shape = TaskShape::multi_domain_multi_instance;
    t.domains = {"protein", "molecule"};
    t.template_name = "cross_affinity";
    t.oracle = "affinity";
    t.metric = Metric::pearson;
    t.payload_fields = {"prot", "mol"};
  } else if (name == "translate") {
    t.shape = TaskShape::translation;
    t.domains = {};
    t.template_name = "translate";
    t.oracle = "cipher";
    t.d_t = 0;
    t.metric = Metric::token_accuracy;
    t.payload_fields = {"src_text"};
  } else {
    throw Error(ErrorCode::config, "unknown task '" + std::string(name) + "'");
  }
  return t;
}

double oracle_label(const LabeledTask& task, const Json& r) {
  auto field = [&](const char* key) { return r.at(key).get<std::string>(); };
  if (task.oracle == "descriptor") return descriptor_oracle(field("prot"));
  if (task.oracle == "qed") return qed_oracle(field("mol"));
  if (task.oracle == "combination") return combination_oracle(field("mol_a"), field("mol_b"));
  if (task.oracle == "affinity") return affinity_oracle(field("prot"), field("mol"));
  throw Error(ErrorCode::value, "task '" + task.name + "' has no numeric oracle");
}

Dataset build_task_datasets(const LabeledTask& task, DatasetSizes sizes, std::uint64_t seed,
                            bool shift) {
  if (sizes.train == 0 || sizes.val == 0 || sizes.test == 0) {
    throw Error(ErrorCode::value, "dataset sizes must be positive");
  }
  if (shift && task.oracle != "affinity") {
    throw Error(ErrorCode::config, "the distribution-shift variant applies to affinity only");
  }
  const auto prot = protein_domain();
  const auto mol = molecule_domain();
  Rng rng = Rng(seed).fork("dataset:" + task.name);
  std::set<std::string> seen;
  Dataset out;
  out.task = task.name;

  auto make = [&](bool shifted) {
    Json r = Json::object();
    if (task.oracle == "descriptor") {
      r["prot"] = sample_sequence(prot, rng);
    } else if (task.oracle == "qed") {
      r["mol"] = sample_sequence(mol, rng);
    } else if (task.oracle == "combination") {
      r["mol_a"] = sample_sequence(mol, rng);
      r["mol_b"] = sample_sequence(mol, rng);
    } else if (task.oracle == "affinity") {
      r["prot"] = shifted ? sample_sequence(prot, rng, prot.min_len + kShiftOffset,
                                            prot.max_len + kShiftOffset)
                          : sample_sequence(prot, rng);
      r["mol"] = sample_sequence(mol, rng);
    } else {
      throw Error(ErrorCode::config, "task '" + task.name + "' is not a regression task");
    }
    r["label"] = oracle_label(task, r);
    return r;
  };
  auto key = [&](const Json& r) {
    std::string k;
    for (const auto& f : task.payload_fields) k += r.at(f).get<std::string>() + "|";
    return k;
  };
  auto fill = [&](std::vector<Json>& split, std::size_t n, bool shifted) {
    std::size_t attempts = 0;
    while (split.size() < n) {
      if (++attempts > 100 * n + 1000) {
        throw Error(ErrorCode::value, "could not draw enough distinct records for " + task.name);
      }
      Json r = make(shifted);
      if (seen.insert(key(r)).second) split.push_back(std::move(r));
    }
  };
  fill(out.train, sizes.train, false);
  fill(out.val, sizes.val, false);
  fill(out.test, sizes.test, shift);
  return out;
}

Dataset build_translation_dataset(const CipherFamily& family,
                                  std::span<const LanguagePair> pairs, DatasetSizes sizes,
                                  std::uint64_t seed) {
  if (pairs.empty()) throw Error(ErrorCode::value, "translation dataset needs language pairs");
  Rng rng = Rng(seed).fork("dataset:translate");
  std::set<std::string> seen;
  Dataset out;
  out.task = "translate";
  std::size_t counter = 0;
  auto fill = [&](std::vector<Json>& split, std::size_t n) {
    std::size_t attempts = 0;
    while (split.size() < n) {
      if (++attempts > 100 * n + 1000) {
        throw Error(ErrorCode::value, "could not draw enough distinct translation records");
      }
      const auto [src, tgt] = pairs[counter % pairs.size()];
      const auto base = sample_sequence(family.base, rng);
      Json r = {{"src_lang", CipherFamily::language_name(src)},
                {"tgt_lang", CipherFamily::language_name(tgt)},
                {"src_text", family.encode(src, base)},
                {"tgt_text", family.encode(tgt, base)}};
      if (seen.insert(r["src_lang"].get<std::string>() + r["tgt_lang"].get<std::string>() +
                      base)
              .second) {
        split.push_back(std::move(r));
        ++counter;
      }
    }
  };
  fill(out.train, sizes.train);
  fill(out.val, sizes.val);
  fill(out.test, sizes.test);
  return out;
}

void write_jsonl(const std::filesystem::path& path, std::span<const Json> records) {
  std::string text;
  for (const auto& r : records) text += r.dump() + "\n";
  write_text(path, text);
}

std::vector<Json> read_jsonl(const std::filesystem::path& path) {
  const auto text = read_text(path);
  std::vector<Json> out;
  std::size_t line_no = 0, begin = 0;
  while (begin < text.size()) {
    auto end = text.find('\n', begin);
    if (end == std::string::npos) end = text.size();
    ++line_no;
    const auto line = std::string_view(text).substr(begin, end - begin);
    if (!line.empty()) {
      try {
        out.push_back(Json::parse(line));
      } catch (const Json::exception& e) {
        throw Error(ErrorCode::format,
                    path.string() + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
    begin = end + 1;
  }
  return out;
}

// ---------------------------------------------------------------- general corpus

std::string language_header(std::size_t lang) {
  return "<<lang-" + CipherFamily::language_name(lang) + ">>";
}

Json GeneralCorpusConfig::to_json() const {
  return {{"documents", documents},
          {"prose_weight", prose_weight},
          {"monolingual_weight", monolingual_weight},
          {"translation_weight", translation_weight},
          {"tally_weight", tally_weight},
          {"prose_min_len", prose_min_len},
          {"prose_max_len", prose_max_len},
          {"seed", seed}};
}

GeneralCorpusConfig GeneralCorpusConfig::from_json(const Json& j) {
  GeneralCorpusConfig c;
  try {
    c.documents = j.value("documents", c.documents);
    c.prose_weight = j.value("prose_weight", c.prose_weight);
    c.monolingual_weight = j.value("monolingual_weight", c.monolingual_weight);
    c.translation_weight = j.value("translation_weight", c.translation_weight);
    c.tally_weight = j.value("tally_weight", c.tally_weight);
    c.prose_min_len = j.value("prose_min_len", c.prose_min_len);
    c.prose_max_len = j.value("prose_max_len", c.prose_max_len);
    c.seed = j.value("seed", c.seed);
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::config, std::string("corpus config: ") + e.what());
  }
  if (c.documents == 0) throw Error(ErrorCode::config, "corpus needs at least one document");
  if (c.prose_min_len == 0 || c.prose_min_len > c.prose_max_len) {
    throw Error(ErrorCode::config, "corpus needs 1 <= prose_min_len <= prose_max_len");
  }
  return c;
}

namespace {

std::string prose_word(Rng& rng) {
  static constexpr std::string_view kOnsets = "bcdfghjklmnprs";
  static constexpr std::string_view kVowels = "aeiou";
  std::string w;
  const auto syllables = rng.range(1, 3);
  for (std::int64_t s = 0; s < syllables; ++s) {
    w.push_back(kOnsets[rng.below(kOnsets.size())]);
    w.push_back(kVowels[rng.below(kVowels.size())]);
    if (rng.uniform() < 0.3) w.push_back(kOnsets[rng.below(kOnsets.size())]);
  }
  return w;
}

std::string prose_number(Rng& rng) {
  std::string n;
  if (rng.uniform() < 0.1) n.push_back('-');
  n += std::to_string(rng.below(100));
  n.push_back('.');
  n.push_back(static_cast<char>('0' + rng.below(10)));
  n.push_back(static_cast<char>('0' + rng.below(10)));
  return n;
}

std::string prose_document(Rng& rng, std::size_t min_len, std::size_t max_len) {
  const auto target = static_cast<std::size_t>(
      rng.range(static_cast<std::int64_t>(min_len), static_cast<std::int64_t>(max_len)));
  std::string doc;
  while (doc.size() < target) {
    if (!doc.empty()) doc.push_back(' ');
    const auto words = rng.range(3, 9);
    for (std::int64_t i = 0; i < words; ++i) {
      if (i > 0) doc += rng.uniform() < 0.08 ? ", " : " ";
      std::string w = rng.uniform() < 0.15 ? prose_number(rng) : prose_word(rng);
      if (i == 0 && w[0] >= 'a' && w[0] <= 'z') w[0] = static_cast<char>(w[0] - 'a' + 'A');
      doc += w;
    }
    doc.push_back(rng.uniform() < 0.15 ? '?' : '.');
  }
  doc.resize(target);
  return doc;
}

// "In:<symbols> Out:#<c>=<count>": how often one symbol occurs in a random
// string over a random sub-alphabet of the printable characters.
std::string tally_document(Rng& rng) {
  std::string pool;
  for (char c = '!'; c <= '~'; ++c) pool.push_back(c);
  rng.shuffle(pool.begin(), pool.end());
  const auto k = static_cast<std::size_t>(rng.range(2, 20));
  const auto n = static_cast<std::size_t>(rng.range(8, 32));
  std::string text;
  for (std::size_t i = 0; i < n; ++i) text.push_back(pool[rng.below(k)]);
  const char query = text[rng.below(n)];
  const auto count = std::count(text.begin(), text.end(), query);
  return std::string(kPromptIn) + text + std::string(kPromptOut) + "#" + query + "=" +
         std::to_string(count);
}

}  // namespace

std::vector<std::string> gen_general_corpus(const GeneralCorpusConfig& config,
                                            const CipherFamily& family) {
  Rng rng = Rng(config.seed).fork("general-corpus");
  const double weights[4] = {config.prose_weight, config.monolingual_weight,
                             config.translation_weight, config.tally_weight};
  const auto L = family.size();
  std::vector<std::string> docs;
  docs.reserve(config.documents);
  for (std::size_t i = 0; i < config.documents; ++i) {
    switch (rng.categorical(weights)) {
      case 0:
        docs.push_back(prose_document(rng, config.prose_min_len, config.prose_max_len));
        break;
      case 1: {
        const auto lang = rng.below(L);
        docs.push_back(language_header(lang) + family.encode(lang, sample_sequence(family.base, rng)));
        break;
      }
      case 3:
        docs.push_back(tally_document(rng));
        break;
      default: {
        const auto src = rng.below(L);
        auto tgt = rng.below(L - 1);
        if (tgt >= src) ++tgt;
        const auto base = sample_sequence(family.base, rng);
        docs.push_back(std::string(kPromptIn) + language_header(src) + family.encode(src, base) +
                       std::string(kPromptOut) + language_header(tgt) +
                       std::string(kTranslateMarker) + family.encode(tgt, base));
      }
    }
  }
  return docs;
}

std::vector<std::int32_t> encode_document(std::string_view text) {
  auto ids = vocab::encode(text);
  ids.push_back(vocab::kStop);
  return ids;
}

}  // namespace tagllm
