#pragma once

// Text preprocessing, vocabulary construction, JSONL dataset IO, embedding
// files, and a synthetic story-question generator for zero-download runs.

#include <attnp/model.hpp>
#include <attnp/rng.hpp>

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace attnp {

inline constexpr std::size_t kMaxSeqLen = 512;

// One labeled example in token form. q_tokens stays empty in single mode.
struct Instance {
  std::vector<std::string> p_tokens;
  std::vector<std::string> q_tokens;
  std::size_t label = 0;
};

// Lowercase, split on whitespace, peel leading and trailing punctuation into
// their own tokens, and replace any token containing a digit with "qqq".
inline std::vector<std::string> tokenize_and_preprocess(const std::string& text) {
  auto is_sp = [](unsigned char c) { return std::isspace(c) != 0; };
  auto is_pu = [](unsigned char c) { return std::ispunct(c) != 0; };
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_sp(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_sp(text[j])) ++j;
    if (j > i) {
      std::string w = text.substr(i, j - i);
      for (char& c : w) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      std::size_t a = 0, b = w.size();
      while (a < b && is_pu(w[a])) out.emplace_back(1, w[a++]);
      std::size_t tail = b;
      while (tail > a && is_pu(w[tail - 1])) --tail;
      if (tail > a) {
        std::string core = w.substr(a, tail - a);
        bool digit = std::any_of(core.begin(), core.end(), [](unsigned char c) {
          return std::isdigit(c) != 0;
        });
        out.push_back(digit ? "qqq" : core);
      }
      for (std::size_t k = tail; k < b; ++k) out.emplace_back(1, w[k]);
    }
    i = j;
  }
  return out;
}

struct Vocabulary {
  std::vector<std::string> id_to_token{"<pad>", "<unk>"};
  std::unordered_map<std::string, std::size_t> token_to_id;

  std::size_t size() const { return id_to_token.size(); }

  std::size_t encode(const std::string& tok) const {
    auto it = token_to_id.find(tok);
    return it == token_to_id.end() ? kUnkId : it->second;
  }

  std::vector<std::size_t> encode_tokens(const std::vector<std::string>& toks) const {
    std::vector<std::size_t> ids(toks.size());
    for (std::size_t i = 0; i < toks.size(); ++i) ids[i] = encode(toks[i]);
    return ids;
  }
};

// Ids are assigned to tokens reaching min_count, in first-appearance order
// after the two reserved slots. Anything rarer encodes to <unk>.
inline Vocabulary build_vocab(const std::vector<Instance>& train,
                              std::size_t min_count) {
  if (train.empty()) throw std::invalid_argument("build_vocab: empty corpus");
  if (min_count == 0) throw std::invalid_argument("build_vocab: min_count must be positive");
  std::unordered_map<std::string, std::size_t> freq;
  std::vector<std::string> order;
  auto feed = [&](const std::vector<std::string>& toks) {
    for (const std::string& t : toks)
      if (freq[t]++ == 0) order.push_back(t);
  };
  for (const Instance& inst : train) {
    feed(inst.p_tokens);
    feed(inst.q_tokens);
  }
  Vocabulary v;
  v.token_to_id["<pad>"] = kPadId;
  v.token_to_id["<unk>"] = kUnkId;
  for (const std::string& t : order) {
    if (freq[t] < min_count) continue;
    if (v.token_to_id.count(t)) continue;
    v.token_to_id[t] = v.id_to_token.size();
    v.id_to_token.push_back(t);
  }
  return v;
}

// Id-encodes one instance, truncating over-long sequences from the end.
inline Sample encode_instance(const Vocabulary& v, const Instance& inst,
                              std::size_t max_len = kMaxSeqLen,
                              bool* truncated = nullptr) {
  if (max_len == 0) throw std::invalid_argument("encode_instance: max_len must be positive");
  Sample s;
  s.p = v.encode_tokens(inst.p_tokens);
  s.q = v.encode_tokens(inst.q_tokens);
  if (truncated) *truncated = false;
  if (s.p.size() > max_len) {
    s.p.resize(max_len);
    if (truncated) *truncated = true;
  }
  if (s.q.size() > max_len) {
    s.q.resize(max_len);
    if (truncated) *truncated = true;
  }
  s.label = inst.label;
  return s;
}

inline std::vector<Sample> encode_all(const Vocabulary& v,
                                      const std::vector<Instance>& insts,
                                      std::size_t max_len = kMaxSeqLen,
                                      std::size_t* truncated_count = nullptr) {
  std::vector<Sample> out;
  out.reserve(insts.size());
  std::size_t n_trunc = 0;
  for (const Instance& inst : insts) {
    bool tr = false;
    out.push_back(encode_instance(v, inst, max_len, &tr));
    n_trunc += tr;
  }
  if (truncated_count) *truncated_count = n_trunc;
  return out;
}

namespace detail {

[[noreturn]] inline void data_error(const std::string& path, std::size_t line,
                                    const std::string& what) {
  throw std::runtime_error(path + ":" + std::to_string(line) + ": " + what);
}

inline std::vector<std::string> json_token_list(const nlohmann::json& j,
                                                const char* field,
                                                const std::string& path,
                                                std::size_t line) {
  if (!j.contains(field))
    data_error(path, line, std::string("missing field '") + field + "'");
  const auto& arr = j.at(field);
  if (!arr.is_array())
    data_error(path, line, std::string("field '") + field + "' must be an array of strings");
  std::vector<std::string> toks;
  for (const auto& el : arr) {
    if (!el.is_string())
      data_error(path, line, std::string("field '") + field + "' must contain only strings");
    // normalize stored tokens the same way raw text is handled
    for (std::string& t : tokenize_and_preprocess(el.get<std::string>()))
      toks.push_back(std::move(t));
  }
  if (toks.empty())
    data_error(path, line, std::string("field '") + field + "' is empty after preprocessing");
  return toks;
}

}  // namespace detail

// JSON-lines reader. Single mode expects {"tokens": [...], "label": n}, pair
// mode {"p_tokens": [...], "q_tokens": [...], "label": n}. Tokens are run
// through the preprocessor, and labels are checked against n_classes.
inline std::vector<Instance> load_dataset(const std::string& path, bool pair_mode,
                                          std::size_t n_classes) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset file: " + path);
  std::vector<Instance> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      detail::data_error(path, line_no, std::string("invalid JSON: ") + e.what());
    }
    Instance inst;
    if (pair_mode) {
      inst.p_tokens = detail::json_token_list(j, "p_tokens", path, line_no);
      inst.q_tokens = detail::json_token_list(j, "q_tokens", path, line_no);
    } else {
      inst.p_tokens = detail::json_token_list(j, "tokens", path, line_no);
    }
    if (!j.contains("label"))
      detail::data_error(path, line_no, "missing field 'label'");
    if (!j.at("label").is_number_unsigned())
      detail::data_error(path, line_no, "field 'label' must be a nonnegative integer");
    inst.label = j.at("label").get<std::size_t>();
    if (inst.label >= n_classes)
      detail::data_error(path, line_no,
                         "label " + std::to_string(inst.label) + " out of range (" +
                             std::to_string(n_classes) + " classes)");
    out.push_back(std::move(inst));
  }
  return out;
}

inline void save_dataset(const std::string& path, const std::vector<Instance>& insts) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write dataset file: " + path);
  for (const Instance& inst : insts) {
    nlohmann::json j;
    if (inst.q_tokens.empty()) {
      j["tokens"] = inst.p_tokens;
    } else {
      j["p_tokens"] = inst.p_tokens;
      j["q_tokens"] = inst.q_tokens;
    }
    j["label"] = inst.label;
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

// ---- synthetic story-question tasks ----------------------------------------
//
// Templated stories about actors moving between places and carrying objects,
// with a final location question. Task 1 asks where an actor is (one
// supporting fact), task 2 where a carried object is (two facts), task 3
// where an object was before its current place (three facts). Labels index
// the place list.

inline const std::vector<std::string>& babi_actors() {
  static const std::vector<std::string> v{"mary", "john", "sandra", "daniel"};
  return v;
}

inline const std::vector<std::string>& babi_places() {
  static const std::vector<std::string> v{"kitchen",  "garden",  "office",
                                          "bathroom", "bedroom", "hallway"};
  return v;
}

inline const std::vector<std::string>& babi_objects() {
  static const std::vector<std::string> v{"football", "apple", "milk"};
  return v;
}

inline constexpr std::size_t kBabiClasses = 6;

namespace detail {

inline const std::vector<std::string>& move_verbs() {
  static const std::vector<std::string> v{"went", "moved", "journeyed", "travelled"};
  return v;
}
inline const std::vector<std::string>& take_verbs() {
  static const std::vector<std::string> v{"took", "grabbed"};
  return v;
}
inline const std::vector<std::string>& drop_verbs() {
  static const std::vector<std::string> v{"dropped", "left"};
  return v;
}

inline void emit_move(std::vector<std::string>& toks, const std::string& actor,
                      std::size_t place, Rng& rng) {
  const auto& verbs = move_verbs();
  toks.push_back(actor);
  toks.push_back(verbs[rng.index(verbs.size())]);
  toks.push_back("to");
  toks.push_back("the");
  toks.push_back(babi_places()[place]);
  toks.push_back(".");
}

inline void emit_take(std::vector<std::string>& toks, const std::string& actor,
                      const std::string& object, Rng& rng) {
  const auto& verbs = take_verbs();
  toks.push_back(actor);
  toks.push_back(verbs[rng.index(verbs.size())]);
  toks.push_back("the");
  toks.push_back(object);
  toks.push_back(".");
}

inline void emit_drop(std::vector<std::string>& toks, const std::string& actor,
                      const std::string& object, Rng& rng) {
  const auto& verbs = drop_verbs();
  toks.push_back(actor);
  toks.push_back(verbs[rng.index(verbs.size())]);
  toks.push_back("the");
  toks.push_back(object);
  toks.push_back(".");
}

// a place different from `avoid` (pass an out-of-range avoid for a free pick)
inline std::size_t fresh_place(Rng& rng, std::size_t avoid) {
  std::size_t n = babi_places().size();
  std::size_t p = rng.index(n);
  while (p == avoid) p = rng.index(n);
  return p;
}

inline Instance gen_task1(Rng& rng) {
  const auto& actors = babi_actors();
  Instance inst;
  std::size_t n_sent = 2 + rng.index(3);  // 2..4 movements
  std::vector<std::string> movers;
  std::vector<std::size_t> last_place(actors.size(), kBabiClasses);
  for (std::size_t k = 0; k < n_sent; ++k) {
    std::size_t a = rng.index(actors.size());
    std::size_t pl = fresh_place(rng, last_place[a]);
    emit_move(inst.p_tokens, actors[a], pl, rng);
    last_place[a] = pl;
  }
  std::vector<std::size_t> moved;
  for (std::size_t a = 0; a < actors.size(); ++a)
    if (last_place[a] < kBabiClasses) moved.push_back(a);
  std::size_t who = moved[rng.index(moved.size())];
  inst.q_tokens = {"where", "is", actors[who], "?"};
  inst.label = last_place[who];
  return inst;
}

inline Instance gen_task2(Rng& rng) {
  const auto& actors = babi_actors();
  const auto& objects = babi_objects();
  Instance inst;
  std::size_t carrier = rng.index(actors.size());
  std::size_t object = rng.index(objects.size());

  std::size_t here = rng.index(kBabiClasses);
  emit_move(inst.p_tokens, actors[carrier], here, rng);
  emit_take(inst.p_tokens, actors[carrier], objects[object], rng);
  std::size_t obj_place = here;

  if (rng.index(2)) {  // carry the object somewhere else
    here = fresh_place(rng, here);
    emit_move(inst.p_tokens, actors[carrier], here, rng);
    obj_place = here;
  }
  if (rng.index(2)) {  // drop it and wander off
    emit_drop(inst.p_tokens, actors[carrier], objects[object], rng);
    obj_place = here;
    here = fresh_place(rng, here);
    emit_move(inst.p_tokens, actors[carrier], here, rng);
  }
  // distractor movement by someone else
  if (rng.index(2)) {
    std::size_t other = rng.index(actors.size());
    while (other == carrier) other = rng.index(actors.size());
    emit_move(inst.p_tokens, actors[other], rng.index(kBabiClasses), rng);
  }

  inst.q_tokens = {"where", "is", "the", objects[object], "?"};
  inst.label = obj_place;
  return inst;
}

inline Instance gen_task3(Rng& rng) {
  const auto& actors = babi_actors();
  const auto& objects = babi_objects();
  Instance inst;
  std::size_t carrier = rng.index(actors.size());
  std::size_t object = rng.index(objects.size());

  // the object's location history while carried; all places distinct so the
  // "before" question has a single answer
  std::size_t n_hops = 2 + rng.index(2);  // history length 2..3
  std::vector<std::size_t> history;
  std::vector<bool> used(kBabiClasses, false);
  for (std::size_t k = 0; k < n_hops; ++k) {
    std::size_t pl = rng.index(kBabiClasses);
    while (used[pl]) pl = rng.index(kBabiClasses);
    used[pl] = true;
    history.push_back(pl);
  }

  emit_move(inst.p_tokens, actors[carrier], history[0], rng);
  emit_take(inst.p_tokens, actors[carrier], objects[object], rng);
  for (std::size_t k = 1; k < history.size(); ++k) {
    if (rng.index(3) == 0) {  // occasional distractor between the hops
      std::size_t other = rng.index(actors.size());
      while (other == carrier) other = rng.index(actors.size());
      emit_move(inst.p_tokens, actors[other], rng.index(kBabiClasses), rng);
    }
    emit_move(inst.p_tokens, actors[carrier], history[k], rng);
  }

  inst.q_tokens = {"where", "was",    "the", objects[object],
                   "before", "the", babi_places()[history.back()], "?"};
  inst.label = history[history.size() - 2];
  return inst;
}

}  // namespace detail

struct BabiSplits {
  std::vector<Instance> train, valid, test;
};

inline BabiSplits generate_babi_like(int task, std::size_t n_train,
                                     std::size_t n_valid, std::size_t n_test,
                                     std::uint64_t seed) {
  if (task < 1 || task > 3)
    throw std::invalid_argument("generate_babi_like: task must be 1, 2, or 3");
  if (n_train == 0 || n_valid == 0 || n_test == 0)
    throw std::invalid_argument("generate_babi_like: split sizes must be positive");
  Rng rng(seed);
  auto gen = [&](std::size_t n) {
    std::vector<Instance> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      switch (task) {
        case 1: out.push_back(detail::gen_task1(rng)); break;
        case 2: out.push_back(detail::gen_task2(rng)); break;
        default: out.push_back(detail::gen_task3(rng)); break;
      }
    }
    return out;
  };
  BabiSplits s;
  s.train = gen(n_train);
  s.valid = gen(n_valid);
  s.test = gen(n_test);
  return s;
}

// ---- embedding files --------------------------------------------------------

struct EmbeddingTable {
  std::size_t dim = 0;
  std::unordered_map<std::string, std::vector<double>> vectors;
};

// Plain-text format: one token followed by d space-separated numbers per
// line. The first data line fixes d.
inline EmbeddingTable load_embeddings(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open embedding file: " + path);
  EmbeddingTable table;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    std::istringstream ss(line);
    std::string token;
    ss >> token;
    std::vector<double> vals;
    std::string field;
    while (ss >> field) {
      try {
        std::size_t used = 0;
        double v = std::stod(field, &used);
        if (used != field.size() || !std::isfinite(v))
          throw std::invalid_argument(field);
        vals.push_back(v);
      } catch (const std::exception&) {
        detail::data_error(path, line_no, "not a finite number: '" + field + "'");
      }
    }
    if (vals.empty()) detail::data_error(path, line_no, "no values after token");
    if (table.dim == 0) table.dim = vals.size();
    if (vals.size() != table.dim)
      detail::data_error(path, line_no,
                         "expected " + std::to_string(table.dim) + " values, got " +
                             std::to_string(vals.size()));
    table.vectors[token] = std::move(vals);
  }
  if (table.dim == 0) throw std::runtime_error("empty embedding file: " + path);
  return table;
}

// Overwrites embedding rows for vocabulary tokens present in the table; other
// rows keep their seeded init and the pad row stays zero. Returns the number
// of rows replaced.
inline std::size_t apply_embeddings(Params& p, const Vocabulary& v,
                                    const EmbeddingTable& table) {
  if (table.dim != p.cfg.embed_dim)
    throw std::invalid_argument("embedding file dimension " +
                                std::to_string(table.dim) +
                                " does not match model dimension " +
                                std::to_string(p.cfg.embed_dim));
  std::size_t applied = 0;
  for (std::size_t id = kPadId + 1; id < v.size() && id < p.embed.rows(); ++id) {
    auto it = table.vectors.find(v.id_to_token[id]);
    if (it == table.vectors.end()) continue;
    for (std::size_t j = 0; j < table.dim; ++j) p.embed.values[id * table.dim + j] = it->second[j];
    ++applied;
  }
  return applied;
}

}  // namespace attnp
