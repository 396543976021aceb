#include <attnp/data.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "support/babi_oracle.hpp"

using namespace attnp;
using Catch::Approx;

namespace {

std::string join(const std::vector<std::string>& toks) {
  std::string s;
  for (const auto& t : toks) {
    if (!s.empty()) s += ' ';
    s += t;
  }
  return s;
}

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name, const std::string& content = "") {
    path = (std::filesystem::temp_directory_path() /
            ("attnp_" + std::to_string(::getpid()) + "_" + name))
               .string();
    if (!content.empty()) {
      std::ofstream out(path);
      out << content;
    }
  }
  ~TempFile() { std::error_code ec; std::filesystem::remove(path, ec); }
};

std::size_t oracle_answer(const Instance& inst, int task) {
  return attnp_testing::oracle_answer(inst, task);
}

}  // namespace

TEST_CASE("tokenizer") {
  SECTION("lowercase, punctuation peeling, digit masking") {
    REQUIRE(tokenize_and_preprocess("The movie, in 1984!") ==
            std::vector<std::string>{"the", "movie", ",", "in", "qqq", "!"});
  }
  SECTION("empty and whitespace-only input") {
    REQUIRE(tokenize_and_preprocess("").empty());
    REQUIRE(tokenize_and_preprocess("  \t \n ").empty());
  }
  SECTION("repeated tokens survive") {
    REQUIRE(tokenize_and_preprocess("hello hello") ==
            std::vector<std::string>{"hello", "hello"});
  }
  SECTION("multiple punctuation marks split in reading order") {
    REQUIRE(tokenize_and_preprocess("\"movie,!\"") ==
            std::vector<std::string>{"\"", "movie", ",", "!", "\""});
    REQUIRE(tokenize_and_preprocess("--") == std::vector<std::string>{"-", "-"});
  }
  SECTION("internal punctuation stays put") {
    REQUIRE(tokenize_and_preprocess("don't stop") ==
            std::vector<std::string>{"don't", "stop"});
  }
  SECTION("any digit anywhere masks the token") {
    REQUIRE(tokenize_and_preprocess("3.5 v2 x 42,") ==
            std::vector<std::string>{"qqq", "qqq", "x", "qqq", ","});
  }
  SECTION("retokenizing a token list is a fixed point") {
    for (const char* text :
         {"The movie, in 1984! (really)", "don't -- STOP e-mail@x.com",
          "a,b ...huh?! 99 bottles"}) {
      auto once = tokenize_and_preprocess(text);
      auto twice = tokenize_and_preprocess(join(once));
      REQUIRE(once == twice);
    }
  }
}

TEST_CASE("vocabulary construction") {
  auto inst = [](std::vector<std::string> toks) {
    Instance i;
    i.p_tokens = std::move(toks);
    return i;
  };

  SECTION("first-appearance order after reserved slots") {
    Vocabulary v = build_vocab({inst({"b", "a", "b", "c"})}, 1);
    REQUIRE(v.size() == 5);
    REQUIRE(v.id_to_token[0] == "<pad>");
    REQUIRE(v.id_to_token[1] == "<unk>");
    REQUIRE(v.encode("b") == 2);
    REQUIRE(v.encode("a") == 3);
    REQUIRE(v.encode("c") == 4);
  }
  SECTION("frequency floor") {
    Vocabulary v = build_vocab({inst({"a", "a", "b"})}, 2);
    REQUIRE(v.token_to_id.count("a") == 1);
    REQUIRE(v.token_to_id.count("b") == 0);
    REQUIRE(v.encode("b") == kUnkId);
  }
  SECTION("floor of one keeps every distinct token") {
    Vocabulary v = build_vocab({inst({"x", "y"}), inst({"z"})}, 1);
    for (const char* t : {"x", "y", "z"}) REQUIRE(v.token_to_id.count(t) == 1);
  }
  SECTION("unseen tokens fall back to the unknown id") {
    Vocabulary v = build_vocab({inst({"a"})}, 1);
    REQUIRE(v.encode("never-seen") == kUnkId);
    REQUIRE(v.encode_tokens({"a", "nope"}) == std::vector<std::size_t>{2, 1});
  }
  SECTION("question tokens count toward the vocabulary") {
    Instance i;
    i.p_tokens = {"story"};
    i.q_tokens = {"question"};
    Vocabulary v = build_vocab({i}, 1);
    REQUIRE(v.token_to_id.count("question") == 1);
  }
  SECTION("bad inputs") {
    REQUIRE_THROWS_AS(build_vocab({}, 1), std::invalid_argument);
    REQUIRE_THROWS_AS(build_vocab({inst({"a"})}, 0), std::invalid_argument);
  }
  SECTION("encoding never grows the vocabulary") {
    Vocabulary v = build_vocab({inst({"a"})}, 1);
    std::size_t before = v.size();
    v.encode("new1");
    v.encode_tokens({"new2", "new3"});
    REQUIRE(v.size() == before);
  }
}

TEST_CASE("instance encoding and truncation") {
  Vocabulary v = build_vocab({[] {
                               Instance i;
                               i.p_tokens = {"a", "b", "c"};
                               return i;
                             }()},
                             1);
  Instance inst;
  inst.p_tokens = {"a", "b", "c", "a", "b"};
  inst.q_tokens = {"c", "c", "c"};
  inst.label = 4;

  bool truncated = false;
  Sample s = encode_instance(v, inst, 3, &truncated);
  REQUIRE(truncated);
  REQUIRE(s.p == std::vector<std::size_t>{2, 3, 4});  // tail dropped
  REQUIRE(s.q == std::vector<std::size_t>{4, 4, 4});
  REQUIRE(s.label == 4);

  Sample full = encode_instance(v, inst, 512, &truncated);
  REQUIRE(!truncated);
  REQUIRE(full.p.size() == 5);

  std::size_t count = 99;
  std::vector<Sample> all = encode_all(v, {inst, inst}, 4, &count);
  REQUIRE(count == 2);
  REQUIRE(all[0].p.size() == 4);

  REQUIRE_THROWS_AS(encode_instance(v, inst, 0), std::invalid_argument);
}

TEST_CASE("dataset files") {
  SECTION("single-mode round trip") {
    TempFile f("single.jsonl");
    std::vector<Instance> insts;
    Instance a;
    a.p_tokens = {"good", "movie"};
    a.label = 1;
    Instance b;
    b.p_tokens = {"bad"};
    b.label = 0;
    insts = {a, b};
    save_dataset(f.path, insts);
    std::vector<Instance> back = load_dataset(f.path, false, 2);
    REQUIRE(back.size() == 2);
    REQUIRE(back[0].p_tokens == a.p_tokens);
    REQUIRE(back[0].q_tokens.empty());
    REQUIRE(back[0].label == 1);
    REQUIRE(back[1].p_tokens == b.p_tokens);
  }
  SECTION("pair-mode round trip") {
    TempFile f("pair.jsonl");
    Instance a;
    a.p_tokens = {"john", "went", "home", "."};
    a.q_tokens = {"where", "is", "john", "?"};
    a.label = 3;
    save_dataset(f.path, {a});
    std::vector<Instance> back = load_dataset(f.path, true, 6);
    REQUIRE(back.size() == 1);
    REQUIRE(back[0].p_tokens == a.p_tokens);
    REQUIRE(back[0].q_tokens == a.q_tokens);
    REQUIRE(back[0].label == 3);
  }
  SECTION("raw text in token arrays is normalized") {
    TempFile f("norm.jsonl", R"({"tokens": ["Good,", "MOVIE"], "label": 0})"
                             "\n");
    std::vector<Instance> back = load_dataset(f.path, false, 2);
    REQUIRE(back[0].p_tokens == std::vector<std::string>{"good", ",", "movie"});
  }
  SECTION("blank lines are skipped") {
    TempFile f("blank.jsonl", "\n{\"tokens\": [\"a\"], \"label\": 0}\n   \n");
    REQUIRE(load_dataset(f.path, false, 2).size() == 1);
  }
  SECTION("errors carry the line number and field") {
    TempFile bad("bad.jsonl", "{\"tokens\": [\"a\"], \"label\": 0}\nnot json\n");
    REQUIRE_THROWS_WITH(load_dataset(bad.path, false, 2),
                        Catch::Matchers::ContainsSubstring(":2:"));

    TempFile miss("miss.jsonl", "{\"label\": 0}\n");
    REQUIRE_THROWS_WITH(load_dataset(miss.path, false, 2),
                        Catch::Matchers::ContainsSubstring("tokens"));

    TempFile missq("missq.jsonl", "{\"p_tokens\": [\"a\"], \"label\": 0}\n");
    REQUIRE_THROWS_WITH(load_dataset(missq.path, true, 2),
                        Catch::Matchers::ContainsSubstring("q_tokens"));

    TempFile range("range.jsonl", "{\"tokens\": [\"a\"], \"label\": 2}\n");
    REQUIRE_THROWS_WITH(load_dataset(range.path, false, 2),
                        Catch::Matchers::ContainsSubstring("out of range"));

    TempFile neg("neg.jsonl", "{\"tokens\": [\"a\"], \"label\": -1}\n");
    REQUIRE_THROWS(load_dataset(neg.path, false, 2));

    TempFile empty("empty.jsonl", "{\"tokens\": [], \"label\": 0}\n");
    REQUIRE_THROWS_WITH(load_dataset(empty.path, false, 2),
                        Catch::Matchers::ContainsSubstring("empty"));

    TempFile types("types.jsonl", "{\"tokens\": \"a\", \"label\": 0}\n");
    REQUIRE_THROWS_WITH(load_dataset(types.path, false, 2),
                        Catch::Matchers::ContainsSubstring("array"));

    REQUIRE_THROWS_WITH(load_dataset("/nonexistent/nope.jsonl", false, 2),
                        Catch::Matchers::ContainsSubstring("cannot open"));
  }
}

TEST_CASE("synthetic story tasks") {
  SECTION("argument validation") {
    REQUIRE_THROWS_AS(generate_babi_like(0, 1, 1, 1, 7), std::invalid_argument);
    REQUIRE_THROWS_AS(generate_babi_like(4, 1, 1, 1, 7), std::invalid_argument);
    REQUIRE_THROWS_AS(generate_babi_like(1, 0, 1, 1, 7), std::invalid_argument);
  }

  SECTION("fixed seed reproduces splits, new seed changes them") {
    BabiSplits a = generate_babi_like(2, 12, 5, 5, 99);
    BabiSplits b = generate_babi_like(2, 12, 5, 5, 99);
    BabiSplits c = generate_babi_like(2, 12, 5, 5, 100);
    auto eq = [](const std::vector<Instance>& x, const std::vector<Instance>& y) {
      if (x.size() != y.size()) return false;
      for (std::size_t i = 0; i < x.size(); ++i)
        if (x[i].p_tokens != y[i].p_tokens || x[i].q_tokens != y[i].q_tokens ||
            x[i].label != y[i].label)
          return false;
      return true;
    };
    REQUIRE(eq(a.train, b.train));
    REQUIRE(eq(a.valid, b.valid));
    REQUIRE(eq(a.test, b.test));
    REQUIRE(!eq(a.train, c.train));
  }

  SECTION("labels replay exactly under an independent text oracle") {
    for (int task : {1, 2, 3}) {
      BabiSplits s = generate_babi_like(task, 60, 15, 15, 1234 + task);
      for (const auto* split : {&s.train, &s.valid, &s.test}) {
        for (const Instance& inst : *split) {
          REQUIRE(!inst.p_tokens.empty());
          REQUIRE(!inst.q_tokens.empty());
          REQUIRE(inst.label < kBabiClasses);
          REQUIRE(oracle_answer(inst, task) == inst.label);
        }
      }
    }
  }

  SECTION("vocabulary stays desk sized") {
    for (int task : {1, 2, 3}) {
      BabiSplits s = generate_babi_like(task, 200, 10, 10, 5);
      Vocabulary v = build_vocab(s.train, 1);
      REQUIRE(v.size() <= 42);  // 40 distinct tokens plus the two reserved ids
      REQUIRE(v.size() >= 10);
    }
  }

  SECTION("task 1 answers track the queried actor's last movement") {
    BabiSplits s = generate_babi_like(1, 50, 1, 1, 31);
    for (const Instance& inst : s.train) {
      const std::string& actor = inst.q_tokens[2];
      std::string last_place;
      for (std::size_t i = 0; i + 5 < inst.p_tokens.size() + 1; i += 6)
        if (inst.p_tokens[i] == actor) last_place = inst.p_tokens[i + 4];
      REQUIRE(last_place == babi_places()[inst.label]);
    }
  }
}

TEST_CASE("embedding files") {
  SECTION("basic load and apply") {
    TempFile f("emb.txt", "hello 0.1 0.2\nworld -1.5 2.25\n");
    EmbeddingTable table = load_embeddings(f.path);
    REQUIRE(table.dim == 2);
    REQUIRE(table.vectors.at("hello") == std::vector<double>{0.1, 0.2});
    REQUIRE(table.vectors.at("world") == std::vector<double>{-1.5, 2.25});

    Instance i;
    i.p_tokens = {"hello", "unknownword"};
    Vocabulary v = build_vocab({i}, 1);

    ModelConfig cfg;
    cfg.task = TaskKind::bc;
    cfg.vocab = v.size();
    cfg.embed_dim = 2;
    cfg.hidden = 4;
    cfg.attn_dim = 2;
    cfg.n_classes = 2;
    Rng rng(3);
    Params p = init_params(cfg, rng);
    Tensor before = p.embed;

    std::size_t applied = apply_embeddings(p, v, table);
    REQUIRE(applied == 1);
    std::size_t hid = v.encode("hello");
    REQUIRE(p.embed.at(hid, 0) == 0.1);
    REQUIRE(p.embed.at(hid, 1) == 0.2);
    // absent token keeps its seeded row, pad row stays zero
    std::size_t uid = v.encode("unknownword");
    REQUIRE(p.embed.at(uid, 0) == before.at(uid, 0));
    REQUIRE(p.embed.at(kPadId, 0) == 0.0);
    REQUIRE(p.embed.at(kPadId, 1) == 0.0);
  }

  SECTION("dimension errors carry line numbers") {
    TempFile f("emb_bad.txt", "a 1 2\nb 3 4\nc 5 6 7\n");
    REQUIRE_THROWS_WITH(load_embeddings(f.path),
                        Catch::Matchers::ContainsSubstring(":3:"));
  }
  SECTION("non-numbers are rejected") {
    TempFile f("emb_nan.txt", "a 1 x\n");
    REQUIRE_THROWS(load_embeddings(f.path));
    TempFile g("emb_nan2.txt", "a 1 nan\n");
    REQUIRE_THROWS(load_embeddings(g.path));
    TempFile h("emb_short.txt", "lonetoken\n");
    REQUIRE_THROWS_WITH(load_embeddings(h.path),
                        Catch::Matchers::ContainsSubstring("no values"));
  }
  SECTION("empty file is rejected") {
    TempFile f("emb_empty.txt", "\n");
    REQUIRE_THROWS_WITH(load_embeddings(f.path),
                        Catch::Matchers::ContainsSubstring("empty"));
  }
  SECTION("model dimension mismatch is rejected") {
    TempFile f("emb_dim.txt", "a 1 2 3\n");
    EmbeddingTable table = load_embeddings(f.path);
    Instance i;
    i.p_tokens = {"a"};
    Vocabulary v = build_vocab({i}, 1);
    ModelConfig cfg;
    cfg.vocab = v.size();
    cfg.embed_dim = 2;
    cfg.hidden = 4;
    cfg.n_classes = 2;
    Rng rng(3);
    Params p = init_params(cfg, rng);
    REQUIRE_THROWS_AS(apply_embeddings(p, v, table), std::invalid_argument);
  }
}
