#include <catch2/catch_amalgamated.hpp>

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

namespace fs = std::filesystem;
using Catch::Approx;

namespace {

struct RunResult {
  bool ok = false;
  std::string out, err;
};

struct Workspace {
  fs::path dir;
  Workspace() {
    dir = fs::temp_directory_path() / ("attnp_cli_" + std::to_string(getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Workspace() { fs::remove_all(dir); }

  std::string slurp(const fs::path& p) const {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }

  RunResult run(const std::string& args) const {
    fs::path out = dir / "stdout.txt", err = dir / "stderr.txt";
    std::string cmd = std::string(ATTNP_BIN) + " " + args + " >" + out.string() +
                      " 2>" + err.string();
    int rc = std::system(cmd.c_str());
    RunResult r;
    r.ok = rc == 0;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  std::size_t line_count(const fs::path& p) const {
    std::ifstream in(p);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) ++n;
    return n;
  }
};

std::string base_config(const fs::path& data_dir) {
  std::ostringstream cfg;
  cfg << "task=qa\n"
      << "train_path=" << (data_dir / "task1.train.jsonl").string() << "\n"
      << "valid_path=" << (data_dir / "task1.valid.jsonl").string() << "\n"
      << "test_path=" << (data_dir / "task1.test.jsonl").string() << "\n"
      << "n_classes=6\nembed_dim=8\nhidden=8\nattn_dim=4\n"
      << "epochs=2\nbatch_size=8\nseed=7\n";
  return cfg.str();
}

}  // namespace

TEST_CASE("command line workflow") {
  Workspace ws;
  fs::path data = ws.dir / "data";

  RunResult gen = ws.run("gen-data --task 1 --train 30 --valid 10 --test 10 --seed 3 --out " +
                         data.string());
  REQUIRE(gen.ok);
  REQUIRE(ws.line_count(data / "task1.train.jsonl") == 30);
  REQUIRE(ws.line_count(data / "task1.valid.jsonl") == 10);
  REQUIRE(ws.line_count(data / "task1.test.jsonl") == 10);
  REQUIRE(gen.out.find("vocabulary") != std::string::npos);

  SECTION("regeneration with the same seed is byte-identical") {
    fs::path data2 = ws.dir / "data2";
    REQUIRE(ws.run("gen-data --task 1 --train 30 --valid 10 --test 10 --seed 3 --out " +
                   data2.string())
                .ok);
    REQUIRE(ws.slurp(data / "task1.train.jsonl") == ws.slurp(data2 / "task1.train.jsonl"));
    REQUIRE(ws.slurp(data / "task1.test.jsonl") == ws.slurp(data2 / "task1.test.jsonl"));
  }

  SECTION("train, evaluate, sweep, render") {
    fs::path cfg = ws.dir / "cfg.txt";
    {
      std::ofstream f(cfg);
      f << base_config(data) << "method=attention_at\nepsilon=2\n";
    }
    fs::path run1 = ws.dir / "run1";
    RunResult tr = ws.run("train --config " + cfg.string() + " --out " + run1.string());
    REQUIRE(tr.ok);
    REQUIRE(fs::exists(run1 / "config.echo"));
    REQUIRE(fs::exists(run1 / "checkpoint.json"));
    REQUIRE(fs::exists(run1 / "report.json"));
    REQUIRE(fs::exists(run1 / "heatmaps" / "test_0.html"));
    REQUIRE(ws.line_count(run1 / "metrics.jsonl") == 2);

    {
      std::ifstream metrics(run1 / "metrics.jsonl");
      std::string line;
      std::size_t epoch = 0;
      while (std::getline(metrics, line)) {
        nlohmann::json j = nlohmann::json::parse(line);
        REQUIRE(j.at("epoch") == ++epoch);
        REQUIRE(j.at("train_loss").is_number());
        REQUIRE(j.at("valid_metric").is_number());
      }
    }
    {
      nlohmann::json report = nlohmann::json::parse(ws.slurp(run1 / "report.json"));
      REQUIRE(report.at("metric_name") == "accuracy");
      REQUIRE(report.at("n_instances") == 10);
    }
    std::string echo = ws.slurp(run1 / "config.echo");
    REQUIRE(echo.find("method=attention_at") != std::string::npos);
    REQUIRE(echo.find("seed=7") != std::string::npos);

    SECTION("re-running reproduces the metrics log byte for byte") {
      fs::path run2 = ws.dir / "run2";
      REQUIRE(ws.run("train --config " + cfg.string() + " --out " + run2.string()).ok);
      REQUIRE(ws.slurp(run1 / "metrics.jsonl") == ws.slurp(run2 / "metrics.jsonl"));
      REQUIRE(ws.slurp(run1 / "report.json") == ws.slurp(run2 / "report.json"));
    }

    SECTION("flag overrides beat the file and land in the echo") {
      fs::path run3 = ws.dir / "run3";
      RunResult tr3 = ws.run("train --config " + cfg.string() +
                             " --method attention_iat --epsilon 5 --out " + run3.string());
      REQUIRE(tr3.ok);
      std::string echo3 = ws.slurp(run3 / "config.echo");
      REQUIRE(echo3.find("method=attention_iat") != std::string::npos);
      REQUIRE(echo3.find("epsilon=5") != std::string::npos);
    }

    SECTION("evaluate writes a report for an existing checkpoint") {
      fs::path eval_dir = ws.dir / "eval1";
      RunResult ev = ws.run("evaluate --checkpoint " + (run1 / "checkpoint.json").string() +
                            " --data " + (data / "task1.test.jsonl").string() + " --out " +
                            eval_dir.string());
      REQUIRE(ev.ok);
      nlohmann::json report = nlohmann::json::parse(ws.slurp(eval_dir / "report.json"));
      REQUIRE(report.at("n_instances") == 10);
      REQUIRE(ev.out.find("accuracy") != std::string::npos);
    }

    SECTION("sweep pins epsilon over a degenerate range") {
      fs::path sweep_dir = ws.dir / "sweep1";
      fs::path cfg1 = ws.dir / "cfg_sweep.txt";
      {
        std::ofstream f(cfg1);
        f << base_config(data) << "method=attention_at\nepochs=1\n";
      }
      RunResult sw = ws.run("sweep-epsilon --config " + cfg1.string() +
                            " --trials 2 --range 3:3 --out " + sweep_dir.string());
      REQUIRE(sw.ok);
      std::ifstream rows(sweep_dir / "sweep.jsonl");
      std::string line;
      std::size_t n = 0;
      while (std::getline(rows, line)) {
        nlohmann::json j = nlohmann::json::parse(line);
        REQUIRE(j.at("epsilon") == 3.0);
        REQUIRE(j.at("seed") == 7);
        ++n;
      }
      REQUIRE(n == 2);
    }

    SECTION("render prints a table whose attention column sums to one") {
      fs::path html = ws.dir / "hm.html";
      RunResult rd = ws.run("render-attention --checkpoint " +
                            (run1 / "checkpoint.json").string() + " --data " +
                            (data / "task1.test.jsonl").string() + " --index 0 --out " +
                            html.string());
      REQUIRE(rd.ok);
      REQUIRE(fs::exists(html));
      REQUIRE(fs::file_size(html) > 0);
      REQUIRE(ws.slurp(html).find("<!DOCTYPE html>") == 0);

      std::istringstream table(rd.out);
      std::string tok, header_a, header_s;
      table >> tok >> header_a >> header_s;
      REQUIRE(tok == "token");
      double attn_sum = 0, a = 0, s = 0;
      std::size_t rows = 0;
      while (table >> tok >> a >> s) {
        attn_sum += a;
        ++rows;
      }
      REQUIRE(rows > 0);
      REQUIRE(attn_sum == Approx(1.0).margin(1e-6));
    }

    SECTION("render refuses an out-of-range index and writes nothing") {
      fs::path html = ws.dir / "absent.html";
      RunResult rd = ws.run("render-attention --checkpoint " +
                            (run1 / "checkpoint.json").string() + " --data " +
                            (data / "task1.test.jsonl").string() + " --index 999 --out " +
                            html.string());
      REQUIRE(!rd.ok);
      REQUIRE(!fs::exists(html));
      REQUIRE(rd.err.find("out of range") != std::string::npos);
    }
  }
}

TEST_CASE("command line error handling") {
  Workspace ws;
  fs::path data = ws.dir / "data";
  REQUIRE(ws.run("gen-data --task 1 --train 20 --valid 5 --test 5 --seed 1 --out " +
                 data.string())
              .ok);

  SECTION("missing dataset path fails cleanly") {
    fs::path cfg = ws.dir / "bad_path.txt";
    {
      std::ofstream f(cfg);
      f << "task=qa\ntrain_path=/nonexistent/file.jsonl\n"
        << "valid_path=/nonexistent/file.jsonl\ntest_path=/nonexistent/file.jsonl\n"
        << "n_classes=6\n";
    }
    RunResult r = ws.run("train --config " + cfg.string() + " --out " +
                         (ws.dir / "runx").string());
    REQUIRE(!r.ok);
    REQUIRE(r.err.find("error") != std::string::npos);
  }

  SECTION("unknown config keys are listed") {
    fs::path cfg = ws.dir / "unknown.txt";
    {
      std::ofstream f(cfg);
      f << base_config(data) << "learning_rte=0.1\n";
    }
    RunResult r = ws.run("train --config " + cfg.string() + " --out " +
                         (ws.dir / "runy").string());
    REQUIRE(!r.ok);
    REQUIRE(r.err.find("learning_rte") != std::string::npos);
  }

  SECTION("vanilla warns when epsilon is supplied") {
    fs::path cfg = ws.dir / "vanilla.txt";
    {
      std::ofstream f(cfg);
      f << base_config(data) << "method=vanilla\nepochs=1\n";
    }
    RunResult r = ws.run("train --config " + cfg.string() + " --epsilon 5 --out " +
                         (ws.dir / "runv").string());
    REQUIRE(r.ok);
    REQUIRE(r.err.find("warning") != std::string::npos);
    REQUIRE(r.err.find("epsilon") != std::string::npos);
  }

  SECTION("zero sweep trials is a usage error") {
    fs::path cfg = ws.dir / "sweep0.txt";
    {
      std::ofstream f(cfg);
      f << base_config(data) << "method=attention_at\nepochs=1\n";
    }
    RunResult r = ws.run("sweep-epsilon --config " + cfg.string() +
                         " --trials 0 --range 1:2 --out " + (ws.dir / "sweepz").string());
    REQUIRE(!r.ok);
    REQUIRE(r.err.find("trials") != std::string::npos);
  }

  SECTION("malformed sweep range is rejected") {
    fs::path cfg = ws.dir / "sweepr.txt";
    {
      std::ofstream f(cfg);
      f << base_config(data) << "method=attention_at\nepochs=1\n";
    }
    RunResult r = ws.run("sweep-epsilon --config " + cfg.string() +
                         " --trials 1 --range nope --out " + (ws.dir / "sweepr").string());
    REQUIRE(!r.ok);
    REQUIRE(r.err.find("lo:hi") != std::string::npos);
  }

  SECTION("unwritable output directory fails gen-data") {
    fs::path blocker = ws.dir / "blocker";
    {
      std::ofstream f(blocker);
      f << "x";
    }
    RunResult r = ws.run("gen-data --task 1 --train 5 --valid 2 --test 2 --seed 1 --out " +
                         (blocker / "sub").string());
    REQUIRE(!r.ok);
  }

  SECTION("invalid task number is rejected") {
    RunResult r = ws.run("gen-data --task 9 --train 5 --valid 2 --test 2 --seed 1 --out " +
                         (ws.dir / "d9").string());
    REQUIRE(!r.ok);
  }

  SECTION("missing config file is reported") {
    RunResult r = ws.run("train --config /nonexistent/cfg.txt --out " +
                         (ws.dir / "runz").string());
    REQUIRE(!r.ok);
    REQUIRE(r.err.find("config") != std::string::npos);
  }
}
