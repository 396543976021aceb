#include <attnp/adversary.hpp>
#include <attnp/checkpoint.hpp>
#include <attnp/data.hpp>
#include <attnp/evaluator.hpp>
#include <attnp/model.hpp>
#include <attnp/trainer.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace attnp;

namespace {

// Flat key=value configuration with # comments. Flag values overwrite file
// values before anything is read, and every key that influenced the run gets
// echoed back out so a run directory is self-describing.
struct RunConfig {
  std::map<std::string, std::string> raw;
  std::set<std::string> consumed;
  std::map<std::string, std::string> effective;

  static std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }

  static RunConfig from_file(const std::string& path) {
    RunConfig rc;
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file " + path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::string body = trim(line);
      if (body.empty() || body[0] == '#') continue;
      std::size_t eq = body.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                 ": expected key=value");
      std::string key = trim(body.substr(0, eq));
      std::string value = trim(body.substr(eq + 1));
      if (key.empty())
        throw std::runtime_error(path + ":" + std::to_string(lineno) + ": empty key");
      rc.raw[key] = value;
    }
    return rc;
  }

  void set(const std::string& key, const std::string& value) { raw[key] = value; }
  bool has(const std::string& key) const { return raw.count(key) > 0; }

  std::string str(const std::string& key, const std::string& fallback) {
    consumed.insert(key);
    auto it = raw.find(key);
    std::string v = it == raw.end() ? fallback : it->second;
    effective[key] = v;
    return v;
  }

  std::string require(const std::string& key) {
    consumed.insert(key);
    auto it = raw.find(key);
    if (it == raw.end()) throw std::runtime_error("config key '" + key + "' is required");
    effective[key] = it->second;
    return it->second;
  }

  double num(const std::string& key, double fallback) {
    consumed.insert(key);
    auto it = raw.find(key);
    if (it == raw.end()) {
      effective[key] = std::to_string(fallback);
      return fallback;
    }
    try {
      std::size_t used = 0;
      double x = std::stod(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument(it->second);
      effective[key] = it->second;
      return x;
    } catch (const std::exception&) {
      throw std::runtime_error("config key '" + key + "': invalid number '" +
                               it->second + "'");
    }
  }

  std::size_t uint(const std::string& key, std::size_t fallback) {
    consumed.insert(key);
    auto it = raw.find(key);
    if (it == raw.end()) {
      effective[key] = std::to_string(fallback);
      return fallback;
    }
    try {
      std::size_t used = 0;
      long long x = std::stoll(it->second, &used);
      if (used != it->second.size() || x < 0) throw std::invalid_argument(it->second);
      effective[key] = it->second;
      return static_cast<std::size_t>(x);
    } catch (const std::exception&) {
      throw std::runtime_error("config key '" + key + "': invalid count '" +
                               it->second + "'");
    }
  }

  bool flag(const std::string& key, bool fallback) {
    std::string v = str(key, fallback ? "1" : "0");
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw std::runtime_error("config key '" + key + "': expected 0/1, got '" + v + "'");
  }

  void ensure_all_consumed() const {
    std::string unknown;
    for (const auto& [key, value] : raw)
      if (!consumed.count(key)) unknown += (unknown.empty() ? "" : ", ") + key;
    if (!unknown.empty()) throw std::runtime_error("unknown config keys: " + unknown);
  }

  void write_echo(const fs::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    for (const auto& [key, value] : effective) out << key << "=" << value << "\n";
  }
};

int check_outputs(const std::vector<fs::path>& outputs) {
  for (const fs::path& p : outputs)
    if (!fs::exists(p)) {
      std::cerr << "error: expected output " << p << " was not written\n";
      return 1;
    }
  return 0;
}

struct LoadedData {
  Vocabulary vocab;
  std::vector<Sample> train, valid, test;
  std::vector<Instance> test_insts;
  ModelConfig model;
  TrainConfig tcfg;
  EmbeddingTable embeddings;
  bool has_embeddings = false;
};

// Reads every key a training-style run needs, loads the three splits, and
// builds the vocabulary from the training split alone.
LoadedData prepare_run(RunConfig& rc) {
  LoadedData d;
  TaskKind task = task_from_name(rc.require("task"));
  std::string train_path = rc.require("train_path");
  std::string valid_path = rc.require("valid_path");
  std::string test_path = rc.require("test_path");
  std::size_t n_classes = rc.uint("n_classes", 2);
  std::size_t min_count = rc.uint("min_count", 1);
  std::size_t max_len = rc.uint("max_len", kMaxSeqLen);

  d.model.task = task;
  d.model.embed_dim = rc.uint("embed_dim", 50);
  d.model.hidden = rc.uint("hidden", 64);
  d.model.attn_dim = rc.uint("attn_dim", 0);
  d.model.n_classes = n_classes;

  d.tcfg.learning_rate = rc.num("learning_rate", 0.001);
  d.tcfg.l2_coefficient = rc.num("l2_coefficient", 1e-5);
  d.tcfg.epochs = rc.uint("epochs", 40);
  d.tcfg.batch_size = rc.uint("batch_size", 32);
  d.tcfg.seed = rc.uint("seed", 0);
  d.tcfg.early_stop_patience = rc.uint("early_stop_patience", 5);
  d.tcfg.clip_gradients = rc.flag("clip_gradients", true);
  d.tcfg.freeze_embeddings = rc.flag("freeze_embeddings", false);
  d.tcfg.adv.method = method_from_name(rc.str("method", "vanilla"));
  bool epsilon_given = rc.has("epsilon");
  d.tcfg.adv.epsilon = rc.num("epsilon", 1.0);
  d.tcfg.adv.lambda = rc.num("lambda", 1.0);
  std::string emb_path = rc.str("embeddings_path", "");
  rc.ensure_all_consumed();

  if (d.tcfg.adv.method == AdvMethod::vanilla && epsilon_given)
    std::cerr << "warning: epsilon has no effect with method vanilla\n";

  bool pair = is_pair_task(task);
  std::vector<Instance> tr = load_dataset(train_path, pair, n_classes);
  std::vector<Instance> va = load_dataset(valid_path, pair, n_classes);
  d.test_insts = load_dataset(test_path, pair, n_classes);

  d.vocab = build_vocab(tr, min_count);
  d.model.vocab = d.vocab.size();
  d.model.validate();
  d.tcfg.validate();

  std::size_t truncated = 0;
  d.train = encode_all(d.vocab, tr, max_len, &truncated);
  d.valid = encode_all(d.vocab, va, max_len, &truncated);
  d.test = encode_all(d.vocab, d.test_insts, max_len, &truncated);
  if (truncated > 0)
    std::cerr << "note: " << truncated << " instances were truncated to " << max_len
              << " tokens\n";

  if (!emb_path.empty()) {
    d.embeddings = load_embeddings(emb_path);
    d.has_embeddings = true;
  }
  return d;
}

nlohmann::json epoch_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},
          {"train_loss", r.train_loss},
          {"train_clean", r.train_clean},
          {"train_adv", r.train_adv},
          {"valid_metric", r.valid_metric}};
}

void write_heatmap(const Params& params, const Instance& inst, const Sample& s,
                   const fs::path& path) {
  Tape t;
  Bound b = bind(t, params);
  Forward fw = forward(t, b, s);
  std::vector<double> attn = t.value(fw.head.attn).values;
  SaliencyMap sal = gradient_importance(params, s);
  std::vector<std::string> tokens(inst.p_tokens.begin(),
                                  inst.p_tokens.begin() + s.p.size());
  Heatmap hm = render_heatmap(tokens, attn, sal.values);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << hm.html;
}

int cmd_gen_data(int task, std::size_t n_train, std::size_t n_valid, std::size_t n_test,
                 std::uint64_t seed, const std::string& out_dir) {
  fs::create_directories(out_dir);
  BabiSplits sp = generate_babi_like(task, n_train, n_valid, n_test, seed);
  fs::path base = fs::path(out_dir) / ("task" + std::to_string(task));
  fs::path train_p = base.string() + ".train.jsonl";
  fs::path valid_p = base.string() + ".valid.jsonl";
  fs::path test_p = base.string() + ".test.jsonl";
  save_dataset(train_p.string(), sp.train);
  save_dataset(valid_p.string(), sp.valid);
  save_dataset(test_p.string(), sp.test);
  Vocabulary v = build_vocab(sp.train, 1);
  std::cout << "task " << task << ": " << sp.train.size() << " train, " << sp.valid.size()
            << " valid, " << sp.test.size() << " test instances; vocabulary " << v.size()
            << " tokens\n";
  return check_outputs({train_p, valid_p, test_p});
}

int cmd_train(RunConfig& rc, const std::string& out_dir) {
  LoadedData d = prepare_run(rc);

  fs::path run_dir(out_dir);
  fs::create_directories(run_dir / "heatmaps");
  rc.write_echo(run_dir / "config.echo");

  TrainResult res = train(d.train, d.valid, d.model, d.tcfg,
                          d.has_embeddings ? &d.embeddings : nullptr, &d.vocab);

  {
    std::ofstream metrics(run_dir / "metrics.jsonl");
    if (!metrics) throw std::runtime_error("cannot write metrics.jsonl");
    for (const EpochRecord& r : res.history.epochs)
      metrics << epoch_json(r).dump() << "\n";
  }
  save_checkpoint((run_dir / "checkpoint.json").string(), res.params, d.vocab, d.tcfg);

  EvalReport rep = evaluate(res.params, d.test);
  {
    std::ofstream report(run_dir / "report.json");
    if (!report) throw std::runtime_error("cannot write report.json");
    report << to_json(rep).dump(2) << "\n";
  }

  std::vector<fs::path> outputs{run_dir / "config.echo", run_dir / "metrics.jsonl",
                                run_dir / "checkpoint.json", run_dir / "report.json"};
  for (std::size_t i = 0; i < d.test.size() && i < 3; ++i) {
    fs::path hm = run_dir / "heatmaps" / ("test_" + std::to_string(i) + ".html");
    write_heatmap(res.params, d.test_insts[i], d.test[i], hm);
    outputs.push_back(hm);
  }

  std::cout << "trained " << res.history.epochs.size() << " epochs; best epoch "
            << res.history.best_epoch << " with validation " << rep.metric_name << " "
            << res.history.best_metric << "\n";
  std::cout << "test " << rep.metric_name << " " << rep.metric
            << ", mean attention-saliency correlation " << rep.mean_correlation << "\n";
  return check_outputs(outputs);
}

int cmd_evaluate(const std::string& checkpoint_path, const std::string& data_path,
                 const std::string& out_dir) {
  Checkpoint ck = load_checkpoint(checkpoint_path);
  bool pair = is_pair_task(ck.params.cfg.task);
  std::vector<Instance> insts = load_dataset(data_path, pair, ck.params.cfg.n_classes);
  std::vector<Sample> samples = encode_all(ck.vocab, insts);
  EvalReport rep = evaluate(ck.params, samples);

  fs::create_directories(out_dir);
  fs::path report_p = fs::path(out_dir) / "report.json";
  {
    std::ofstream report(report_p);
    if (!report) throw std::runtime_error("cannot write report.json");
    report << to_json(rep).dump(2) << "\n";
  }
  std::cout << rep.metric_name << " " << rep.metric << " on " << rep.n_instances
            << " instances; mean attention-saliency correlation " << rep.mean_correlation
            << " (" << rep.n_skipped << " skipped)\n";
  return check_outputs({report_p});
}

int cmd_sweep(RunConfig& rc, const std::string& out_dir, std::size_t trials,
              const std::string& range) {
  std::size_t colon = range.find(':');
  double lo = 0, hi = 0;
  try {
    if (colon == std::string::npos) throw std::invalid_argument(range);
    std::size_t used = 0;
    std::string lo_s = range.substr(0, colon), hi_s = range.substr(colon + 1);
    lo = std::stod(lo_s, &used);
    if (used != lo_s.size()) throw std::invalid_argument(range);
    hi = std::stod(hi_s, &used);
    if (used != hi_s.size()) throw std::invalid_argument(range);
  } catch (const std::exception&) {
    throw std::runtime_error("--range expects lo:hi, got '" + range + "'");
  }

  LoadedData d = prepare_run(rc);
  fs::create_directories(out_dir);
  rc.write_echo(fs::path(out_dir) / "config.echo");

  Rng rng(d.tcfg.seed);
  std::vector<SweepRow> rows =
      epsilon_sweep(d.train, d.valid, d.model, d.tcfg, trials, lo, hi, rng,
                    d.has_embeddings ? &d.embeddings : nullptr, &d.vocab);

  fs::path sweep_p = fs::path(out_dir) / "sweep.jsonl";
  {
    std::ofstream out(sweep_p);
    if (!out) throw std::runtime_error("cannot write sweep.jsonl");
    for (const SweepRow& r : rows) {
      nlohmann::json j{{"epsilon", r.epsilon},
                       {"valid_metric", r.valid_metric},
                       {"seed", d.tcfg.seed}};
      out << j.dump() << "\n";
    }
  }
  for (const SweepRow& r : rows)
    std::cout << "epsilon " << r.epsilon << " -> valid metric " << r.valid_metric << "\n";
  return check_outputs({fs::path(out_dir) / "config.echo", sweep_p});
}

int cmd_render(const std::string& checkpoint_path, const std::string& data_path,
               std::size_t index, const std::string& out_path) {
  Checkpoint ck = load_checkpoint(checkpoint_path);
  bool pair = is_pair_task(ck.params.cfg.task);
  std::vector<Instance> insts = load_dataset(data_path, pair, ck.params.cfg.n_classes);
  if (index >= insts.size())
    throw std::runtime_error("index " + std::to_string(index) + " out of range for " +
                             std::to_string(insts.size()) + " instances");

  Sample s = encode_instance(ck.vocab, insts[index]);
  Tape t;
  Bound b = bind(t, ck.params);
  Forward fw = forward(t, b, s);
  std::vector<double> attn = t.value(fw.head.attn).values;
  SaliencyMap sal = gradient_importance(ck.params, s);
  std::vector<std::string> tokens(insts[index].p_tokens.begin(),
                                  insts[index].p_tokens.begin() + s.p.size());

  fs::path out(out_path);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  Heatmap hm = render_heatmap(tokens, attn, sal.values);
  {
    std::ofstream f(out);
    if (!f) throw std::runtime_error("cannot write " + out_path);
    f << hm.html;
  }

  std::printf("%-20s %12s %12s\n", "token", "attention", "saliency");
  for (std::size_t i = 0; i < tokens.size(); ++i)
    std::printf("%-20s %12.6f %12.6f\n", tokens[i].c_str(), attn[i], sal.values[i]);
  return check_outputs({out});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adversarial training toolkit for attention models"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "generate synthetic QA datasets");
  int g_task = 1;
  std::size_t g_train = 1000, g_valid = 200, g_test = 200;
  std::uint64_t g_seed = 0;
  std::string g_out;
  gen->add_option("--task", g_task, "task number (1-3)")->required();
  gen->add_option("--train", g_train, "training instances");
  gen->add_option("--valid", g_valid, "validation instances");
  gen->add_option("--test", g_test, "test instances");
  gen->add_option("--seed", g_seed, "generator seed");
  gen->add_option("--out", g_out, "output directory")->required();

  auto* tr = app.add_subcommand("train", "train a model from a config file");
  std::string t_config, t_out = "run", t_method, t_epsilon, t_seed;
  tr->add_option("--config", t_config, "key=value config file")->required();
  tr->add_option("--out", t_out, "run directory");
  tr->add_option("--method", t_method, "override the training method");
  tr->add_option("--epsilon", t_epsilon, "override the perturbation size");
  tr->add_option("--seed", t_seed, "override the seed");

  auto* ev = app.add_subcommand("evaluate", "evaluate a checkpoint on a dataset");
  std::string e_ckpt, e_data, e_out = "eval";
  ev->add_option("--checkpoint", e_ckpt, "checkpoint file")->required();
  ev->add_option("--data", e_data, "JSONL dataset")->required();
  ev->add_option("--out", e_out, "output directory");

  auto* sw = app.add_subcommand("sweep-epsilon", "train repeatedly with random epsilon");
  std::string s_config, s_out = "sweep", s_range = "0:30", s_method, s_seed;
  std::size_t s_trials = 0;
  sw->add_option("--config", s_config, "key=value config file")->required();
  sw->add_option("--trials", s_trials, "number of trainings")->required();
  sw->add_option("--range", s_range, "epsilon range lo:hi");
  sw->add_option("--out", s_out, "output directory");
  sw->add_option("--method", s_method, "override the training method");
  sw->add_option("--seed", s_seed, "override the seed");

  auto* rd = app.add_subcommand("render-attention", "render one instance as a heatmap");
  std::string r_ckpt, r_data, r_out;
  std::size_t r_index = 0;
  rd->add_option("--checkpoint", r_ckpt, "checkpoint file")->required();
  rd->add_option("--data", r_data, "JSONL dataset")->required();
  rd->add_option("--index", r_index, "instance index");
  rd->add_option("--out", r_out, "output HTML path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed())
      return cmd_gen_data(g_task, g_train, g_valid, g_test, g_seed, g_out);
    if (tr->parsed()) {
      RunConfig rc = RunConfig::from_file(t_config);
      if (!t_method.empty()) rc.set("method", t_method);
      if (!t_epsilon.empty()) rc.set("epsilon", t_epsilon);
      if (!t_seed.empty()) rc.set("seed", t_seed);
      return cmd_train(rc, t_out);
    }
    if (ev->parsed()) return cmd_evaluate(e_ckpt, e_data, e_out);
    if (sw->parsed()) {
      if (s_trials == 0) {
        std::cerr << "error: --trials must be at least 1\n";
        return 2;
      }
      RunConfig rc = RunConfig::from_file(s_config);
      if (!s_method.empty()) rc.set("method", s_method);
      if (!s_seed.empty()) rc.set("seed", s_seed);
      return cmd_sweep(rc, s_out, s_trials, s_range);
    }
    if (rd->parsed()) return cmd_render(r_ckpt, r_data, r_index, r_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
