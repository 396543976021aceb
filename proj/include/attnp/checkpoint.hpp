#pragma once

#include <attnp/data.hpp>
#include <attnp/model.hpp>
#include <attnp/trainer.hpp>

#include <json.hpp>

#include <fstream>
#include <stdexcept>
#include <string>

namespace attnp {

constexpr int kCheckpointVersion = 1;
constexpr const char* kCheckpointFormat = "attnp-checkpoint";

inline nlohmann::json to_json(const ModelConfig& cfg) {
  return {{"task", task_name(cfg.task)}, {"vocab", cfg.vocab},
          {"embed_dim", cfg.embed_dim}, {"hidden", cfg.hidden},
          {"attn_dim", cfg.attn_dim},   {"n_classes", cfg.n_classes}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.task = task_from_name(j.at("task").get<std::string>());
  cfg.vocab = j.at("vocab").get<std::size_t>();
  cfg.embed_dim = j.at("embed_dim").get<std::size_t>();
  cfg.hidden = j.at("hidden").get<std::size_t>();
  cfg.attn_dim = j.at("attn_dim").get<std::size_t>();
  cfg.n_classes = j.at("n_classes").get<std::size_t>();
  cfg.validate();
  return cfg;
}

inline nlohmann::json to_json(const TrainConfig& cfg) {
  return {{"learning_rate", cfg.learning_rate},
          {"l2_coefficient", cfg.l2_coefficient},
          {"epochs", cfg.epochs},
          {"batch_size", cfg.batch_size},
          {"seed", cfg.seed},
          {"early_stop_patience", cfg.early_stop_patience},
          {"clip_gradients", cfg.clip_gradients},
          {"freeze_embeddings", cfg.freeze_embeddings},
          {"adv",
           {{"method", method_name(cfg.adv.method)},
            {"epsilon", cfg.adv.epsilon},
            {"lambda", cfg.adv.lambda}}}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  cfg.learning_rate = j.at("learning_rate").get<double>();
  cfg.l2_coefficient = j.at("l2_coefficient").get<double>();
  cfg.epochs = j.at("epochs").get<std::size_t>();
  cfg.batch_size = j.at("batch_size").get<std::size_t>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.early_stop_patience = j.at("early_stop_patience").get<std::size_t>();
  cfg.clip_gradients = j.at("clip_gradients").get<bool>();
  cfg.freeze_embeddings = j.at("freeze_embeddings").get<bool>();
  const auto& adv = j.at("adv");
  cfg.adv.method = method_from_name(adv.at("method").get<std::string>());
  cfg.adv.epsilon = adv.at("epsilon").get<double>();
  cfg.adv.lambda = adv.at("lambda").get<double>();
  cfg.validate();
  return cfg;
}

struct Checkpoint {
  Params params;
  Vocabulary vocab;
  TrainConfig train_config;
};

inline void save_checkpoint(const std::string& path, const Params& params,
                            const Vocabulary& vocab, const TrainConfig& train_cfg) {
  if (vocab.size() != params.cfg.vocab)
    throw std::invalid_argument("save_checkpoint: vocabulary size " +
                                std::to_string(vocab.size()) +
                                " does not match model vocab " +
                                std::to_string(params.cfg.vocab));
  nlohmann::json j;
  j["format"] = kCheckpointFormat;
  j["version"] = kCheckpointVersion;
  j["model"] = to_json(params.cfg);
  j["train_config"] = to_json(train_cfg);
  j["vocabulary"] = vocab.id_to_token;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, tensor] : params.registry()) {
    if (!tensor->all_finite())
      throw std::runtime_error("save_checkpoint: tensor '" + name + "' is not finite");
    tensors.push_back(
        {{"name", name}, {"shape", tensor->shape}, {"values", tensor->values}});
  }
  j["tensors"] = std::move(tensors);

  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_checkpoint: cannot write " + path);
  out << j.dump(1) << "\n";
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load_checkpoint: " + path + " is not valid JSON: " + e.what());
  }
  if (!j.is_object() || j.value("format", "") != kCheckpointFormat)
    throw std::runtime_error("load_checkpoint: " + path + " is not a checkpoint file");
  if (j.at("version").get<int>() != kCheckpointVersion)
    throw std::runtime_error("load_checkpoint: unsupported checkpoint version " +
                             j.at("version").dump());

  Checkpoint ck;
  ck.train_config = train_config_from_json(j.at("train_config"));
  ModelConfig cfg = model_config_from_json(j.at("model"));

  ck.vocab.id_to_token = j.at("vocabulary").get<std::vector<std::string>>();
  ck.vocab.token_to_id.clear();
  for (std::size_t i = 0; i < ck.vocab.id_to_token.size(); ++i)
    ck.vocab.token_to_id[ck.vocab.id_to_token[i]] = i;
  if (ck.vocab.size() != cfg.vocab)
    throw std::runtime_error("load_checkpoint: vocabulary size does not match model");

  Rng scratch(0);
  ck.params = init_params(cfg, scratch);
  auto stored = j.at("tensors");
  std::size_t matched = 0;
  for (auto& [name, tensor] : ck.params.registry()) {
    bool found = false;
    for (const auto& entry : stored) {
      if (entry.at("name").get<std::string>() != name) continue;
      auto shape = entry.at("shape").get<std::vector<std::size_t>>();
      if (shape != tensor->shape)
        throw std::runtime_error("load_checkpoint: tensor '" + name +
                                 "' has unexpected shape");
      auto values = entry.at("values").get<std::vector<double>>();
      if (values.size() != tensor->numel())
        throw std::runtime_error("load_checkpoint: tensor '" + name +
                                 "' has wrong element count");
      tensor->values = std::move(values);
      if (!tensor->all_finite())
        throw std::runtime_error("load_checkpoint: tensor '" + name + "' is not finite");
      found = true;
      ++matched;
      break;
    }
    if (!found)
      throw std::runtime_error("load_checkpoint: missing tensor '" + name + "'");
  }
  if (matched != stored.size())
    throw std::runtime_error("load_checkpoint: file holds tensors the model does not");
  return ck;
}

}  // namespace attnp
