#pragma once

#include <attnp/adversary.hpp>
#include <attnp/data.hpp>
#include <attnp/evaluator.hpp>
#include <attnp/model.hpp>
#include <attnp/rng.hpp>
#include <attnp/tensor.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace attnp {

struct TrainConfig {
  double learning_rate = 0.001;
  double l2_coefficient = 1e-5;
  std::size_t epochs = 40;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  AdvConfig adv;
  std::size_t early_stop_patience = 5;  // 0 disables early stopping
  bool clip_gradients = true;           // global-norm clip at 5.0
  bool freeze_embeddings = false;

  void validate() const {
    if (!(learning_rate > 0.0))
      throw std::invalid_argument("train config: learning_rate must be > 0");
    if (batch_size < 1)
      throw std::invalid_argument("train config: batch_size must be >= 1");
    if (l2_coefficient < 0.0)
      throw std::invalid_argument("train config: l2_coefficient must be >= 0");
    adv.validate();
  }
};

constexpr double kClipNorm = 5.0;
constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

struct OptimizerState {
  std::vector<Tensor> m;  // parallel to Params::registry() order
  std::vector<Tensor> v;
  std::size_t t = 0;
};

inline OptimizerState make_optimizer_state(const Params& p) {
  OptimizerState st;
  for (const auto& [name, tensor] : p.registry()) {
    st.m.push_back(Tensor::zeros(tensor->shape));
    st.v.push_back(Tensor::zeros(tensor->shape));
  }
  return st;
}

// One Adam update over every trainable tensor. Gradients absent from the map
// count as zero; the L2 term is added to the gradient before the moment
// update, so decay shapes the moments like any other gradient source.
inline void adam_step(Params& p, const GradientMap& grads, OptimizerState& st,
                      const TrainConfig& cfg) {
  auto reg = p.registry();
  if (st.m.size() != reg.size() || st.v.size() != reg.size())
    throw std::invalid_argument("adam_step: optimizer state does not match parameters");

  std::vector<const Tensor*> grad_of(reg.size(), nullptr);
  for (std::size_t i = 0; i < reg.size(); ++i) {
    const auto& [name, tensor] = reg[i];
    if (cfg.freeze_embeddings && name == "embed") continue;
    const Tensor* g = grads.find(*tensor);
    if (g && !g->all_finite())
      throw std::runtime_error("adam_step: non-finite gradient for tensor '" + name + "'");
    grad_of[i] = g;
  }

  double clip_scale = 1.0;
  if (cfg.clip_gradients) {
    double sq = 0.0;
    for (const Tensor* g : grad_of)
      if (g)
        for (double x : g->values) sq += x * x;
    double norm = std::sqrt(sq);
    if (norm > kClipNorm) clip_scale = kClipNorm / norm;
  }

  st.t += 1;
  const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(st.t));

  for (std::size_t i = 0; i < reg.size(); ++i) {
    Tensor* tensor = reg[i].second;
    if (cfg.freeze_embeddings && reg[i].first == "embed") continue;
    const Tensor* g = grad_of[i];
    Tensor& m = st.m[i];
    Tensor& v = st.v[i];
    for (std::size_t k = 0; k < tensor->numel(); ++k) {
      double gk = (g ? g->values[k] : 0.0) * clip_scale;
      gk += cfg.l2_coefficient * tensor->values[k];
      m.values[k] = kAdamBeta1 * m.values[k] + (1.0 - kAdamBeta1) * gk;
      v.values[k] = kAdamBeta2 * v.values[k] + (1.0 - kAdamBeta2) * gk * gk;
      double mhat = m.values[k] / bc1;
      double vhat = v.values[k] / bc2;
      tensor->values[k] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + kAdamEps);
    }
  }
}

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;  // mean combined objective over the epoch
  double train_clean = 0;
  double train_adv = 0;
  double valid_metric = 0;
  double wall_seconds = 0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;  // one record per completed epoch
  std::size_t best_epoch = 0;       // 1-based; 0 when no epoch ran
  double best_metric = 0;
};

struct TrainResult {
  Params params;  // best-validation checkpoint
  TrainHistory history;
};

inline TrainResult train(const std::vector<Sample>& train_set,
                         const std::vector<Sample>& valid_set,
                         const ModelConfig& model_cfg, const TrainConfig& cfg,
                         const EmbeddingTable* pretrained = nullptr,
                         const Vocabulary* vocab = nullptr) {
  model_cfg.validate();
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  if (valid_set.empty()) throw std::invalid_argument("train: empty validation set");
  if (pretrained && !vocab)
    throw std::invalid_argument("train: pretrained embeddings need a vocabulary");

  Rng rng(cfg.seed);
  TrainResult out;
  out.params = init_params(model_cfg, rng);
  if (pretrained) apply_embeddings(out.params, *vocab, *pretrained);
  if (cfg.epochs == 0) return out;

  Params current = out.params;
  OptimizerState opt = make_optimizer_state(current);
  double best = -std::numeric_limits<double>::infinity();
  std::size_t stale = 0;

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    try {
      shuffle(order, rng);
      double loss_sum = 0, clean_sum = 0, adv_sum = 0;
      for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
        std::size_t end = std::min(begin + cfg.batch_size, order.size());
        std::vector<Sample> batch;
        batch.reserve(end - begin);
        for (std::size_t k = begin; k < end; ++k) batch.push_back(train_set[order[k]]);

        Tape tape;
        Bound bound = bind(tape, current);
        BatchLoss bl = batch_adversarial_loss(tape, bound, batch, cfg.adv, &rng);
        if (!std::isfinite(bl.value))
          throw std::runtime_error("non-finite batch loss");
        GradientMap grads = tape.backward(bl.loss);
        adam_step(current, grads, opt, cfg);

        double n = static_cast<double>(batch.size());
        loss_sum += bl.value * n;
        clean_sum += bl.clean * n;
        adv_sum += bl.adv * n;
      }
      double n = static_cast<double>(train_set.size());
      rec.train_loss = loss_sum / n;
      rec.train_clean = clean_sum / n;
      rec.train_adv = adv_sum / n;
      rec.valid_metric = validation_metric(current, valid_set);
    } catch (const std::exception& e) {
      throw std::runtime_error("training diverged at epoch " + std::to_string(epoch) +
                               ": " + e.what());
    }
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.history.epochs.push_back(rec);

    if (rec.valid_metric > best) {
      best = rec.valid_metric;
      out.history.best_epoch = epoch;
      out.history.best_metric = rec.valid_metric;
      out.params = current;
      stale = 0;
    } else {
      ++stale;
      if (cfg.early_stop_patience > 0 && stale >= cfg.early_stop_patience) break;
    }
  }
  return out;
}

struct SweepRow {
  double epsilon = 0;
  double valid_metric = 0;
};

// Trains once per trial with epsilon drawn uniformly from [lo, hi] and
// records the best validation metric reached. Rows come back sorted by
// epsilon so the table reads as a curve.
inline std::vector<SweepRow> epsilon_sweep(const std::vector<Sample>& train_set,
                                           const std::vector<Sample>& valid_set,
                                           const ModelConfig& model_cfg,
                                           const TrainConfig& base, std::size_t trials,
                                           double lo, double hi, Rng& rng,
                                           const EmbeddingTable* pretrained = nullptr,
                                           const Vocabulary* vocab = nullptr) {
  if (trials < 1) throw std::invalid_argument("epsilon_sweep: trials must be >= 1");
  if (!(lo <= hi)) throw std::invalid_argument("epsilon_sweep: range must satisfy lo <= hi");
  if (lo < 0) throw std::invalid_argument("epsilon_sweep: epsilon cannot be negative");

  std::vector<SweepRow> rows;
  rows.reserve(trials);
  for (std::size_t i = 0; i < trials; ++i) {
    TrainConfig cfg = base;
    cfg.adv.epsilon = rng.uniform(lo, hi);
    TrainResult res = train(train_set, valid_set, model_cfg, cfg, pretrained, vocab);
    double metric = res.history.epochs.empty()
                        ? validation_metric(res.params, valid_set)
                        : res.history.best_metric;
    rows.push_back({cfg.adv.epsilon, metric});
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const SweepRow& a, const SweepRow& b) { return a.epsilon < b.epsilon; });
  return rows;
}

}  // namespace attnp
