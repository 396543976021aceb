#pragma once

// Adversarial perturbations against the attention model: gradient-based and
// random directions in score space, gradient-based directions in embedding
// space, and the combined clean-plus-adversarial training loss.

#include <attnp/model.hpp>
#include <attnp/rng.hpp>

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace attnp {

enum class AdvMethod {
  vanilla,
  word_at,
  word_iat,
  attention_rp,
  attention_at,
  attention_iat,
};

inline const char* method_name(AdvMethod m) {
  switch (m) {
    case AdvMethod::vanilla: return "vanilla";
    case AdvMethod::word_at: return "word_at";
    case AdvMethod::word_iat: return "word_iat";
    case AdvMethod::attention_rp: return "attention_rp";
    case AdvMethod::attention_at: return "attention_at";
    case AdvMethod::attention_iat: return "attention_iat";
  }
  throw std::logic_error("method_name: bad enum");
}

inline AdvMethod method_from_name(std::string_view s) {
  for (AdvMethod m : {AdvMethod::vanilla, AdvMethod::word_at, AdvMethod::word_iat,
                      AdvMethod::attention_rp, AdvMethod::attention_at,
                      AdvMethod::attention_iat})
    if (s == method_name(m)) return m;
  throw std::invalid_argument(
      "unknown method '" + std::string(s) +
      "' (expected vanilla, word_at, word_iat, attention_rp, attention_at, "
      "or attention_iat)");
}

inline bool perturbs_scores(AdvMethod m) {
  return m == AdvMethod::attention_rp || m == AdvMethod::attention_at ||
         m == AdvMethod::attention_iat;
}

inline bool perturbs_words(AdvMethod m) {
  return m == AdvMethod::word_at || m == AdvMethod::word_iat;
}

struct AdvConfig {
  AdvMethod method = AdvMethod::vanilla;
  double epsilon = 1.0;
  double lambda = 1.0;

  void validate() const {
    if (!(epsilon >= 0.0)) throw std::invalid_argument("epsilon must be nonnegative");
    if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be nonnegative");
  }
};

struct Perturbation {
  enum class Target { attention_scores, word_embeddings };
  Target target = Target::attention_scores;
  Tensor values;
  // true when the gradient (or direction basis) vanished and the returned
  // perturbation is identically zero
  bool degenerate = false;
};

// Thresholds below which a gradient or direction counts as vanished.
inline constexpr double kDegenerateNorm = 1e-12;
// Word-level adversaries scan every vocabulary row per position, which only
// stays tractable at desk scale.
inline constexpr std::size_t kWordIatVocabCap = 4096;

namespace detail {

// eps * g / ||g|| with masked coordinates zeroed and excluded from the norm.
inline Tensor rescaled_step_vec(const Tensor& g, const std::vector<bool>& mask,
                                double eps, bool& degenerate) {
  Tensor r = Tensor::zeros(g.shape);
  double sq = 0;
  for (std::size_t i = 0; i < g.numel(); ++i)
    if (mask[i]) sq += g.values[i] * g.values[i];
  double norm = std::sqrt(sq);
  if (norm < kDegenerateNorm) {
    degenerate = true;
    return r;
  }
  for (std::size_t i = 0; i < g.numel(); ++i)
    if (mask[i]) r.values[i] = eps * g.values[i] / norm;
  return r;
}

// Same rescaling for a T x d block, masking whole rows.
inline Tensor rescaled_step_rows(const Tensor& g, const std::vector<bool>& row_mask,
                                 double eps, bool& degenerate) {
  Tensor r = Tensor::zeros(g.shape);
  const std::size_t d = g.cols();
  double sq = 0;
  for (std::size_t i = 0; i < g.rows(); ++i)
    if (row_mask[i])
      for (std::size_t j = 0; j < d; ++j) sq += g.at(i, j) * g.at(i, j);
  double norm = std::sqrt(sq);
  if (norm < kDegenerateNorm) {
    degenerate = true;
    return r;
  }
  for (std::size_t i = 0; i < g.rows(); ++i)
    if (row_mask[i])
      for (std::size_t j = 0; j < d; ++j)
        r.values[i * d + j] = eps * g.at(i, j) / norm;
  return r;
}

}  // namespace detail

// Row t holds the normalized score differences (s_t - s_k) over unmasked k.
// Rows of masked positions, and rows whose raw differences all vanish, are
// zero; every other row has unit norm.
inline Tensor difference_vectors(const Tensor& scores, const std::vector<bool>& mask) {
  const std::size_t T = scores.numel();
  if (mask.size() != T)
    throw std::invalid_argument("difference_vectors: mask length mismatch");
  Tensor D = Tensor::zeros({T, T});
  for (std::size_t t = 0; t < T; ++t) {
    if (!mask[t]) continue;
    double sq = 0;
    for (std::size_t k = 0; k < T; ++k) {
      if (!mask[k]) continue;
      double d = scores.values[t] - scores.values[k];
      D.values[t * T + k] = d;
      sq += d * d;
    }
    double norm = std::sqrt(sq);
    if (norm < kDegenerateNorm) {
      for (std::size_t k = 0; k < T; ++k) D.values[t * T + k] = 0.0;
    } else {
      for (std::size_t k = 0; k < T; ++k) D.values[t * T + k] /= norm;
    }
  }
  return D;
}

// Uniform direction on the unit sphere over unmasked coordinates, scaled to
// norm eps. Draws nothing from the rng when eps is zero.
inline Perturbation attention_rp_perturbation(std::size_t T,
                                              const std::vector<bool>& mask,
                                              double eps, Rng& rng) {
  if (mask.size() != T)
    throw std::invalid_argument("attention_rp: mask length mismatch");
  Perturbation p;
  p.target = Perturbation::Target::attention_scores;
  p.values = Tensor::zeros({T});
  if (eps == 0.0) return p;
  for (std::size_t i = 0; i < T; ++i)
    if (mask[i]) p.values.values[i] = rng.normal();
  bool degenerate = false;
  p.values = detail::rescaled_step_vec(p.values, mask, eps, degenerate);
  p.degenerate = degenerate;
  return p;
}

// Everything instance_loss produces for one training example: the combined
// loss node on the caller's tape plus diagnostics about the perturbation.
struct InstanceLoss {
  Value loss;
  double clean = 0;
  double adv = 0;
  bool adv_active = false;
  Perturbation pert;
};

namespace detail {

struct CleanPass {
  Encoded p;
  Encoded q;
  bool has_q = false;
  Value scores;  // pre-perturbation
};

inline CleanPass encode_and_score(Tape& t, const Bound& b, const Sample& s) {
  CleanPass cp;
  Value Ep = embed_tokens(t, b, s.p);
  t.watch(Ep);
  cp.p = encode(t, b, Ep, s.p, Enc::P);
  if (s.q.empty()) {
    cp.scores = attn_scores_single(t, b, cp.p.H);
  } else {
    Value Eq = embed_tokens(t, b, s.q);
    t.watch(Eq);
    cp.q = encode(t, b, Eq, s.q, Enc::Q);
    cp.has_q = true;
    cp.scores = attn_scores_pair(t, b, cp.p.H, cp.q.last);
  }
  return cp;
}

// Re-runs the story encoder from a perturbed embedding block and finishes the
// head; the question encoding is reused untouched.
inline Value word_adv_loss(Tape& t, const Bound& b, const Sample& s,
                           const CleanPass& cp, const Tensor& r) {
  Value E2 = add(cp.p.E, t.constant(r));
  Encoded enc2 = encode(t, b, E2, s.p, Enc::P);
  Value scores2 = cp.has_q ? attn_scores_pair(t, b, enc2.H, cp.q.last)
                           : attn_scores_single(t, b, enc2.H);
  Head head2 = head_from_scores(t, b, enc2.H, scores2, enc2.mask);
  return nll(t, b, head2, s.label);
}

inline Value score_adv_loss(Tape& t, const Bound& b, const Sample& s,
                            const CleanPass& cp, const Tensor& r) {
  Value perturbed = add(cp.scores, t.constant(r));
  Head head2 = head_from_scores(t, b, cp.p.H, perturbed, cp.p.mask);
  return nll(t, b, head2, s.label);
}

// Coefficient gradient for the word-level trainable construction:
// galpha[t][k] = G_t . (e_k - w_t) / ||e_k - w_t||, pad row excluded from the
// basis. Returns the realized T x d perturbation.
inline Tensor word_iat_step(const Params& params, const Tensor& E, const Tensor& G,
                            const std::vector<bool>& mask, double eps,
                            bool& degenerate) {
  const std::size_t T = E.rows(), d = E.cols();
  const Tensor& table = params.embed;
  const std::size_t V = table.rows();
  Tensor galpha = Tensor::zeros({T, V});
  std::vector<double> norms(T * V, 0.0);
  double sq = 0;
  for (std::size_t t = 0; t < T; ++t) {
    if (!mask[t]) continue;
    for (std::size_t k = kPadId + 1; k < V; ++k) {
      double nd = 0, dot = 0;
      for (std::size_t j = 0; j < d; ++j) {
        double diff = table.at(k, j) - E.at(t, j);
        nd += diff * diff;
        dot += G.at(t, j) * diff;
      }
      double norm = std::sqrt(nd);
      if (norm < kDegenerateNorm) continue;
      norms[t * V + k] = norm;
      double g = dot / norm;
      galpha.values[t * V + k] = g;
      sq += g * g;
    }
  }
  double fro = std::sqrt(sq);
  Tensor r = Tensor::zeros({T, d});
  if (fro < kDegenerateNorm) {
    degenerate = true;
    return r;
  }
  for (std::size_t t = 0; t < T; ++t) {
    if (!mask[t]) continue;
    for (std::size_t k = kPadId + 1; k < V; ++k) {
      double norm = norms[t * V + k];
      if (norm == 0.0) continue;
      double coeff = eps * galpha.values[t * V + k] / fro;
      for (std::size_t j = 0; j < d; ++j)
        r.values[t * d + j] += coeff * (table.at(k, j) - E.at(t, j)) / norm;
    }
  }
  return r;
}

}  // namespace detail

// Builds the training loss for one instance on the caller's tape. With an
// active adversarial method this is clean + lambda * perturbed, where the
// perturbation is constructed against the current parameters and enters the
// graph as a constant. epsilon == 0 or method vanilla gives the plain loss.
inline InstanceLoss instance_loss(Tape& t, const Bound& b, const Sample& s,
                                  const AdvConfig& cfg, Rng* rng = nullptr) {
  cfg.validate();
  const bool active = cfg.method != AdvMethod::vanilla && cfg.epsilon > 0.0;
  InstanceLoss out;

  if (cfg.method == AdvMethod::word_iat && b.params->cfg.vocab > kWordIatVocabCap)
    throw std::invalid_argument(
        "word_iat scans the whole vocabulary and is capped at " +
        std::to_string(kWordIatVocabCap) +
        " entries; use attention_at or attention_iat instead");

  if (!active) {
    Forward fw = forward(t, b, s);
    out.loss = nll(t, b, fw.head, s.label);
    out.clean = t.value(out.loss).item();
    if (cfg.method != AdvMethod::vanilla) {
      out.pert.target = perturbs_words(cfg.method)
                            ? Perturbation::Target::word_embeddings
                            : Perturbation::Target::attention_scores;
      out.pert.values = perturbs_words(cfg.method)
                            ? Tensor::zeros({s.p.size(), b.params->cfg.embed_dim})
                            : Tensor::zeros({s.p.size()});
    }
    return out;
  }

  detail::CleanPass cp = detail::encode_and_score(t, b, s);
  Value clean_scores = cp.scores;
  Value L_adv;

  if (cfg.method == AdvMethod::attention_iat) {
    // Trainable-coefficient construction: score perturbation r(alpha)_t =
    // alpha_t . dvec_t with alpha a watched zero block, so this pass equals
    // the clean one while exposing the coefficient gradient.
    const std::size_t T = s.p.size();
    Tensor D = difference_vectors(t.value(cp.scores), cp.p.mask);
    Value alpha = t.constant(Tensor::zeros({T, T}));
    t.watch(alpha);
    Value r_alpha = row_sum(mul(alpha, t.constant(D)));
    Value head_scores = add(cp.scores, r_alpha);
    Head head1 = head_from_scores(t, b, cp.p.H, head_scores, cp.p.mask);
    out.loss = nll(t, b, head1, s.label);
    out.clean = t.value(out.loss).item();

    GradientMap g = t.backward(out.loss);
    const Tensor& ga = g.at(alpha);
    double sq = 0;
    for (double v : ga.values) sq += v * v;
    double fro = std::sqrt(sq);

    out.pert.target = Perturbation::Target::attention_scores;
    out.pert.values = Tensor::zeros({T});
    if (fro < kDegenerateNorm) {
      out.pert.degenerate = true;
    } else {
      for (std::size_t i = 0; i < T; ++i) {
        double r = 0;
        for (std::size_t k = 0; k < T; ++k)
          r += (cfg.epsilon * ga.at(i, k) / fro) * D.at(i, k);
        out.pert.values.values[i] = r;
      }
    }
    L_adv = detail::score_adv_loss(t, b, s, cp, out.pert.values);
  } else {
    Head head1 = head_from_scores(t, b, cp.p.H, cp.scores, cp.p.mask);
    out.loss = nll(t, b, head1, s.label);
    out.clean = t.value(out.loss).item();

    switch (cfg.method) {
      case AdvMethod::attention_at: {
        GradientMap g = t.backward(out.loss);
        out.pert.target = Perturbation::Target::attention_scores;
        out.pert.values = detail::rescaled_step_vec(
            g.at(clean_scores), cp.p.mask, cfg.epsilon, out.pert.degenerate);
        break;
      }
      case AdvMethod::attention_rp: {
        if (!rng)
          throw std::invalid_argument("attention_rp requires a random source");
        out.pert = attention_rp_perturbation(s.p.size(), cp.p.mask, cfg.epsilon, *rng);
        break;
      }
      case AdvMethod::word_at: {
        GradientMap g = t.backward(out.loss);
        out.pert.target = Perturbation::Target::word_embeddings;
        out.pert.values = detail::rescaled_step_rows(
            g.at(cp.p.E), cp.p.mask, cfg.epsilon, out.pert.degenerate);
        break;
      }
      case AdvMethod::word_iat: {
        GradientMap g = t.backward(out.loss);
        out.pert.target = Perturbation::Target::word_embeddings;
        out.pert.values = detail::word_iat_step(*b.params, t.value(cp.p.E),
                                                g.at(cp.p.E), cp.p.mask,
                                                cfg.epsilon, out.pert.degenerate);
        break;
      }
      default:
        throw std::logic_error("instance_loss: unhandled method");
    }

    L_adv = perturbs_words(cfg.method)
                ? detail::word_adv_loss(t, b, s, cp, out.pert.values)
                : detail::score_adv_loss(t, b, s, cp, out.pert.values);
  }

  out.adv = t.value(L_adv).item();
  out.adv_active = true;
  out.loss = add(out.loss, scale(L_adv, cfg.lambda));
  return out;
}

struct BatchLoss {
  Value loss;  // mean combined loss on the caller's tape
  double value = 0;
  double clean = 0;            // mean clean term
  double adv = 0;              // mean adversarial term, 0 when inactive
  std::size_t degenerate = 0;  // instances whose perturbation vanished
};

inline BatchLoss batch_adversarial_loss(Tape& t, const Bound& b,
                                        const std::vector<Sample>& batch,
                                        const AdvConfig& cfg, Rng* rng = nullptr) {
  if (batch.empty()) throw std::invalid_argument("adversarial_loss: empty batch");
  BatchLoss out;
  Value total;
  bool first = true;
  for (const Sample& s : batch) {
    InstanceLoss il = instance_loss(t, b, s, cfg, rng);
    out.clean += il.clean;
    out.adv += il.adv;
    if (il.adv_active && il.pert.degenerate) ++out.degenerate;
    total = first ? il.loss : add(total, il.loss);
    first = false;
  }
  out.loss = scale(total, 1.0 / static_cast<double>(batch.size()));
  out.value = t.value(out.loss).item();
  out.clean /= static_cast<double>(batch.size());
  out.adv /= static_cast<double>(batch.size());
  return out;
}

// Value-only form: builds and discards the graph.
inline double adversarial_loss(const Params& p, const std::vector<Sample>& batch,
                               const AdvConfig& cfg, Rng* rng = nullptr) {
  Tape t;
  Bound b = bind(t, p);
  return batch_adversarial_loss(t, b, batch, cfg, rng).value;
}

namespace detail {
inline Perturbation standalone(const Params& p, const Sample& s, AdvMethod m,
                               double eps) {
  Tape t;
  Bound b = bind(t, p);
  AdvConfig cfg{m, eps, 1.0};
  return instance_loss(t, b, s, cfg).pert;
}
}  // namespace detail

inline Perturbation attention_at_perturbation(const Params& p, const Sample& s,
                                              double eps) {
  return detail::standalone(p, s, AdvMethod::attention_at, eps);
}

inline Perturbation attention_iat_perturbation(const Params& p, const Sample& s,
                                               double eps) {
  return detail::standalone(p, s, AdvMethod::attention_iat, eps);
}

inline Perturbation word_at_perturbation(const Params& p, const Sample& s,
                                         double eps) {
  return detail::standalone(p, s, AdvMethod::word_at, eps);
}

inline Perturbation word_iat_perturbation(const Params& p, const Sample& s,
                                          double eps) {
  return detail::standalone(p, s, AdvMethod::word_iat, eps);
}

// Loss at a fixed score-space offset, for probing the perturbation surface.
inline double loss_with_score_perturbation(const Params& p, const Sample& s,
                                           const Tensor& r) {
  Tape t;
  Bound b = bind(t, p);
  Forward fw = forward(t, b, s, &r);
  return t.value(nll(t, b, fw.head, s.label)).item();
}

// Loss at a fixed embedding-space offset added to the story block.
inline double loss_with_word_perturbation(const Params& p, const Sample& s,
                                          const Tensor& r) {
  Tape t;
  Bound b = bind(t, p);
  detail::CleanPass cp = detail::encode_and_score(t, b, s);
  return t.value(detail::word_adv_loss(t, b, s, cp, r)).item();
}

}  // namespace attnp
