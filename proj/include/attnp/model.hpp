#pragma once

// Bidirectional LSTM encoder with additive attention and a decoder head.
// Single-sequence classification scores each hidden state directly and uses
// a per-class sigmoid head; pair tasks (question answering, inference) run
// two separate encoders and score premise states conditioned on the final
// hidden state of the second sequence, with a softmax head.

#include <attnp/rng.hpp>
#include <attnp/tensor.hpp>

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace attnp {

constexpr std::size_t kPadId = 0;
constexpr std::size_t kUnkId = 1;

enum class TaskKind { bc, qa, nli };

inline const char* task_name(TaskKind k) {
  switch (k) {
    case TaskKind::bc: return "bc";
    case TaskKind::qa: return "qa";
    case TaskKind::nli: return "nli";
  }
  return "?";
}

inline TaskKind task_from_name(const std::string& s) {
  if (s == "bc") return TaskKind::bc;
  if (s == "qa") return TaskKind::qa;
  if (s == "nli") return TaskKind::nli;
  throw std::invalid_argument("unknown task: " + s);
}

inline bool is_pair_task(TaskKind k) { return k != TaskKind::bc; }

struct ModelConfig {
  TaskKind task = TaskKind::bc;
  std::size_t vocab = 0;
  std::size_t embed_dim = 50;
  std::size_t hidden = 64;   // total bidirectional width, half per direction
  std::size_t attn_dim = 0;  // 0 picks hidden/2
  std::size_t n_classes = 2;

  bool sigmoid_head() const { return task == TaskKind::bc; }
  std::size_t effective_attn_dim() const { return attn_dim == 0 ? hidden / 2 : attn_dim; }

  void validate() const {
    if (vocab < 2) throw std::invalid_argument("config: vocab must hold pad and unk");
    if (embed_dim == 0) throw std::invalid_argument("config: embed_dim must be positive");
    if (hidden == 0 || hidden % 2 != 0)
      throw std::invalid_argument("config: hidden must be positive and even");
    if (effective_attn_dim() == 0)
      throw std::invalid_argument("config: attn_dim must be positive");
    if (n_classes == 0) throw std::invalid_argument("config: need at least one class");
  }
};

struct LstmWeights {
  Tensor wx, wh, b;
};

struct EncoderWeights {
  LstmWeights fwd, bwd;
};

struct Params {
  ModelConfig cfg;

  Tensor embed;
  EncoderWeights enc_p;  // the only encoder for single-sequence tasks
  EncoderWeights enc_q;  // pair tasks only
  Tensor attn_w1;
  Tensor attn_w2;  // pair tasks only
  Tensor attn_b, attn_c;
  Tensor dec_w, dec_b;

  std::vector<std::pair<std::string, Tensor*>> registry() {
    const bool pair = is_pair_task(cfg.task);
    const std::string p = pair ? "lstm_p_" : "lstm_";
    std::vector<std::pair<std::string, Tensor*>> r = {
        {"embed", &embed},
        {p + "fwd_wx", &enc_p.fwd.wx},
        {p + "fwd_wh", &enc_p.fwd.wh},
        {p + "fwd_b", &enc_p.fwd.b},
        {p + "bwd_wx", &enc_p.bwd.wx},
        {p + "bwd_wh", &enc_p.bwd.wh},
        {p + "bwd_b", &enc_p.bwd.b},
    };
    if (pair) {
      r.push_back({"lstm_q_fwd_wx", &enc_q.fwd.wx});
      r.push_back({"lstm_q_fwd_wh", &enc_q.fwd.wh});
      r.push_back({"lstm_q_fwd_b", &enc_q.fwd.b});
      r.push_back({"lstm_q_bwd_wx", &enc_q.bwd.wx});
      r.push_back({"lstm_q_bwd_wh", &enc_q.bwd.wh});
      r.push_back({"lstm_q_bwd_b", &enc_q.bwd.b});
    }
    r.push_back({"attn_w1", &attn_w1});
    if (pair) r.push_back({"attn_w2", &attn_w2});
    r.push_back({"attn_b", &attn_b});
    r.push_back({"attn_c", &attn_c});
    r.push_back({"dec_w", &dec_w});
    r.push_back({"dec_b", &dec_b});
    return r;
  }

  std::vector<std::pair<std::string, const Tensor*>> registry() const {
    auto mut = const_cast<Params*>(this)->registry();
    std::vector<std::pair<std::string, const Tensor*>> r;
    r.reserve(mut.size());
    for (auto& [n, t] : mut) r.push_back({n, t});
    return r;
  }

  std::size_t total_parameters() const {
    std::size_t n = 0;
    for (auto& [name, t] : registry()) n += t->numel();
    return n;
  }
};

namespace detail {
inline Tensor uniform_init(Rng& rng, std::vector<std::size_t> shape, std::size_t fan_in) {
  Tensor t = Tensor::zeros(std::move(shape));
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : t.values) v = rng.uniform(-bound, bound);
  t.requires_grad = true;
  return t;
}

inline LstmWeights init_lstm(Rng& rng, std::size_t in_dim, std::size_t H) {
  LstmWeights w;
  w.wx = uniform_init(rng, {4 * H, in_dim}, in_dim);
  w.wh = uniform_init(rng, {4 * H, H}, H);
  w.b = Tensor::zeros({4 * H});
  // forget gate starts open so early training keeps long-range signal
  for (std::size_t i = H; i < 2 * H; ++i) w.b.values[i] = 1.0;
  w.b.requires_grad = true;
  return w;
}
}  // namespace detail

// Draws every weight in registry order so a seed pins the full state. The
// padding row of the embedding table is zero and stays so (no gradient).
inline Params init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t H = cfg.hidden / 2;
  const std::size_t d = cfg.embed_dim;
  const std::size_t m = cfg.hidden;
  const std::size_t dp = cfg.effective_attn_dim();
  Params p;
  p.cfg = cfg;

  p.embed = Tensor::zeros({cfg.vocab, d});
  for (double& v : p.embed.values) v = rng.uniform(-0.1, 0.1);
  for (std::size_t j = 0; j < d; ++j) p.embed.values[j] = 0.0;
  p.embed.requires_grad = true;

  p.enc_p.fwd = detail::init_lstm(rng, d, H);
  p.enc_p.bwd = detail::init_lstm(rng, d, H);
  if (is_pair_task(cfg.task)) {
    p.enc_q.fwd = detail::init_lstm(rng, d, H);
    p.enc_q.bwd = detail::init_lstm(rng, d, H);
  }

  p.attn_w1 = detail::uniform_init(rng, {dp, m}, m);
  if (is_pair_task(cfg.task)) p.attn_w2 = detail::uniform_init(rng, {dp, m}, m);
  p.attn_b = Tensor::zeros({dp});
  p.attn_b.requires_grad = true;
  p.attn_c = detail::uniform_init(rng, {dp}, dp);
  p.dec_w = detail::uniform_init(rng, {cfg.n_classes, m}, m);
  p.dec_b = Tensor::zeros({cfg.n_classes});
  p.dec_b.requires_grad = true;
  return p;
}

// Per-tape handles to the parameters. Bind once per tape so every branch of
// the graph shares the same leaf node per tensor.
struct BoundLstm {
  Value wx, wh, b;
};

struct BoundEncoder {
  BoundLstm fwd, bwd;
};

struct Bound {
  const Params* params = nullptr;
  Value embed;
  BoundEncoder enc_p, enc_q;
  Value attn_w1, attn_w2, attn_b, attn_c;
  Value dec_w, dec_b;
};

enum class Enc { P, Q };

inline Bound bind(Tape& t, const Params& p) {
  auto bind_lstm = [&t](const LstmWeights& w) {
    return BoundLstm{t.leaf(w.wx), t.leaf(w.wh), t.leaf(w.b)};
  };
  Bound b;
  b.params = &p;
  b.embed = t.leaf(p.embed);
  b.enc_p = {bind_lstm(p.enc_p.fwd), bind_lstm(p.enc_p.bwd)};
  if (is_pair_task(p.cfg.task)) b.enc_q = {bind_lstm(p.enc_q.fwd), bind_lstm(p.enc_q.bwd)};
  b.attn_w1 = t.leaf(p.attn_w1);
  if (is_pair_task(p.cfg.task)) b.attn_w2 = t.leaf(p.attn_w2);
  b.attn_b = t.leaf(p.attn_b);
  b.attn_c = t.leaf(p.attn_c);
  b.dec_w = t.leaf(p.dec_w);
  b.dec_b = t.leaf(p.dec_b);
  return b;
}

namespace detail {

struct LstmState {
  Value h, c;
};

inline LstmState lstm_step(Tape& t, const BoundLstm& w, Value x, const LstmState& prev,
                           std::size_t H) {
  Value gates = add(add(matvec(w.wx, x), matvec(w.wh, prev.h)), w.b);
  Value i = sigmoid(slice(gates, 0, H));
  Value f = sigmoid(slice(gates, H, H));
  Value g = attnp::tanh(slice(gates, 2 * H, H));
  Value o = sigmoid(slice(gates, 3 * H, H));
  Value c = add(mul(f, prev.c), mul(i, g));
  Value h = mul(o, attnp::tanh(c));
  return {h, c};
}

}  // namespace detail

struct Encoded {
  Value E;     // T x d embedded tokens
  Value H;     // m x T hidden columns
  Value last;  // last column of H, the query summary for pair attention
  std::vector<bool> mask;
};

inline std::vector<bool> pad_mask(const std::vector<std::size_t>& ids) {
  std::vector<bool> m(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) m[i] = ids[i] != kPadId;
  return m;
}

inline Value embed_tokens(Tape& t, const Bound& b, const std::vector<std::size_t>& ids) {
  if (ids.empty()) throw std::invalid_argument("model: empty token sequence");
  return lookup_rows(b.embed, ids, kPadId);
}

// Runs both LSTM directions over an embedded T x d block.
inline Encoded encode(Tape& t, const Bound& b, Value E,
                      const std::vector<std::size_t>& ids, Enc which) {
  const ModelConfig& cfg = b.params->cfg;
  const BoundEncoder& enc = which == Enc::P ? b.enc_p : b.enc_q;
  const std::size_t H = cfg.hidden / 2;
  const std::size_t T = ids.size();

  detail::LstmState f{t.constant(Tensor::zeros({H})), t.constant(Tensor::zeros({H}))};
  std::vector<Value> hf(T);
  for (std::size_t i = 0; i < T; ++i) {
    f = detail::lstm_step(t, enc.fwd, row(E, i), f, H);
    hf[i] = f.h;
  }

  detail::LstmState r{t.constant(Tensor::zeros({H})), t.constant(Tensor::zeros({H}))};
  std::vector<Value> hb(T);
  for (std::size_t i = T; i-- > 0;) {
    r = detail::lstm_step(t, enc.bwd, row(E, i), r, H);
    hb[i] = r.h;
  }

  std::vector<Value> cols(T);
  for (std::size_t i = 0; i < T; ++i) cols[i] = concat(hf[i], hb[i]);

  Encoded enc_out;
  enc_out.E = E;
  enc_out.H = stack_cols(cols);
  enc_out.last = cols[T - 1];
  enc_out.mask = pad_mask(ids);
  return enc_out;
}

// Additive scores for a single sequence: c . tanh(W1 h_t + b) per position.
inline Value attn_scores_single(Tape& t, const Bound& b, Value H) {
  Value pre = add_col_broadcast(matmul(b.attn_w1, H), b.attn_b);
  return matvec_t(attnp::tanh(pre), b.attn_c);
}

// Pair scores: premise states shifted by a fixed projection of the query
// summary, c . tanh(W1 h_t + W2 q + b).
inline Value attn_scores_pair(Tape& t, const Bound& b, Value H_p, Value q_last) {
  Value shift = add(matvec(b.attn_w2, q_last), b.attn_b);
  Value pre = add_col_broadcast(matmul(b.attn_w1, H_p), shift);
  return matvec_t(attnp::tanh(pre), b.attn_c);
}

struct Head {
  Value scores;  // watched: gradients are read here for score perturbations
  Value attn;
  Value context;
  Value logits;
  Value probs;  // per-class sigmoid for bc, softmax distribution otherwise
};

// Attention head and decoder from a given score vector. Split out so a
// perturbed copy of the scores can reuse the encoder states.
inline Head head_from_scores(Tape& t, const Bound& b, Value H, Value scores,
                             const std::vector<bool>& mask) {
  Head h;
  h.scores = scores;
  t.watch(h.scores);
  h.attn = softmax_masked(scores, mask);
  h.context = matvec(H, h.attn);
  h.logits = add(matvec(b.dec_w, h.context), b.dec_b);
  h.probs = b.params->cfg.sigmoid_head() ? sigmoid(h.logits)
                                         : softmax_masked(h.logits, {});
  return h;
}

struct Forward {
  Bound bound;
  Encoded p;  // the attended sequence
  Encoded q;  // pair tasks only
  bool has_q = false;
  Head head;
};

namespace detail {
inline Value maybe_perturb_scores(Tape& t, Value scores, const Tensor* pert,
                                  std::size_t T) {
  if (!pert) return scores;
  if (pert->numel() != T)
    throw std::invalid_argument("forward: perturbation length does not match sequence");
  return add(scores, t.constant(*pert));
}
}  // namespace detail

inline Forward forward_single(Tape& t, const Bound& b,
                              const std::vector<std::size_t>& tokens,
                              const Tensor* score_perturbation = nullptr) {
  Forward fw;
  fw.bound = b;
  Value E = embed_tokens(t, b, tokens);
  t.watch(E);
  fw.p = encode(t, b, E, tokens, Enc::P);
  Value scores = attn_scores_single(t, b, fw.p.H);
  scores = detail::maybe_perturb_scores(t, scores, score_perturbation, tokens.size());
  fw.head = head_from_scores(t, b, fw.p.H, scores, fw.p.mask);
  return fw;
}

inline Forward forward_pair(Tape& t, const Bound& b,
                            const std::vector<std::size_t>& p_tokens,
                            const std::vector<std::size_t>& q_tokens,
                            const Tensor* score_perturbation = nullptr) {
  Forward fw;
  fw.bound = b;
  Value Ep = embed_tokens(t, b, p_tokens);
  t.watch(Ep);
  fw.p = encode(t, b, Ep, p_tokens, Enc::P);
  Value Eq = embed_tokens(t, b, q_tokens);
  t.watch(Eq);
  fw.q = encode(t, b, Eq, q_tokens, Enc::Q);
  fw.has_q = true;
  Value scores = attn_scores_pair(t, b, fw.p.H, fw.q.last);
  scores = detail::maybe_perturb_scores(t, scores, score_perturbation, p_tokens.size());
  fw.head = head_from_scores(t, b, fw.p.H, scores, fw.p.mask);
  return fw;
}

// A tokenized, id-encoded instance. q stays empty for single-sequence tasks.
struct Sample {
  std::vector<std::size_t> p;
  std::vector<std::size_t> q;
  std::size_t label = 0;
};

inline Forward forward(Tape& t, const Bound& b, const Sample& s,
                       const Tensor* score_perturbation = nullptr) {
  return s.q.empty() ? forward_single(t, b, s.p, score_perturbation)
                     : forward_pair(t, b, s.p, s.q, score_perturbation);
}

// Negative log likelihood of the observed label. The sigmoid head treats the
// label as one-hot and sums per-class binary terms; the softmax head takes
// the log of the chosen class. Probabilities clamp to [1e-12, 1-1e-12].
inline Value nll(Tape& t, const Bound& b, const Head& head, std::size_t label) {
  const ModelConfig& cfg = b.params->cfg;
  if (label >= cfg.n_classes) throw std::invalid_argument("nll: label out of range");
  constexpr double lo = 1e-12, hi = 1.0 - 1e-12;
  if (cfg.sigmoid_head()) {
    Value p = head.probs;
    Value log_p_y = sum(attnp::log(clamp(slice(p, label, 1), lo, hi)));
    Value ones = t.constant(Tensor({cfg.n_classes}, std::vector<double>(cfg.n_classes, 1.0)));
    Value log_q = attnp::log(clamp(sub(ones, p), lo, hi));
    Value off_terms = sub(sum(log_q), sum(slice(log_q, label, 1)));
    return scale(add(log_p_y, off_terms), -1.0);
  }
  Value py = slice(head.probs, label, 1);
  return scale(sum(attnp::log(clamp(py, lo, hi))), -1.0);
}

// Prediction is the argmax component; ties break toward the lower index.
inline std::size_t predict(const Tensor& probs) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < probs.numel(); ++i)
    if (probs.values[i] > probs.values[best]) best = i;
  return best;
}

}  // namespace attnp
