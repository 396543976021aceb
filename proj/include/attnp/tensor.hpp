#pragma once

// Dense double-precision tensors and a reverse-mode tape. The tape records
// every executed operation in topological order; backward() replays it once
// in reverse, accumulating adjoints additively across fan-out. Gradients are
// reported for requires_grad leaves and for explicitly watched nodes, which
// is how callers obtain gradients at non-parameter intermediates such as
// attention scores.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace attnp {

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t s : shape) n *= s;
  return n;
}

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> values;  // row-major
  bool requires_grad = false;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<double> v, bool rg = false)
      : shape(std::move(s)), values(std::move(v)), requires_grad(rg) {
    if (shape_numel(shape) != values.size())
      throw std::invalid_argument("Tensor: shape does not match value count");
  }

  static Tensor zeros(std::vector<std::size_t> s) {
    std::size_t n = shape_numel(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }
  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor vec(std::vector<double> v) {
    std::size_t n = v.size();
    return Tensor({n}, std::move(v));
  }
  static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> v) {
    return Tensor({r, c}, std::move(v));
  }

  std::size_t numel() const { return values.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape.at(0); }
  std::size_t cols() const { return shape.at(1); }

  double item() const {
    if (numel() != 1) throw std::logic_error("Tensor::item: not a scalar");
    return values[0];
  }
  double& at(std::size_t i) { return values[i]; }
  double at(std::size_t i) const { return values[i]; }
  double& at(std::size_t i, std::size_t j) { return values[i * cols() + j]; }
  double at(std::size_t i, std::size_t j) const { return values[i * cols() + j]; }

  bool all_finite() const {
    for (double v : values)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

namespace detail {
inline void check_finite(const std::vector<double>& values, const char* op) {
  for (double v : values)
    if (!std::isfinite(v))
      throw std::runtime_error(std::string("non-finite value produced by ") + op);
}
}  // namespace detail

// Numerically stable softmax. Masked positions are excluded from the
// normalization sum and come out exactly zero.
inline Tensor softmax(const Tensor& v, const std::vector<bool>* mask = nullptr) {
  if (v.numel() == 0) throw std::runtime_error("softmax: empty input");
  if (mask && mask->size() != v.numel())
    throw std::invalid_argument("softmax: mask length mismatch");
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < v.numel(); ++i)
    if ((!mask || (*mask)[i]) && v.values[i] > mx) mx = v.values[i];
  if (mx == -std::numeric_limits<double>::infinity())
    throw std::runtime_error("softmax: no valid positions");
  Tensor out = Tensor::zeros(v.shape);
  double sum = 0.0;
  for (std::size_t i = 0; i < v.numel(); ++i) {
    if (mask && !(*mask)[i]) continue;
    double e = std::exp(v.values[i] - mx);
    out.values[i] = e;
    sum += e;
  }
  for (std::size_t i = 0; i < v.numel(); ++i) out.values[i] /= sum;
  detail::check_finite(out.values, "softmax");
  return out;
}

class Tape;

// Handle to a node on a tape. Cheap to copy; valid until the tape is cleared.
struct Value {
  Tape* tape = nullptr;
  std::size_t id = static_cast<std::size_t>(-1);
  bool valid() const { return tape != nullptr; }
};

// Gradients keyed by tape-node identity, with a secondary index by the
// address of the source Tensor for leaves created from persistent storage.
// Absent entries mean zero gradient.
class GradientMap {
 public:
  void put(std::size_t node_id, const Tensor* origin, Tensor grad) {
    if (origin) {
      // Two tape nodes backed by the same tensor both contribute to its
      // total gradient, so merge rather than overwrite.
      auto it = by_origin_.find(origin);
      if (it != by_origin_.end()) {
        Tensor& acc = entries_[it->second];
        for (std::size_t i = 0; i < acc.numel(); ++i) acc.values[i] += grad.values[i];
        by_node_[node_id] = it->second;
        return;
      }
      by_origin_[origin] = entries_.size();
    }
    by_node_[node_id] = entries_.size();
    entries_.push_back(std::move(grad));
  }

  const Tensor* find(const Value& v) const {
    auto it = by_node_.find(v.id);
    return it == by_node_.end() ? nullptr : &entries_[it->second];
  }
  const Tensor* find(const Tensor& origin) const {
    auto it = by_origin_.find(&origin);
    return it == by_origin_.end() ? nullptr : &entries_[it->second];
  }
  const Tensor& at(const Value& v) const {
    const Tensor* g = find(v);
    if (!g) throw std::out_of_range("GradientMap: no gradient for node");
    return *g;
  }
  const Tensor& at(const Tensor& origin) const {
    const Tensor* g = find(origin);
    if (!g) throw std::out_of_range("GradientMap: no gradient for tensor");
    return *g;
  }

  // Sums origin-keyed entries from another map into this one, scaled.
  // Used by the trainer to reduce per-instance gradients in instance order.
  void accumulate_scaled(const GradientMap& other, double scale) {
    for (const auto& [origin, idx] : other.by_origin_) {
      const Tensor& g = other.entries_[idx];
      auto it = by_origin_.find(origin);
      if (it == by_origin_.end()) {
        Tensor scaled = g;
        for (double& x : scaled.values) x *= scale;
        by_origin_[origin] = entries_.size();
        entries_.push_back(std::move(scaled));
      } else {
        Tensor& acc = entries_[it->second];
        if (acc.shape != g.shape)
          throw std::logic_error("GradientMap: shape mismatch in accumulation");
        for (std::size_t i = 0; i < acc.numel(); ++i)
          acc.values[i] += scale * g.values[i];
      }
    }
  }

  template <typename Fn>
  void for_each_origin(Fn&& fn) {
    for (auto& [origin, idx] : by_origin_) fn(origin, entries_[idx]);
  }

  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<Tensor> entries_;
  std::unordered_map<std::size_t, std::size_t> by_node_;
  std::unordered_map<const Tensor*, std::size_t> by_origin_;
};

using BackFn = std::function<void(Tape&, std::size_t self)>;

class Tape {
 public:
  Value push(Tensor data, BackFn back) {
    nodes_.push_back(Node{std::move(data), {}, std::move(back), false, nullptr});
    return Value{this, nodes_.size() - 1};
  }

  // Leaf created from persistent storage; the source address is recorded so
  // gradients can later be looked up by tensor identity.
  Value leaf(const Tensor& t) {
    if (shape_numel(t.shape) != t.values.size())
      throw std::invalid_argument("leaf: shape does not match value count");
    nodes_.push_back(Node{t, {}, nullptr, t.requires_grad, &t});
    return Value{this, nodes_.size() - 1};
  }

  Value constant(Tensor t) {
    nodes_.push_back(Node{std::move(t), {}, nullptr, false, nullptr});
    return Value{this, nodes_.size() - 1};
  }

  // Marks a node so backward() reports its gradient even though it is not a
  // requires_grad leaf (e.g. attention scores, iAT coefficients).
  void watch(const Value& v) {
    check_owned(v);
    nodes_[v.id].wants_grad = true;
  }

  const Tensor& value(const Value& v) const {
    check_owned(v);
    return nodes_[v.id].data;
  }

  std::size_t size() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

  // Reverse pass from a scalar. Each record is visited exactly once; adjoints
  // accumulate additively across fan-out. Repeatable: adjoints are reset
  // before every run.
  GradientMap backward(const Value& loss) {
    if (loss.tape != this || loss.id >= nodes_.size())
      throw std::runtime_error("backward: loss not produced by this tape");
    Node& l = nodes_[loss.id];
    if (l.data.numel() != 1)
      throw std::invalid_argument("backward: loss must be scalar");
    if (!std::isfinite(l.data.values[0]))
      throw std::runtime_error("backward: non-finite loss");
    for (Node& n : nodes_) n.adj.clear();
    l.adj.assign(1, 1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.adj.empty() || !n.back) continue;
      n.back(*this, i);
    }
    GradientMap out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      Node& n = nodes_[i];
      if (!n.wants_grad) continue;
      Tensor g(n.data.shape, n.adj.empty()
                                 ? std::vector<double>(n.data.numel(), 0.0)
                                 : n.adj);
      out.put(i, n.origin, std::move(g));
    }
    return out;
  }

  // Adjoint accumulation buffer for a node, or nullptr when no gradient is
  // needed there (constants with no further dependencies).
  double* grad_accum(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.wants_grad && !n.back) return nullptr;
    if (n.adj.empty()) n.adj.assign(n.data.numel(), 0.0);
    return n.adj.data();
  }

  const std::vector<double>& adjoint(std::size_t id) const { return nodes_[id].adj; }

 private:
  struct Node {
    Tensor data;
    std::vector<double> adj;
    BackFn back;
    bool wants_grad = false;
    const Tensor* origin = nullptr;
  };
  std::vector<Node> nodes_;

  void check_owned(const Value& v) const {
    if (v.tape != this || v.id >= nodes_.size())
      throw std::logic_error("value does not belong to this tape");
  }
};

// Free-function form of Tape::backward.
inline GradientMap backward(Tape& tape, const Value& loss) { return tape.backward(loss); }

namespace detail {
inline Tape& same_tape(const Value& a, const Value& b) {
  if (a.tape == nullptr || a.tape != b.tape)
    throw std::logic_error("operands live on different tapes");
  return *a.tape;
}
inline void require(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Kernels. Each records its local gradient rule on the tape.
// ---------------------------------------------------------------------------

inline Value add(Value a, Value b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& ta = t.value(a);
  const Tensor& tb = t.value(b);
  detail::require(ta.shape == tb.shape, "add: shape mismatch");
  Tensor out(ta.shape, ta.values);
  for (std::size_t i = 0; i < out.numel(); ++i) out.values[i] += tb.values[i];
  detail::check_finite(out.values, "add");
  return t.push(std::move(out), [ia = a.id, ib = b.id](Tape& tp, std::size_t self) {
    const auto& g = tp.adjoint(self);
    if (double* da = tp.grad_accum(ia))
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    if (double* db = tp.grad_accum(ib))
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
  });
}

inline Value sub(Value a, Value b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& ta = t.value(a);
  const Tensor& tb = t.value(b);
  detail::require(ta.shape == tb.shape, "sub: shape mismatch");
  Tensor out(ta.shape, ta.values);
  for (std::size_t i = 0; i < out.numel(); ++i) out.values[i] -= tb.values[i];
  detail::check_finite(out.values, "sub");
  return t.push(std::move(out), [ia = a.id, ib = b.id](Tape& tp, std::size_t self) {
    const auto& g = tp.adjoint(self);
    if (double* da = tp.grad_accum(ia))
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    if (double* db = tp.grad_accum(ib))
      for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
  });
}

inline Value mul(Value a, Value b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& ta = t.value(a);
  const Tensor& tb = t.value(b);
  detail::require(ta.shape == tb.shape, "mul: shape mismatch");
  Tensor out(ta.shape, ta.values);
  for (std::size_t i = 0; i < out.numel(); ++i) out.values[i] *= tb.values[i];
  detail::check_finite(out.values, "mul");
  return t.push(std::move(out), [ia = a.id, ib = b.id](Tape& tp, std::size_t self) {
    const auto& g = tp.adjoint(self);
    const auto& va = tp.value(Value{&tp, ia}).values;
    const auto& vb = tp.value(Value{&tp, ib}).values;
    if (double* da = tp.grad_accum(ia))
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * vb[i];
    if (double* db = tp.grad_accum(ib))
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * va[i];
  });
}

inline Value scale(Value a, double s) {
  Tape& t = *a.tape;
  Tensor out = t.value(a);
  out.requires_grad = false;
  for (double& v : out.values) v *= s;
  detail::check_finite(out.values, "scale");
  return t.push(std::move(out), [ia = a.id, s](Tape& tp, std::size_t self) {
    const auto& g = tp.adjoint(self);
    if (double* da = tp.grad_accum(ia))
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += s * g[i];
  });
}

inline Value tanh(Value a) {
  Tape& t = *a.tape;
  Tensor out = t.value(a);
  out.requires_grad = false;
  for (double& v : out.values) v = std::tanh(v);
  detail::check_finite(out.values, "tanh");
  return t.push(std::move(out), [ia = a.id](Tape& tp, std::size_t self) {
    const auto& g = tp.adjoint(self);
    const auto& y = tp.value(Value{&tp, self}).values;
    if (double* da = tp.grad_accum(ia))
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

inline Value sigmoid(Value a) {
  Tape& t = *a.tape;
  Tensor out = t.value(a);
  out.requires_grad = false;
  for (double& v : out.values) {
    if (v >= 0) {
      v = 1.0 / (1.0 + std::exp(-v));
    } else {
      double e = std::exp(v);
      v = e / (1.0 + e);
    }
  }
  detail::check_finite(out.values, "sigmoid");
  return t.push(std::move(out), [ia = a.id](Tape& tp, std::size_t self) {
    const auto& g = tp.adjoint(self);
    const auto& y = tp.value(Value{&tp, self}).values;
    if (double* da = tp.grad_accum(ia))
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

// A (M x K) times B (K x N) -> M x N.
inline Value matmul(Value a, Value b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& ta = t.value(a);
  const Tensor& tb = t.value(b);
  detail::require(ta.rank() == 2 && tb.rank() == 2, "matmul: operands must be matrices");
  detail::require(ta.cols() == tb.rows(), "matmul: inner dimension mismatch");
  const std::size_t M = ta.rows(), K = ta.cols(), N = tb.cols();
  Tensor out = Tensor::zeros({M, N});
  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t k = 0; k < K; ++k) {
      double aik = ta.values[i * K + k];
      const double* brow = &tb.values[k * N];
      double* orow = &out.values[i * N];
      for (std::size_t j = 0; j < N; ++j) orow[j] += aik * brow[j];
    }
  }
  detail::check_finite(out.values, "matmul");
  return t.push(std::move(out), [ia = a.id, ib = b.id, M, K, N](Tape& tp, std::size_t self) {
    const auto& g = tp.adjoint(self);
    const auto& va = tp.value(Value{&tp, ia}).values;
    const auto& vb = tp.value(Value{&tp, ib}).values;
    if (double* da = tp.grad_accum(ia)) {
      // dA = G * B^T
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t k = 0; k < K; ++k) {
          double s = 0;
          const double* grow = &g[i * N];
          const double* brow = &vb[k * N];
          for (std::size_t j = 0; j < N; ++j) s += grow[j] * brow[j];
          da[i * K + k] += s;
        }
    }
    if (double* db = tp.grad_accum(ib)) {
      // dB = A^T * G
      for (std::size_t i = 0; i < M; ++i)
        for (std::size_t k = 0; k < K; ++k) {
          double aik = va[i * K + k];
          const double* grow = &g[i * N];
          double* drow = &db[k * N];
          for (std::size_t j = 0; j < N; ++j) drow[j] += aik * grow[j];
        }
    }
  });
}

// A (M x K) times x (K) -> M.
inline Value matvec(Value a, Value x) {
  Tape& t = detail::same_tape(a, x);
  const Tensor& ta = t.value(a);
  const Tensor& tx = t.value(x);
  detail::require(ta.rank() == 2 && tx.rank() == 1, "matvec: expects matrix and vector");
  detail::require(ta.cols() == tx.numel(), "matvec: dimension mismatch");
  const std::size_t M = ta.rows(), K = ta.cols();
  Tensor out = Tensor::zeros({M});
  for (std::size_t i = 0; i < M; ++i) {
    const double* arow = &ta.values[i * K];
    double s = 0;
    for (std::size_t k = 0; k < K; ++k) s += arow[k] * tx.values[k];
    out.values[i] = s;
  }
  detail::check_finite(out.values, "matvec");
  return t.push(std::move(out), [ia = a.id, ix = x.id, M, K](Tape& tp, std::size_t self) {
    const auto& g = tp.adjoint(self);
    const auto& va = tp.value(Value{&tp, ia}).values;
    const auto& vx = tp.value(Value{&tp, ix}).values;
    if (double* da = tp.grad_accum(ia)) {
      for (std::size_t i = 0; i < M; ++i) {
        double gi = g[i];
        double* drow = &da[i * K];
        for (std::size_t k = 0; k < K; ++k) drow[k] += gi * vx[k];
      }
    }
    if (double* dx = tp.grad_accum(ix)) {
      for (std::size_t i = 0; i < M; ++i) {
        double gi = g[i];
        const double* arow = &va[i * K];
        for (std::size_t k = 0; k < K; ++k) dx[k] += gi * arow[k];
      }
    }
  });
}

// A^T x for A (M x K), x (M) -> K. Used for c^T tanh(...) style reductions.
inline Value matvec_t(Value a, Value x) {
  Tape& t = detail::same_tape(a, x);
  const Tensor& ta = t.value(a);
  const Tensor& tx = t.value(x);
  detail::require(ta.rank() == 2 && tx.rank() == 1, "matvec_t: expects matrix and vector");
  detail::require(ta.rows() == tx.numel(), "matvec_t: dimension mismatch");
  const std::size_t M = ta.rows(), K = ta.cols();
  Tensor out = Tensor::zeros({K});
  for (std::size_t i = 0; i < M; ++i) {
    const double* arow = &ta.values[i * K];
    double xi = tx.values[i];
    for (std::size_t k = 0; k < K; ++k) out.values[k] += xi * arow[k];
  }
  detail::check_finite(out.values, "matvec_t");
  return t.push(std::move(out), [ia = a.id, ix = x.id, M, K](Tape& tp, std::size_t self) {
    const auto& g = tp.adjoint(self);
    const auto& va = tp.value(Value{&tp, ia}).values;
    const auto& vx = tp.value(Value{&tp, ix}).values;
    if (double* da = tp.grad_accum(ia)) {
      for (std::size_t i = 0; i < M; ++i) {
        double xi = vx[i];
        double* drow = &da[i * K];
        for (std::size_t k = 0; k < K; ++k) drow[k] += xi * g[k];
      }
    }
    if (double* dx = tp.grad_accum(ix)) {
      for (std::size_t i = 0; i < M; ++i) {
        const double* arow = &va[i * K];
        double s = 0;
        for (std::size_t k = 0; k < K; ++k) s += arow[k] * g[k];
        dx[i] += s;
      }
    }
  });
}

// M (R x C) plus v (R) broadcast across columns.
inline Value add_col_broadcast(Value m, Value v) {
  Tape& t = detail::same_tape(m, v);
  const Tensor& tm = t.value(m);
  const Tensor& tv = t.value(v);
  detail::require(tm.rank() == 2 && tv.rank() == 1, "add_col_broadcast: expects matrix and vector");
  detail::require(tm.rows() == tv.numel(), "add_col_broadcast: dimension mismatch");
  const std::size_t R = tm.rows(), C = tm.cols();
  Tensor out = tm;
  out.requires_grad = false;
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out.values[r * C + c] += tv.values[r];
  detail::check_finite(out.values, "add_col_broadcast");
  return t.push(std::move(out), [im = m.id, iv = v.id, R, C](Tape& tp, std::size_t self) {
    const auto& g = tp.adjoint(self);
    if (double* dm = tp.grad_accum(im))
      for (std::size_t i = 0; i < g.size(); ++i) dm[i] += g[i];
    if (double* dv = tp.grad_accum(iv)) {
      for (std::size_t r = 0; r < R; ++r) {
        double s = 0;
        const double* grow = &g[r * C];
        for (std::size_t c = 0; c < C; ++c) s += grow[c];
        dv[r] += s;
      }
    }
  });
}

// Stacks T equal-length vectors as the columns of an (m x T) matrix.
inline Value stack_cols(const std::vector<Value>& cols) {
  detail::require(!cols.empty(), "stack_cols: no columns");
  Tape& t = *cols[0].tape;
  const std::size_t m = t.value(cols[0]).numel();
  const std::size_t T = cols.size();
  Tensor out = Tensor::zeros({m, T});
  std::vector<std::size_t> ids(T);
  for (std::size_t c = 0; c < T; ++c) {
    detail::same_tape(cols[0], cols[c]);
    const Tensor& tc = t.value(cols[c]);
    detail::require(tc.numel() == m, "stack_cols: inconsistent column length");
    for (std::size_t r = 0; r < m; ++r) out.values[r * T + c] = tc.values[r];
    ids[c] = cols[c].id;
  }
  return t.push(std::move(out), [ids, m, T](Tape& tp, std::size_t self) {
    const auto& g = tp.adjoint(self);
    for (std::size_t c = 0; c < T; ++c) {
      if (double* dc = tp.grad_accum(ids[c]))
        for (std::size_t r = 0; r < m; ++r) dc[r] += g[r * T + c];
    }
  });
}

// Row r of a matrix as a vector.
inline Value row(Value m, std::size_t r) {
  Tape& t = *m.tape;
  const Tensor& tm = t.value(m);
  detail::require(tm.rank() == 2, "row: expects a matrix");
  detail::require(r < tm.rows(), "row: index out of range");
  const std::size_t C = tm.cols();
  Tensor out({C}, std::vector<double>(tm.values.begin() + r * C,
                                      tm.values.begin() + (r + 1) * C));
  return t.push(std::move(out), [im = m.id, r, C](Tape& tp, std::size_t self) {
    const auto& g = tp.adjoint(self);
    if (double* dm = tp.grad_accum(im))
      for (std::size_t c = 0; c < C; ++c) dm[r * C + c] += g[c];
  });
}

// Contiguous slice of a vector.
inline Value slice(Value v, std::size_t start, std::size_t len) {
  Tape& t = *v.tape;
  const Tensor& tv = t.value(v);
  detail::require(tv.rank() == 1, "slice: expects a vector");
  detail::require(start + len <= tv.numel(), "slice: out of range");
  Tensor out({len}, std::vector<double>(tv.values.begin() + start,
                                        tv.values.begin() + start + len));
  return t.push(std::move(out), [iv = v.id, start, len](Tape& tp, std::size_t self) {
    const auto& g = tp.adjoint(self);
    if (double* dv = tp.grad_accum(iv))
      for (std::size_t i = 0; i < len; ++i) dv[start + i] += g[i];
  });
}

inline Value concat(Value a, Value b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& ta = t.value(a);
  const Tensor& tb = t.value(b);
  detail::require(ta.rank() == 1 && tb.rank() == 1, "concat: expects vectors");
  Tensor out = Tensor::zeros({ta.numel() + tb.numel()});
  std::copy(ta.values.begin(), ta.values.end(), out.values.begin());
  std::copy(tb.values.begin(), tb.values.end(), out.values.begin() + ta.numel());
  return t.push(std::move(out),
                [ia = a.id, ib = b.id, na = ta.numel()](Tape& tp, std::size_t self) {
                  const auto& g = tp.adjoint(self);
                  if (double* da = tp.grad_accum(ia))
                    for (std::size_t i = 0; i < na; ++i) da[i] += g[i];
                  if (double* db = tp.grad_accum(ib))
                    for (std::size_t i = na; i < g.size(); ++i) db[i - na] += g[i];
                });
}

// Gathers rows of an embedding table. The pad row is looked up like any
// other but receives no gradient, which together with zero initialization
// keeps it pinned at zero. Duplicate ids accumulate gradient additively.
inline Value lookup_rows(Value table, const std::vector<std::size_t>& ids,
                         std::size_t pad_id) {
  Tape& t = *table.tape;
  const Tensor& tt = t.value(table);
  detail::require(tt.rank() == 2, "lookup_rows: table must be a matrix");
  const std::size_t V = tt.rows(), d = tt.cols();
  Tensor out = Tensor::zeros({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::size_t id = ids[i];
    if (id >= V) throw std::out_of_range("lookup_rows: token id out of range");
    std::copy(tt.values.begin() + id * d, tt.values.begin() + (id + 1) * d,
              out.values.begin() + i * d);
  }
  return t.push(std::move(out), [it = table.id, ids, pad_id, d](Tape& tp, std::size_t self) {
    const auto& g = tp.adjoint(self);
    if (double* dt = tp.grad_accum(it)) {
      for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] == pad_id) continue;
        double* drow = &dt[ids[i] * d];
        const double* grow = &g[i * d];
        for (std::size_t j = 0; j < d; ++j) drow[j] += grow[j];
      }
    }
  });
}

// Masked stable softmax over a vector. Masked positions come out exactly zero
// and never receive gradient.
inline Value softmax_masked(Value v, std::vector<bool> mask) {
  Tape& t = *v.tape;
  const Tensor& tv = t.value(v);
  detail::require(tv.rank() == 1, "softmax_masked: expects a vector");
  Tensor out = softmax(tv, mask.empty() ? nullptr : &mask);
  return t.push(std::move(out), [iv = v.id, mask = std::move(mask)](Tape& tp, std::size_t self) {
    const auto& g = tp.adjoint(self);
    const auto& y = tp.value(Value{&tp, self}).values;
    if (double* dv = tp.grad_accum(iv)) {
      double inner = 0;
      for (std::size_t i = 0; i < g.size(); ++i) inner += g[i] * y[i];
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (!mask.empty() && !mask[i]) continue;
        dv[i] += y[i] * (g[i] - inner);
      }
    }
  });
}

inline Value sum(Value v) {
  Tape& t = *v.tape;
  const Tensor& tv = t.value(v);
  double s = 0;
  for (double x : tv.values) s += x;
  detail::check_finite({s}, "sum");
  return t.push(Tensor::scalar(s), [iv = v.id](Tape& tp, std::size_t self) {
    const auto& g = tp.adjoint(self);
    const std::size_t n = tp.value(Value{&tp, iv}).numel();
    if (double* dv = tp.grad_accum(iv))
      for (std::size_t i = 0; i < n; ++i) dv[i] += g[0];
  });
}

// Sums each row of an (R x C) matrix into a length-R vector.
inline Value row_sum(Value m) {
  Tape& t = *m.tape;
  const Tensor& tm = t.value(m);
  detail::require(tm.rank() == 2, "row_sum: expects a matrix");
  const std::size_t R = tm.rows(), C = tm.cols();
  Tensor out = Tensor::zeros({R});
  for (std::size_t r = 0; r < R; ++r) {
    double s = 0;
    const double* rowp = &tm.values[r * C];
    for (std::size_t c = 0; c < C; ++c) s += rowp[c];
    out.values[r] = s;
  }
  detail::check_finite(out.values, "row_sum");
  return t.push(std::move(out), [im = m.id, R, C](Tape& tp, std::size_t self) {
    const auto& g = tp.adjoint(self);
    if (double* dm = tp.grad_accum(im))
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) dm[r * C + c] += g[r];
  });
}

inline Value dot(Value a, Value b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& ta = t.value(a);
  const Tensor& tb = t.value(b);
  detail::require(ta.numel() == tb.numel(), "dot: length mismatch");
  double s = 0;
  for (std::size_t i = 0; i < ta.numel(); ++i) s += ta.values[i] * tb.values[i];
  detail::check_finite({s}, "dot");
  return t.push(Tensor::scalar(s), [ia = a.id, ib = b.id](Tape& tp, std::size_t self) {
    const auto& g = tp.adjoint(self);
    const auto& va = tp.value(Value{&tp, ia}).values;
    const auto& vb = tp.value(Value{&tp, ib}).values;
    if (double* da = tp.grad_accum(ia))
      for (std::size_t i = 0; i < va.size(); ++i) da[i] += g[0] * vb[i];
    if (double* db = tp.grad_accum(ib))
      for (std::size_t i = 0; i < vb.size(); ++i) db[i] += g[0] * va[i];
  });
}

inline Value log(Value a) {
  Tape& t = *a.tape;
  Tensor out = t.value(a);
  out.requires_grad = false;
  for (double& v : out.values) v = std::log(v);
  detail::check_finite(out.values, "log");
  return t.push(std::move(out), [ia = a.id](Tape& tp, std::size_t self) {
    const auto& g = tp.adjoint(self);
    const auto& x = tp.value(Value{&tp, ia}).values;
    if (double* da = tp.grad_accum(ia))
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] / x[i];
  });
}

// Elementwise clamp; gradient passes through strictly inside [lo, hi].
inline Value clamp(Value a, double lo, double hi) {
  Tape& t = *a.tape;
  Tensor out = t.value(a);
  out.requires_grad = false;
  for (double& v : out.values) v = std::min(std::max(v, lo), hi);
  return t.push(std::move(out), [ia = a.id, lo, hi](Tape& tp, std::size_t self) {
    const auto& g = tp.adjoint(self);
    const auto& x = tp.value(Value{&tp, ia}).values;
    if (double* da = tp.grad_accum(ia))
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] > lo && x[i] < hi) da[i] += g[i];
  });
}

inline Value l2_norm(Value a) {
  Tape& t = *a.tape;
  const Tensor& ta = t.value(a);
  double s = 0;
  for (double v : ta.values) s += v * v;
  double n = std::sqrt(s);
  detail::check_finite({n}, "l2_norm");
  return t.push(Tensor::scalar(n), [ia = a.id, n](Tape& tp, std::size_t self) {
    if (n == 0.0) return;
    const auto& g = tp.adjoint(self);
    const auto& x = tp.value(Value{&tp, ia}).values;
    if (double* da = tp.grad_accum(ia))
      for (std::size_t i = 0; i < x.size(); ++i) da[i] += g[0] * x[i] / n;
  });
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification.
// ---------------------------------------------------------------------------

using ScalarFn = std::function<Value(Tape&, Value)>;

// Max over coordinates of |analytic - central| / max(|analytic|, |central|, 1e-8)
// with a central difference of half-width `step`.
inline double grad_check(const ScalarFn& fn, const Tensor& point, double step) {
  if (step <= 0) throw std::invalid_argument("grad_check: step must be positive");
  Tensor p = point;
  p.requires_grad = true;
  Tape tape;
  Value x = tape.leaf(p);
  Value y = fn(tape, x);
  const Tensor& yv = tape.value(y);
  if (yv.numel() != 1) throw std::invalid_argument("grad_check: function must return a scalar");
  if (!std::isfinite(yv.values[0]))
    throw std::runtime_error("grad_check: non-finite function value");
  GradientMap gm = tape.backward(y);
  const Tensor& analytic = gm.at(x);

  auto eval = [&fn](const Tensor& at) {
    Tape t;
    Value v = t.leaf(at);
    Value out = fn(t, v);
    double r = t.value(out).item();
    if (!std::isfinite(r)) throw std::runtime_error("grad_check: non-finite function value");
    return r;
  };

  double worst = 0;
  for (std::size_t i = 0; i < point.numel(); ++i) {
    Tensor pp = point;
    pp.values[i] += step;
    Tensor pm = point;
    pm.values[i] -= step;
    double central = (eval(pp) - eval(pm)) / (2.0 * step);
    double denom = std::max({std::abs(analytic.values[i]), std::abs(central), 1e-8});
    worst = std::max(worst, std::abs(analytic.values[i] - central) / denom);
  }
  return worst;
}

}  // namespace attnp
