#pragma once

// Task metrics, gradient-based word importance, attention-saliency agreement,
// and heatmap rendering.

#include <attnp/model.hpp>

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace attnp {

struct ClassStats {
  std::size_t cls = 0;
  double precision = 0;
  double recall = 0;
  std::size_t support = 0;
};

namespace detail {

struct Confusion {
  std::vector<std::size_t> tp, fp, fn, support;
  std::size_t correct = 0, total = 0;

  Confusion(const std::vector<std::size_t>& preds,
            const std::vector<std::size_t>& labels, std::size_t n_classes)
      : tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0), support(n_classes, 0) {
    if (preds.size() != labels.size())
      throw std::invalid_argument("task_metric: prediction/label length mismatch");
    if (preds.empty()) throw std::invalid_argument("task_metric: empty inputs");
    total = preds.size();
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (preds[i] >= n_classes || labels[i] >= n_classes)
        throw std::invalid_argument("task_metric: class index out of range");
      ++support[labels[i]];
      if (preds[i] == labels[i]) {
        ++correct;
        ++tp[labels[i]];
      } else {
        ++fp[preds[i]];
        ++fn[labels[i]];
      }
    }
  }
};

inline double safe_div(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

inline double f1_of(std::size_t tp, std::size_t fp, std::size_t fn) {
  double p = safe_div(double(tp), double(tp + fp));
  double r = safe_div(double(tp), double(tp + fn));
  return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
}

}  // namespace detail

inline std::size_t metric_classes(const std::vector<std::size_t>& preds,
                                  const std::vector<std::size_t>& labels) {
  std::size_t m = 2;
  for (std::size_t v : preds) m = std::max(m, v + 1);
  for (std::size_t v : labels) m = std::max(m, v + 1);
  return m;
}

// bc: F1 of class 1. qa: accuracy. nli: micro-averaged F1 over the confusion
// sums (identical to accuracy for single-label data, computed the long way).
inline double task_metric(const std::vector<std::size_t>& preds,
                          const std::vector<std::size_t>& labels, TaskKind task) {
  std::size_t n_classes = metric_classes(preds, labels);
  detail::Confusion c(preds, labels, n_classes);
  switch (task) {
    case TaskKind::bc:
      return detail::f1_of(c.tp[1], c.fp[1], c.fn[1]);
    case TaskKind::qa:
      return double(c.correct) / double(c.total);
    case TaskKind::nli: {
      std::size_t tp = 0, fp = 0, fn = 0;
      for (std::size_t k = 0; k < n_classes; ++k) {
        tp += c.tp[k];
        fp += c.fp[k];
        fn += c.fn[k];
      }
      return detail::f1_of(tp, fp, fn);
    }
  }
  throw std::logic_error("task_metric: bad task");
}

inline const char* metric_name(TaskKind task) {
  switch (task) {
    case TaskKind::bc: return "f1";
    case TaskKind::qa: return "accuracy";
    case TaskKind::nli: return "micro_f1";
  }
  throw std::logic_error("metric_name: bad task");
}

struct SaliencyMap {
  std::vector<double> values;  // zero at masked positions
  bool degenerate = false;     // gradient vanished everywhere
};

// L2 norm of the gradient of the predicted-class probability with respect to
// each embedded story word, normalized to sum one over unmasked tokens.
inline SaliencyMap gradient_importance(const Params& p, const Sample& s) {
  Tape t;
  Bound b = bind(t, p);
  Forward fw = forward(t, b, s);
  std::size_t pred = predict(t.value(fw.head.probs));
  Value target = sum(slice(fw.head.probs, pred, 1));
  GradientMap g = t.backward(target);
  const Tensor& dE = g.at(fw.p.E);

  SaliencyMap out;
  const std::size_t T = dE.rows(), d = dE.cols();
  out.values.assign(T, 0.0);
  double total = 0;
  for (std::size_t i = 0; i < T; ++i) {
    if (!fw.p.mask[i]) continue;
    double sq = 0;
    for (std::size_t j = 0; j < d; ++j) sq += dE.at(i, j) * dE.at(i, j);
    out.values[i] = std::sqrt(sq);
    total += out.values[i];
  }
  if (total < 1e-300) {
    out.degenerate = true;
    std::fill(out.values.begin(), out.values.end(), 0.0);
    return out;
  }
  for (double& v : out.values) v /= total;
  return out;
}

// Standard Pearson correlation over unmasked positions. Returns nothing when
// either side has no variance, so callers can count skips instead of
// inventing a value. Needs at least two unmasked positions.
inline std::optional<double> pearson_correlation(const std::vector<double>& a,
                                                 const std::vector<double>& b,
                                                 const std::vector<bool>& mask) {
  if (a.size() != b.size() || a.size() != mask.size())
    throw std::invalid_argument("pearson_correlation: length mismatch");
  std::size_t n = 0;
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!mask[i]) continue;
    ++n;
    ma += a[i];
    mb += b[i];
  }
  if (n < 2) throw std::invalid_argument("pearson_correlation: need two unmasked positions");
  ma /= double(n);
  mb /= double(n);
  double saa = 0, sbb = 0, sab = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!mask[i]) continue;
    double da = a[i] - ma, db = b[i] - mb;
    saa += da * da;
    sbb += db * db;
    sab += da * db;
  }
  if (saa < 1e-30 || sbb < 1e-30) return std::nullopt;
  return sab / std::sqrt(saa * sbb);
}

struct EvalReport {
  std::string metric_name;
  double metric = 0;
  double mean_correlation = 0;  // over instances with defined correlation
  std::size_t n_instances = 0;
  std::size_t n_skipped = 0;  // degenerate correlations
  std::vector<ClassStats> per_class;
};

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["metric_name"] = r.metric_name;
  j["metric"] = r.metric;
  j["mean_correlation"] = r.mean_correlation;
  j["n_instances"] = r.n_instances;
  j["n_skipped"] = r.n_skipped;
  j["per_class"] = nlohmann::json::array();
  for (const ClassStats& c : r.per_class)
    j["per_class"].push_back({{"class", c.cls},
                              {"precision", c.precision},
                              {"recall", c.recall},
                              {"support", c.support}});
  return j;
}

namespace detail {

struct InstanceEval {
  std::size_t pred = 0;
  std::optional<double> corr;
};

inline InstanceEval eval_one(const Params& p, const Sample& s) {
  InstanceEval out;
  std::vector<double> attn;
  std::vector<bool> mask;
  {
    Tape t;
    Bound b = bind(t, p);
    Forward fw = forward(t, b, s);
    out.pred = predict(t.value(fw.head.probs));
    attn = t.value(fw.head.attn).values;
    mask = fw.p.mask;
  }
  SaliencyMap sal = gradient_importance(p, s);
  std::size_t unmasked = 0;
  for (bool m : mask) unmasked += m;
  if (sal.degenerate || unmasked < 2) {
    out.corr = std::nullopt;
  } else {
    out.corr = pearson_correlation(attn, sal.values, mask);
  }
  return out;
}

inline std::size_t eval_threads() {
  const char* env = std::getenv("ATTNP_THREADS");
  if (!env) return 1;
  long n = std::strtol(env, nullptr, 10);
  return n < 1 ? 1 : static_cast<std::size_t>(n);
}

}  // namespace detail

// Fast forward-only predictions, for validation during training.
inline std::vector<std::size_t> predict_all(const Params& p,
                                            const std::vector<Sample>& split) {
  std::vector<std::size_t> preds(split.size());
  for (std::size_t i = 0; i < split.size(); ++i) {
    Tape t;
    Bound b = bind(t, p);
    Forward fw = forward(t, b, split[i]);
    preds[i] = predict(t.value(fw.head.probs));
  }
  return preds;
}

inline double validation_metric(const Params& p, const std::vector<Sample>& split) {
  std::vector<std::size_t> labels(split.size());
  for (std::size_t i = 0; i < split.size(); ++i) labels[i] = split[i].label;
  return task_metric(predict_all(p, split), labels, p.cfg.task);
}

// Full report: task metric, per-class stats, and the mean per-instance
// correlation between attention weights and gradient importance. Instances
// are scored in parallel when ATTNP_THREADS asks for it; the reduction is a
// deterministic instance-order pass either way.
inline EvalReport evaluate(const Params& p, const std::vector<Sample>& split) {
  if (split.empty()) throw std::invalid_argument("evaluate: empty split");
  std::vector<detail::InstanceEval> rows(split.size());

  std::size_t n_threads = std::min(detail::eval_threads(), split.size());
  if (n_threads <= 1) {
    for (std::size_t i = 0; i < split.size(); ++i) rows[i] = detail::eval_one(p, split[i]);
  } else {
    std::vector<std::thread> pool;
    std::size_t chunk = (split.size() + n_threads - 1) / n_threads;
    for (std::size_t w = 0; w < n_threads; ++w) {
      std::size_t lo = w * chunk, hi = std::min(split.size(), lo + chunk);
      if (lo >= hi) break;
      pool.emplace_back([&, lo, hi] {
        for (std::size_t i = lo; i < hi; ++i) rows[i] = detail::eval_one(p, split[i]);
      });
    }
    for (auto& th : pool) th.join();
  }

  std::vector<std::size_t> preds(split.size()), labels(split.size());
  for (std::size_t i = 0; i < split.size(); ++i) {
    preds[i] = rows[i].pred;
    labels[i] = split[i].label;
  }

  EvalReport rep;
  rep.metric_name = metric_name(p.cfg.task);
  rep.metric = task_metric(preds, labels, p.cfg.task);
  rep.n_instances = split.size();
  double corr_sum = 0;
  std::size_t corr_n = 0;
  for (const auto& r : rows) {
    if (r.corr) {
      corr_sum += *r.corr;
      ++corr_n;
    } else {
      ++rep.n_skipped;
    }
  }
  rep.mean_correlation = corr_n ? corr_sum / double(corr_n) : 0.0;

  std::size_t n_classes = std::max<std::size_t>(p.cfg.n_classes,
                                                metric_classes(preds, labels));
  detail::Confusion c(preds, labels, n_classes);
  for (std::size_t k = 0; k < n_classes; ++k) {
    ClassStats st;
    st.cls = k;
    st.precision = detail::safe_div(double(c.tp[k]), double(c.tp[k] + c.fp[k]));
    st.recall = detail::safe_div(double(c.tp[k]), double(c.tp[k] + c.fn[k]));
    st.support = c.support[k];
    rep.per_class.push_back(st);
  }
  return rep;
}

// ---- heatmaps ---------------------------------------------------------------

struct Heatmap {
  std::string html;
  std::string terminal;
};

namespace detail {

inline std::string html_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&#39;"; break;
      default: out += ch;
    }
  }
  return out;
}

inline std::vector<double> unit_scale(const std::vector<double>& w) {
  double mx = 0;
  for (double v : w) mx = std::max(mx, v);
  std::vector<double> out(w.size(), 0.0);
  if (mx <= 0) return out;
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = std::max(0.0, w[i]) / mx;
  return out;
}

inline void html_row(std::ostringstream& os, const char* label,
                     const std::vector<std::string>& tokens,
                     const std::vector<double>& scaled, const char* rgb) {
  os << "<div class=\"row\"><span class=\"label\">" << label << "</span>";
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    os << "<span class=\"tok\" style=\"background: rgba(" << rgb << ","
       << scaled[i] << ")\">" << html_escape(tokens[i]) << "</span>";
  }
  os << "</div>\n";
}

// grayscale ramp of the 256-color cube: 232 (near black) .. 255 (near white)
inline int term_color(double intensity) {
  int idx = 232 + static_cast<int>(intensity * 23.0 + 0.5);
  return std::min(255, std::max(232, idx));
}

inline void term_row(std::ostringstream& os, const char* label,
                     const std::vector<std::string>& tokens,
                     const std::vector<double>& scaled) {
  os << label << " ";
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    int bg = term_color(scaled[i]);
    const char* fg = scaled[i] > 0.5 ? "30" : "97";  // readable on both ends
    os << "\x1b[48;5;" << bg << "m\x1b[" << fg << "m " << tokens[i] << " \x1b[0m";
  }
  os << "\n";
}

}  // namespace detail

// Two shaded token rows: attention weights and gradient importance, opacity
// proportional to weight with the maximum fully opaque.
inline Heatmap render_heatmap(const std::vector<std::string>& tokens,
                              const std::vector<double>& attention,
                              const std::vector<double>& saliency) {
  if (tokens.size() != attention.size() || tokens.size() != saliency.size())
    throw std::invalid_argument("render_heatmap: length mismatch");
  std::vector<double> at = detail::unit_scale(attention);
  std::vector<double> sa = detail::unit_scale(saliency);

  std::ostringstream html;
  html << "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n"
       << "<title>attention heatmap</title>\n<style>\n"
       << "body { font-family: sans-serif; margin: 2em; }\n"
       << ".row { margin: 0.5em 0; line-height: 2.2; }\n"
       << ".label { display: inline-block; width: 6em; font-weight: bold; }\n"
       << ".tok { padding: 0.15em 0.3em; margin: 0 0.1em; border-radius: 3px; }\n"
       << "</style>\n</head>\n<body>\n";
  detail::html_row(html, "attention", tokens, at, "255,110,0");
  detail::html_row(html, "gradient", tokens, sa, "0,110,255");
  html << "</body>\n</html>\n";

  std::ostringstream term;
  detail::term_row(term, "attn", tokens, at);
  detail::term_row(term, "grad", tokens, sa);

  return {html.str(), term.str()};
}

}  // namespace attnp
