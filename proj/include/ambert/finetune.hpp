#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "ambert/common.hpp"
#include "ambert/model.hpp"
#include "ambert/optim.hpp"
#include "ambert/pretrain.hpp"
#include "ambert/tokenizer.hpp"

namespace ambert {

enum class Task { kClassification, kSpan };

inline std::string to_string(Task t) { return t == Task::kClassification ? "classification" : "span"; }

inline Task parse_task(std::string_view s) {
  if (s == "classification") return Task::kClassification;
  if (s == "span") return Task::kSpan;
  throw UsageError(str_cat("unknown task '", s, "' (expected classification|span)"));
}

struct FineTuneConfig {
  Task task = Task::kClassification;
  int num_labels = 2;
  double lambda = 1.0;  // agreement weight; 0.0 for the multiple-choice preset
  int epochs = 6;
  double lr = 2e-5;
  int batch_size = 32;
  double warmup_proportion = 0.1;
  double weight_decay = 0.01;
  int max_fine_len = 512;
  int max_coarse_len = 512;
  std::uint64_t seed = 0;

  void validate() const {
    if (lambda < 0.0) throw UsageError("lambda must be >= 0");
    if (task == Task::kClassification && num_labels < 2) throw UsageError("num_labels must be >= 2");
    if (epochs < 0 || batch_size < 1) throw UsageError("epochs >= 0 and batch_size >= 1 required");
  }
};

/// Task heads, kept in their own store. Classification: head_x over r_x0,
/// head_z over r_z0, head_joint over [r_x0, r_z0] (dual-stream variants),
/// head_x only otherwise. Span: a joint scorer over
/// [fine_i, coarse_cover(i)] and a fine-only scorer, each with start/end
/// columns.
template <typename T>
struct Heads {
  Task task = Task::kClassification;
  int num_labels = 2;
  bool dual = true;
  ParamStore<T> store;

  static Heads create(const ModelConfig& mc, Task task, int num_labels, std::uint64_t seed) {
    Heads h;
    h.task = task;
    h.num_labels = task == Task::kSpan ? 2 : num_labels;
    h.dual = is_dual_stream(mc.variant);
    const std::size_t d = static_cast<std::size_t>(mc.hidden);
    const std::size_t k = static_cast<std::size_t>(h.num_labels);
    if (task == Task::kClassification) {
      h.store.add("head.x.w", {d, k});
      h.store.add("head.x.b", {k}, false);
      if (h.dual) {
        h.store.add("head.z.w", {d, k});
        h.store.add("head.z.b", {k}, false);
        h.store.add("head.joint.w", {2 * d, k});
        h.store.add("head.joint.b", {k}, false);
      }
    } else {
      h.store.add("span.fine.w", {d, 2});
      h.store.add("span.fine.b", {2}, false);
      if (mc.has_coarse()) {
        h.store.add("span.joint.w", {2 * d, 2});
        h.store.add("span.joint.b", {2}, false);
      }
    }
    init_values(h.store, sub_seed(seed, "heads"));
    return h;
  }

  bool has(const std::string& n) const { return store.has(n); }
  Param<T>& p(const std::string& n) { return store.get(n); }
  const Param<T>& p(const std::string& n) const { return store.get(n); }
};

// ---------------------------------------------------------------------------
// Classification

struct ClassificationLoss {
  double ce_x = 0.0, ce_z = 0.0, ce_joint = 0.0;
  double reg = 0.0;  // || softmax_x - softmax_z ||_2, before lambda
  double total = 0.0;
};

namespace detail {

/// logits = feat W + b for a single feature row.
template <typename T>
std::vector<double> head_logits(const Param<T>& w, const Param<T>& b, const std::vector<T>& feat) {
  const std::size_t k = w.value.cols();
  std::vector<double> z(k);
  for (std::size_t j = 0; j < k; ++j) {
    double s = static_cast<double>(b.value[j]);
    for (std::size_t i = 0; i < feat.size(); ++i) s += static_cast<double>(feat[i]) * w.value(i, j);
    z[j] = s;
  }
  return z;
}

inline std::vector<double> softmax_vec(const std::vector<double>& z) {
  std::vector<double> p = z;
  nn::softmax_row_inplace(p.data(), p.size());
  return p;
}

inline double ce_from_logits(const std::vector<double>& z, int label) {
  return nn::cross_entropy_row(z.data(), z.size(), label, static_cast<double*>(nullptr));
}

/// Accumulates head grads for dlogits and returns d(feature).
template <typename T>
std::vector<double> head_backward(Param<T>& w, Param<T>& b, const std::vector<T>& feat,
                                  const std::vector<double>& dz) {
  const std::size_t k = w.value.cols();
  std::vector<double> dfeat(feat.size(), 0.0);
  for (std::size_t j = 0; j < k; ++j) {
    b.grad[j] += static_cast<T>(dz[j]);
    for (std::size_t i = 0; i < feat.size(); ++i) {
      w.grad(i, j) += static_cast<T>(dz[j] * static_cast<double>(feat[i]));
      dfeat[i] += dz[j] * static_cast<double>(w.value(i, j));
    }
  }
  return dfeat;
}

template <typename T>
std::vector<T> concat(const std::vector<T>& a, const std::vector<T>& b) {
  std::vector<T> out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

}  // namespace detail

/// Multi-task classification loss with agreement regularization:
/// CE(head_x) + CE(head_z) + CE(head_joint) + lambda * ||p_x - p_z||_2.
/// Non-dual variants train head_x alone. With `grads`, accumulates
/// scale * dLoss into head grads and the [CLS] rows of `grads`.
template <typename T>
ClassificationLoss classification_loss(const ForwardOutput<T>& out, Heads<T>& heads, int label,
                                       double lambda, HiddenGrads<T>* grads = nullptr,
                                       double scale = 1.0) {
  if (heads.task != Task::kClassification) throw UsageError("heads are not classification heads");
  if (label < 0 || label >= heads.num_labels)
    throw UsageError(str_cat("label ", label, " outside [0, ", heads.num_labels, ")"));
  const std::vector<T> rx = out.fine_cls();
  ClassificationLoss l;
  const auto zx = detail::head_logits(heads.p("head.x.w"), heads.p("head.x.b"), rx);
  if (zx.size() != static_cast<std::size_t>(heads.num_labels))
    throw UsageError("num_labels mismatch between heads and head weights");
  l.ce_x = detail::ce_from_logits(zx, label);
  if (!heads.dual) {
    l.total = l.ce_x;
    if (grads) {
      auto px = detail::softmax_vec(zx);
      px[static_cast<std::size_t>(label)] -= 1.0;
      for (double& v : px) v *= scale;
      auto d = detail::head_backward(heads.p("head.x.w"), heads.p("head.x.b"), rx, px);
      for (std::size_t i = 0; i < d.size(); ++i) grads->fine(0, i) += static_cast<T>(d[i]);
    }
    return l;
  }
  const std::vector<T> rz = out.coarse_cls();
  const std::vector<T> rj = detail::concat(rx, rz);
  const auto zz = detail::head_logits(heads.p("head.z.w"), heads.p("head.z.b"), rz);
  const auto zj = detail::head_logits(heads.p("head.joint.w"), heads.p("head.joint.b"), rj);
  l.ce_z = detail::ce_from_logits(zz, label);
  l.ce_joint = detail::ce_from_logits(zj, label);
  const auto px = detail::softmax_vec(zx);
  const auto pz = detail::softmax_vec(zz);
  double sq = 0.0;
  for (std::size_t j = 0; j < px.size(); ++j) sq += (px[j] - pz[j]) * (px[j] - pz[j]);
  l.reg = std::sqrt(sq);
  l.total = l.ce_x + l.ce_z + l.ce_joint + lambda * l.reg;
  if (!grads) return l;

  const std::size_t k = px.size();
  const auto lab = static_cast<std::size_t>(label);
  std::vector<double> dzx(k), dzz(k), dzj = detail::softmax_vec(zj);
  dzj[lab] -= 1.0;
  // d||p_x - p_z|| / dp = (p_x - p_z) / reg, pushed through each softmax;
  // the subgradient at reg == 0 is taken as zero.
  std::vector<double> dpx(k, 0.0);
  if (l.reg > 0.0)
    for (std::size_t j = 0; j < k; ++j) dpx[j] = lambda * (px[j] - pz[j]) / l.reg;
  double dot_x = 0.0, dot_z = 0.0;
  for (std::size_t j = 0; j < k; ++j) {
    dot_x += dpx[j] * px[j];
    dot_z += -dpx[j] * pz[j];
  }
  for (std::size_t j = 0; j < k; ++j) {
    dzx[j] = px[j] - (j == lab ? 1.0 : 0.0) + px[j] * (dpx[j] - dot_x);
    dzz[j] = pz[j] - (j == lab ? 1.0 : 0.0) + pz[j] * (-dpx[j] - dot_z);
  }
  for (std::size_t j = 0; j < k; ++j) {
    dzx[j] *= scale;
    dzz[j] *= scale;
    dzj[j] *= scale;
  }
  const auto drx = detail::head_backward(heads.p("head.x.w"), heads.p("head.x.b"), rx, dzx);
  const auto drz = detail::head_backward(heads.p("head.z.w"), heads.p("head.z.b"), rz, dzz);
  const auto drj = detail::head_backward(heads.p("head.joint.w"), heads.p("head.joint.b"), rj, dzj);
  const std::size_t d = rx.size();
  for (std::size_t i = 0; i < d; ++i) {
    grads->fine(0, i) += static_cast<T>(drx[i] + drj[i]);
    grads->coarse(0, i) += static_cast<T>(drz[i] + drj[d + i]);
  }
  return l;
}

// ---------------------------------------------------------------------------
// Span detection

/// Inclusive fine-index answer span within the interior [1, m].
struct SpanAnswer {
  int start = 1;
  int end = 1;
  bool operator==(const SpanAnswer&) const = default;
};

enum class SpanScorer { kJoint, kFine };

struct SpanLoss {
  double start = 0.0, end = 0.0, total = 0.0;
};

namespace detail {

/// Feature rows for interior fine positions 1..m: [fine_i, coarse_cover(i)]
/// for the joint scorer, fine_i alone for the fine scorer.
template <typename T>
Tensor<T> span_features(const ForwardOutput<T>& out, const TokenSeqPair& pair, SpanScorer scorer) {
  const std::size_t m = static_cast<std::size_t>(pair.fine_len() - 2);
  const std::size_t d = out.fine_hidden.cols();
  const bool joint = scorer == SpanScorer::kJoint;
  if (joint && !out.has_coarse) throw UsageError("joint span scorer needs the coarse stream");
  Tensor<T> f(m, joint ? 2 * d : d);
  const std::vector<int> cover = cover_map(pair);
  for (std::size_t i = 0; i < m; ++i) {
    std::copy(out.fine_hidden.row(i + 1), out.fine_hidden.row(i + 1) + d, f.row(i));
    if (joint) {
      const auto c = static_cast<std::size_t>(cover[i + 1]);
      std::copy(out.coarse_hidden.row(c), out.coarse_hidden.row(c) + d, f.row(i) + d);
    }
  }
  return f;
}

inline const char* span_prefix(SpanScorer s) { return s == SpanScorer::kJoint ? "span.joint." : "span.fine."; }

}  // namespace detail

/// Start/end logits over the interior fine positions ([m, 2]).
template <typename T>
Tensor<T> span_logits(const ForwardOutput<T>& out, const TokenSeqPair& pair, const Heads<T>& heads,
                      SpanScorer scorer) {
  const std::string pre = detail::span_prefix(scorer);
  if (!heads.has(pre + "w")) throw UsageError(str_cat("missing span scorer ", pre));
  const Tensor<T> f = detail::span_features(out, pair, scorer);
  return nn::linear(f, heads.p(pre + "w").value, heads.p(pre + "b").value);
}

/// CE(start) + CE(end) over interior fine positions.
template <typename T>
SpanLoss span_loss(const ForwardOutput<T>& out, const TokenSeqPair& pair, Heads<T>& heads,
                   const SpanAnswer& answer, SpanScorer scorer = SpanScorer::kJoint,
                   HiddenGrads<T>* grads = nullptr, double scale = 1.0) {
  const int m = pair.fine_len() - 2;
  if (answer.start < 1 || answer.end > m || answer.start > answer.end)
    throw UsageError(str_cat("answer [", answer.start, ",", answer.end,
                             "] outside the fine interior [1,", m, "]"));
  const std::string pre = detail::span_prefix(scorer);
  if (!heads.has(pre + "w")) throw UsageError(str_cat("missing span scorer ", pre));
  Param<T>& w = heads.p(pre + "w");
  Param<T>& b = heads.p(pre + "b");
  const Tensor<T> f = detail::span_features(out, pair, scorer);
  const Tensor<T> z = nn::linear(f, w.value, b.value);
  const auto mm = static_cast<std::size_t>(m);
  std::vector<T> zs(mm), ze(mm), gs(mm), ge(mm);
  for (std::size_t i = 0; i < mm; ++i) {
    zs[i] = z(i, 0);
    ze[i] = z(i, 1);
  }
  SpanLoss l;
  l.start = nn::cross_entropy_row(zs.data(), mm, answer.start - 1, gs.data());
  l.end = nn::cross_entropy_row(ze.data(), mm, answer.end - 1, ge.data());
  l.total = l.start + l.end;
  if (!grads) return l;
  Tensor<T> dz(mm, 2);
  for (std::size_t i = 0; i < mm; ++i) {
    dz(i, 0) = gs[i] * static_cast<T>(scale);
    dz(i, 1) = ge[i] * static_cast<T>(scale);
  }
  Tensor<T> df(f.shape());
  nn::linear_backward(f, w.value, dz, &df, &w.grad, &b.grad);
  const std::size_t d = out.fine_hidden.cols();
  const std::vector<int> cover = cover_map(pair);
  for (std::size_t i = 0; i < mm; ++i) {
    for (std::size_t j = 0; j < d; ++j) grads->fine(i + 1, j) += df(i, j);
    if (scorer == SpanScorer::kJoint) {
      const auto c = static_cast<std::size_t>(cover[i + 1]);
      for (std::size_t j = 0; j < d; ++j) grads->coarse(c, j) += df(i, d + j);
    }
  }
  return l;
}

/// Best-scoring span with start <= end and length <= max_len; ties go to the
/// earlier start, then the earlier end.
template <typename T>
SpanAnswer best_span(const Tensor<T>& logits, int max_len = 30) {
  const int m = static_cast<int>(logits.rows());
  SpanAnswer best{1, 1};
  double best_score = -std::numeric_limits<double>::infinity();
  for (int s = 0; s < m; ++s)
    for (int e = s; e < std::min(m, s + max_len); ++e) {
      const double sc = static_cast<double>(logits(static_cast<std::size_t>(s), 0)) +
                        static_cast<double>(logits(static_cast<std::size_t>(e), 1));
      if (sc > best_score) {
        best_score = sc;
        best = {s + 1, e + 1};
      }
    }
  return best;
}

// ---------------------------------------------------------------------------
// Data and loop

struct ClassificationExample {
  std::string text_a;
  std::optional<std::string> text_b;
  int label = 0;
};

struct SpanExample {
  std::string context;
  std::string question;
  SpanAnswer answer;  // fine indices in the encoded (context, question) pair
};

/// Encoded example ready for the model. For span tasks the context is the
/// first segment so answer indices are stable under question truncation.
struct TaskExample {
  TokenSeqPair pair;
  int label = 0;
  SpanAnswer answer;
};

inline std::vector<TaskExample> encode_classification(const Tokenizer& tok,
                                                      const std::vector<ClassificationExample>& data,
                                                      int max_fine, int max_coarse) {
  std::vector<TaskExample> out;
  out.reserve(data.size());
  for (const auto& ex : data) {
    TaskExample t;
    t.pair = ex.text_b ? tok.encode(ex.text_a, std::string_view(*ex.text_b), max_fine, max_coarse)
                       : tok.encode(ex.text_a, std::nullopt, max_fine, max_coarse);
    t.label = ex.label;
    out.push_back(std::move(t));
  }
  return out;
}

/// Fine-tuning loss of one example: the classification objective, or for
/// spans the joint scorer plus the fine-only scorer (the latter serves
/// single-encoder inference).
template <typename T>
double task_loss(Model<T>& model, Heads<T>& heads, const TaskExample& ex, const FineTuneConfig& cfg,
                 bool train, std::uint64_t dropout_seed, double scale, bool backprop) {
  ForwardOptions fo;
  fo.train = train;
  fo.seed = dropout_seed;
  const ForwardOutput<T> out = model.forward(ex.pair, fo);
  HiddenGrads<T> g = HiddenGrads<T>::like(out);
  HiddenGrads<T>* gp = backprop ? &g : nullptr;
  double loss = 0.0;
  if (cfg.task == Task::kClassification) {
    loss = classification_loss(out, heads, ex.label, cfg.lambda, gp, scale).total;
  } else {
    loss = span_loss(out, ex.pair, heads, ex.answer, SpanScorer::kFine, gp, scale).total;
    if (heads.has("span.joint.w"))
      loss += span_loss(out, ex.pair, heads, ex.answer, SpanScorer::kJoint, gp, scale).total;
  }
  if (backprop) model.backward(out, g.fine_ptr(), g.coarse_ptr());
  return loss;
}

struct FineTuneReport {
  std::vector<double> epoch_loss;
  long steps = 0;
};

/// Mini-batch Adam over fresh heads, starting from the given model. Shuffle
/// order, dropout, and head init all derive from cfg.seed.
template <typename T>
FineTuneReport finetune(Model<T>& model, Heads<T>& heads, const std::vector<TaskExample>& train,
                        const FineTuneConfig& cfg) {
  cfg.validate();
  if (train.empty()) throw DataError("fine-tuning set is empty");
  if (cfg.task == Task::kClassification)
    for (std::size_t i = 0; i < train.size(); ++i)
      if (train[i].label < 0 || train[i].label >= cfg.num_labels)
        throw DataError(str_cat("example ", i + 1, ": label ", train[i].label, " exceeds num_labels ",
                                cfg.num_labels));
  const long per_epoch = static_cast<long>((train.size() + cfg.batch_size - 1) / cfg.batch_size);
  AdamHyper h;
  h.lr = cfg.lr;
  h.weight_decay = cfg.weight_decay;
  h.max_steps = per_epoch * cfg.epochs;
  h.warmup_steps = static_cast<long>(std::floor(cfg.warmup_proportion * static_cast<double>(h.max_steps)));
  AdamState<T> opt_model, opt_heads;
  FineTuneReport rep;
  std::vector<std::size_t> order(train.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(sub_seed(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch_size));
      model.params().zero_grad();
      heads.store.zero_grad();
      const double scale = 1.0 / static_cast<double>(b1 - b0);
      for (std::size_t k = b0; k < b1; ++k) {
        const std::uint64_t ex = static_cast<std::uint64_t>(epoch) * 1000003ULL + k;
        epoch_loss += task_loss(model, heads, train[order[k]], cfg, true,
                                sub_seed(cfg.seed, "ft.dropout", ex), scale, true);
      }
      adam_step(model.params(), opt_model, h);
      adam_step(heads.store, opt_heads, h);
      ++rep.steps;
    }
    rep.epoch_loss.push_back(epoch_loss / static_cast<double>(train.size()));
  }
  return rep;
}

}  // namespace ambert
