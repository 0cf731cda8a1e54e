#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "ambert/common.hpp"
#include "ambert/finetune.hpp"
#include "ambert/model.hpp"

namespace ambert {

enum class EncoderMode { kBoth, kFineOnly, kCoarseOnly };

inline std::string to_string(EncoderMode m) {
  switch (m) {
    case EncoderMode::kBoth: return "both";
    case EncoderMode::kFineOnly: return "fine";
    case EncoderMode::kCoarseOnly: return "coarse";
  }
  return "?";
}

inline EncoderMode parse_encoder_mode(std::string_view s) {
  if (s == "both") return EncoderMode::kBoth;
  if (s == "fine" || s == "fine_only") return EncoderMode::kFineOnly;
  if (s == "coarse" || s == "coarse_only") return EncoderMode::kCoarseOnly;
  throw UsageError(str_cat("unknown encoder mode '", s, "' (expected both|fine|coarse)"));
}

enum class Metric { kAccuracy, kExactMatch, kF1 };

inline Metric parse_metric(std::string_view s) {
  if (s == "acc") return Metric::kAccuracy;
  if (s == "em") return Metric::kExactMatch;
  if (s == "f1") return Metric::kF1;
  throw UsageError(str_cat("unknown metric '", s, "' (expected acc|em|f1)"));
}

inline Streams to_streams(EncoderMode m) {
  switch (m) {
    case EncoderMode::kBoth: return Streams::kBoth;
    case EncoderMode::kFineOnly: return Streams::kFineOnly;
    case EncoderMode::kCoarseOnly: return Streams::kCoarseOnly;
  }
  return Streams::kBoth;
}

/// Single-stream modes need structurally separate encoders. Thrown as
/// DataError: the checkpoint, not the invocation, is incompatible.
inline void check_variant_mode(Variant v, EncoderMode mode) {
  if (mode != EncoderMode::kBoth && v == Variant::kHybrid)
    throw DataError(
        "hybrid checkpoints cannot drop an encoder: fine and coarse tokens attend to each other "
        "in every layer, so neither stream exists on its own");
  if (mode == EncoderMode::kCoarseOnly && v == Variant::kBert)
    throw DataError("bert checkpoints have no coarse encoder");
}

/// Rejects mode/variant/task combinations the model and heads cannot serve.
template <typename T>
void check_mode(const Model<T>& model, const Heads<T>& heads, EncoderMode mode) {
  const Variant v = model.config().variant;
  check_variant_mode(v, mode);
  if (mode == EncoderMode::kCoarseOnly && heads.task == Task::kSpan)
    throw DataError("span tasks need the fine stream: answers are fine-token indices");
  if (heads.task == Task::kClassification && v != Variant::kHybrid && v != Variant::kBert) {
    const char* need = mode == EncoderMode::kBoth ? "head.joint.w"
                       : mode == EncoderMode::kFineOnly ? "head.x.w" : "head.z.w";
    if (!heads.has(need)) throw DataError(str_cat("missing head ", need, " for mode ", to_string(mode)));
  }
}

struct Prediction {
  int label = -1;
  std::vector<double> scores;  // classification logits
  SpanAnswer span;
};

/// both -> head_joint (or head_x for single-encoder variants);
/// fine -> head_x; coarse -> head_z. Spans use the joint scorer in both
/// mode when present and the fine scorer otherwise.
template <typename T>
Prediction predict(const Model<T>& model, const Heads<T>& heads, const TokenSeqPair& pair,
                   EncoderMode mode) {
  check_mode(model, heads, mode);
  ForwardOptions fo;
  fo.streams = to_streams(mode);
  const ForwardOutput<T> out = model.forward(pair, fo);
  Prediction p;
  if (heads.task == Task::kSpan) {
    const bool joint = mode == EncoderMode::kBoth && heads.has("span.joint.w");
    p.span = best_span(span_logits(out, pair, heads, joint ? SpanScorer::kJoint : SpanScorer::kFine));
    return p;
  }
  std::vector<T> feat;
  std::string head = "head.x.";
  if (mode == EncoderMode::kCoarseOnly) {
    feat = out.coarse_cls();
    head = "head.z.";
  } else if (mode == EncoderMode::kBoth && heads.dual) {
    feat = detail::concat(out.fine_cls(), out.coarse_cls());
    head = "head.joint.";
  } else {
    feat = out.fine_cls();
  }
  p.scores = detail::head_logits(heads.p(head + "w"), heads.p(head + "b"), feat);
  p.label = static_cast<int>(std::max_element(p.scores.begin(), p.scores.end()) - p.scores.begin());
  return p;
}

/// Token-overlap F1 between inclusive spans.
inline double span_f1(const SpanAnswer& pred, const SpanAnswer& gold) {
  const int overlap = std::max(0, std::min(pred.end, gold.end) - std::max(pred.start, gold.start) + 1);
  if (overlap == 0) return 0.0;
  const double p = static_cast<double>(overlap) / (pred.end - pred.start + 1);
  const double r = static_cast<double>(overlap) / (gold.end - gold.start + 1);
  return 2 * p * r / (p + r);
}

template <typename T>
double evaluate(const Model<T>& model, const Heads<T>& heads, const std::vector<TaskExample>& data,
                EncoderMode mode, Metric metric) {
  if (data.empty()) throw DataError("evaluation set is empty");
  if (heads.task == Task::kClassification && metric != Metric::kAccuracy)
    throw UsageError("classification supports only the acc metric");
  if (heads.task == Task::kSpan && metric == Metric::kAccuracy)
    throw UsageError("span tasks support em or f1");
  std::vector<double> per(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Prediction p = predict(model, heads, data[i].pair, mode);
    if (heads.task == Task::kClassification) per[i] = p.label == data[i].label ? 1.0 : 0.0;
    else if (metric == Metric::kExactMatch) per[i] = p.span == data[i].answer ? 1.0 : 0.0;
    else per[i] = span_f1(p.span, data[i].answer);
  }
  return pairwise_mean(per);
}

struct Selection {
  EncoderMode mode = EncoderMode::kFineOnly;
  double fine_score = 0.0;
  double coarse_score = 0.0;
  bool coarse_evaluated = false;
};

/// Chooses which encoder to keep for single-encoder inference by dev-set
/// score. Span tasks keep the fine encoder without evaluating the coarse
/// one; ties keep the fine encoder.
template <typename T>
Selection select_encoder(const Model<T>& model, const Heads<T>& heads,
                         const std::vector<TaskExample>& dev, Metric metric) {
  if (dev.empty()) throw DataError("select_encoder: dev set is empty");
  Selection s;
  s.fine_score = evaluate(model, heads, dev, EncoderMode::kFineOnly, metric);
  if (heads.task == Task::kSpan) return s;
  s.coarse_score = evaluate(model, heads, dev, EncoderMode::kCoarseOnly, metric);
  s.coarse_evaluated = true;
  s.mode = s.coarse_score > s.fine_score ? EncoderMode::kCoarseOnly : EncoderMode::kFineOnly;
  return s;
}

/// Analytic matmul flops of the encoder work for one input in `mode`.
template <typename T>
std::uint64_t inference_flops(const Model<T>& model, const TokenSeqPair& pair, EncoderMode mode) {
  const auto m = static_cast<std::uint64_t>(pair.fine_len());
  const auto n = static_cast<std::uint64_t>(pair.coarse_len());
  if (model.config().variant == Variant::kHybrid) return model.encoder_flops(m + n);
  switch (mode) {
    case EncoderMode::kFineOnly: return model.encoder_flops(m);
    case EncoderMode::kCoarseOnly: return model.encoder_flops(n);
    case EncoderMode::kBoth:
      return model.encoder_flops(m) + (model.config().has_coarse() ? model.encoder_flops(n) : 0);
  }
  return 0;
}

/// Flops observed by the instrumented kernels during one forward pass.
template <typename T>
std::uint64_t measured_forward_flops(const Model<T>& model, const TokenSeqPair& pair, EncoderMode mode) {
  ForwardOptions fo;
  fo.streams = to_streams(mode);
  const std::uint64_t before = nn::flop_counter();
  model.forward(pair, fo);
  return nn::flop_counter() - before;
}

}  // namespace ambert
