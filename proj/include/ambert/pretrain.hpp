#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "ambert/common.hpp"
#include "ambert/model.hpp"
#include "ambert/optim.hpp"
#include "ambert/tokenizer.hpp"

namespace ambert {

enum class MaskAction : std::uint8_t { kNone = 0, kMask, kRandom, kKeep };

/// Which positions of each stream are prediction targets and what their
/// input was replaced with. Fine masking is the projection of coarse
/// masking through the alignment.
struct MaskPlan {
  std::vector<MaskAction> fine_action;    // per fine position
  std::vector<MaskAction> coarse_action;  // per coarse position
  std::vector<int> fine_targets;          // original id where masked, -1 elsewhere
  std::vector<int> coarse_targets;
  std::vector<int> masked_fine_ids;       // model input after replacement
  std::vector<int> masked_coarse_ids;
  std::uint64_t seed = 0;

  bool fine_masked(std::size_t i) const { return fine_action[i] != MaskAction::kNone; }
  bool coarse_masked(std::size_t j) const { return coarse_action[j] != MaskAction::kNone; }
  std::size_t num_coarse_masked() const { return count(coarse_action); }
  std::size_t num_fine_masked() const { return count(fine_action); }

 private:
  static std::size_t count(const std::vector<MaskAction>& a) {
    std::size_t n = 0;
    for (MaskAction x : a) n += x != MaskAction::kNone;
    return n;
  }
};

/// Candidate coarse positions: interior, non-special.
inline std::vector<std::size_t> maskable_coarse(const TokenSeqPair& pair) {
  std::vector<std::size_t> out;
  for (std::size_t j = 1; j + 1 < pair.coarse_ids.size(); ++j)
    if (!is_special_id(pair.coarse_ids[j])) out.push_back(j);
  return out;
}

/// round(rate * n) with a floor of 1 for a nonempty candidate set; rate 0
/// masks nothing.
inline std::size_t mask_budget(std::size_t candidates, double rate) {
  if (candidates == 0 || rate <= 0.0) return 0;
  const auto b = static_cast<std::size_t>(std::floor(rate * static_cast<double>(candidates) + 0.5));
  return std::clamp<std::size_t>(b, 1, candidates);
}

/// Samples coarse tokens without replacement to the budget, draws one
/// 80/10/10 action per coarse token, and projects it onto the covered fine
/// span. Random replacements draw non-special ids of the matching stream.
inline MaskPlan make_mask_plan(const TokenSeqPair& pair, int fine_vocab, int coarse_vocab,
                               double rate, std::uint64_t seed) {
  if (fine_vocab <= kNumSpecial || coarse_vocab <= kNumSpecial)
    throw UsageError("make_mask_plan: vocabularies must contain non-special tokens");
  if (rate < 0.0 || rate > 1.0) throw UsageError("make_mask_plan: rate must be in [0,1]");
  MaskPlan plan;
  plan.seed = seed;
  plan.fine_action.assign(pair.fine_ids.size(), MaskAction::kNone);
  plan.coarse_action.assign(pair.coarse_ids.size(), MaskAction::kNone);
  plan.fine_targets.assign(pair.fine_ids.size(), -1);
  plan.coarse_targets.assign(pair.coarse_ids.size(), -1);
  plan.masked_fine_ids = pair.fine_ids;
  plan.masked_coarse_ids = pair.coarse_ids;

  std::vector<std::size_t> cand = maskable_coarse(pair);
  const std::size_t budget = mask_budget(cand.size(), rate);
  Rng rng(seed);
  // Partial Fisher-Yates: the first `budget` slots are the sample.
  for (std::size_t i = 0; i < budget; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.index(cand.size() - i));
    std::swap(cand[i], cand[j]);
  }
  cand.resize(budget);
  std::sort(cand.begin(), cand.end());
  for (std::size_t j : cand) {
    const double u = rng.uniform();
    const MaskAction act = u < 0.8 ? MaskAction::kMask : (u < 0.9 ? MaskAction::kRandom : MaskAction::kKeep);
    plan.coarse_action[j] = act;
    plan.coarse_targets[j] = pair.coarse_ids[j];
    if (act == MaskAction::kMask) plan.masked_coarse_ids[j] = kMaskId;
    if (act == MaskAction::kRandom)
      plan.masked_coarse_ids[j] = kNumSpecial + static_cast<int>(rng.index(coarse_vocab - kNumSpecial));
    const Span& s = pair.alignment[j - 1];
    for (int i = s.start; i < s.end; ++i) {
      const auto fi = static_cast<std::size_t>(i);
      plan.fine_action[fi] = act;
      plan.fine_targets[fi] = pair.fine_ids[fi];
      if (act == MaskAction::kMask) plan.masked_fine_ids[fi] = kMaskId;
      if (act == MaskAction::kRandom)
        plan.masked_fine_ids[fi] = kNumSpecial + static_cast<int>(rng.index(fine_vocab - kNumSpecial));
    }
  }
  return plan;
}

/// The pair with the plan's replacements applied (x-hat, z-hat).
inline TokenSeqPair apply_mask(const TokenSeqPair& pair, const MaskPlan& plan) {
  TokenSeqPair out = pair;
  out.fine_ids = plan.masked_fine_ids;
  out.coarse_ids = plan.masked_coarse_ids;
  return out;
}

template <typename T>
struct HiddenGrads {
  Tensor<T> fine;
  Tensor<T> coarse;

  static HiddenGrads like(const ForwardOutput<T>& out) {
    HiddenGrads g;
    if (out.has_fine) g.fine = zeros_like(out.fine_hidden);
    if (out.has_coarse) g.coarse = zeros_like(out.coarse_hidden);
    return g;
  }
  const Tensor<T>* fine_ptr() const { return fine.empty() ? nullptr : &fine; }
  const Tensor<T>* coarse_ptr() const { return coarse.empty() ? nullptr : &coarse; }
};

struct MlmLoss {
  double fine_term = 0.0;
  double coarse_term = 0.0;
  double total = 0.0;
  std::size_t fine_count = 0;
  std::size_t coarse_count = 0;
  std::size_t fine_correct = 0;  // argmax hits, ties to the lower id
  std::size_t coarse_correct = 0;
};

namespace detail {

template <typename T>
double mlm_stream_term(Model<T>& model, Stream s, const Tensor<T>& hidden,
                       const std::vector<int>& targets, Tensor<T>* dhidden, double scale,
                       std::size_t& count, std::size_t& correct) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < targets.size(); ++i)
    if (targets[i] >= 0) rows.push_back(i);
  count = rows.size();
  correct = 0;
  if (rows.empty()) return 0.0;
  const std::size_t d = hidden.cols();
  Tensor<T> sel(rows.size(), d);
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy(hidden.row(rows[r]), hidden.row(rows[r]) + d, sel.row(r));
  MlmHeadCache<T> cache;
  Tensor<T> logits = model.mlm_logits(s, sel, &cache);
  Tensor<T> dlogits(logits.shape());
  double loss = 0.0;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const int target = targets[rows[r]];
    loss += nn::cross_entropy_row(logits.row(r), logits.cols(), target,
                                  dhidden ? dlogits.row(r) : static_cast<T*>(nullptr));
    const T* lr = logits.row(r);
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.cols(); ++j)
      if (lr[j] > lr[best]) best = j;
    correct += static_cast<int>(best) == target;
  }
  if (dhidden) {
    for (std::size_t i = 0; i < dlogits.size(); ++i) dlogits[i] *= static_cast<T>(scale);
    Tensor<T> dsel = model.mlm_backward(s, cache, dlogits);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      T* dst = dhidden->row(rows[r]);
      const T* src = dsel.row(r);
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  }
  return loss;
}

}  // namespace detail

/// Masked-token cross-entropy summed over masked positions of each stream,
/// each through its own tied output head. With `grads`, accumulates
/// scale * dLoss into the head parameters and the hidden-state gradients.
template <typename T>
MlmLoss mlm_loss(Model<T>& model, const ForwardOutput<T>& out, const MaskPlan& plan,
                 HiddenGrads<T>* grads = nullptr, double scale = 1.0) {
  if (plan.fine_targets.size() != static_cast<std::size_t>(out.fine_len) ||
      plan.coarse_targets.size() != static_cast<std::size_t>(out.coarse_len))
    throw UsageError(str_cat("mlm_loss: plan lengths (", plan.fine_targets.size(), ", ",
                             plan.coarse_targets.size(), ") do not match output (", out.fine_len,
                             ", ", out.coarse_len, ")"));
  MlmLoss l;
  if (out.has_fine)
    l.fine_term = detail::mlm_stream_term(model, Stream::kFine, out.fine_hidden, plan.fine_targets,
                                          grads ? &grads->fine : nullptr, scale, l.fine_count,
                                          l.fine_correct);
  if (out.has_coarse)
    l.coarse_term = detail::mlm_stream_term(model, Stream::kCoarse, out.coarse_hidden,
                                            plan.coarse_targets, grads ? &grads->coarse : nullptr,
                                            scale, l.coarse_count, l.coarse_correct);
  l.total = l.fine_term + l.coarse_term;
  return l;
}

/// Binary cross-entropy of a linear head over [r_x0, r_z0] (r_x0 alone for
/// bert). label 1 = b follows a.
template <typename T>
double nsp_loss(Model<T>& model, const ForwardOutput<T>& out, int label,
                HiddenGrads<T>* grads = nullptr, double scale = 1.0) {
  if (label != 0 && label != 1) throw UsageError(str_cat("nsp label must be 0 or 1, got ", label));
  if (!model.params().has("nsp.w")) throw UsageError("model was built without an NSP head");
  Param<T>& w = model.params().get("nsp.w");
  Param<T>& b = model.params().get("nsp.b");
  const std::size_t d = out.fine_hidden.cols();
  const bool dual = out.has_coarse;
  double z = static_cast<double>(b.value[0]);
  for (std::size_t j = 0; j < d; ++j) z += static_cast<double>(w.value[j]) * out.fine_hidden(0, j);
  if (dual)
    for (std::size_t j = 0; j < d; ++j)
      z += static_cast<double>(w.value[d + j]) * out.coarse_hidden(0, j);
  // log(1 + exp(-z)) for label 1, log(1 + exp(z)) for label 0, computed stably
  const double s = label == 1 ? -z : z;
  const double loss = s > 0 ? s + std::log1p(std::exp(-s)) : std::log1p(std::exp(s));
  if (grads) {
    const double sig = 1.0 / (1.0 + std::exp(-z));
    const T dz = static_cast<T>(scale * (sig - label));
    b.grad[0] += dz;
    for (std::size_t j = 0; j < d; ++j) {
      w.grad[j] += dz * out.fine_hidden(0, j);
      grads->fine(0, j) += dz * w.value[j];
    }
    if (dual)
      for (std::size_t j = 0; j < d; ++j) {
        w.grad[d + j] += dz * out.coarse_hidden(0, j);
        grads->coarse(0, j) += dz * w.value[d + j];
      }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Training loop

struct PretrainHyper {
  AdamHyper adam;
  int batch_size = 1024;
  double mask_rate = 0.15;
  int max_fine_len = 512;
  int max_coarse_len = 512;
  bool nsp = false;
};

struct StepReport {
  long step = 0;
  double lr = 0.0;
  MlmLoss mlm;  // batch means per example
  double nsp = 0.0;
  double total = 0.0;
  double wall_ms = 0.0;
};

inline void write_log_line(std::ostream& os, const StepReport& r) {
  os << "step=" << r.step << " lr=" << r.lr << " fine_term=" << r.mlm.fine_term
     << " coarse_term=" << r.mlm.coarse_term << " total=" << r.total << " wall_ms=" << r.wall_ms
     << '\n';
}

/// Deterministic pre-training driver. Every random draw of step t derives
/// from (seed, t), so (params, optimizer state, step, seed) is a complete
/// resume state.
template <typename T>
class Pretrainer {
 public:
  Pretrainer(Model<T> model, const Tokenizer& tokenizer, std::vector<std::string> docs,
             PretrainHyper hyper, std::uint64_t seed)
      : model_(std::move(model)), tok_(&tokenizer), docs_(std::move(docs)), hyper_(hyper),
        seed_(seed) {
    if (docs_.empty()) throw DataError("pre-training corpus is empty");
    if (hyper_.nsp && !model_.params().has("nsp.w"))
      throw UsageError("nsp requested but the model has no NSP head");
    if (!hyper_.nsp) {
      encoded_.reserve(docs_.size());
      for (const auto& d : docs_)
        encoded_.push_back(tok_->encode(d, std::nullopt, hyper_.max_fine_len, hyper_.max_coarse_len));
    }
  }

  Model<T>& model() { return model_; }
  const Model<T>& model() const { return model_; }
  AdamState<T>& optimizer() { return adam_; }
  const AdamState<T>& optimizer() const { return adam_; }
  long step() const { return adam_.step; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<double>& loss_history() const { return history_; }
  void restore(AdamState<T> adam, std::vector<double> history) {
    adam_ = std::move(adam);
    history_ = std::move(history);
  }

  /// Training example `index` of step `t`: document pair for NSP or the
  /// pre-encoded document.
  std::pair<TokenSeqPair, int> example(long t, int b) const {
    Rng rng(sub_seed(seed_, "batch", static_cast<std::uint64_t>(t) * 1000003ULL + static_cast<std::uint64_t>(b)));
    const std::size_t i = static_cast<std::size_t>(rng.index(docs_.size()));
    if (!hyper_.nsp) return {encoded_[i], -1};
    const bool is_next = rng.uniform() < 0.5 && i + 1 < docs_.size();
    const std::size_t j = is_next ? i + 1 : static_cast<std::size_t>(rng.index(docs_.size()));
    const int label = (is_next || j == i + 1) ? 1 : 0;
    return {tok_->encode(docs_[i], std::string_view(docs_[j]), hyper_.max_fine_len, hyper_.max_coarse_len), label};
  }

  StepReport train_step() {
    const auto t0 = std::chrono::steady_clock::now();
    const long t = adam_.step + 1;
    model_.params().zero_grad();
    const double scale = 1.0 / hyper_.batch_size;
    StepReport rep;
    const int vf = model_.config().fine_vocab_size;
    const int vc = model_.config().has_coarse() ? model_.config().coarse_vocab_size : kNumSpecial + 1;
    for (int b = 0; b < hyper_.batch_size; ++b) {
      auto [pair, label] = example(t, b);
      const std::uint64_t ex = static_cast<std::uint64_t>(t) * 1000003ULL + static_cast<std::uint64_t>(b);
      const MaskPlan plan = make_mask_plan(pair, vf, vc, hyper_.mask_rate, sub_seed(seed_, "mask", ex));
      ForwardOptions fo;
      fo.train = true;
      fo.seed = sub_seed(seed_, "dropout", ex);
      const ForwardOutput<T> out = model_.forward(apply_mask(pair, plan), fo);
      HiddenGrads<T> g = HiddenGrads<T>::like(out);
      const MlmLoss l = mlm_loss(model_, out, plan, &g, scale);
      rep.mlm.fine_term += l.fine_term * scale;
      rep.mlm.coarse_term += l.coarse_term * scale;
      rep.mlm.fine_count += l.fine_count;
      rep.mlm.coarse_count += l.coarse_count;
      rep.mlm.fine_correct += l.fine_correct;
      rep.mlm.coarse_correct += l.coarse_correct;
      if (hyper_.nsp) rep.nsp += nsp_loss(model_, out, label, &g, scale) * scale;
      model_.backward(out, g.fine_ptr(), g.coarse_ptr());
    }
    rep.mlm.total = rep.mlm.fine_term + rep.mlm.coarse_term;
    rep.total = rep.mlm.total + rep.nsp;
    if (!std::isfinite(rep.total))
      throw NumericError(str_cat("non-finite loss at step ", t));
    rep.lr = adam_step(model_.params(), adam_, hyper_.adam);
    rep.step = t;
    history_.push_back(rep.total);
    rep.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return rep;
  }

 private:
  Model<T> model_;
  const Tokenizer* tok_;
  std::vector<std::string> docs_;
  std::vector<TokenSeqPair> encoded_;
  PretrainHyper hyper_;
  std::uint64_t seed_;
  AdamState<T> adam_;
  std::vector<double> history_;
};

/// Mean per-token MLM loss and accuracy over a fixed set of (pair, plan)
/// examples in eval mode.
struct MlmEval {
  double fine_loss = 0.0, coarse_loss = 0.0;      // per masked token
  double fine_accuracy = 0.0, coarse_accuracy = 0.0;
  double total_per_example = 0.0;
};

template <typename T>
MlmEval evaluate_mlm(Model<T>& model, const std::vector<TokenSeqPair>& pairs,
                     const std::vector<MaskPlan>& plans) {
  double fl = 0, cl = 0, total = 0;
  std::size_t fc = 0, cc = 0, fh = 0, ch = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto out = model.forward(apply_mask(pairs[i], plans[i]));
    const MlmLoss l = mlm_loss(model, out, plans[i]);
    fl += l.fine_term;
    cl += l.coarse_term;
    total += l.total;
    fc += l.fine_count;
    cc += l.coarse_count;
    fh += l.fine_correct;
    ch += l.coarse_correct;
  }
  MlmEval e;
  e.fine_loss = fc ? fl / static_cast<double>(fc) : 0.0;
  e.coarse_loss = cc ? cl / static_cast<double>(cc) : 0.0;
  e.fine_accuracy = fc ? static_cast<double>(fh) / static_cast<double>(fc) : 0.0;
  e.coarse_accuracy = cc ? static_cast<double>(ch) / static_cast<double>(cc) : 0.0;
  e.total_per_example = pairs.empty() ? 0.0 : total / static_cast<double>(pairs.size());
  return e;
}

}  // namespace ambert
