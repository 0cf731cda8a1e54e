#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "ambert/common.hpp"
#include "ambert/params.hpp"
#include "ambert/tensor.hpp"
#include "ambert/tokenizer.hpp"

namespace ambert {

/// ambert: two encoders sharing every layer, own token embeddings.
/// combo: two fully independent encoders.
/// hybrid: one encoder over the concatenated fine + coarse sequence.
/// bert: single fine-grained encoder (the baseline used for census checks).
enum class Variant { kAmbert, kCombo, kHybrid, kBert };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::kAmbert: return "ambert";
    case Variant::kCombo: return "combo";
    case Variant::kHybrid: return "hybrid";
    case Variant::kBert: return "bert";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  if (s == "ambert") return Variant::kAmbert;
  if (s == "combo") return Variant::kCombo;
  if (s == "hybrid") return Variant::kHybrid;
  if (s == "bert") return Variant::kBert;
  throw UsageError(str_cat("unknown variant '", s, "' (expected ambert|combo|hybrid|bert)"));
}

inline bool is_dual_stream(Variant v) { return v == Variant::kAmbert || v == Variant::kCombo; }

enum class Stream { kFine = 0, kCoarse = 1 };

inline const char* to_string(Stream s) { return s == Stream::kFine ? "fine" : "coarse"; }

struct ModelConfig {
  Variant variant = Variant::kAmbert;
  int layers = 12;
  int hidden = 768;
  int heads = 12;
  int head_size = 64;
  int ffn_inner = 3072;
  int max_positions = 512;
  int fine_vocab_size = 0;
  int coarse_vocab_size = 0;
  double hidden_dropout = 0.1;
  double attention_dropout = 0.1;
  int type_vocab = 2;
  bool granularity_embedding = true;  // hybrid only
  bool nsp = false;

  /// l=2, d=64 preset for tests and desk-scale runs.
  static ModelConfig desk(Variant v, int fine_vocab, int coarse_vocab) {
    ModelConfig c;
    c.variant = v;
    c.layers = 2;
    c.hidden = 64;
    c.heads = 4;
    c.head_size = 16;
    c.ffn_inner = 256;
    c.max_positions = 128;
    c.fine_vocab_size = fine_vocab;
    c.coarse_vocab_size = coarse_vocab;
    return c;
  }

  bool has_coarse() const { return variant != Variant::kBert; }

  void validate() const {
    if (layers < 1 || heads < 1 || head_size < 1 || ffn_inner < 1 || max_positions < 2)
      throw UsageError("model config: sizes must be positive");
    if (hidden != heads * head_size)
      throw UsageError(str_cat("model config: hidden ", hidden, " != heads ", heads,
                               " x head_size ", head_size));
    if (fine_vocab_size <= kNumSpecial)
      throw UsageError(str_cat("model config: fine vocab size ", fine_vocab_size, " must exceed ",
                               kNumSpecial));
    if (has_coarse() && coarse_vocab_size <= kNumSpecial)
      throw UsageError(str_cat("model config: coarse vocab size ", coarse_vocab_size,
                               " must exceed ", kNumSpecial));
    if (type_vocab < 1) throw UsageError("model config: type_vocab must be >= 1");
    for (double r : {hidden_dropout, attention_dropout})
      if (r < 0.0 || r >= 1.0) throw UsageError("model config: dropout must be in [0,1)");
  }

  bool operator==(const ModelConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Parameter layout

inline constexpr std::size_t kNoParam = std::numeric_limits<std::size_t>::max();

struct LayerIdx {
  std::size_t wq = kNoParam, bq = kNoParam, wk = kNoParam, bk = kNoParam, wv = kNoParam,
              bv = kNoParam, wo = kNoParam, bo = kNoParam, ln1_g = kNoParam, ln1_b = kNoParam,
              w1 = kNoParam, b1 = kNoParam, w2 = kNoParam, b2 = kNoParam, ln2_g = kNoParam,
              ln2_b = kNoParam;
};

struct EncoderIdx {
  std::size_t position = kNoParam, segment = kNoParam, granularity = kNoParam, ln_g = kNoParam,
              ln_b = kNoParam;
  std::vector<LayerIdx> layers;
  // MLM transform (dense + gelu + LN)
  std::size_t mlm_w = kNoParam, mlm_b = kNoParam, mlm_ln_g = kNoParam, mlm_ln_b = kNoParam;
};

struct StreamIdx {
  std::size_t token = kNoParam;
  std::size_t mlm_bias = kNoParam;
  EncoderIdx enc;
};

namespace detail {

/// Registers one encoder stack under `prefix`, or aliases it to `share_with`
/// when sharing is requested.
template <typename T>
EncoderIdx make_encoder(ParamStore<T>& ps, const ModelConfig& c, const std::string& prefix,
                        const std::string* share_with, bool granularity) {
  const std::size_t d = static_cast<std::size_t>(c.hidden);
  const std::size_t f = static_cast<std::size_t>(c.ffn_inner);
  auto reg = [&](const std::string& name, Shape shape, bool decay) {
    if (share_with) return ps.alias(prefix + name, *share_with + name, name);
    return ps.add(prefix + name, std::move(shape), decay);
  };
  EncoderIdx e;
  e.position = reg("embeddings.position", {static_cast<std::size_t>(c.max_positions), d}, true);
  e.segment = reg("embeddings.segment", {static_cast<std::size_t>(c.type_vocab), d}, true);
  if (granularity) e.granularity = reg("embeddings.granularity", {2, d}, true);
  e.ln_g = reg("embeddings.ln.gamma", {d}, false);
  e.ln_b = reg("embeddings.ln.beta", {d}, false);
  for (int l = 0; l < c.layers; ++l) {
    const std::string p = "encoder.layer" + std::to_string(l) + ".";
    LayerIdx li;
    li.wq = reg(p + "attn.wq", {d, d}, true);
    li.bq = reg(p + "attn.bq", {d}, false);
    li.wk = reg(p + "attn.wk", {d, d}, true);
    li.bk = reg(p + "attn.bk", {d}, false);
    li.wv = reg(p + "attn.wv", {d, d}, true);
    li.bv = reg(p + "attn.bv", {d}, false);
    li.wo = reg(p + "attn.wo", {d, d}, true);
    li.bo = reg(p + "attn.bo", {d}, false);
    li.ln1_g = reg(p + "ln1.gamma", {d}, false);
    li.ln1_b = reg(p + "ln1.beta", {d}, false);
    li.w1 = reg(p + "ffn.w1", {d, f}, true);
    li.b1 = reg(p + "ffn.b1", {f}, false);
    li.w2 = reg(p + "ffn.w2", {f, d}, true);
    li.b2 = reg(p + "ffn.b2", {d}, false);
    li.ln2_g = reg(p + "ln2.gamma", {d}, false);
    li.ln2_b = reg(p + "ln2.beta", {d}, false);
    e.layers.push_back(li);
  }
  e.mlm_w = reg("mlm.transform.w", {d, d}, true);
  e.mlm_b = reg("mlm.transform.b", {d}, false);
  e.mlm_ln_g = reg("mlm.ln.gamma", {d}, false);
  e.mlm_ln_b = reg("mlm.ln.beta", {d}, false);
  return e;
}

}  // namespace detail

/// Registers every learnable tensor for `c` (values left at zero).
/// Returns the per-stream index views; coarse view is absent for bert.
template <typename T>
std::pair<StreamIdx, std::optional<StreamIdx>> layout_params(ParamStore<T>& ps,
                                                             const ModelConfig& c) {
  const std::size_t d = static_cast<std::size_t>(c.hidden);
  const auto vf = static_cast<std::size_t>(c.fine_vocab_size);
  const auto vc = static_cast<std::size_t>(c.coarse_vocab_size);
  StreamIdx fine, coarse;
  fine.token = ps.add("fine.embeddings.token", {vf, d}, true);
  if (c.has_coarse()) coarse.token = ps.add("coarse.embeddings.token", {vc, d}, true);
  switch (c.variant) {
    case Variant::kBert:
      fine.enc = detail::make_encoder(ps, c, "fine.", nullptr, false);
      break;
    case Variant::kAmbert: {
      fine.enc = detail::make_encoder(ps, c, "fine.", nullptr, false);
      const std::string share = "fine.";
      coarse.enc = detail::make_encoder(ps, c, "coarse.", &share, false);
      break;
    }
    case Variant::kCombo:
      fine.enc = detail::make_encoder(ps, c, "fine.", nullptr, false);
      coarse.enc = detail::make_encoder(ps, c, "coarse.", nullptr, false);
      break;
    case Variant::kHybrid:
      fine.enc = detail::make_encoder(ps, c, "", nullptr, c.granularity_embedding);
      coarse.enc = fine.enc;
      break;
  }
  fine.mlm_bias = ps.add("fine.mlm.bias", {vf}, false);
  if (c.has_coarse()) coarse.mlm_bias = ps.add("coarse.mlm.bias", {vc}, false);
  if (c.nsp) {
    const std::size_t width = c.has_coarse() ? 2 * d : d;
    ps.add("nsp.w", {width, 1}, true);
    ps.add("nsp.b", {1}, false);
  }
  if (!c.has_coarse()) return {fine, std::nullopt};
  return {fine, coarse};
}

/// Truncated-normal (std 0.02) weights and embeddings, zero biases, unit
/// LayerNorm gains. Draws happen in double, in storage creation order, so
/// float and double stores from one seed agree up to rounding.
template <typename T>
void init_values(ParamStore<T>& ps, std::uint64_t seed) {
  Rng rng(sub_seed(seed, "init"));
  for (const auto& g : ps.groups()) {
    Param<T>& p = ps.at(g.storage);
    const std::string& name = g.names.front();
    const bool is_gamma = name.size() >= 5 && name.compare(name.size() - 5, 5, "gamma") == 0;
    if (is_gamma) {
      p.value.fill(T(1));
    } else if (!p.decay) {
      p.value.zero();
    } else {
      for (std::size_t i = 0; i < p.value.size(); ++i)
        p.value[i] = static_cast<T>(rng.truncated_normal(0.02));
    }
  }
}

template <typename T>
ParamStore<T> init_params(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  ParamStore<T> ps;
  layout_params(ps, c);
  init_values(ps, seed);
  return ps;
}

// ---------------------------------------------------------------------------
// Forward / backward

enum class Streams { kBoth, kFineOnly, kCoarseOnly };

struct ForwardOptions {
  bool train = false;
  std::uint64_t seed = 0;
  Streams streams = Streams::kBoth;
};

/// One run of an encoder stack over a sequence built from one or more
/// segments (hybrid concatenates fine then coarse; positions restart).
template <typename T>
struct EncoderRun {
  struct Piece {
    std::size_t token_table;
    std::vector<int> ids;
    std::vector<int> segments;
    int granularity;
  };
  struct Layer {
    Tensor<T> x, q, k, v, ctx, h1, f1, g;
    nn::AttentionCache<T> attn;
    std::vector<T> attn_out_mask, ffn_out_mask;
    nn::LayerNormCache<T> ln1, ln2;
  };
  std::vector<Piece> pieces;
  std::vector<bool> key_masked;  // [PAD] keys are excluded from attention
  nn::LayerNormCache<T> emb_ln;
  std::vector<T> emb_mask;
  std::vector<Layer> layers;
  Tensor<T> hidden;  // final layer output
  Stream source = Stream::kFine;  // whose encoder stack ran (hybrid: kFine)
};

template <typename T>
struct ForwardOutput {
  Variant variant = Variant::kAmbert;
  bool has_fine = false;
  bool has_coarse = false;
  int fine_len = 0;
  int coarse_len = 0;
  Tensor<T> fine_hidden;    // [m+2, d]
  Tensor<T> coarse_hidden;  // [n+2, d]
  // runs[0] is fine (or the joint hybrid run), runs[1] coarse when present
  std::vector<EncoderRun<T>> runs;

  std::vector<T> fine_cls() const { return row_vec(fine_hidden, 0); }
  std::vector<T> coarse_cls() const { return row_vec(coarse_hidden, 0); }

  /// Row-stochastic attention of one layer/head. For hybrid the stream is
  /// ignored and the joint (m+n+4)^2 matrix is returned.
  const Tensor<T>& attention(Stream s, int layer, int head) const {
    const std::size_t r = (variant == Variant::kHybrid || s == Stream::kFine || runs.size() == 1) ? 0 : 1;
    if (variant != Variant::kHybrid && ((s == Stream::kFine && !has_fine) ||
                                        (s == Stream::kCoarse && !has_coarse)))
      throw UsageError(str_cat("stream ", to_string(s), " was not computed"));
    return runs.at(r).layers.at(static_cast<std::size_t>(layer)).attn.probs.at(static_cast<std::size_t>(head));
  }

 private:
  static std::vector<T> row_vec(const Tensor<T>& t, std::size_t r) {
    if (t.empty()) return {};
    return std::vector<T>(t.row(r), t.row(r) + t.cols());
  }
};

template <typename T>
struct MlmHeadCache {
  Tensor<T> x, t1, t2, t3;
  nn::LayerNormCache<T> ln;
};

template <typename T>
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed)
      : config_(config), params_(init_params<T>(config, seed)) {
    bind();
  }

  /// Adopts an existing store (e.g. from a checkpoint); the layout must
  /// match what `config` would create.
  Model(const ModelConfig& config, ParamStore<T> params)
      : config_(config), params_(std::move(params)) {
    config_.validate();
    ParamStore<T> expected;
    layout_params(expected, config_);
    for (const auto& n : expected.names())
      if (!params_.has(n)) throw DataError("checkpoint lacks parameter " + n);
    for (const auto& g : expected.groups()) {
      const auto& want = expected.at(g.storage).value.shape();
      const std::size_t s0 = params_.index_of(g.names.front());
      if (params_.at(s0).value.shape() != want)
        throw DataError(str_cat("parameter ", g.names.front(), " has shape ",
                                shape_str(params_.at(s0).value.shape()), ", expected ",
                                shape_str(want)));
      for (const auto& alias : g.names)
        if (params_.index_of(alias) != s0)
          throw DataError("sharing structure mismatch at " + alias);
    }
    bind();
  }

  Model(const Model& o) : config_(o.config_), params_(o.params_) { bind(); }
  Model& operator=(const Model& o) {
    config_ = o.config_;
    params_ = o.params_;
    bind();
    return *this;
  }

  template <typename U>
  Model<U> cast() const {
    return Model<U>(config_, params_.template cast<U>());
  }

  const ModelConfig& config() const { return config_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const StreamIdx& stream(Stream s) const {
    if (s == Stream::kCoarse) {
      if (!coarse_) throw UsageError("variant bert has no coarse stream");
      return *coarse_;
    }
    return fine_;
  }

  ForwardOutput<T> forward(const TokenSeqPair& pair, const ForwardOptions& opt = {}) const {
    const bool hybrid = config_.variant == Variant::kHybrid;
    if (opt.streams != Streams::kBoth && hybrid)
      throw UsageError(
          "hybrid models cannot run a single stream: fine and coarse tokens attend to each "
          "other in every layer");
    if (opt.streams == Streams::kCoarseOnly && !config_.has_coarse())
      throw UsageError("variant bert has no coarse stream");
    const bool want_fine = opt.streams != Streams::kCoarseOnly;
    const bool want_coarse = config_.has_coarse() && opt.streams != Streams::kFineOnly;

    ForwardOutput<T> out;
    out.variant = config_.variant;
    out.fine_len = pair.fine_len();
    out.coarse_len = pair.coarse_len();
    if (want_fine) check_ids(pair.fine_ids, pair.fine_segments, Stream::kFine);
    if (want_coarse) check_ids(pair.coarse_ids, pair.coarse_segments, Stream::kCoarse);

    if (hybrid) {
      EncoderRun<T> run;
      run.pieces.push_back({fine_.token, pair.fine_ids, pair.fine_segments, 0});
      run.pieces.push_back({coarse_->token, pair.coarse_ids, pair.coarse_segments, 1});
      Rng rng(sub_seed(opt.seed, "dropout.joint"));
      encode(run, opt.train, rng);
      out.fine_hidden = run.hidden.rows_slice(0, static_cast<std::size_t>(pair.fine_len()));
      out.coarse_hidden = run.hidden.rows_slice(static_cast<std::size_t>(pair.fine_len()),
                                                run.hidden.rows());
      out.has_fine = out.has_coarse = true;
      out.runs.push_back(std::move(run));
      return out;
    }
    if (want_fine) {
      EncoderRun<T> run;
      run.pieces.push_back({fine_.token, pair.fine_ids, pair.fine_segments, 0});
      Rng rng(sub_seed(opt.seed, "dropout.fine"));
      encode(run, opt.train, rng);
      out.fine_hidden = run.hidden;
      out.has_fine = true;
      out.runs.push_back(std::move(run));
    }
    if (want_coarse) {
      EncoderRun<T> run;
      run.source = Stream::kCoarse;
      run.pieces.push_back({coarse_->token, pair.coarse_ids, pair.coarse_segments, 0});
      Rng rng(sub_seed(opt.seed, "dropout.coarse"));
      encode(run, opt.train, rng);
      out.coarse_hidden = run.hidden;
      out.has_coarse = true;
      out.runs.push_back(std::move(run));
    }
    return out;
  }

  /// Accumulates parameter gradients given upstream gradients on the final
  /// hidden states (either may be null, meaning zero).
  void backward(const ForwardOutput<T>& out, const Tensor<T>* dfine, const Tensor<T>* dcoarse) {
    if (config_.variant == Variant::kHybrid) {
      const EncoderRun<T>& run = out.runs.at(0);
      Tensor<T> djoint(run.hidden.shape());
      const std::size_t d = run.hidden.cols();
      if (dfine) std::copy(dfine->data(), dfine->data() + dfine->size(), djoint.data());
      if (dcoarse)
        std::copy(dcoarse->data(), dcoarse->data() + dcoarse->size(),
                  djoint.data() + static_cast<std::size_t>(out.fine_len) * d);
      encode_backward(run, djoint);
      return;
    }
    std::size_t r = 0;
    if (out.has_fine) {
      if (dfine) encode_backward(out.runs.at(r), *dfine);
      ++r;
    }
    if (out.has_coarse && dcoarse) encode_backward(out.runs.at(r), *dcoarse);
  }

  // ---- tied MLM output head ----------------------------------------------

  /// Logits over the stream vocabulary for the given hidden rows.
  Tensor<T> mlm_logits(Stream s, const Tensor<T>& rows, MlmHeadCache<T>* cache) const {
    const StreamIdx& st = stream(s);
    const EncoderIdx& e = st.enc;
    MlmHeadCache<T> c;
    c.x = rows;
    c.t1 = nn::linear(rows, p(e.mlm_w), p(e.mlm_b));
    c.t2 = nn::gelu(c.t1);
    c.t3 = nn::layer_norm(c.t2, p(e.mlm_ln_g), p(e.mlm_ln_b), &c.ln);
    Tensor<T> logits = nn::matmul_nt(c.t3, p(st.token));
    const Tensor<T>& bias = p(st.mlm_bias);
    for (std::size_t i = 0; i < logits.rows(); ++i)
      for (std::size_t j = 0; j < logits.cols(); ++j) logits(i, j) += bias[j];
    if (cache) *cache = std::move(c);
    return logits;
  }

  /// Returns d(rows); accumulates head and tied-embedding gradients.
  Tensor<T> mlm_backward(Stream s, const MlmHeadCache<T>& c, const Tensor<T>& dlogits) {
    const StreamIdx& st = stream(s);
    const EncoderIdx& e = st.enc;
    Tensor<T>& dbias = g(st.mlm_bias);
    for (std::size_t i = 0; i < dlogits.rows(); ++i)
      for (std::size_t j = 0; j < dlogits.cols(); ++j) dbias[j] += dlogits(i, j);
    Tensor<T> dt3(c.t3.shape());
    nn::matmul_nt_backward(c.t3, p(st.token), dlogits, &dt3, &g(st.token));
    Tensor<T> dt2 = nn::layer_norm_backward(c.ln, p(e.mlm_ln_g), dt3, &g(e.mlm_ln_g), &g(e.mlm_ln_b));
    Tensor<T> dt1 = nn::gelu_backward(c.t1, dt2);
    Tensor<T> dx(c.x.shape());
    nn::linear_backward(c.x, p(e.mlm_w), dt1, &dx, &g(e.mlm_w), &g(e.mlm_b));
    return dx;
  }

  /// Analytic matmul flop count of one encoder stack over a length-L
  /// sequence (projections, attention products, feed-forward).
  std::uint64_t encoder_flops(std::uint64_t len) const {
    const std::uint64_t d = static_cast<std::uint64_t>(config_.hidden);
    const std::uint64_t f = static_cast<std::uint64_t>(config_.ffn_inner);
    const std::uint64_t per_layer = 4 * 2 * len * d * d + 2 * 2 * len * len * d + 2 * 2 * len * d * f;
    return per_layer * static_cast<std::uint64_t>(config_.layers);
  }

 private:
  const Tensor<T>& p(std::size_t idx) const { return params_.at(idx).value; }
  Tensor<T>& g(std::size_t idx) { return params_.at(idx).grad; }

  void bind() {
    ParamStore<T> scratch;
    auto [f, c] = layout_params(scratch, config_);
    // Indices depend only on creation order, which layout_params fixes; the
    // loader rebuilds stores in the same order.
    fine_ = remap(scratch, f);
    if (c) coarse_ = remap(scratch, *c);
    else coarse_.reset();
  }

  StreamIdx remap(const ParamStore<T>& scratch, const StreamIdx& s) const {
    auto m = [&](std::size_t idx) -> std::size_t {
      if (idx == kNoParam) return kNoParam;
      for (const auto& grp : scratch.groups())
        if (grp.storage == idx) return params_.index_of(grp.names.front());
      return kNoParam;
    };
    StreamIdx r;
    r.token = m(s.token);
    r.mlm_bias = m(s.mlm_bias);
    const EncoderIdx& e = s.enc;
    EncoderIdx& o = r.enc;
    o.position = m(e.position);
    o.segment = m(e.segment);
    o.granularity = m(e.granularity);
    o.ln_g = m(e.ln_g);
    o.ln_b = m(e.ln_b);
    o.mlm_w = m(e.mlm_w);
    o.mlm_b = m(e.mlm_b);
    o.mlm_ln_g = m(e.mlm_ln_g);
    o.mlm_ln_b = m(e.mlm_ln_b);
    for (const LayerIdx& l : e.layers)
      o.layers.push_back({m(l.wq), m(l.bq), m(l.wk), m(l.bk), m(l.wv), m(l.bv), m(l.wo), m(l.bo),
                          m(l.ln1_g), m(l.ln1_b), m(l.w1), m(l.b1), m(l.w2), m(l.b2), m(l.ln2_g),
                          m(l.ln2_b)});
    return r;
  }

  void check_ids(const std::vector<int>& ids, const std::vector<int>& segs, Stream s) const {
    const int vocab = s == Stream::kFine ? config_.fine_vocab_size : config_.coarse_vocab_size;
    if (ids.empty()) throw UsageError(str_cat("empty ", to_string(s), " sequence"));
    if (static_cast<int>(ids.size()) > config_.max_positions)
      throw UsageError(str_cat(to_string(s), " sequence length ", ids.size(),
                               " exceeds max_positions ", config_.max_positions));
    if (segs.size() != ids.size())
      throw UsageError(str_cat(to_string(s), " segment ids length mismatch"));
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= vocab)
        throw UsageError(str_cat("token id ", ids[i], " out of range at position ", i,
                                 " of the ", to_string(s), " stream (vocab ", vocab, ")"));
      if (segs[i] < 0 || segs[i] >= config_.type_vocab)
        throw UsageError(str_cat("segment id ", segs[i], " out of range at position ", i,
                                 " of the ", to_string(s), " stream"));
    }
  }

  void encode(EncoderRun<T>& run, bool train, Rng& rng) const {
    const EncoderIdx& e = stream(run.source).enc;
    const std::size_t d = static_cast<std::size_t>(config_.hidden);
    std::size_t len = 0;
    for (const auto& pc : run.pieces) len += pc.ids.size();
    Tensor<T> x(len, d);
    run.key_masked.assign(len, false);
    std::size_t row = 0;
    for (const auto& pc : run.pieces) {
      const Tensor<T>& tok = p(pc.token_table);
      for (std::size_t i = 0; i < pc.ids.size(); ++i, ++row) {
        const T* a = tok.row(static_cast<std::size_t>(pc.ids[i]));
        const T* b = p(e.position).row(i);
        const T* s = p(e.segment).row(static_cast<std::size_t>(pc.segments[i]));
        T* xr = x.row(row);
        for (std::size_t j = 0; j < d; ++j) xr[j] = a[j] + b[j] + s[j];
        if (e.granularity != kNoParam) {
          const T* gr = p(e.granularity).row(static_cast<std::size_t>(pc.granularity));
          for (std::size_t j = 0; j < d; ++j) xr[j] += gr[j];
        }
        run.key_masked[row] = pc.ids[i] == kPadId;
      }
    }
    const double hd = train ? config_.hidden_dropout : 0.0;
    const double ad = train ? config_.attention_dropout : 0.0;
    Tensor<T> h = nn::layer_norm(x, p(e.ln_g), p(e.ln_b), &run.emb_ln);
    h = nn::dropout(h, hd, rng, &run.emb_mask);
    run.layers.resize(e.layers.size());
    for (std::size_t l = 0; l < e.layers.size(); ++l)
      h = layer_forward(e.layers[l], run.layers[l], std::move(h), run.key_masked, hd, ad, rng);
    run.hidden = std::move(h);
  }

  Tensor<T> layer_forward(const LayerIdx& w, typename EncoderRun<T>::Layer& c, Tensor<T> x,
                          const std::vector<bool>& key_masked, double hd, double ad,
                          Rng& rng) const {
    c.x = std::move(x);
    c.q = nn::linear(c.x, p(w.wq), p(w.bq));
    c.k = nn::linear(c.x, p(w.wk), p(w.bk));
    c.v = nn::linear(c.x, p(w.wv), p(w.bv));
    c.ctx = nn::attention(c.q, c.k, c.v, static_cast<std::size_t>(config_.heads), key_masked, ad, rng,
                          &c.attn);
    Tensor<T> a = nn::linear(c.ctx, p(w.wo), p(w.bo));
    a = nn::dropout(a, hd, rng, &c.attn_out_mask);
    c.h1 = nn::layer_norm(nn::add(c.x, a), p(w.ln1_g), p(w.ln1_b), &c.ln1);
    c.f1 = nn::linear(c.h1, p(w.w1), p(w.b1));
    c.g = nn::gelu(c.f1);
    Tensor<T> f2 = nn::linear(c.g, p(w.w2), p(w.b2));
    f2 = nn::dropout(f2, hd, rng, &c.ffn_out_mask);
    return nn::layer_norm(nn::add(c.h1, f2), p(w.ln2_g), p(w.ln2_b), &c.ln2);
  }

  Tensor<T> layer_backward(const LayerIdx& w, const typename EncoderRun<T>::Layer& c,
                           const Tensor<T>& dout) {
    Tensor<T> dsum2 = nn::layer_norm_backward(c.ln2, p(w.ln2_g), dout, &g(w.ln2_g), &g(w.ln2_b));
    Tensor<T> dh1 = dsum2;
    Tensor<T> df2 = nn::dropout_backward(c.ffn_out_mask, dsum2);
    Tensor<T> dg(c.g.shape());
    nn::linear_backward(c.g, p(w.w2), df2, &dg, &g(w.w2), &g(w.b2));
    Tensor<T> df1 = nn::gelu_backward(c.f1, dg);
    nn::linear_backward(c.h1, p(w.w1), df1, &dh1, &g(w.w1), &g(w.b1));

    Tensor<T> dsum1 = nn::layer_norm_backward(c.ln1, p(w.ln1_g), dh1, &g(w.ln1_g), &g(w.ln1_b));
    Tensor<T> dx = dsum1;
    Tensor<T> da = nn::dropout_backward(c.attn_out_mask, dsum1);
    Tensor<T> dctx(c.ctx.shape());
    nn::linear_backward(c.ctx, p(w.wo), da, &dctx, &g(w.wo), &g(w.bo));

    Tensor<T> dq(c.q.shape()), dk(c.k.shape()), dv(c.v.shape());
    nn::attention_backward(c.q, c.k, c.v, static_cast<std::size_t>(config_.heads), c.attn, dctx, dq, dk,
                           dv);
    nn::linear_backward(c.x, p(w.wq), dq, &dx, &g(w.wq), &g(w.bq));
    nn::linear_backward(c.x, p(w.wk), dk, &dx, &g(w.wk), &g(w.bk));
    nn::linear_backward(c.x, p(w.wv), dv, &dx, &g(w.wv), &g(w.bv));
    return dx;
  }

  void encode_backward(const EncoderRun<T>& run, const Tensor<T>& dhidden) {
    const EncoderIdx& e = stream(run.source).enc;
    Tensor<T> dh = dhidden;
    for (std::size_t l = e.layers.size(); l-- > 0;) dh = layer_backward(e.layers[l], run.layers[l], dh);
    dh = nn::dropout_backward(run.emb_mask, dh);
    Tensor<T> dx = nn::layer_norm_backward(run.emb_ln, p(e.ln_g), dh, &g(e.ln_g), &g(e.ln_b));
    const std::size_t d = dx.cols();
    std::size_t row = 0;
    for (const auto& pc : run.pieces) {
      Tensor<T>& dtok = g(pc.token_table);
      for (std::size_t i = 0; i < pc.ids.size(); ++i, ++row) {
        const T* src = dx.row(row);
        T* a = dtok.row(static_cast<std::size_t>(pc.ids[i]));
        T* b = g(e.position).row(i);
        T* s = g(e.segment).row(static_cast<std::size_t>(pc.segments[i]));
        for (std::size_t j = 0; j < d; ++j) {
          a[j] += src[j];
          b[j] += src[j];
          s[j] += src[j];
        }
        if (e.granularity != kNoParam) {
          T* gr = g(e.granularity).row(static_cast<std::size_t>(pc.granularity));
          for (std::size_t j = 0; j < d; ++j) gr[j] += src[j];
        }
      }
    }
  }

  ModelConfig config_;
  ParamStore<T> params_;
  StreamIdx fine_;
  std::optional<StreamIdx> coarse_;
};

}  // namespace ambert
