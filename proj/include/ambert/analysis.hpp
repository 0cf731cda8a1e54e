#pragma once

#include <cmath>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "ambert/common.hpp"
#include "ambert/model.hpp"
#include "ambert/tokenizer.hpp"

namespace ambert {

struct AttentionMap {
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  Tensor<double> probs;
};

inline std::vector<std::string> token_labels(const std::vector<int>& ids, const Vocabulary& v) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(v.token(id));
  return out;
}

/// Exact attention probabilities of one layer/head from an eval-mode
/// forward. ambert/combo/bert: the chosen stream's square map. hybrid: the
/// joint (m+n+4)^2 map, fine labels first.
template <typename T>
AttentionMap attention_map(const Model<T>& model, const Tokenizer& tok, const TokenSeqPair& pair,
                           int layer, int head, Stream stream) {
  const ModelConfig& c = model.config();
  if (layer < 0 || layer >= c.layers)
    throw UsageError(str_cat("layer ", layer, " outside [0,", c.layers, ")"));
  if (head < 0 || head >= c.heads) throw UsageError(str_cat("head ", head, " outside [0,", c.heads, ")"));
  ForwardOptions fo;
  if (c.variant != Variant::kHybrid)
    fo.streams = stream == Stream::kFine ? Streams::kFineOnly : Streams::kCoarseOnly;
  const ForwardOutput<T> out = model.forward(pair, fo);
  AttentionMap m;
  if (c.variant == Variant::kHybrid) {
    m.row_labels = token_labels(pair.fine_ids, tok.fine());
    const auto cl = token_labels(pair.coarse_ids, tok.coarse());
    m.row_labels.insert(m.row_labels.end(), cl.begin(), cl.end());
  } else {
    m.row_labels = stream == Stream::kFine ? token_labels(pair.fine_ids, tok.fine())
                                           : token_labels(pair.coarse_ids, tok.coarse());
  }
  m.col_labels = m.row_labels;
  m.probs = out.attention(stream, layer, head).template cast<double>();
  return m;
}

/// Header: empty cell then column tokens; then one row per token with
/// tab-separated probabilities at 6 decimals.
inline void write_attention_grid(std::ostream& os, const AttentionMap& m) {
  for (const auto& c : m.col_labels) os << '\t' << c;
  os << '\n';
  char buf[32];
  for (std::size_t i = 0; i < m.row_labels.size(); ++i) {
    os << m.row_labels[i];
    for (std::size_t j = 0; j < m.col_labels.size(); ++j) {
      std::snprintf(buf, sizeof buf, "%.6f", m.probs(i, j));
      os << '\t' << buf;
    }
    os << '\n';
  }
}

/// 1 - cos(u, v).
inline double cosine_distance(const std::vector<double>& u, const std::vector<double>& v) {
  if (u.size() != v.size() || u.empty()) throw UsageError("cosine_distance: size mismatch");
  double uv = 0, uu = 0, vv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uv += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (uu == 0.0 || vv == 0.0) throw DataError("cosine_distance: zero vector");
  return 1.0 - uv / std::sqrt(uu * vv);
}

/// Euclidean distance between the L2-normalized vectors; equals
/// sqrt(2 * cosine_distance).
inline double normalized_euclidean(const std::vector<double>& u, const std::vector<double>& v) {
  if (u.size() != v.size() || u.empty()) throw UsageError("normalized_euclidean: size mismatch");
  double nu = 0, nv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  if (nu == 0.0 || nv == 0.0) throw DataError("normalized_euclidean: zero vector");
  nu = std::sqrt(nu);
  nv = std::sqrt(nv);
  double s = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double d = u[i] / nu - v[i] / nv;
    s += d * d;
  }
  return std::sqrt(s);
}

struct ClsDistance {
  double cosine_distance_mean = 0.0;
  double normalized_euclidean_mean = 0.0;
  std::size_t examples = 0;
};

/// Mean distances between the fine and coarse [CLS] representations.
template <typename T>
ClsDistance cls_distance(const Model<T>& model, const std::vector<TokenSeqPair>& data) {
  if (!is_dual_stream(model.config().variant))
    throw DataError(str_cat(to_string(model.config().variant),
                            " checkpoints have no separate fine and coarse [CLS] representations"));
  if (data.empty()) throw DataError("cls_distance: empty dataset");
  std::vector<double> cds, eds;
  for (const auto& pair : data) {
    const auto out = model.forward(pair);
    const auto fx = out.fine_cls(), fz = out.coarse_cls();
    const std::vector<double> u(fx.begin(), fx.end()), v(fz.begin(), fz.end());
    cds.push_back(cosine_distance(u, v));
    eds.push_back(normalized_euclidean(u, v));
  }
  return {pairwise_mean(cds), pairwise_mean(eds), data.size()};
}

struct CoarseRate {
  std::size_t absent = 0;
  std::size_t total = 0;
  double rate() const { return total ? static_cast<double>(absent) / static_cast<double>(total) : 0.0; }
};

/// Share of coarse tokens whose surface string is not a fine-vocabulary
/// entry.
inline CoarseRate coarse_rate(const std::vector<std::string>& sample, const Tokenizer& tok) {
  if (sample.empty()) throw DataError("coarse_rate: empty sample");
  CoarseRate r;
  for (const auto& line : sample) {
    const FineTokenization f = tok.fine_tokens(line);
    for (const CoarseToken& c : tok.coarse_tokens(f)) {
      ++r.total;
      r.absent += !tok.fine().contains(c.surface);
    }
  }
  if (r.total == 0) throw DataError("coarse_rate: sample contains no tokens");
  return r;
}

}  // namespace ambert
