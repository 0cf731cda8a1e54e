#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <future>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ambert/common.hpp"
#include "ambert/unicode.hpp"

namespace ambert {

enum class Granularity { kFine, kCoarse };

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kClsId = 2;
inline constexpr int kSepId = 3;
inline constexpr int kMaskId = 4;
inline constexpr int kNumSpecial = 5;
inline constexpr std::array<std::string_view, kNumSpecial> kSpecialTokens = {
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};

inline bool is_special_id(int id) { return id >= 0 && id < kNumSpecial; }

inline bool is_special_token(std::string_view tok) {
  return std::find(kSpecialTokens.begin(), kSpecialTokens.end(), tok) != kSpecialTokens.end();
}

struct VocabEntry {
  std::string token;
  int id = 0;
  std::uint64_t count = 0;

  bool operator==(const VocabEntry&) const = default;
};

/// Token <-> id table for one granularity. Immutable after construction;
/// the constructor enforces dense ids, unique tokens, and the five special
/// tokens at ids 0..4.
class Vocabulary {
 public:
  Vocabulary() : Vocabulary(Granularity::kFine, {}) {}

  /// `tokens` excludes the specials; they are injected at ids 0..4.
  Vocabulary(Granularity granularity,
             const std::vector<std::pair<std::string, std::uint64_t>>& tokens)
      : granularity_(granularity) {
    entries_.reserve(tokens.size() + kNumSpecial);
    for (int i = 0; i < kNumSpecial; ++i)
      entries_.push_back({std::string(kSpecialTokens[i]), i, 0});
    for (const auto& [tok, count] : tokens)
      entries_.push_back({tok, static_cast<int>(entries_.size()), count});
    index();
  }

  /// Entries must already carry dense ids in order; used by the loader.
  static Vocabulary from_entries(Granularity granularity,
                                 std::vector<VocabEntry> entries) {
    Vocabulary v;
    v.granularity_ = granularity;
    v.entries_ = std::move(entries);
    v.index();
    return v;
  }

  Granularity granularity() const { return granularity_; }
  std::size_t size() const { return entries_.size(); }
  const std::vector<VocabEntry>& entries() const { return entries_; }

  std::optional<int> find(std::string_view token) const {
    auto it = by_token_.find(std::string(token));
    if (it == by_token_.end()) return std::nullopt;
    return it->second;
  }
  bool contains(std::string_view token) const { return find(token).has_value(); }
  int id_or_unk(std::string_view token) const { return find(token).value_or(kUnkId); }

  const std::string& token(int id) const { return entries_.at(static_cast<std::size_t>(id)).token; }
  std::uint64_t count(int id) const { return entries_.at(static_cast<std::size_t>(id)).count; }

  bool operator==(const Vocabulary& o) const {
    return granularity_ == o.granularity_ && entries_ == o.entries_;
  }

 private:
  void index() {
    by_token_.clear();
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const VocabEntry& e = entries_[i];
      if (e.id != static_cast<int>(i))
        throw DataError(str_cat("vocabulary ids not dense at position ", i));
      if (!by_token_.emplace(e.token, e.id).second)
        throw DataError(str_cat("duplicate vocabulary token '", e.token, "'"));
    }
    for (int i = 0; i < kNumSpecial; ++i) {
      if (entries_.size() <= static_cast<std::size_t>(i) ||
          entries_[i].token != kSpecialTokens[i])
        throw DataError(str_cat("missing special token ", kSpecialTokens[i]));
    }
  }

  Granularity granularity_ = Granularity::kFine;
  std::vector<VocabEntry> entries_;
  std::unordered_map<std::string, int> by_token_;
};

// ---------------------------------------------------------------------------
// N-gram statistics

using NGram = std::vector<std::string>;

/// Exact k-gram counts (1 <= k <= max_order) over basis units.
struct NGramTable {
  int max_order = 2;
  Language language = Language::kEnglish;
  std::map<NGram, std::uint64_t> counts;
  std::uint64_t rejected_lines = 0;

  std::uint64_t count(const NGram& g) const {
    auto it = counts.find(g);
    return it == counts.end() ? 0 : it->second;
  }
  bool empty() const { return counts.empty(); }

  void merge(const NGramTable& other) {
    for (const auto& [g, c] : other.counts) counts[g] += c;
    rejected_lines += other.rejected_lines;
  }

  bool operator==(const NGramTable& o) const {
    return max_order == o.max_order && language == o.language &&
           counts == o.counts && rejected_lines == o.rejected_lines;
  }
};

namespace detail {

inline void count_document(const std::vector<std::string>& units, int max_order,
                           std::map<NGram, std::uint64_t>& counts) {
  for (std::size_t i = 0; i < units.size(); ++i) {
    NGram g;
    for (int k = 1; k <= max_order && i + k <= units.size(); ++k) {
      g.push_back(units[i + k - 1]);
      ++counts[g];
    }
  }
}

inline NGramTable count_shard(const std::vector<std::string>& docs,
                              std::size_t begin, std::size_t end,
                              Language lang, int max_order) {
  NGramTable t;
  t.max_order = max_order;
  t.language = lang;
  for (std::size_t d = begin; d < end; ++d) {
    std::string norm;
    try {
      norm = normalize_text(docs[d], lang);
    } catch (const DataError&) {
      ++t.rejected_lines;
      continue;
    }
    count_document(basis_units(norm, lang), max_order, t.counts);
  }
  return t;
}

}  // namespace detail

/// Counts every k-gram within each document (one document per line). Lines
/// with malformed UTF-8 are skipped and tallied in `rejected_lines`. With
/// shards > 1 the corpus is split into contiguous ranges counted on worker
/// threads; merging is addition, so the result does not depend on `shards`.
inline NGramTable count_ngrams(const std::vector<std::string>& docs, Language lang,
                               int max_order, std::size_t shards = 1) {
  if (max_order < 2) throw UsageError("count_ngrams: max_order must be >= 2");
  shards = std::max<std::size_t>(1, std::min(shards, std::max<std::size_t>(docs.size(), 1)));
  const std::size_t per = (docs.size() + shards - 1) / shards;
  std::vector<std::future<NGramTable>> parts;
  for (std::size_t s = 0; s < shards; ++s) {
    const std::size_t b = std::min(docs.size(), s * per);
    const std::size_t e = std::min(docs.size(), b + per);
    parts.push_back(std::async(shards == 1 ? std::launch::deferred : std::launch::async,
                               detail::count_shard, std::cref(docs), b, e, lang, max_order));
  }
  NGramTable table;
  table.max_order = max_order;
  table.language = lang;
  for (auto& p : parts) table.merge(p.get());
  return table;
}

struct LexiconCriteria {
  std::uint64_t min_frequency = 16;
  double min_dependence = 0.4;
  int max_ngram_order = 4;

  void validate() const {
    if (!(min_dependence >= 0.0 && min_dependence <= 1.0))
      throw UsageError(str_cat("min_dependence must lie in [0,1], got ", min_dependence));
    if (max_ngram_order < 2)
      throw UsageError(str_cat("max_ngram_order must be >= 2, got ", max_ngram_order));
    if (min_frequency < 1) throw UsageError("min_frequency must be >= 1");
  }
};

/// count(g) / count(g without its last unit).
inline double dependence(const NGramTable& table, const NGram& g) {
  if (g.size() < 2) return 1.0;
  const NGram prefix(g.begin(), g.end() - 1);
  const std::uint64_t p = table.count(prefix);
  return p == 0 ? 0.0 : static_cast<double>(table.count(g)) / static_cast<double>(p);
}

inline std::string join_units(const NGram& g, Language lang) {
  std::string out;
  const std::string_view sep = unit_separator(lang);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (i) out += sep;
    out += g[i];
  }
  return out;
}

/// Coarse vocabulary: frequent singleton units plus every k-gram (k >= 2)
/// that is frequent and whose last unit depends strongly on its prefix.
/// Ordering after the specials: unit length desc, count desc, bytes asc.
inline Vocabulary build_phrase_lexicon(const NGramTable& table,
                                       const LexiconCriteria& criteria) {
  criteria.validate();
  const int order = std::min(criteria.max_ngram_order, table.max_order);
  struct Cand {
    std::size_t len;
    std::uint64_t count;
    std::string text;
  };
  std::vector<Cand> cands;
  for (const auto& [g, c] : table.counts) {
    if (static_cast<int>(g.size()) > order || c < criteria.min_frequency) continue;
    if (g.size() >= 2 && dependence(table, g) < criteria.min_dependence) continue;
    cands.push_back({g.size(), c, join_units(g, table.language)});
  }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.len != b.len) return a.len > b.len;
    if (a.count != b.count) return a.count > b.count;
    return a.text < b.text;
  });
  std::vector<std::pair<std::string, std::uint64_t>> tokens;
  tokens.reserve(cands.size());
  for (auto& c : cands) {
    if (is_special_token(c.text)) continue;
    tokens.emplace_back(std::move(c.text), c.count);
  }
  return Vocabulary(Granularity::kCoarse, tokens);
}

// ---------------------------------------------------------------------------
// Fine vocabulary

enum class FineMode { kChar, kSubword };

inline FineMode fine_mode_for(Language lang) {
  return lang == Language::kChinese ? FineMode::kChar : FineMode::kSubword;
}

inline constexpr std::string_view kContinuation = "##";

struct FineVocabOptions {
  std::uint64_t word_cutoff = 2;  // min count for whole words and suffix pieces
  std::uint64_t min_char_count = 1;
};

/// char mode: every character seen at least `min_char_count` times.
/// subword mode: all word-initial characters and "##" characters first (so
/// any word over seen characters tokenizes without [UNK]), then frequent
/// whole words and "##" suffix pieces ranked by (count desc, length desc,
/// bytes asc), up to `target_size` entries including the specials.
inline Vocabulary build_fine_vocab(const std::vector<std::string>& docs, Language lang,
                                   FineMode mode, std::size_t target_size,
                                   const FineVocabOptions& opts = {}) {
  if (target_size <= static_cast<std::size_t>(kNumSpecial))
    throw UsageError(str_cat("target_size ", target_size,
                             " too small to hold the special tokens"));
  const std::size_t budget = target_size - kNumSpecial;

  std::map<std::string, std::uint64_t> words;
  for (const std::string& doc : docs) {
    std::string norm;
    try {
      norm = normalize_text(doc, lang);
    } catch (const DataError&) {
      continue;
    }
    if (mode == FineMode::kChar) {
      for (auto& ch : utf8_chars(norm))
        if (ch != " ") ++words[ch];
    } else {
      for (auto& w : basis_units(norm, lang)) ++words[w];
    }
  }

  using Item = std::pair<std::string, std::uint64_t>;
  auto rank = [](std::vector<Item>& items) {
    std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) {
      if (a.second != b.second) return a.second > b.second;
      if (a.first.size() != b.first.size()) return a.first.size() > b.first.size();
      return a.first < b.first;
    });
  };

  std::vector<Item> chosen;
  if (mode == FineMode::kChar) {
    std::vector<Item> chars;
    for (const auto& [c, n] : words)
      if (n >= opts.min_char_count && !is_special_token(c)) chars.emplace_back(c, n);
    rank(chars);
    if (chars.size() > budget) chars.resize(budget);
    return Vocabulary(Granularity::kFine, chars);
  }

  std::map<std::string, std::uint64_t> base, pieces;
  for (const auto& [w, n] : words) {
    const auto chars = utf8_chars(w);
    for (std::size_t i = 0; i < chars.size(); ++i)
      base[i == 0 ? chars[i] : std::string(kContinuation) + chars[i]] += n;
    if (chars.size() >= 2 && n >= opts.word_cutoff) pieces[w] += n;
    std::string suffix;
    for (std::size_t i = chars.size(); i-- > 1;) {
      suffix = chars[i] + suffix;
      if (chars.size() - i >= 2) pieces[std::string(kContinuation) + suffix] += n;
    }
  }
  std::vector<Item> base_items(base.begin(), base.end());
  rank(base_items);
  if (base_items.size() > budget) base_items.resize(budget);
  chosen = base_items;

  std::vector<Item> extra;
  for (const auto& [p, n] : pieces)
    if (n >= opts.word_cutoff && !base.count(p) && !is_special_token(p)) extra.emplace_back(p, n);
  rank(extra);
  for (auto& it : extra) {
    if (chosen.size() >= budget) break;
    chosen.push_back(std::move(it));
  }
  return Vocabulary(Granularity::kFine, chosen);
}

// ---------------------------------------------------------------------------
// TSV persistence: token<TAB>id<TAB>count, LF endings, id order, no header.

inline void write_vocab(std::ostream& os, const Vocabulary& v) {
  for (const VocabEntry& e : v.entries()) {
    if (e.token.find_first_of("\t\n") != std::string::npos)
      throw DataError(str_cat("token with TAB/LF cannot be saved: id ", e.id));
    os << e.token << '\t' << e.id << '\t' << e.count << '\n';
  }
}

inline void save_vocab(const Vocabulary& v, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError(str_cat("cannot write vocabulary file ", path));
  write_vocab(os, v);
  if (!os) throw DataError(str_cat("write failed: ", path));
}

inline Vocabulary read_vocab(std::istream& is, Granularity granularity,
                             const std::string& origin = "<stream>") {
  std::vector<std::optional<VocabEntry>> slots;
  std::unordered_map<std::string, std::size_t> seen_token;
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& what) {
    throw DataError(str_cat(origin, ":", lineno, ": ", what));
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') fail("CR line ending");
    const auto fields = split(line, '\t');
    if (fields.size() != 3) fail("expected token<TAB>id<TAB>count");
    std::size_t id = 0;
    std::uint64_t count = 0;
    try {
      std::size_t used = 0;
      id = std::stoull(fields[1], &used);
      if (used != fields[1].size()) throw std::invalid_argument("id");
      count = std::stoull(fields[2], &used);
      if (used != fields[2].size()) throw std::invalid_argument("count");
    } catch (const std::exception&) {
      fail("non-numeric id or count");
    }
    if (id >= slots.size()) slots.resize(id + 1);
    if (slots[id]) fail(str_cat("duplicate id ", id));
    if (!seen_token.emplace(fields[0], id).second)
      fail(str_cat("duplicate token '", fields[0], "'"));
    slots[id] = VocabEntry{fields[0], static_cast<int>(id), count};
  }
  for (int i = 0; i < kNumSpecial; ++i) {
    auto it = seen_token.find(std::string(kSpecialTokens[i]));
    if (it == seen_token.end())
      throw DataError(str_cat(origin, ": missing special token ", kSpecialTokens[i]));
    if (it->second != static_cast<std::size_t>(i))
      throw DataError(str_cat(origin, ": special token ", kSpecialTokens[i],
                              " must have id ", i));
  }
  std::vector<VocabEntry> entries;
  entries.reserve(slots.size());
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (!slots[i]) throw DataError(str_cat(origin, ": ids not dense, id ", i, " missing"));
    entries.push_back(std::move(*slots[i]));
  }
  return Vocabulary::from_entries(granularity, std::move(entries));
}

inline Vocabulary load_vocab(const std::string& path, Granularity granularity) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError(str_cat("cannot read vocabulary file ", path));
  return read_vocab(is, granularity, path);
}

}  // namespace ambert
