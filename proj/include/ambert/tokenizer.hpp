#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ambert/common.hpp"
#include "ambert/unicode.hpp"
#include "ambert/vocab.hpp"

namespace ambert {

struct FineToken {
  int id = kUnkId;
  std::string piece;    // vocabulary string ("##" kept); "[UNK]" for unknown material
  std::size_t unit = 0; // index of the basis unit (word or character) it came from
};

/// Output of fine tokenization. `units` keeps the surface of every basis
/// unit so coarse matching still sees words whose subwords fell to [UNK].
struct FineTokenization {
  std::vector<FineToken> tokens;
  std::vector<std::string> units;
};

/// Half-open range of fine positions.
struct Span {
  int start = 0;
  int end = 0;
  int size() const { return end - start; }
  bool operator==(const Span&) const = default;
};

struct CoarseToken {
  int id = kUnkId;
  std::string surface;
  Span fine;  // relative to the fine token list passed in
};

/// Aligned fine/coarse id sequences for one input, both framed by [CLS] ...
/// [SEP]. alignment[j] is the fine range covered by coarse position j + 1.
struct TokenSeqPair {
  std::vector<int> fine_ids;
  std::vector<int> coarse_ids;
  std::vector<Span> alignment;
  std::vector<int> fine_segments;
  std::vector<int> coarse_segments;

  int fine_len() const { return static_cast<int>(fine_ids.size()); }
  int coarse_len() const { return static_cast<int>(coarse_ids.size()); }
  bool operator==(const TokenSeqPair&) const = default;
};

inline constexpr std::size_t kMaxCharsPerWord = 100;

/// Greedy longest-match-first WordPiece split of one word.
inline std::vector<std::string> wordpiece_split(std::string_view word, const Vocabulary& v) {
  const auto chars = utf8_chars(word);
  if (chars.size() > kMaxCharsPerWord) return {};
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start < chars.size()) {
    std::size_t end = chars.size();
    std::string found;
    while (start < end) {
      std::string sub = start > 0 ? std::string(kContinuation) : std::string();
      for (std::size_t i = start; i < end; ++i) sub += chars[i];
      if (v.contains(sub)) {
        found = std::move(sub);
        break;
      }
      --end;
    }
    if (found.empty()) return {};
    out.push_back(std::move(found));
    start = end;
  }
  return out;
}

/// Fine tokenization of raw text. English: whitespace words split by greedy
/// longest match (an unsplittable word becomes one [UNK]). Chinese: one
/// token per character.
inline FineTokenization tokenize_fine(std::string_view text, const Vocabulary& fine,
                                      Language lang) {
  FineTokenization out;
  out.units = basis_units(normalize_text(text, lang), lang);
  for (std::size_t u = 0; u < out.units.size(); ++u) {
    const std::string& unit = out.units[u];
    if (lang == Language::kChinese) {
      const int id = fine.id_or_unk(unit);
      out.tokens.push_back({id, id == kUnkId ? std::string(kSpecialTokens[kUnkId]) : unit, u});
      continue;
    }
    auto pieces = wordpiece_split(unit, fine);
    if (pieces.empty()) {
      out.tokens.push_back({kUnkId, std::string(kSpecialTokens[kUnkId]), u});
      continue;
    }
    for (auto& p : pieces) {
      const int id = *fine.find(p);
      out.tokens.push_back({id, std::move(p), u});
    }
  }
  return out;
}

/// Inverse of tokenize_fine when no [UNK] was emitted: drops "##" joins and
/// restores single spaces between English words.
inline std::string detokenize_fine(const std::vector<FineToken>& tokens, Language lang) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    std::string_view p = tokens[i].piece;
    const bool cont = p.substr(0, kContinuation.size()) == kContinuation;
    if (cont) p.remove_prefix(kContinuation.size());
    if (i > 0 && lang == Language::kEnglish && tokens[i].unit != tokens[i - 1].unit) out += ' ';
    out += p;
  }
  return out;
}

/// Longest basis-unit length over the lexicon's non-special entries.
inline std::size_t max_phrase_units(const Vocabulary& lexicon, Language lang) {
  std::size_t best = 1;
  for (const VocabEntry& e : lexicon.entries()) {
    if (is_special_id(e.id)) continue;
    const std::size_t n = lang == Language::kEnglish
                              ? static_cast<std::size_t>(std::count(e.token.begin(), e.token.end(), ' ')) + 1
                              : utf8_length(e.token);
    best = std::max(best, n);
  }
  return best;
}

/// Left-to-right greedy longest match over the basis units of a fine
/// tokenization. Units not starting any lexicon phrase become singletons
/// ([UNK] when absent). Ranges index into `fine.tokens`.
inline std::vector<CoarseToken> tokenize_coarse(const FineTokenization& fine,
                                                const Vocabulary& lexicon, Language lang,
                                                std::size_t max_units) {
  const std::size_t nunits = fine.units.size();
  std::vector<Span> unit_range(nunits, Span{0, 0});
  for (std::size_t i = 0; i < fine.tokens.size(); ++i) {
    Span& r = unit_range[fine.tokens[i].unit];
    if (r.size() == 0) r.start = static_cast<int>(i);
    r.end = static_cast<int>(i) + 1;
  }
  const std::string_view sep = unit_separator(lang);
  std::vector<CoarseToken> out;
  std::size_t i = 0;
  while (i < nunits) {
    std::size_t take = 1;
    int id = -1;
    std::string surface;
    for (std::size_t k = std::min(max_units, nunits - i); k >= 2; --k) {
      std::string cand = fine.units[i];
      for (std::size_t j = 1; j < k; ++j) {
        cand += sep;
        cand += fine.units[i + j];
      }
      if (auto hit = lexicon.find(cand)) {
        take = k;
        id = *hit;
        surface = std::move(cand);
        break;
      }
    }
    if (id < 0) {
      surface = fine.units[i];
      id = lexicon.id_or_unk(surface);
    }
    out.push_back({id, std::move(surface),
                   Span{unit_range[i].start, unit_range[i + take - 1].end}});
    i += take;
  }
  return out;
}

inline std::vector<CoarseToken> tokenize_coarse(const FineTokenization& fine,
                                                const Vocabulary& lexicon, Language lang) {
  return tokenize_coarse(fine, lexicon, lang, max_phrase_units(lexicon, lang));
}

/// Bundles both vocabularies so repeated encodes reuse the phrase-length
/// bound. Immutable; safe to share across threads.
class Tokenizer {
 public:
  Tokenizer(Vocabulary fine, Vocabulary coarse, Language lang)
      : fine_(std::move(fine)), coarse_(std::move(coarse)), lang_(lang),
        max_units_(max_phrase_units(coarse_, lang_)) {}

  const Vocabulary& fine() const { return fine_; }
  const Vocabulary& coarse() const { return coarse_; }
  Language language() const { return lang_; }

  FineTokenization fine_tokens(std::string_view text) const {
    return tokenize_fine(text, fine_, lang_);
  }
  std::vector<CoarseToken> coarse_tokens(const FineTokenization& f) const {
    return tokenize_coarse(f, coarse_, lang_, max_units_);
  }

  /// Assembles a TokenSeqPair. Truncation removes whole coarse tokens (and
  /// their fine ranges) from the tail of the longer segment.
  TokenSeqPair encode(std::string_view text_a, std::optional<std::string_view> text_b,
                      int max_fine_len, int max_coarse_len) const {
    const int specials = text_b ? 3 : 2;
    if (max_fine_len < 3 || max_coarse_len < 3 || max_fine_len < specials ||
        max_coarse_len < specials)
      throw UsageError(str_cat("max lengths (", max_fine_len, ", ", max_coarse_len,
                               ") cannot hold the framing tokens"));
    Segment a = segment(text_a);
    Segment b = text_b ? segment(*text_b) : Segment{};
    auto fine_count = [&] { return a.fine_len() + b.fine_len(); };
    auto coarse_count = [&] { return static_cast<int>(a.coarse.size() + b.coarse.size()); };
    while (fine_count() > max_fine_len - specials || coarse_count() > max_coarse_len - specials) {
      Segment& victim = (a.fine_len() > b.fine_len() || b.coarse.empty()) ? a : b;
      victim.pop();
    }

    TokenSeqPair p;
    p.fine_ids.push_back(kClsId);
    p.coarse_ids.push_back(kClsId);
    p.fine_segments.push_back(0);
    p.coarse_segments.push_back(0);
    auto append = [&](const Segment& s, int seg) {
      const int offset = p.fine_len();
      for (const auto& t : s.fine.tokens) {
        p.fine_ids.push_back(t.id);
        p.fine_segments.push_back(seg);
      }
      for (const auto& c : s.coarse) {
        p.coarse_ids.push_back(c.id);
        p.coarse_segments.push_back(seg);
        p.alignment.push_back({c.fine.start + offset, c.fine.end + offset});
      }
      p.fine_ids.push_back(kSepId);
      p.fine_segments.push_back(seg);
      p.coarse_ids.push_back(kSepId);
      p.coarse_segments.push_back(seg);
    };
    append(a, 0);
    if (text_b) {
      // The separator between segments aligns with its fine counterpart.
      p.alignment.push_back({p.fine_len() - 1, p.fine_len()});
      append(b, 1);
    }
    return p;
  }

 private:
  struct Segment {
    FineTokenization fine;
    std::vector<CoarseToken> coarse;
    int fine_len() const { return static_cast<int>(fine.tokens.size()); }
    void pop() {
      const CoarseToken& last = coarse.back();
      fine.tokens.resize(static_cast<std::size_t>(last.fine.start));
      coarse.pop_back();
    }
  };

  Segment segment(std::string_view text) const {
    Segment s;
    s.fine = fine_tokens(text);
    s.coarse = coarse_tokens(s.fine);
    return s;
  }

  Vocabulary fine_;
  Vocabulary coarse_;
  Language lang_;
  std::size_t max_units_;
};

/// Checks the structural invariants of a TokenSeqPair; returns a diagnostic
/// or nullopt when valid.
inline std::optional<std::string> check_pair(const TokenSeqPair& p) {
  const int m = p.fine_len(), n = p.coarse_len();
  if (m < 2 || n < 2) return "sequences shorter than [CLS] [SEP]";
  if (p.fine_ids.front() != kClsId || p.coarse_ids.front() != kClsId) return "missing [CLS]";
  if (p.fine_ids.back() != kSepId || p.coarse_ids.back() != kSepId) return "missing final [SEP]";
  if (static_cast<int>(p.alignment.size()) != n - 2) return "alignment size != coarse interior";
  if (static_cast<int>(p.fine_segments.size()) != m ||
      static_cast<int>(p.coarse_segments.size()) != n)
    return "segment ids length mismatch";
  int next = 1;
  for (const Span& s : p.alignment) {
    if (s.start != next || s.end <= s.start) return str_cat("alignment gap/overlap at ", s.start);
    next = s.end;
  }
  if (next != m - 1) return "alignment does not tile the fine interior";
  return std::nullopt;
}

/// Fine position -> coarse position. Total over every fine position:
/// [CLS] maps to [CLS], the final [SEP] to the final [SEP].
inline std::vector<int> cover_map(const TokenSeqPair& p) {
  std::vector<int> cover(p.fine_ids.size(), 0);
  for (std::size_t j = 0; j < p.alignment.size(); ++j)
    for (int i = p.alignment[j].start; i < p.alignment[j].end; ++i)
      cover[static_cast<std::size_t>(i)] = static_cast<int>(j) + 1;
  if (!cover.empty()) cover.back() = p.coarse_len() - 1;
  return cover;
}

}  // namespace ambert
