#pragma once

#include <unicode/normalizer2.h>
#include <unicode/unistr.h>
#include <unicode/utf8.h>
#include <unicode/uchar.h>
#include <unicode/locid.h>

#include <string>
#include <string_view>
#include <vector>

#include "ambert/common.hpp"

namespace ambert {

/// English: whitespace words are the basis units, subwords are the fine
/// tokens. Chinese: characters are both the basis units and fine tokens.
enum class Language { kEnglish, kChinese };

inline std::string to_string(Language lang) {
  return lang == Language::kEnglish ? "en" : "zh";
}

inline Language parse_language(std::string_view s) {
  if (s == "en") return Language::kEnglish;
  if (s == "zh") return Language::kChinese;
  throw UsageError(str_cat("unknown language '", s, "' (expected en|zh)"));
}

inline bool valid_utf8(std::string_view s) {
  const auto* p = reinterpret_cast<const uint8_t*>(s.data());
  const int32_t n = static_cast<int32_t>(s.size());
  int32_t i = 0;
  while (i < n) {
    UChar32 c;
    U8_NEXT(p, i, n, c);
    if (c < 0) return false;
  }
  return true;
}

/// Split into code points, each returned as its UTF-8 encoding. Input must
/// be valid UTF-8.
inline std::vector<std::string> utf8_chars(std::string_view s) {
  std::vector<std::string> out;
  const auto* p = reinterpret_cast<const uint8_t*>(s.data());
  const int32_t n = static_cast<int32_t>(s.size());
  int32_t i = 0;
  while (i < n) {
    const int32_t start = i;
    UChar32 c;
    U8_NEXT(p, i, n, c);
    out.emplace_back(s.substr(start, i - start));
  }
  return out;
}

inline std::size_t utf8_length(std::string_view s) {
  std::size_t count = 0;
  for (unsigned char c : s) count += (c & 0xC0) != 0x80;
  return count;
}

inline bool is_space_char(std::string_view ch) {
  const auto* p = reinterpret_cast<const uint8_t*>(ch.data());
  int32_t i = 0;
  UChar32 c;
  U8_NEXT(p, i, static_cast<int32_t>(ch.size()), c);
  return c >= 0 && u_isUWhiteSpace(c);
}

/// NFKC (+ lowercase for English), then whitespace canonicalization:
/// English collapses runs to one ASCII space and trims; Chinese drops
/// whitespace entirely. Throws DataError on malformed UTF-8.
inline std::string normalize_text(std::string_view text, Language lang) {
  if (!valid_utf8(text)) throw DataError("malformed UTF-8");
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfkc = icu::Normalizer2::getNFKCInstance(status);
  if (U_FAILURE(status)) throw std::runtime_error("ICU NFKC unavailable");
  icu::UnicodeString u = icu::UnicodeString::fromUTF8(
      icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
  icu::UnicodeString normalized = nfkc->normalize(u, status);
  if (U_FAILURE(status)) throw DataError("normalization failed");
  if (lang == Language::kEnglish) normalized.toLower(icu::Locale::getRoot());
  std::string utf8;
  normalized.toUTF8String(utf8);

  std::string out;
  out.reserve(utf8.size());
  bool pending_space = false;
  for (const std::string& ch : utf8_chars(utf8)) {
    if (is_space_char(ch)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space && lang == Language::kEnglish) out.push_back(' ');
    pending_space = false;
    out += ch;
  }
  return out;
}

/// Basis units for n-gram statistics and coarse matching: whitespace words
/// (English) or characters (Chinese). Input must already be normalized.
inline std::vector<std::string> basis_units(std::string_view normalized,
                                            Language lang) {
  if (normalized.empty()) return {};
  if (lang == Language::kChinese) return utf8_chars(normalized);
  return split(normalized, ' ');
}

/// Joiner between basis units inside a coarse token.
inline std::string_view unit_separator(Language lang) {
  return lang == Language::kEnglish ? " " : "";
}

}  // namespace ambert
