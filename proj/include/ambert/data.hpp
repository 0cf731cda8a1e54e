#pragma once

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "ambert/common.hpp"
#include "ambert/finetune.hpp"
#include "ambert/tokenizer.hpp"
#include "ambert/unicode.hpp"

namespace ambert {

/// One document per non-empty line.
inline std::vector<std::string> read_lines(const std::string& path, bool keep_empty = false) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(str_cat("cannot open ", path));
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!keep_empty && trim(line).empty()) continue;
    out.push_back(line);
  }
  return out;
}

namespace detail {

inline int parse_int_field(const std::string& s, const std::string& where, const char* what) {
  try {
    std::size_t pos = 0;
    const int v = std::stoi(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw DataError(str_cat(where, ": ", what, " '", s, "' is not an integer"));
  }
}

}  // namespace detail

/// `text_a<TAB>text_b?<TAB>label`; two fields mean a single-text example.
inline std::vector<ClassificationExample> read_classification_tsv(const std::string& path,
                                                                  int num_labels) {
  std::vector<ClassificationExample> out;
  const auto lines = read_lines(path, true);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    const std::string where = str_cat(path, ":", i + 1);
    const auto f = split(lines[i], '\t');
    if (f.size() != 2 && f.size() != 3)
      throw DataError(str_cat(where, ": expected 2 or 3 tab-separated fields, got ", f.size()));
    ClassificationExample ex;
    ex.text_a = f[0];
    if (f.size() == 3) ex.text_b = f[1];
    ex.label = detail::parse_int_field(f.back(), where, "label");
    if (ex.label < 0 || ex.label >= num_labels)
      throw DataError(str_cat(where, ": label ", ex.label, " outside [0, ", num_labels, ")"));
    out.push_back(std::move(ex));
  }
  return out;
}

struct RawSpanExample {
  std::string context;
  std::string question;
  int char_start = 0;  // code points, end exclusive
  int char_end = 0;
  int line = 0;
};

/// `context<TAB>question<TAB>char_start<TAB>char_end`.
inline std::vector<RawSpanExample> read_span_tsv(const std::string& path) {
  std::vector<RawSpanExample> out;
  const auto lines = read_lines(path, true);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    const std::string where = str_cat(path, ":", i + 1);
    const auto f = split(lines[i], '\t');
    if (f.size() != 4) throw DataError(str_cat(where, ": expected 4 tab-separated fields, got ", f.size()));
    RawSpanExample ex{f[0], f[1], detail::parse_int_field(f[2], where, "char_start"),
                      detail::parse_int_field(f[3], where, "char_end"), static_cast<int>(i + 1)};
    if (!valid_utf8(ex.context)) throw DataError(str_cat(where, ": context is not valid UTF-8"));
    const int n = static_cast<int>(utf8_length(ex.context));
    if (ex.char_start < 0 || ex.char_end <= ex.char_start || ex.char_end > n)
      throw DataError(str_cat(where, ": answer [", ex.char_start, ",", ex.char_end,
                              ") outside context of ", n, " characters"));
    out.push_back(std::move(ex));
  }
  return out;
}

/// Maps a code-point answer range in the raw context to inclusive fine
/// indices of the encoded (context, question) pair. Offsets snap outward to
/// whole basis units (words in English, characters in Chinese). Returns
/// nullopt when truncation removed part of the answer.
inline std::optional<SpanAnswer> char_span_to_fine(const Tokenizer& tok, const std::string& context,
                                                   int char_start, int char_end,
                                                   const TokenSeqPair& pair) {
  const auto chars = utf8_chars(context);
  int fine_before = 0, first = -1, last = -1;
  std::string unit;
  int unit_begin = 0;
  const bool per_char = tok.language() == Language::kChinese;
  auto flush = [&](int unit_end) {
    if (unit.empty()) return;
    const int n = static_cast<int>(tok.fine_tokens(unit).tokens.size());
    const bool overlaps = unit_begin < char_end && unit_end > char_start;
    if (overlaps && first < 0) first = fine_before;
    if (overlaps) last = fine_before + n - 1;
    fine_before += n;
    unit.clear();
  };
  for (int i = 0; i < static_cast<int>(chars.size()); ++i) {
    if (is_space_char(chars[i])) {
      flush(i);
      continue;
    }
    if (unit.empty()) unit_begin = i;
    unit += chars[i];
    if (per_char) flush(i + 1);
  }
  flush(static_cast<int>(chars.size()));
  if (first < 0 || last < first) return std::nullopt;
  // Context occupies fine positions 1..k before its [SEP].
  int context_len = 0;
  while (context_len + 1 < pair.fine_len() && pair.fine_ids[static_cast<std::size_t>(context_len + 1)] != kSepId)
    ++context_len;
  if (last + 1 > context_len) return std::nullopt;
  return SpanAnswer{first + 1, last + 1};
}

struct SpanEncodeReport {
  std::vector<TaskExample> examples;
  std::vector<int> dropped_lines;  // answers lost to truncation
};

inline SpanEncodeReport encode_span(const Tokenizer& tok, const std::vector<RawSpanExample>& data,
                                    int max_fine, int max_coarse) {
  SpanEncodeReport r;
  for (const auto& ex : data) {
    TaskExample t;
    t.pair = tok.encode(ex.context, std::string_view(ex.question), max_fine, max_coarse);
    const auto ans = char_span_to_fine(tok, ex.context, ex.char_start, ex.char_end, t.pair);
    if (!ans) {
      r.dropped_lines.push_back(ex.line);
      continue;
    }
    t.answer = *ans;
    r.examples.push_back(std::move(t));
  }
  return r;
}

}  // namespace ambert
