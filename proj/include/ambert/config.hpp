#pragma once

#include <charconv>
#include <cstdint>
#include <functional>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "ambert/common.hpp"
#include "ambert/finetune.hpp"
#include "ambert/model.hpp"
#include "ambert/optim.hpp"
#include "ambert/pretrain.hpp"
#include "ambert/unicode.hpp"
#include "ambert/vocab.hpp"

namespace ambert {

/// Flat run configuration. Defaults are the English pre-training column
/// of the reference hyper-parameter table; `zh_defaults()` switches to the
/// Chinese column (batch 512, 1m steps).
struct RunConfig {
  // model
  std::string variant = "ambert";
  std::string lang = "en";
  int layers = 12;
  int hidden_size = 768;
  int seq_length = 512;
  int ffn_inner_hidden_size = 3072;
  int attention_heads = 12;
  int attention_head_size = 64;
  double dropout = 0.1;
  double attention_dropout = 0.1;
  bool nsp = false;
  // pre-training optimizer
  long warmup_steps = 10000;
  double peak_learning_rate = 1e-4;
  int batch_size = 1024;
  double weight_decay = 0.01;
  long max_steps = 500000;
  std::string learning_rate_decay = "linear";
  double adam_epsilon = 1e-6;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double mask_rate = 0.15;
  long log_every = 100;
  long save_every = 10000;
  // vocabularies
  int fine_vocab_size = 30000;
  std::uint64_t min_frequency = 16;
  double min_dependence = 0.4;
  int max_ngram_order = 4;
  // fine-tuning
  double ft_lambda = 1.0;
  int ft_epochs = 6;
  double ft_learning_rate = 2e-5;
  int ft_batch_size = 32;
  int ft_max_length = 512;
  double ft_warmup_proportion = 0.1;
  // shared
  std::uint64_t seed = 0;

  static RunConfig zh_defaults() {
    RunConfig c;
    c.lang = "zh";
    c.batch_size = 512;
    c.max_steps = 1000000;
    return c;
  }

  /// l=2, d=64 overrides for desk-scale runs.
  static RunConfig desk() {
    RunConfig c;
    c.layers = 2;
    c.hidden_size = 64;
    c.attention_heads = 4;
    c.attention_head_size = 16;
    c.ffn_inner_hidden_size = 256;
    c.seq_length = 128;
    c.batch_size = 8;
    c.warmup_steps = 100;
    c.max_steps = 2000;
    c.peak_learning_rate = 1e-3;
    c.fine_vocab_size = 2000;
    c.min_frequency = 2;
    c.log_every = 50;
    c.save_every = 500;
    c.ft_learning_rate = 1e-3;
    c.ft_max_length = 128;
    c.ft_batch_size = 8;
    return c;
  }

  void validate() const;
  ModelConfig model_config(int fine_vocab, int coarse_vocab) const;
  PretrainHyper pretrain_hyper() const;
  LexiconCriteria lexicon_criteria() const;
  FineTuneConfig finetune_config(Task task, int num_labels) const;

  /// (key, formatted value) in declaration order.
  std::vector<std::pair<std::string, std::string>> items() const;
  void set(const std::string& key, const std::string& value);
  bool operator==(const RunConfig&) const = default;
};

namespace detail {

template <typename V>
V parse_value(const std::string& key, const std::string& s) {
  std::istringstream is(s);
  V v{};
  if constexpr (std::is_same_v<V, bool>) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw UsageError(str_cat("config key '", key, "': expected true|false, got '", s, "'"));
  } else if constexpr (std::is_same_v<V, std::string>) {
    return s;
  } else {
    if (!(is >> v) || !is.eof())
      throw UsageError(str_cat("config key '", key, "': cannot parse '", s, "'"));
    if constexpr (std::is_unsigned_v<V>)
      if (!s.empty() && s[0] == '-')
        throw UsageError(str_cat("config key '", key, "': must be non-negative"));
    return v;
  }
}

template <typename V>
std::string format_value(const V& v) {
  if constexpr (std::is_same_v<V, bool>) return v ? "true" : "false";
  else if constexpr (std::is_same_v<V, std::string>) return v;
  else if constexpr (std::is_floating_point_v<V>) {
    char buf[40];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
  } else {
    return std::to_string(v);
  }
}

template <typename F>
void for_each_field(RunConfig& c, F&& f) {
  f("variant", c.variant);
  f("lang", c.lang);
  f("layers", c.layers);
  f("hidden_size", c.hidden_size);
  f("seq_length", c.seq_length);
  f("ffn_inner_hidden_size", c.ffn_inner_hidden_size);
  f("attention_heads", c.attention_heads);
  f("attention_head_size", c.attention_head_size);
  f("dropout", c.dropout);
  f("attention_dropout", c.attention_dropout);
  f("nsp", c.nsp);
  f("warmup_steps", c.warmup_steps);
  f("peak_learning_rate", c.peak_learning_rate);
  f("batch_size", c.batch_size);
  f("weight_decay", c.weight_decay);
  f("max_steps", c.max_steps);
  f("learning_rate_decay", c.learning_rate_decay);
  f("adam_epsilon", c.adam_epsilon);
  f("adam_beta1", c.adam_beta1);
  f("adam_beta2", c.adam_beta2);
  f("mask_rate", c.mask_rate);
  f("log_every", c.log_every);
  f("save_every", c.save_every);
  f("fine_vocab_size", c.fine_vocab_size);
  f("min_frequency", c.min_frequency);
  f("min_dependence", c.min_dependence);
  f("max_ngram_order", c.max_ngram_order);
  f("ft_lambda", c.ft_lambda);
  f("ft_epochs", c.ft_epochs);
  f("ft_learning_rate", c.ft_learning_rate);
  f("ft_batch_size", c.ft_batch_size);
  f("ft_max_length", c.ft_max_length);
  f("ft_warmup_proportion", c.ft_warmup_proportion);
  f("seed", c.seed);
}

}  // namespace detail

inline std::vector<std::pair<std::string, std::string>> RunConfig::items() const {
  std::vector<std::pair<std::string, std::string>> out;
  detail::for_each_field(const_cast<RunConfig&>(*this), [&](const char* k, const auto& v) {
    out.emplace_back(k, detail::format_value(v));
  });
  return out;
}

inline void RunConfig::set(const std::string& key, const std::string& value) {
  bool found = false;
  detail::for_each_field(*this, [&](const char* k, auto& v) {
    if (key == k) {
      v = detail::parse_value<std::decay_t<decltype(v)>>(key, value);
      found = true;
    }
  });
  if (!found) throw UsageError(str_cat("unknown config key '", key, "'"));
}

inline void RunConfig::validate() const {
  parse_variant(variant);
  parse_language(lang);
  if (learning_rate_decay != "linear" && learning_rate_decay != "constant")
    throw UsageError("learning_rate_decay must be linear|constant");
  if (mask_rate < 0.0 || mask_rate > 1.0) throw UsageError("mask_rate must lie in [0,1]");
  if (batch_size < 1 || max_steps < 1 || warmup_steps < 0)
    throw UsageError("batch_size and max_steps must be positive, warmup_steps non-negative");
  if (seq_length < 3) throw UsageError("seq_length must be >= 3");
  lexicon_criteria().validate();
}

inline ModelConfig RunConfig::model_config(int fine_vocab, int coarse_vocab) const {
  ModelConfig m;
  m.variant = parse_variant(variant);
  m.layers = layers;
  m.hidden = hidden_size;
  m.heads = attention_heads;
  m.head_size = attention_head_size;
  m.ffn_inner = ffn_inner_hidden_size;
  m.max_positions = seq_length;
  m.fine_vocab_size = fine_vocab;
  m.coarse_vocab_size = coarse_vocab;
  m.hidden_dropout = dropout;
  m.attention_dropout = attention_dropout;
  m.nsp = nsp;
  m.validate();
  return m;
}

inline PretrainHyper RunConfig::pretrain_hyper() const {
  PretrainHyper h;
  h.adam.lr = peak_learning_rate;
  h.adam.beta1 = adam_beta1;
  h.adam.beta2 = adam_beta2;
  h.adam.eps = adam_epsilon;
  h.adam.weight_decay = weight_decay;
  h.adam.warmup_steps = warmup_steps;
  h.adam.max_steps = max_steps;
  h.adam.schedule = learning_rate_decay == "constant" ? LrSchedule::kConstant : LrSchedule::kLinear;
  h.batch_size = batch_size;
  h.mask_rate = mask_rate;
  h.max_fine_len = seq_length;
  h.max_coarse_len = seq_length;
  h.nsp = nsp;
  return h;
}

inline LexiconCriteria RunConfig::lexicon_criteria() const {
  LexiconCriteria c;
  c.min_frequency = min_frequency;
  c.min_dependence = min_dependence;
  c.max_ngram_order = max_ngram_order;
  return c;
}

inline FineTuneConfig RunConfig::finetune_config(Task task, int num_labels) const {
  FineTuneConfig f;
  f.task = task;
  f.num_labels = num_labels;
  f.lambda = ft_lambda;
  f.epochs = ft_epochs;
  f.lr = ft_learning_rate;
  f.batch_size = ft_batch_size;
  f.warmup_proportion = ft_warmup_proportion;
  f.weight_decay = weight_decay;
  f.max_fine_len = ft_max_length;
  f.max_coarse_len = ft_max_length;
  f.seed = seed;
  return f;
}

/// Parses `key = value` lines over `base`. Blank lines and `#` comments are
/// skipped; unknown or repeated keys are rejected with their line number.
inline RunConfig parse_run_config(std::istream& is, const std::string& origin, RunConfig base = {}) {
  std::string line;
  int lineno = 0;
  std::map<std::string, int> seen;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    const std::string body(trim(std::string_view(line).substr(0, hash)));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos)
      throw UsageError(str_cat(origin, ":", lineno, ": expected 'key = value'"));
    const std::string key(trim(std::string_view(body).substr(0, eq)));
    const std::string value(trim(std::string_view(body).substr(eq + 1)));
    if (seen.count(key))
      throw UsageError(str_cat(origin, ":", lineno, ": key '", key, "' repeats line ", seen[key]));
    seen[key] = lineno;
    try {
      base.set(key, value);
    } catch (const UsageError& e) {
      throw UsageError(str_cat(origin, ":", lineno, ": ", e.what()));
    }
  }
  return base;
}

inline void write_run_config(std::ostream& os, const RunConfig& c) {
  for (const auto& [k, v] : c.items()) os << k << " = " << v << '\n';
}

/// Keys whose values differ between `a` and `b`.
inline std::vector<std::string> config_diff(const RunConfig& a, const RunConfig& b) {
  std::vector<std::string> out;
  const auto ia = a.items(), ib = b.items();
  for (std::size_t i = 0; i < ia.size(); ++i)
    if (ia[i].second != ib[i].second) out.push_back(ia[i].first);
  return out;
}

}  // namespace ambert
