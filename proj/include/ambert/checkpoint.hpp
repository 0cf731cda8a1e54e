#pragma once

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ambert/common.hpp"
#include "ambert/finetune.hpp"
#include "ambert/model.hpp"
#include "ambert/optim.hpp"
#include "ambert/params.hpp"
#include "ambert/unicode.hpp"
#include "ambert/vocab.hpp"

namespace ambert {

inline constexpr const char* kCheckpointFormat = "ambert-checkpoint 1";
inline constexpr const char* kManifestFile = "manifest.txt";
inline constexpr const char* kBlobFile = "params.bin";
inline constexpr const char* kFineVocabFile = "fine_vocab.tsv";
inline constexpr const char* kCoarseVocabFile = "coarse_vocab.tsv";

/// Everything needed to resume pre-training or to serve a fine-tuned model.
/// Tensors are stored as f32; training runs in float so round-trips are exact.
struct Checkpoint {
  ModelConfig config;
  Language lang = Language::kEnglish;
  Vocabulary fine_vocab{Granularity::kFine, {}};
  Vocabulary coarse_vocab{Granularity::kCoarse, {}};
  ParamStore<float> model;
  std::optional<AdamState<float>> adam;
  std::optional<Heads<float>> heads;
  long step = 0;
  std::uint64_t seed = 0;
  std::vector<double> loss_history;
  std::map<std::string, std::string> extra;  // free-form run metadata (hyper.*, data hashes)
};

/// Shortest decimal that reads back to the identical double.
inline std::string exact_double(double x) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

namespace detail {

inline std::string join_shape(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

inline Shape parse_shape(const std::string& s, const std::string& where) {
  Shape out;
  for (auto part : split(s, 'x')) {
    try {
      std::size_t pos = 0;
      const unsigned long long v = std::stoull(std::string(part), &pos);
      if (pos != part.size() || v == 0) throw std::invalid_argument("");
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw DataError(str_cat(where, ": bad shape '", s, "'"));
    }
  }
  if (out.empty()) throw DataError(str_cat(where, ": empty shape"));
  return out;
}

inline void put_f32(std::string& blob, float f) {
  std::uint32_t u = std::bit_cast<std::uint32_t>(f);
  if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
  char b[4];
  std::memcpy(b, &u, 4);
  blob.append(b, 4);
}

inline float get_f32(const char* p) {
  std::uint32_t u;
  std::memcpy(&u, p, 4);
  if constexpr (std::endian::native == std::endian::big) u = __builtin_bswap32(u);
  return std::bit_cast<float>(u);
}

struct TensorLine {
  std::string store, name;
  Shape shape;
  std::size_t offset = 0;
  bool decay = true;
  std::string shared_key;
  std::vector<std::string> aliases;
};

inline void emit_store(std::ostream& man, std::string& blob, const std::string& tag,
                       const ParamStore<float>& ps) {
  for (const auto& g : ps.groups()) {
    const Param<float>& p = ps.at(g.storage);
    std::string aliases;
    for (std::size_t i = 1; i < g.names.size(); ++i) aliases += (i > 1 ? "," : "") + g.names[i];
    man << "tensor " << tag << ' ' << g.names.front() << ' ' << join_shape(p.value.shape())
        << " f32 " << blob.size() << ' ' << (p.decay ? 1 : 0) << ' '
        << (p.shared_key.empty() ? "-" : p.shared_key) << ' ' << (aliases.empty() ? "-" : aliases)
        << '\n';
    for (float f : p.value.vec()) put_f32(blob, f);
  }
}

/// Adam moments are indexed like the model store's storages; they are
/// written as a pseudo-store named by each storage's primary name.
inline ParamStore<float> moments_as_store(const ParamStore<float>& model,
                                          const std::vector<Tensor<float>>& mom) {
  ParamStore<float> out;
  const auto groups = model.groups();
  for (std::size_t s = 0; s < groups.size(); ++s) {
    out.add(groups[s].names.front(), mom[s].shape(), false);
    out.at(s).value = mom[s];
  }
  return out;
}

}  // namespace detail

inline void write_manifest_meta(std::ostream& man, const std::map<std::string, std::string>& meta) {
  for (const auto& [k, v] : meta) man << "meta " << k << ' ' << v << '\n';
}

inline std::map<std::string, std::string> config_meta(const ModelConfig& c) {
  return {
      {"config.variant", to_string(c.variant)},
      {"config.layers", std::to_string(c.layers)},
      {"config.hidden", std::to_string(c.hidden)},
      {"config.heads", std::to_string(c.heads)},
      {"config.head_size", std::to_string(c.head_size)},
      {"config.ffn_inner", std::to_string(c.ffn_inner)},
      {"config.max_positions", std::to_string(c.max_positions)},
      {"config.fine_vocab_size", std::to_string(c.fine_vocab_size)},
      {"config.coarse_vocab_size", std::to_string(c.coarse_vocab_size)},
      {"config.hidden_dropout", exact_double(c.hidden_dropout)},
      {"config.attention_dropout", exact_double(c.attention_dropout)},
      {"config.type_vocab", std::to_string(c.type_vocab)},
      {"config.granularity_embedding", c.granularity_embedding ? "1" : "0"},
      {"config.nsp", c.nsp ? "1" : "0"},
  };
}

/// Writes `dir/manifest.txt`, `dir/params.bin` and both vocabularies.
/// The manifest is written last so a partially written directory never
/// looks complete.
inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ostringstream man;
  man << kCheckpointFormat << '\n' << "version " << kVersion << '\n';
  std::map<std::string, std::string> meta = config_meta(ck.config);
  meta["variant"] = to_string(ck.config.variant);
  meta["lang"] = to_string(ck.lang);
  meta["step"] = std::to_string(ck.step);
  meta["rng.seed"] = std::to_string(ck.seed);
  meta["rng.step"] = std::to_string(ck.step);
  meta["threads"] = "1";
  meta["optimizer"] = ck.adam ? "adam" : "none";
  if (ck.adam) meta["optimizer.step"] = std::to_string(ck.adam->step);
  std::string hist;
  for (std::size_t i = 0; i < ck.loss_history.size(); ++i)
    hist += (i ? "," : "") + exact_double(ck.loss_history[i]);
  meta["loss_history"] = hist.empty() ? "-" : hist;
  if (ck.heads) {
    meta["task"] = to_string(ck.heads->task);
    meta["num_labels"] = std::to_string(ck.heads->num_labels);
  }
  for (const auto& [k, v] : ck.extra) meta["extra." + k] = v;
  write_manifest_meta(man, meta);

  std::string blob;
  detail::emit_store(man, blob, "model", ck.model);
  if (ck.heads) detail::emit_store(man, blob, "heads", ck.heads->store);
  if (ck.adam) {
    if (!ck.adam->ready(ck.model))
      throw std::logic_error("optimizer state does not match the model store");
    detail::emit_store(man, blob, "adam.m", detail::moments_as_store(ck.model, ck.adam->m));
    detail::emit_store(man, blob, "adam.v", detail::moments_as_store(ck.model, ck.adam->v));
  }
  man << "end " << blob.size() << '\n';

  save_vocab(ck.fine_vocab, (dir / kFineVocabFile).string());
  save_vocab(ck.coarse_vocab, (dir / kCoarseVocabFile).string());
  {
    std::ofstream b(dir / kBlobFile, std::ios::binary);
    b.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!b) throw DataError(str_cat("cannot write ", (dir / kBlobFile).string()));
  }
  std::ofstream m(dir / kManifestFile, std::ios::binary);
  m << man.str();
  if (!m) throw DataError(str_cat("cannot write ", (dir / kManifestFile).string()));
}

namespace detail {

inline const std::string& need(const std::map<std::string, std::string>& meta, const std::string& k,
                               const std::string& where) {
  auto it = meta.find(k);
  if (it == meta.end()) throw DataError(str_cat(where, ": manifest lacks '", k, "'"));
  return it->second;
}

inline long long to_ll(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw DataError(str_cat("manifest: bad integer for ", what, ": '", s, "'"));
  }
}

inline double to_double(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("");
    return v;
  } catch (const std::exception&) {
    throw DataError(str_cat("manifest: bad number for ", what, ": '", s, "'"));
  }
}

inline ParamStore<float> build_store(const std::vector<TensorLine>& lines, const std::string& tag,
                                     const std::string& blob, const std::string& where) {
  ParamStore<float> ps;
  for (const auto& t : lines) {
    if (t.store != tag) continue;
    std::size_t n = 1;
    for (auto d : t.shape) n *= d;
    if (t.offset % 4 != 0 || t.offset + 4 * n > blob.size())
      throw DataError(str_cat(where, ": tensor ", t.name, " lies outside ", kBlobFile));
    const std::size_t s = ps.add(t.name, t.shape, t.decay);
    auto& v = ps.at(s).value;
    for (std::size_t i = 0; i < n; ++i) v[i] = get_f32(blob.data() + t.offset + 4 * i);
    for (const auto& a : t.aliases) ps.alias(a, t.name, t.shared_key);
    if (!t.shared_key.empty()) ps.at(s).shared_key = t.shared_key;
  }
  return ps;
}

}  // namespace detail

inline ModelConfig config_from_meta(const std::map<std::string, std::string>& meta,
                                    const std::string& where) {
  using detail::need;
  using detail::to_ll;
  ModelConfig c;
  c.variant = parse_variant(need(meta, "config.variant", where));
  c.layers = static_cast<int>(to_ll(need(meta, "config.layers", where), "config.layers"));
  c.hidden = static_cast<int>(to_ll(need(meta, "config.hidden", where), "config.hidden"));
  c.heads = static_cast<int>(to_ll(need(meta, "config.heads", where), "config.heads"));
  c.head_size = static_cast<int>(to_ll(need(meta, "config.head_size", where), "config.head_size"));
  c.ffn_inner = static_cast<int>(to_ll(need(meta, "config.ffn_inner", where), "config.ffn_inner"));
  c.max_positions =
      static_cast<int>(to_ll(need(meta, "config.max_positions", where), "config.max_positions"));
  c.fine_vocab_size =
      static_cast<int>(to_ll(need(meta, "config.fine_vocab_size", where), "config.fine_vocab_size"));
  c.coarse_vocab_size = static_cast<int>(
      to_ll(need(meta, "config.coarse_vocab_size", where), "config.coarse_vocab_size"));
  c.hidden_dropout = detail::to_double(need(meta, "config.hidden_dropout", where), "hidden_dropout");
  c.attention_dropout =
      detail::to_double(need(meta, "config.attention_dropout", where), "attention_dropout");
  c.type_vocab = static_cast<int>(to_ll(need(meta, "config.type_vocab", where), "config.type_vocab"));
  c.granularity_embedding = need(meta, "config.granularity_embedding", where) == "1";
  c.nsp = need(meta, "config.nsp", where) == "1";
  try {
    c.validate();
  } catch (const UsageError& e) {
    throw DataError(str_cat(where, ": ", e.what()));
  }
  return c;
}

namespace detail {

inline Checkpoint load_checkpoint_impl(const std::filesystem::path& dir) {
  const std::string where = (dir / kManifestFile).string();
  std::ifstream in(dir / kManifestFile, std::ios::binary);
  if (!in) throw DataError(str_cat("cannot open checkpoint manifest ", where));
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointFormat)
    throw DataError(str_cat(where, ":1: not a checkpoint manifest (expected '", kCheckpointFormat, "')"));
  std::map<std::string, std::string> meta;
  std::vector<detail::TensorLine> tensors;
  std::optional<std::size_t> end_size;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string here = str_cat(where, ":", lineno);
    if (line.rfind("version ", 0) == 0) continue;
    if (line.rfind("meta ", 0) == 0) {
      const auto sp = line.find(' ', 5);
      if (sp == std::string::npos) throw DataError(str_cat(here, ": malformed meta line"));
      meta[line.substr(5, sp - 5)] = line.substr(sp + 1);
    } else if (line.rfind("tensor ", 0) == 0) {
      std::istringstream ls(line.substr(7));
      detail::TensorLine t;
      std::string shape, dtype, offset, decay, key, aliases;
      if (!(ls >> t.store >> t.name >> shape >> dtype >> offset >> decay >> key >> aliases))
        throw DataError(str_cat(here, ": malformed tensor line"));
      if (dtype != "f32") throw DataError(str_cat(here, ": unsupported dtype ", dtype));
      t.shape = detail::parse_shape(shape, here);
      t.offset = static_cast<std::size_t>(detail::to_ll(offset, "offset"));
      t.decay = decay == "1";
      if (key != "-") t.shared_key = key;
      if (aliases != "-")
        for (auto a : split(aliases, ',')) t.aliases.emplace_back(a);
      tensors.push_back(std::move(t));
    } else if (line.rfind("end ", 0) == 0) {
      end_size = static_cast<std::size_t>(detail::to_ll(line.substr(4), "end"));
    } else if (!line.empty()) {
      throw DataError(str_cat(here, ": unrecognized manifest line"));
    }
  }
  if (!end_size) throw DataError(str_cat(where, ": truncated manifest (no end line)"));

  std::ifstream bin(dir / kBlobFile, std::ios::binary);
  if (!bin) throw DataError(str_cat("cannot open ", (dir / kBlobFile).string()));
  std::string blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  if (blob.size() != *end_size)
    throw DataError(str_cat((dir / kBlobFile).string(), ": size ", blob.size(), " != manifest ", *end_size));

  Checkpoint ck;
  ck.config = config_from_meta(meta, where);
  if (parse_variant(detail::need(meta, "variant", where)) != ck.config.variant)
    throw DataError(str_cat(where, ": variant tag disagrees with config.variant"));
  ck.lang = parse_language(detail::need(meta, "lang", where));
  ck.step = detail::to_ll(detail::need(meta, "step", where), "step");
  ck.seed = static_cast<std::uint64_t>(std::stoull(detail::need(meta, "rng.seed", where)));
  const std::string& hist = detail::need(meta, "loss_history", where);
  if (hist != "-")
    for (auto h : split(hist, ',')) ck.loss_history.push_back(detail::to_double(std::string(h), "loss_history"));
  for (const auto& [k, v] : meta)
    if (k.rfind("extra.", 0) == 0) ck.extra[k.substr(6)] = v;

  ck.model = detail::build_store(tensors, "model", blob, where);
  Model<float> check(ck.config, ck.model);  // validates layout and sharing
  if (detail::need(meta, "optimizer", where) == "adam") {
    AdamState<float> a;
    a.step = detail::to_ll(detail::need(meta, "optimizer.step", where), "optimizer.step");
    const auto m = detail::build_store(tensors, "adam.m", blob, where);
    const auto v = detail::build_store(tensors, "adam.v", blob, where);
    if (m.storage_count() != ck.model.storage_count() || v.storage_count() != ck.model.storage_count())
      throw DataError(str_cat(where, ": optimizer state does not cover every tensor"));
    for (std::size_t s = 0; s < m.storage_count(); ++s) {
      a.m.push_back(m.at(s).value);
      a.v.push_back(v.at(s).value);
    }
    ck.adam = std::move(a);
  }
  if (meta.count("task")) {
    Heads<float> h;
    h.task = parse_task(meta.at("task"));
    h.num_labels = static_cast<int>(detail::to_ll(meta.at("num_labels"), "num_labels"));
    h.dual = is_dual_stream(ck.config.variant);
    h.store = detail::build_store(tensors, "heads", blob, where);
    const Heads<float> fresh = Heads<float>::create(ck.config, h.task, h.num_labels, 0);
    for (const auto& n : fresh.store.names())
      if (!h.store.has(n) || h.store.get(n).value.shape() != fresh.store.get(n).value.shape())
        throw DataError(str_cat(where, ": head tensor ", n, " missing or misshapen"));
    ck.heads = std::move(h);
  }
  ck.fine_vocab = load_vocab((dir / kFineVocabFile).string(), Granularity::kFine);
  ck.coarse_vocab = load_vocab((dir / kCoarseVocabFile).string(), Granularity::kCoarse);
  if (static_cast<int>(ck.fine_vocab.size()) != ck.config.fine_vocab_size ||
      (ck.config.has_coarse() && static_cast<int>(ck.coarse_vocab.size()) != ck.config.coarse_vocab_size))
    throw DataError(str_cat(where, ": vocabulary sizes disagree with the model config"));
  return ck;
}

}  // namespace detail

/// Malformed tags inside a checkpoint are data errors, not usage errors.
inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  try {
    return detail::load_checkpoint_impl(dir);
  } catch (const UsageError& e) {
    throw DataError(str_cat((dir / kManifestFile).string(), ": ", e.what()));
  }
}

/// Reads only the manifest's variant tag.
inline Variant checkpoint_variant(const std::filesystem::path& dir) {
  std::ifstream in(dir / kManifestFile);
  if (!in) throw DataError(str_cat("cannot open checkpoint manifest ", (dir / kManifestFile).string()));
  std::string line;
  while (std::getline(in, line))
    if (line.rfind("meta variant ", 0) == 0) {
      try {
        return parse_variant(line.substr(13));
      } catch (const UsageError& e) {
        throw DataError(e.what());
      }
    }
  throw DataError(str_cat((dir / kManifestFile).string(), ": manifest lacks 'variant'"));
}

}  // namespace ambert
