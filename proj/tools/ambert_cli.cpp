// Command-line front end: vocabulary building, tokenization, pre-training,
// fine-tuning, evaluation, encoder selection and analysis.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ambert/ambert.hpp"

namespace fs = std::filesystem;
using namespace ambert;

namespace {

// ---------------------------------------------------------------------------
// Hashing and reproducibility stanza

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) { EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr); }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(std::string_view s) { EVP_DigestUpdate(ctx_, s.data(), s.size()); }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int n = 0;
    EVP_DigestFinal_ex(ctx_, md, &n);
    std::ostringstream os;
    for (unsigned int i = 0; i < n; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return os.str();
  }

 private:
  EVP_MD_CTX* ctx_;
};

std::string hash_files(const std::vector<std::string>& paths) {
  Sha256 h;
  for (const auto& p : paths) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw DataError(str_cat("cannot open ", p));
    h.update(p.substr(p.find_last_of('/') + 1));
    h.update(std::string_view("\0", 1));
    char buf[1 << 16];
    while (in.read(buf, sizeof buf) || in.gcount() > 0) h.update(std::string_view(buf, static_cast<std::size_t>(in.gcount())));
  }
  return h.hex();
}

struct Repro {
  std::string command;
  RunConfig config;
  std::map<std::string, std::string> options;
  std::vector<std::string> inputs;
};

std::string config_hash(const Repro& r) {
  std::ostringstream os;
  os << "command = " << r.command << '\n';
  write_run_config(os, r.config);
  for (const auto& [k, v] : r.options) os << "option." << k << " = " << v << '\n';
  Sha256 h;
  h.update(os.str());
  return h.hex();
}

void write_repro(const fs::path& dir, const Repro& r) {
  std::ofstream out(dir / "repro.txt");
  out << "command = " << r.command << '\n'
      << "version = " << kVersion << '\n'
      << "seed = " << r.config.seed << '\n'
      << "config_sha256 = " << config_hash(r) << '\n'
      << "corpus_sha256 = " << hash_files(r.inputs) << '\n';
  for (const auto& p : r.inputs) out << "input = " << p << '\n';
  if (!out) throw DataError(str_cat("cannot write ", (dir / "repro.txt").string()));
}

/// Records every option given on the command line (for the config hash).
std::map<std::string, std::string> given_options(const CLI::App* sub) {
  std::map<std::string, std::string> m;
  for (const CLI::Option* o : sub->get_options()) {
    if (o->count() == 0 || o->get_name() == "--help") continue;
    std::string v;
    for (const auto& r : o->results()) v += (v.empty() ? "" : ",") + r;
    m[o->get_name()] = v;
  }
  return m;
}

fs::path prepare_out_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir))
    throw UsageError(str_cat("cannot create output directory ", dir, ": ", ec.message()));
  return fs::path(dir);
}

fs::path parent_dir(const std::string& file) {
  fs::path p = fs::path(file).parent_path();
  return p.empty() ? fs::path(".") : p;
}

// ---------------------------------------------------------------------------
// Configuration layering: preset, then --config file, then --set, then flags.

struct ConfigFlags {
  std::string config_path;
  std::vector<std::string> sets;
  bool desk = false;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> lang;

  void add_to(CLI::App* sub) {
    sub->add_option("--config", config_path, "key = value run configuration file")->check(CLI::ExistingFile);
    sub->add_option("--set", sets, "override one config key (key=value); repeatable");
    sub->add_flag("--desk", desk, "start from the l=2, d=64 desk-scale preset");
    sub->add_option("--seed", seed, "master seed for every random draw");
  }

  RunConfig resolve(std::optional<RunConfig> base = std::nullopt) const {
    RunConfig c;
    if (base) c = *base;
    else if (desk) c = RunConfig::desk();
    else if (lang && *lang == "zh") c = RunConfig::zh_defaults();
    if (lang) c.lang = *lang;
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      c = parse_run_config(in, config_path, c);
    }
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw UsageError(str_cat("--set expects key=value, got '", s, "'"));
      c.set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
    }
    if (seed) c.seed = *seed;
    c.validate();
    return c;
  }
};

RunConfig config_from_checkpoint(const Checkpoint& ck) {
  RunConfig c;
  for (const auto& [k, v] : ck.extra)
    if (k.rfind("run.", 0) == 0) c.set(k.substr(4), v);
  return c;
}

void store_config(Checkpoint& ck, const RunConfig& c) {
  for (const auto& [k, v] : c.items()) ck.extra["run." + k] = v;
}

std::string fmt6(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", x);
  return buf;
}

void emit(const fs::path& file, const std::string& text) {
  std::ofstream out(file);
  out << text;
  if (!out) throw DataError(str_cat("cannot write ", file.string()));
  std::cout << text;
}

Model<float> model_of(const Checkpoint& ck) { return Model<float>(ck.config, ck.model); }

Tokenizer tokenizer_of(const Checkpoint& ck) { return Tokenizer(ck.fine_vocab, ck.coarse_vocab, ck.lang); }

std::vector<TaskExample> load_task_data(const Checkpoint& ck, const Tokenizer& tok, const std::string& path,
                                        int max_len) {
  if (!ck.heads) throw DataError("checkpoint has no task heads; run finetune first");
  if (ck.heads->task == Task::kClassification)
    return encode_classification(tok, read_classification_tsv(path, ck.heads->num_labels), max_len, max_len);
  auto r = encode_span(tok, read_span_tsv(path), max_len, max_len);
  for (int line : r.dropped_lines)
    std::cerr << "warning: " << path << ":" << line << ": answer truncated away, example skipped\n";
  return std::move(r.examples);
}

Metric default_metric(const Checkpoint& ck, const std::string& given) {
  if (!given.empty()) return parse_metric(given);
  return ck.heads && ck.heads->task == Task::kSpan ? Metric::kF1 : Metric::kAccuracy;
}

const char* metric_name(Metric m) {
  switch (m) {
    case Metric::kAccuracy: return "acc";
    case Metric::kExactMatch: return "em";
    case Metric::kF1: return "f1";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Subcommands

struct BuildVocabArgs {
  std::string corpus, granularity, out;
  int size = -1;
  std::optional<std::uint64_t> min_freq;
  std::optional<double> min_dependence;
  std::optional<int> max_order;
  int shards = 1;
  ConfigFlags cf;
};

int run_build_vocab(const BuildVocabArgs& a, const CLI::App* sub) {
  RunConfig c = a.cf.resolve();
  if (a.size > 0) c.fine_vocab_size = a.size;
  if (a.min_freq) c.min_frequency = *a.min_freq;
  if (a.min_dependence) c.min_dependence = *a.min_dependence;
  if (a.max_order) c.max_ngram_order = *a.max_order;
  c.validate();
  if (a.shards < 1) throw UsageError("--shards must be >= 1");
  const fs::path out_dir = prepare_out_dir(parent_dir(a.out).string());
  const Language lang = parse_language(c.lang);
  const auto docs = read_lines(a.corpus);

  Vocabulary v = [&] {
    if (a.granularity == "fine")
      return build_fine_vocab(docs, lang, fine_mode_for(lang), static_cast<std::size_t>(c.fine_vocab_size));
    const NGramTable table = count_ngrams(docs, lang, c.max_ngram_order, a.shards);
    if (table.rejected_lines > 0)
      std::cerr << "warning: " << table.rejected_lines << " lines skipped (malformed UTF-8)\n";
    return build_phrase_lexicon(table, c.lexicon_criteria());
  }();
  save_vocab(v, a.out);
  write_repro(out_dir, {"build-vocab", c, given_options(sub), {a.corpus}});
  std::cout << "granularity=" << a.granularity << " size=" << v.size() << " out=" << a.out << '\n';
  return 0;
}

struct TokenizeArgs {
  std::string fine_vocab, coarse_vocab, lang = "en", input, out;
  std::vector<std::string> texts;
  bool json = false;
};

int run_tokenize(const TokenizeArgs& a, const CLI::App* sub) {
  const Language lang = parse_language(a.lang);
  Tokenizer tok(load_vocab(a.fine_vocab, Granularity::kFine), load_vocab(a.coarse_vocab, Granularity::kCoarse), lang);
  std::vector<std::string> lines = a.texts;
  if (!a.input.empty()) {
    const auto more = read_lines(a.input, true);
    lines.insert(lines.end(), more.begin(), more.end());
  }
  if (a.texts.empty() && a.input.empty())
    for (std::string l; std::getline(std::cin, l);) lines.push_back(l);

  std::ostringstream os;
  for (const auto& line : lines) {
    const FineTokenization f = tok.fine_tokens(line);
    const auto coarse = tok.coarse_tokens(f);
    if (a.json) {
      auto fj = nlohmann::json::array(), fid = nlohmann::json::array();
      for (const auto& t : f.tokens) {
        fj.push_back(t.piece);
        fid.push_back(t.id);
      }
      auto cj = nlohmann::json::array(), cid = nlohmann::json::array(), al = nlohmann::json::array();
      for (const auto& c : coarse) {
        cj.push_back(c.surface);
        cid.push_back(c.id);
        al.push_back({c.fine.start, c.fine.end});
      }
      nlohmann::ordered_json j;
      j["text"] = line;
      j["fine"] = std::move(fj);
      j["fine_ids"] = std::move(fid);
      j["coarse"] = std::move(cj);
      j["coarse_ids"] = std::move(cid);
      j["alignment"] = std::move(al);
      os << j.dump() << '\n';
    } else {
      os << "fine\t";
      for (std::size_t i = 0; i < f.tokens.size(); ++i) os << (i ? " " : "") << f.tokens[i].piece;
      os << "\ncoarse\t";
      for (std::size_t i = 0; i < coarse.size(); ++i)
        os << (i ? " " : "") << tok.coarse().token(coarse[i].id);
      os << "\nalign\t";
      for (std::size_t i = 0; i < coarse.size(); ++i)
        os << (i ? " " : "") << coarse[i].fine.start << ':' << coarse[i].fine.end;
      os << '\n';
    }
  }
  if (a.out.empty()) {
    std::cout << os.str();
    return 0;
  }
  const fs::path dir = prepare_out_dir(parent_dir(a.out).string());
  std::ofstream(a.out) << os.str();
  RunConfig c;
  c.lang = a.lang;
  std::vector<std::string> inputs{a.fine_vocab, a.coarse_vocab};
  if (!a.input.empty()) inputs.push_back(a.input);
  write_repro(dir, {"tokenize", c, given_options(sub), inputs});
  return 0;
}

struct PretrainArgs {
  std::string corpus, fine_vocab, coarse_vocab, out, resume, variant;
  std::optional<long> steps;
  ConfigFlags cf;
};

Checkpoint snapshot(const Pretrainer<float>& tr, const Tokenizer& tok, const RunConfig& c,
                    const std::string& corpus_hash) {
  Checkpoint ck;
  ck.config = tr.model().config();
  ck.lang = tok.language();
  ck.fine_vocab = tok.fine();
  ck.coarse_vocab = tok.coarse();
  ck.model = tr.model().params();
  ck.adam = const_cast<Pretrainer<float>&>(tr).optimizer();
  ck.step = tr.step();
  ck.seed = tr.seed();
  ck.loss_history = tr.loss_history();
  store_config(ck, c);
  ck.extra["corpus_sha256"] = corpus_hash;
  return ck;
}

int run_pretrain(const PretrainArgs& a, const CLI::App* sub) {
  std::optional<Checkpoint> resume;
  RunConfig c;
  if (!a.resume.empty()) {
    resume = load_checkpoint(a.resume);
    c = a.cf.resolve(config_from_checkpoint(*resume));
  } else {
    if (a.fine_vocab.empty() || a.coarse_vocab.empty())
      throw UsageError("pretrain needs --fine-vocab and --coarse-vocab (or --resume)");
    c = a.cf.resolve();
  }
  if (!a.variant.empty()) {
    if (resume && parse_variant(a.variant) != resume->config.variant)
      throw UsageError("--variant differs from the resumed checkpoint");
    c.variant = a.variant;
  }
  if (a.steps) c.max_steps = *a.steps;
  c.validate();
  const fs::path out = prepare_out_dir(a.out);

  const Language lang = parse_language(c.lang);
  Tokenizer tok = resume ? tokenizer_of(*resume)
                         : Tokenizer(load_vocab(a.fine_vocab, Granularity::kFine),
                                     load_vocab(a.coarse_vocab, Granularity::kCoarse), lang);
  const std::string corpus_hash = hash_files({a.corpus});
  if (resume && resume->extra.count("corpus_sha256") && resume->extra.at("corpus_sha256") != corpus_hash)
    std::cerr << "warning: corpus differs from the one the checkpoint was trained on\n";
  Model<float> model = resume ? model_of(*resume)
                              : Model<float>(c.model_config(static_cast<int>(tok.fine().size()),
                                                            static_cast<int>(tok.coarse().size())),
                                             c.seed);
  Pretrainer<float> tr(std::move(model), tok, read_lines(a.corpus), c.pretrain_hyper(), c.seed);
  if (resume) {
    if (!resume->adam) throw DataError("checkpoint has no optimizer state to resume from");
    tr.restore(*resume->adam, resume->loss_history);
  }
  std::vector<std::string> inputs{a.corpus};
  if (!resume) inputs.insert(inputs.end(), {a.fine_vocab, a.coarse_vocab});
  write_repro(out, {"pretrain", c, given_options(sub), inputs});

  std::ofstream log(out / "train.log", resume ? std::ios::app : std::ios::trunc);
  while (tr.step() < c.max_steps) {
    StepReport rep;
    try {
      rep = tr.train_step();
    } catch (const NumericError&) {
      log.flush();
      throw;  // the last periodic checkpoint in `out` stays intact
    }
    if (rep.step == 1 || rep.step % c.log_every == 0 || rep.step == c.max_steps) {
      write_log_line(log, rep);
      write_log_line(std::cout, rep);
    }
    if (c.save_every > 0 && rep.step % c.save_every == 0 && rep.step != c.max_steps)
      save_checkpoint(snapshot(tr, tok, c, corpus_hash), out);
  }
  save_checkpoint(snapshot(tr, tok, c, corpus_hash), out);
  return 0;
}

struct FinetuneArgs {
  std::string checkpoint, train, dev, task = "classification", out;
  int num_labels = 2;
  std::optional<double> lambda, lr;
  std::optional<int> epochs, batch_size, max_len;
  ConfigFlags cf;
};

int run_finetune(const FinetuneArgs& a, const CLI::App* sub) {
  Checkpoint ck = load_checkpoint(a.checkpoint);
  RunConfig c = a.cf.resolve(config_from_checkpoint(ck));
  if (a.lambda) c.ft_lambda = *a.lambda;
  if (a.lr) c.ft_learning_rate = *a.lr;
  if (a.epochs) c.ft_epochs = *a.epochs;
  if (a.batch_size) c.ft_batch_size = *a.batch_size;
  if (a.max_len) c.ft_max_length = *a.max_len;
  c.validate();
  const Task task = parse_task(a.task);
  FineTuneConfig fc = c.finetune_config(task, a.num_labels);
  fc.max_fine_len = fc.max_coarse_len = std::min(fc.max_fine_len, ck.config.max_positions);
  fc.validate();
  const fs::path out = prepare_out_dir(a.out);

  Model<float> model = model_of(ck);
  const Tokenizer tok = tokenizer_of(ck);
  ck.heads = Heads<float>::create(model.config(), task, a.num_labels, c.seed);
  const auto train = load_task_data(ck, tok, a.train, fc.max_fine_len);
  std::optional<std::vector<TaskExample>> dev;
  if (!a.dev.empty()) dev = load_task_data(ck, tok, a.dev, fc.max_fine_len);
  std::vector<std::string> inputs{a.train};
  if (!a.dev.empty()) inputs.push_back(a.dev);
  write_repro(out, {"finetune", c, given_options(sub), inputs});

  const FineTuneReport rep = finetune(model, *ck.heads, train, fc);
  for (std::size_t e = 0; e < rep.epoch_loss.size(); ++e)
    std::cout << "epoch=" << e + 1 << " mean_loss=" << rep.epoch_loss[e] << '\n';
  ck.model = model.params();
  ck.adam.reset();
  store_config(ck, c);
  save_checkpoint(ck, out);
  if (dev) {
    const Metric m = default_metric(ck, "");
    const double v = evaluate(model, *ck.heads, *dev, EncoderMode::kBoth, m);
    emit(out / "dev_metrics.txt", str_cat("task=", a.task, " encoder=both metric=", metric_name(m),
                                          " value=", fmt6(v), " examples=", dev->size(), "\n"));
  }
  return 0;
}

struct EvalArgs {
  std::string checkpoint, data, encoder = "both", metric, out;
};

int run_eval(const EvalArgs& a, const CLI::App* sub) {
  const EncoderMode mode = parse_encoder_mode(a.encoder);
  check_variant_mode(checkpoint_variant(a.checkpoint), mode);
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const Metric m = default_metric(ck, a.metric);
  const fs::path out = prepare_out_dir(a.out);
  const Model<float> model = model_of(ck);
  const auto data = load_task_data(ck, tokenizer_of(ck), a.data, ck.config.max_positions);
  const double v = evaluate(model, *ck.heads, data, mode, m);
  RunConfig c = config_from_checkpoint(ck);
  write_repro(out, {"eval", c, given_options(sub), {a.data}});
  emit(out / "metrics.txt", str_cat("task=", to_string(ck.heads->task), " encoder=", to_string(mode),
                                    " metric=", metric_name(m), " value=", fmt6(v),
                                    " examples=", data.size(), "\n"));
  return 0;
}

struct SelectArgs {
  std::string checkpoint, dev, metric, out;
};

int run_select(const SelectArgs& a, const CLI::App* sub) {
  check_variant_mode(checkpoint_variant(a.checkpoint), EncoderMode::kFineOnly);
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const Metric m = default_metric(ck, a.metric);
  const fs::path out = prepare_out_dir(a.out);
  const Model<float> model = model_of(ck);
  const auto dev = load_task_data(ck, tokenizer_of(ck), a.dev, ck.config.max_positions);
  const Selection s = select_encoder(model, *ck.heads, dev, m);
  write_repro(out, {"select-encoder", config_from_checkpoint(ck), given_options(sub), {a.dev}});
  emit(out / "selection.txt",
       str_cat("selected=", to_string(s.mode), " metric=", metric_name(m), " fine=", fmt6(s.fine_score),
               " coarse=", s.coarse_evaluated ? fmt6(s.coarse_score) : std::string("n/a"), "\n"));
  return 0;
}

struct AnalyzeArgs {
  std::string checkpoint, out, text, text_b, stream = "both", data, sample;
  std::string fine_vocab, coarse_vocab, lang = "en";
  int layer = 0, head = 0;
};

int run_attention(const AnalyzeArgs& a, const CLI::App* sub) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const fs::path out = prepare_out_dir(a.out);
  const Model<float> model = model_of(ck);
  const Tokenizer tok = tokenizer_of(ck);
  const TokenSeqPair pair =
      a.text_b.empty() ? tok.encode(a.text, std::nullopt, ck.config.max_positions, ck.config.max_positions)
                       : tok.encode(a.text, std::string_view(a.text_b), ck.config.max_positions,
                                    ck.config.max_positions);
  std::vector<std::pair<std::string, Stream>> todo;
  if (ck.config.variant == Variant::kHybrid) {
    todo.push_back({"joint", Stream::kFine});
  } else {
    if (a.stream != "fine" && a.stream != "coarse" && a.stream != "both")
      throw UsageError("--stream must be fine|coarse|both");
    if (a.stream != "coarse") todo.push_back({"fine", Stream::kFine});
    if (a.stream != "fine" && ck.config.has_coarse()) todo.push_back({"coarse", Stream::kCoarse});
  }
  for (const auto& [name, s] : todo) {
    const AttentionMap m = attention_map(model, tok, pair, a.layer, a.head, s);
    const fs::path file = out / str_cat("attention_", name, "_l", a.layer, "_h", a.head, ".tsv");
    std::ofstream f(file);
    write_attention_grid(f, m);
    std::cout << file.string() << '\n';
  }
  write_repro(out, {"analyze attention", config_from_checkpoint(ck), given_options(sub), {a.checkpoint + "/" + kBlobFile}});
  return 0;
}

int run_distance(const AnalyzeArgs& a, const CLI::App* sub) {
  if (!is_dual_stream(checkpoint_variant(a.checkpoint)))
    throw DataError("distance analysis needs a dual-encoder (ambert or combo) checkpoint");
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const fs::path out = prepare_out_dir(a.out);
  const Tokenizer tok = tokenizer_of(ck);
  std::vector<TokenSeqPair> pairs;
  for (const auto& line : read_lines(a.data)) {
    const auto f = split(line, '\t');
    const int n = ck.config.max_positions;
    pairs.push_back(f.size() >= 2 ? tok.encode(f[0], std::string_view(f[1]), n, n)
                                  : tok.encode(f[0], std::nullopt, n, n));
  }
  const ClsDistance d = cls_distance(model_of(ck), pairs);
  write_repro(out, {"analyze distance", config_from_checkpoint(ck), given_options(sub), {a.data}});
  emit(out / "distance.txt", str_cat("examples=", d.examples, " cd_mean=", fmt6(d.cosine_distance_mean),
                                     " ed_mean=", fmt6(d.normalized_euclidean_mean), "\n"));
  return 0;
}

int run_rate(const AnalyzeArgs& a, const CLI::App* sub) {
  std::optional<Tokenizer> tok;
  std::vector<std::string> inputs{a.sample};
  if (!a.checkpoint.empty()) {
    tok = tokenizer_of(load_checkpoint(a.checkpoint));
  } else {
    if (a.fine_vocab.empty() || a.coarse_vocab.empty())
      throw UsageError("analyze rate needs --checkpoint or both --fine-vocab and --coarse-vocab");
    tok.emplace(load_vocab(a.fine_vocab, Granularity::kFine), load_vocab(a.coarse_vocab, Granularity::kCoarse),
                parse_language(a.lang));
    inputs.insert(inputs.end(), {a.fine_vocab, a.coarse_vocab});
  }
  const fs::path out = prepare_out_dir(a.out);
  const CoarseRate r = coarse_rate(read_lines(a.sample), *tok);
  RunConfig c;
  c.lang = to_string(tok->language());
  write_repro(out, {"analyze rate", c, given_options(sub), inputs});
  emit(out / "rate.txt", str_cat("absent=", r.absent, " total=", r.total, " rate=", fmt6(r.rate()), "\n"));
  return 0;
}

std::string one_line(std::string s) {
  for (char& ch : s)
    if (ch == '\n' || ch == '\r') ch = ' ';
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-grained pre-training toolkit"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  BuildVocabArgs bv;
  auto* s_bv = app.add_subcommand("build-vocab", "build a fine vocabulary or coarse phrase lexicon");
  s_bv->add_option("--corpus", bv.corpus, "one document per line")->required()->check(CLI::ExistingFile);
  s_bv->add_option("--granularity", bv.granularity)->required()->check(CLI::IsMember({"fine", "coarse"}));
  s_bv->add_option("--out", bv.out, "output vocabulary TSV")->required();
  s_bv->add_option("--lang", bv.cf.lang)->check(CLI::IsMember({"en", "zh"}));
  s_bv->add_option("--size", bv.size, "fine vocabulary size including specials");
  s_bv->add_option("--min-freq", bv.min_freq);
  s_bv->add_option("--min-dependence", bv.min_dependence);
  s_bv->add_option("--max-order", bv.max_order);
  s_bv->add_option("--shards", bv.shards, "parallel n-gram counting shards");
  bv.cf.add_to(s_bv);

  TokenizeArgs tk;
  auto* s_tk = app.add_subcommand("tokenize", "print fine/coarse tokens and their alignment");
  s_tk->add_option("--fine-vocab", tk.fine_vocab)->required()->check(CLI::ExistingFile);
  s_tk->add_option("--coarse-vocab", tk.coarse_vocab)->required()->check(CLI::ExistingFile);
  s_tk->add_option("--lang", tk.lang)->check(CLI::IsMember({"en", "zh"}));
  s_tk->add_option("--input", tk.input, "file of texts, one per line")->check(CLI::ExistingFile);
  s_tk->add_option("--text", tk.texts, "text to tokenize; repeatable");
  s_tk->add_option("--out", tk.out, "write here instead of stdout");
  s_tk->add_flag("--json", tk.json, "one JSON object per input line");

  PretrainArgs pt;
  auto* s_pt = app.add_subcommand("pretrain", "multi-grained masked LM pre-training");
  s_pt->add_option("--corpus", pt.corpus)->required()->check(CLI::ExistingFile);
  s_pt->add_option("--fine-vocab", pt.fine_vocab)->check(CLI::ExistingFile);
  s_pt->add_option("--coarse-vocab", pt.coarse_vocab)->check(CLI::ExistingFile);
  s_pt->add_option("--out", pt.out, "checkpoint directory")->required();
  s_pt->add_option("--variant", pt.variant)->check(CLI::IsMember({"ambert", "combo", "hybrid", "bert"}));
  s_pt->add_option("--lang", pt.cf.lang)->check(CLI::IsMember({"en", "zh"}));
  s_pt->add_option("--steps", pt.steps, "max_steps override");
  s_pt->add_option("--resume", pt.resume, "checkpoint directory to continue from")->check(CLI::ExistingDirectory);
  pt.cf.add_to(s_pt);

  FinetuneArgs ft;
  auto* s_ft = app.add_subcommand("finetune", "train task heads and the encoder on labelled data");
  s_ft->add_option("--checkpoint", ft.checkpoint)->required()->check(CLI::ExistingDirectory);
  s_ft->add_option("--train", ft.train)->required()->check(CLI::ExistingFile);
  s_ft->add_option("--dev", ft.dev)->check(CLI::ExistingFile);
  s_ft->add_option("--task", ft.task)->check(CLI::IsMember({"classification", "span"}));
  s_ft->add_option("--num-labels", ft.num_labels);
  s_ft->add_option("--out", ft.out)->required();
  s_ft->add_option("--lambda", ft.lambda, "agreement regularization weight");
  s_ft->add_option("--lr", ft.lr);
  s_ft->add_option("--epochs", ft.epochs);
  s_ft->add_option("--batch-size", ft.batch_size);
  s_ft->add_option("--max-len", ft.max_len);
  ft.cf.add_to(s_ft);

  EvalArgs ev;
  auto* s_ev = app.add_subcommand("eval", "score a fine-tuned checkpoint");
  s_ev->add_option("--checkpoint", ev.checkpoint)->required()->check(CLI::ExistingDirectory);
  s_ev->add_option("--data", ev.data)->required()->check(CLI::ExistingFile);
  s_ev->add_option("--encoder", ev.encoder)->check(CLI::IsMember({"both", "fine", "coarse"}));
  s_ev->add_option("--metric", ev.metric)->check(CLI::IsMember({"acc", "em", "f1"}));
  s_ev->add_option("--out", ev.out)->required();

  SelectArgs se;
  auto* s_se = app.add_subcommand("select-encoder", "pick the single encoder to keep using dev data");
  s_se->add_option("--checkpoint", se.checkpoint)->required()->check(CLI::ExistingDirectory);
  s_se->add_option("--dev", se.dev)->required()->check(CLI::ExistingFile);
  s_se->add_option("--metric", se.metric)->check(CLI::IsMember({"acc", "em", "f1"}));
  s_se->add_option("--out", se.out)->required();

  AnalyzeArgs an;
  auto* s_an = app.add_subcommand("analyze", "attention maps, [CLS] distances, coarse-token rate");
  s_an->require_subcommand(1);
  auto* s_att = s_an->add_subcommand("attention", "export attention grids");
  s_att->add_option("--checkpoint", an.checkpoint)->required()->check(CLI::ExistingDirectory);
  s_att->add_option("--text", an.text)->required();
  s_att->add_option("--text-b", an.text_b);
  s_att->add_option("--layer", an.layer);
  s_att->add_option("--head", an.head);
  s_att->add_option("--stream", an.stream)->check(CLI::IsMember({"fine", "coarse", "both"}));
  s_att->add_option("--out", an.out)->required();
  auto* s_dist = s_an->add_subcommand("distance", "fine vs coarse [CLS] distances");
  s_dist->add_option("--checkpoint", an.checkpoint)->required()->check(CLI::ExistingDirectory);
  s_dist->add_option("--data", an.data, "texts, optionally tab-separated pairs")->required()->check(CLI::ExistingFile);
  s_dist->add_option("--out", an.out)->required();
  auto* s_rate = s_an->add_subcommand("rate", "share of coarse tokens missing from the fine vocabulary");
  s_rate->add_option("--sample", an.sample)->required()->check(CLI::ExistingFile);
  s_rate->add_option("--checkpoint", an.checkpoint)->check(CLI::ExistingDirectory);
  s_rate->add_option("--fine-vocab", an.fine_vocab)->check(CLI::ExistingFile);
  s_rate->add_option("--coarse-vocab", an.coarse_vocab)->check(CLI::ExistingFile);
  s_rate->add_option("--lang", an.lang)->check(CLI::IsMember({"en", "zh"}));
  s_rate->add_option("--out", an.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error[usage]: " << one_line(e.what()) << '\n';
    return 1;
  }

  try {
    if (*s_bv) return run_build_vocab(bv, s_bv);
    if (*s_tk) return run_tokenize(tk, s_tk);
    if (*s_pt) return run_pretrain(pt, s_pt);
    if (*s_ft) return run_finetune(ft, s_ft);
    if (*s_ev) return run_eval(ev, s_ev);
    if (*s_se) return run_select(se, s_se);
    if (*s_att) return run_attention(an, s_att);
    if (*s_dist) return run_distance(an, s_dist);
    if (*s_rate) return run_rate(an, s_rate);
  } catch (const UsageError& e) {
    std::cerr << "error[usage]: " << one_line(e.what()) << '\n';
    return 1;
  } catch (const DataError& e) {
    std::cerr << "error[data]: " << one_line(e.what()) << '\n';
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "error[numeric]: " << one_line(e.what()) << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error[data]: " << one_line(e.what()) << '\n';
    return 2;
  }
  return 1;
}
