// bnce: preprocess, train, eval and bench subcommands.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "bnce/bnce.hpp"

namespace fs = std::filesystem;
using namespace bnce;

namespace {

struct PreprocessArgs {
  std::string input;
  std::string vocab_out;
  std::string vocab_in;
  std::string ids_out;
  std::size_t max_vocab = 80000;
};

int cmd_preprocess(const PreprocessArgs& a) {
  const auto tokens = read_token_file(a.input);
  if (tokens.empty()) throw CorpusError("preprocess: " + a.input + " contains no tokens");
  Vocabulary vocab;
  if (!a.vocab_in.empty()) {
    vocab = Vocabulary::load(a.vocab_in);
  } else {
    vocab = build_vocab(tokens, a.max_vocab);
    vocab.save(a.vocab_out);
  }
  const auto ids = vocab.encode(tokens);
  save_ids(a.ids_out, ids);
  std::size_t unk = 0;
  if (const auto u = vocab.unk_id())
    unk = static_cast<std::size_t>(std::count(ids.begin(), ids.end(), *u));
  std::cout << "vocab_size=" << vocab.size() << '\n'
            << "tokens=" << ids.size() << '\n'
            << "unk_rate=" << static_cast<double>(unk) / static_cast<double>(ids.size()) << '\n';
  return 0;
}

/// Writes every character to two stream buffers (console and metrics log).
class TeeBuf : public std::streambuf {
 public:
  TeeBuf(std::streambuf* a, std::streambuf* b) : a_(a), b_(b) {}

 protected:
  int overflow(int c) override {
    if (traits_type::eq_int_type(c, traits_type::eof())) return traits_type::not_eof(c);
    const auto ch = traits_type::to_char_type(c);
    const bool ok = !traits_type::eq_int_type(a_->sputc(ch), traits_type::eof()) &&
                    !traits_type::eq_int_type(b_->sputc(ch), traits_type::eof());
    return ok ? c : traits_type::eof();
  }
  int sync() override { return (a_->pubsync() == 0 && b_->pubsync() == 0) ? 0 : -1; }

 private:
  std::streambuf* a_;
  std::streambuf* b_;
};

struct TrainArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string resume;
};

RunConfig load_run_config(const TrainArgs& a) {
  RunConfig cfg;
  std::vector<std::string> errors;
  if (!a.config.empty()) {
    std::ifstream in(a.config);
    if (!in) throw std::runtime_error("cannot open config " + a.config);
    errors = parse_config_into(cfg, in);
  }
  for (const auto& kv : a.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      errors.push_back("--set " + kv + ": expected key=value");
      continue;
    }
    apply_setting(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)), errors);
  }
  for (auto& e : validate_config(cfg, true)) errors.push_back(std::move(e));
  if (!errors.empty()) throw ConfigError(std::move(errors));
  return cfg;
}

template <typename T>
int train_with(RunConfig cfg, const Vocabulary& vocab, const TrainArgs& a) {
  const auto train = load_ids(cfg.train_ids);
  const auto valid = cfg.valid_ids.empty() ? std::vector<TokenId>{} : load_ids(cfg.valid_ids);
  for (const auto* ids : {&train, &valid})
    check_indices(std::span<const TokenId>(*ids), cfg.model.vocab_size, "token ids");
  fs::create_directories(cfg.out_dir);
  {
    std::ofstream out(fs::path(cfg.out_dir) / "effective.cfg");
    out << serialize_config(cfg);
  }
  std::ofstream metrics(fs::path(cfg.out_dir) / "metrics.log");
  TeeBuf tee(std::cout.rdbuf(), metrics.rdbuf());
  std::ostream log(&tee);

  Trainer<T> trainer(cfg, unigram_distribution(vocab), vocab.eos_id(), train, valid, &log);
  if (!a.resume.empty()) trainer.restore(load_checkpoint<T>(a.resume));
  trainer.run();
  log << "words_per_second=" << trainer.words_per_second() << '\n';
  log.flush();
  return 0;
}

int cmd_train(const TrainArgs& a) {
  RunConfig cfg = load_run_config(a);
  const Vocabulary vocab = Vocabulary::load(cfg.vocab);
  const auto v = static_cast<Index>(vocab.size());
  if (cfg.model.vocab_size == 0) cfg.model.vocab_size = v;
  if (cfg.model.vocab_size != v)
    throw ConfigError({"vocab_size " + std::to_string(cfg.model.vocab_size) + " does not match " + cfg.vocab +
                       " (" + std::to_string(v) + " entries)"});
  return cfg.train.precision == Precision::f32 ? train_with<float>(cfg, vocab, a) : train_with<double>(cfg, vocab, a);
}

struct EvalArgs {
  std::string checkpoint;
  std::string ids;
  std::string vocab;
  std::string report;
  Index batch_size = 32;
  bool cheap = false;
};

template <typename T>
EvalReport eval_with(const EvalArgs& a) {
  const auto ck = load_checkpoint<T>(a.checkpoint);
  const auto ids = load_ids(a.ids);
  check_indices(std::span<const TokenId>(ids), ck.config.model.vocab_size, "token ids");
  EvalOptions opt;
  opt.z_constant = ck.config.train.z_constant;
  opt.batch_size = a.batch_size;
  opt.full = !a.cheap;
  TokenId eos = 0;
  if (!a.vocab.empty()) {
    const auto vocab = Vocabulary::load(a.vocab);
    eos = vocab.eos_id();
    opt.unk_id = vocab.unk_id();
  }
  return evaluate(ck.model, ids, eos, opt);
}

int cmd_eval(const EvalArgs& a) {
  const auto r = peek_precision(a.checkpoint) == Precision::f32 ? eval_with<float>(a) : eval_with<double>(a);
  write_report(std::cout, r);
  if (!a.report.empty()) {
    std::ofstream out(a.report);
    if (!out) throw std::runtime_error("cannot write " + a.report);
    write_report(out, r);
  }
  return 0;
}

struct BenchArgs {
  std::vector<std::string> heads{"softmax", "bnce"};
  BenchOptions opt;
  std::string output;
};

int cmd_bench(BenchArgs a) {
  a.opt.heads.clear();
  for (const auto& h : a.heads) a.opt.heads.push_back(parse_head_type(h));
  const auto rows = throughput_bench(a.opt, &std::cerr);
  write_bench_table(std::cout, rows);
  if (!a.output.empty()) {
    std::ofstream out(a.output);
    if (!out) throw std::runtime_error("cannot write " + a.output);
    write_bench_table(out, rows);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural language model training with batch NCE"};
  app.require_subcommand(1);

  PreprocessArgs pre;
  auto* p = app.add_subcommand("preprocess", "Build a vocabulary and encode a text corpus");
  p->add_option("--input", pre.input, "Whitespace-tokenized text, one sentence per line")->required();
  p->add_option("--ids-out", pre.ids_out, "Binary token-id stream to write")->required();
  auto* vout = p->add_option("--vocab-out", pre.vocab_out, "Vocabulary file to write");
  auto* vin = p->add_option("--vocab", pre.vocab_in, "Existing vocabulary to encode with");
  vout->excludes(vin);
  p->add_option("--max-vocab", pre.max_vocab, "Vocabulary size cap including <unk> and </s>")->capture_default_str();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model from a key = value config");
  t->add_option("--config", tr.config, "Config file");
  t->add_option("--set", tr.overrides, "Override a config field (key=value), repeatable");
  t->add_option("--resume", tr.resume, "Checkpoint to continue from");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a token-id stream");
  e->add_option("--checkpoint", ev.checkpoint)->required();
  e->add_option("--ids", ev.ids)->required();
  e->add_option("--vocab", ev.vocab, "Vocabulary, for </s> padding and OOV accounting");
  e->add_option("--report", ev.report, "Also write the report here");
  e->add_option("--batch-size", ev.batch_size)->capture_default_str();
  e->add_flag("--nce-only", ev.cheap, "Skip the full softmax pass (PPL^n only)");

  BenchArgs be;
  std::vector<Index> vocab_sizes = be.opt.vocab_sizes;
  auto* b = app.add_subcommand("bench", "Training throughput over heads and vocabulary sizes");
  b->add_option("--heads", be.heads)->delimiter(',')->capture_default_str();
  b->add_option("--vocab-sizes", vocab_sizes)->delimiter(',')->capture_default_str();
  b->add_option("--hidden", be.opt.hidden)->capture_default_str();
  b->add_option("--batch-size", be.opt.batch_size)->capture_default_str();
  b->add_option("--bptt", be.opt.bptt_window)->capture_default_str();
  b->add_option("--shared-k", be.opt.shared_k)->capture_default_str();
  b->add_option("--warmup", be.opt.warmup_steps)->capture_default_str();
  b->add_option("--window-steps", be.opt.window_steps)->capture_default_str();
  b->add_option("--windows", be.opt.windows)->capture_default_str();
  b->add_option("--output", be.output, "Also write the table here");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*p) {
      if (pre.vocab_in.empty() && pre.vocab_out.empty()) throw CLI::RequiredError("--vocab-out or --vocab");
      return cmd_preprocess(pre);
    }
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*b) {
      be.opt.vocab_sizes = vocab_sizes;
      return cmd_bench(be);
    }
  } catch (const CLI::Error& err) {
    return app.exit(err);
  } catch (const ConfigError& err) {
    std::cerr << "bnce: " << err.what() << '\n';
    return 2;
  } catch (const TrainingError& err) {
    std::cerr << "bnce: " << err.what() << '\n';
    return 3;
  } catch (const std::exception& err) {
    std::cerr << "bnce: " << err.what() << '\n';
    return 1;
  }
  return 0;
}
