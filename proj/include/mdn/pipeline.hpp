#pragma once

// Text-level plumbing shared by the command-line tool: line I/O, BPE model
// files, parallel corpus encoding, translation of raw text and the
// train-and-measure loop behind ablation tables.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mdn/bench.hpp"
#include "mdn/bpe.hpp"
#include "mdn/checkpoint.hpp"
#include "mdn/distill.hpp"
#include "mdn/infer.hpp"
#include "mdn/train.hpp"

namespace mdn::pipeline {

// "-" reads standard input.
inline std::vector<std::string> read_lines(const std::string& path) {
  std::vector<std::string> out;
  auto slurp = [&](std::istream& is) {
    for (std::string line; std::getline(is, line);) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      out.push_back(std::move(line));
    }
  };
  if (path == "-") {
    slurp(std::cin);
  } else {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open " + path);
    slurp(f);
  }
  return out;
}

// "-" writes standard output.
inline void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ostringstream os;
  for (const auto& l : lines) os << l << '\n';
  if (path == "-") {
    std::cout << os.str() << std::flush;
    return;
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + path);
  f << os.str();
  if (!f) throw DataError("write failed: " + path);
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + path);
  f << text;
  if (!f) throw DataError("write failed: " + path);
}

// A BPE model lives in PREFIX.codes (merge rules) and PREFIX.vocab.
inline std::string codes_path(const std::string& prefix) { return prefix + ".codes"; }
inline std::string vocab_path(const std::string& prefix) { return prefix + ".vocab"; }

inline void save_bpe(const std::string& prefix, const bpe::MergeTable& t) {
  std::ostringstream codes, vocab;
  bpe::write_merges(codes, t);
  bpe::write_vocab(vocab, t);
  write_text(codes_path(prefix), codes.str());
  write_text(vocab_path(prefix), vocab.str());
}

inline bpe::MergeTable load_bpe(const std::string& prefix) {
  return bpe::load_table(codes_path(prefix), vocab_path(prefix));
}

inline std::vector<std::vector<std::string>> tokenize(const std::vector<std::string>& lines) {
  std::vector<std::vector<std::string>> out;
  out.reserve(lines.size());
  for (const auto& l : lines) out.push_back(bpe::simple_tokenize(l));
  return out;
}

inline bpe::MergeTable learn_from_lines(const std::vector<std::string>& lines, std::size_t merges) {
  return bpe::learn_bpe(bpe::count_words(tokenize(lines)), merges);
}

inline std::vector<int> encode_line(const std::string& line, const bpe::MergeTable& t) {
  return bpe::encode_words(bpe::simple_tokenize(line), t).ids;
}

struct ParallelCorpus {
  std::vector<Example> examples;
  std::vector<std::size_t> kept;  // line index of each example
  std::size_t dropped = 0;
};

// Pairs with an empty side or a side longer than max_units subwords are dropped.
inline ParallelCorpus encode_parallel(const std::vector<std::string>& src, const std::vector<std::string>& tgt,
                                      const bpe::MergeTable& st, const bpe::MergeTable& tt,
                                      std::size_t max_units = bpe::kDefaultMaxUnits) {
  if (src.size() != tgt.size()) {
    throw DataError("parallel corpus: " + std::to_string(src.size()) + " source lines vs " +
                    std::to_string(tgt.size()) + " target lines");
  }
  ParallelCorpus c;
  for (std::size_t i = 0; i < src.size(); ++i) {
    Example e{encode_line(src[i], st), encode_line(tgt[i], tt)};
    if (e.src.empty() || e.tgt.empty() || e.src.size() > max_units || e.tgt.size() > max_units) {
      ++c.dropped;
      continue;
    }
    c.examples.push_back(std::move(e));
    c.kept.push_back(i);
  }
  return c;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline nlohmann::json vocab_meta(const bpe::MergeTable& src, const bpe::MergeTable& tgt) {
  return {{"src_vocab_checksum", hex64(bpe::vocab_checksum(src))},
          {"tgt_vocab_checksum", hex64(bpe::vocab_checksum(tgt))}};
}

// Throws when `meta` records vocabularies other than src/tgt.
inline void check_vocab_meta(const nlohmann::json& meta, const bpe::MergeTable& src, const bpe::MergeTable& tgt,
                             const std::string& what) {
  const auto want = vocab_meta(src, tgt);
  for (const char* key : {"src_vocab_checksum", "tgt_vocab_checksum"}) {
    if (!meta.contains(key)) continue;
    if (meta.at(key) != want.at(key)) {
      throw DataError(what + ": " + key + " " + meta.at(key).get<std::string>() + " does not match " +
                      want.at(key).get<std::string>());
    }
  }
}

// Two checkpoints' metadata must agree on any vocabulary both record.
inline void check_same_vocab(const nlohmann::json& a, const nlohmann::json& b, const std::string& what) {
  for (const char* key : {"src_vocab_checksum", "tgt_vocab_checksum"}) {
    if (a.contains(key) && b.contains(key) && a.at(key) != b.at(key)) {
      throw DataError(what + ": " + key + " differs");
    }
  }
}

inline std::vector<std::string> translate_lines(const Transformer<float>& model, const std::vector<std::string>& lines,
                                                const bpe::MergeTable& src, const bpe::MergeTable& tgt,
                                                const TranslateOptions& opt) {
  std::vector<std::vector<int>> ids;
  ids.reserve(lines.size());
  for (const auto& l : lines) ids.push_back(encode_line(l, src));
  const auto hyps = translate_batch(model, ids, opt);
  std::vector<std::string> out;
  out.reserve(hyps.size());
  for (const auto& h : hyps) out.push_back(bpe::decode_ids(h.tokens, tgt));
  return out;
}

// BLEU over token ids, each id treated as one word.
inline double bleu_ids(const std::vector<std::vector<int>>& hyps, const std::vector<std::vector<int>>& refs) {
  auto words = [](const std::vector<std::vector<int>>& v) {
    std::vector<std::vector<std::string>> out;
    for (const auto& s : v) {
      std::vector<std::string> w;
      for (int t : s) w.push_back(std::to_string(t));
      out.push_back(std::move(w));
    }
    return out;
  };
  return bleu_from_stats(bleu_stats(words(hyps), words(refs)));
}

template <typename T>
double evaluate_bleu(const Transformer<T>& model, const std::vector<Example>& test, const TranslateOptions& opt) {
  std::vector<std::vector<int>> src, ref;
  for (const auto& e : test) {
    src.push_back(e.src);
    ref.push_back(e.tgt);
  }
  std::vector<std::vector<int>> hyp;
  for (auto& h : translate_batch(model, src, opt)) hyp.push_back(std::move(h.tokens));
  return bleu_ids(hyp, ref);
}

// "baseline" returns `base`; "mdn" applies the decoder tricks and the
// weak-regularization setup, deepening the encoder to the baseline total.
// The surviving decoder head keeps the base head width.
inline ModelConfig preset_config(const std::string& name, const ModelConfig& base, std::size_t rank = 64) {
  if (name == "baseline") return base;
  if (name == "mdn") {
    auto c = mini_decoder_training_setup(mini_decoder_structure(base, rank));
    c.dec_head_dim = base.dec_head_dim;
    c.enc_layers = match_encoder_depth(c, count_params(base).total);
    return c;
  }
  throw DataError("unknown preset '" + name + "' (expected baseline or mdn)");
}

// Uniform random non-special ids.
inline std::vector<std::vector<int>> random_sources(std::size_t n, std::size_t len, std::size_t vocab,
                                                    std::uint64_t seed) {
  if (vocab <= static_cast<std::size_t>(bpe::kNumSpecials)) throw DataError("vocabulary too small for random input");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(bpe::kNumSpecials, static_cast<int>(vocab) - 1);
  std::vector<std::vector<int>> out(n, std::vector<int>(len));
  for (auto& s : out) {
    for (auto& t : s) t = tok(rng);
  }
  return out;
}

// ---- ablation ---------------------------------------------------------------------

struct AblationOptions {
  ModelConfig base;  // vocabulary sizes are replaced per row
  std::size_t base_merges = 32000;
  std::size_t reduced_merges = 10000;
  std::size_t rank = 64;
  TrainConfig train;
  DistillConfig distill;
  TranslateOptions decode;  // for BLEU on the held-out set
  std::size_t speed_beam = 4;
  std::size_t speed_batch = 64;
  TimingProtocol timing;
  std::uint64_t seed = 1;
};

struct AblationData {
  std::vector<std::string> train_src, train_tgt, test_src, test_tgt;
};

// Trains and measures every row of the cumulative path. Rows with weight
// distillation start from, and are distilled from, the most recent row
// that kept the baseline architecture at the same merge count.
inline SpeedupTable run_ablation(const AblationData& data, const AblationOptions& opt, std::ostream* log = nullptr) {
  std::map<std::size_t, std::pair<bpe::MergeTable, bpe::MergeTable>> tables;
  auto tables_for = [&](std::size_t merges) -> const std::pair<bpe::MergeTable, bpe::MergeTable>& {
    auto it = tables.find(merges);
    if (it == tables.end()) {
      it = tables.emplace(merges, std::make_pair(learn_from_lines(data.train_src, merges),
                                                 learn_from_lines(data.train_tgt, merges))).first;
    }
    return it->second;
  };
  auto sized = [&](ModelConfig c, std::size_t merges) {
    const auto& t = tables_for(merges);
    c.src_vocab = t.first.vocab_size();
    c.tgt_vocab = t.second.vocab_size();
    if (c.output_rank) c.output_rank = std::min({*c.output_rank, c.hidden, c.tgt_vocab});
    return c;
  };

  const ModelConfig base = sized(opt.base, opt.base_merges);
  const auto steps = ablation_path(base, opt.base_merges, opt.reduced_merges, opt.rank);
  struct Trained {
    std::size_t merges;
    std::unique_ptr<Transformer<float>> model;
  };
  std::optional<Trained> teacher;

  auto runner = [&](const AblationStep& s) {
    const std::size_t merges = s.target_merges.value_or(opt.base_merges);
    const auto& t = tables_for(merges);
    const ModelConfig cfg = sized(s.model, merges);
    const auto train = encode_parallel(data.train_src, data.train_tgt, t.first, t.second);
    const auto test = encode_parallel(data.test_src, data.test_tgt, t.first, t.second);
    if (train.examples.empty() || test.examples.empty()) throw DataError("ablation: no usable sentence pairs");

    TrainConfig tc = s.deep_schedule ? deep_configuration(opt.train) : opt.train;
    tc.seed = opt.seed;
    if (s.decoder_dropout_override) tc.decoder_dropout_override = s.decoder_dropout_override;
    if (s.label_smoothing) tc.label_smoothing = s.label_smoothing;

    const bool distill = s.weight_distill && teacher && teacher->merges == merges;
    auto model = distill ? std::make_unique<Transformer<float>>(
                               weight_distill(*teacher->model, cfg, opt.distill, opt.seed))
                         : std::make_unique<Transformer<float>>(cfg, opt.seed);
    if (distill) {
      const Teacher<float> tch{teacher->model.get(), opt.distill};
      train_loop(*model, train.examples, tc, &tch);
    } else {
      train_loop(*model, train.examples, tc);
    }

    AblationMeasurement m;
    m.bleu = evaluate_bleu(*model, test.examples, opt.decode);
    std::vector<std::vector<int>> src;
    for (const auto& e : test.examples) src.push_back(e.src);
    m.sentences_per_sec = measure_throughput(*model, src, opt.speed_beam, opt.speed_batch, opt.timing);
    if (log) {
      *log << s.label << ": vocab " << cfg.src_vocab << '/' << cfg.tgt_vocab << ", enc " << cfg.enc_layers
           << ", dec " << cfg.dec_layers << ", params " << count_params(cfg).total << ", BLEU " << m.bleu
           << ", sent/s " << m.sentences_per_sec << (distill ? ", distilled" : "") << '\n';
    }
    const bool plain = cfg.dec_layers == base.dec_layers && cfg.dec_heads == base.dec_heads &&
                       cfg.dec_ffn_enabled == base.dec_ffn_enabled && !cfg.output_rank;
    if (plain) teacher = Trained{merges, std::move(model)};
    return m;
  };
  return ablation_report(steps, runner);
}

}  // namespace mdn::pipeline
