// mdn: command-line front end.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mdn/mdn.hpp"
#include "mdn/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
namespace pl = mdn::pipeline;

namespace {

const auto kInputFile = CLI::ExistingFile | CLI::IsMember({"-"});

json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw mdn::DataError("cannot open " + path);
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw mdn::DataError(path + ": " + e.what());
  }
}

template <typename C>
C read_config(const std::string& path) {
  try {
    return read_json_file(path).get<C>();
  } catch (const json::exception& e) {
    throw mdn::DataError(path + ": " + e.what());
  }
}

void echo(const std::string& what, const json& j) { std::cerr << what << ": " << j.dump() << '\n'; }

mdn::Transformer<float> load_model(const std::string& path, json* meta = nullptr) {
  const auto ck = mdn::load_checkpoint(path);
  if (meta) *meta = ck.meta;
  return mdn::model_from_checkpoint<float>(ck);
}

// ---- bpe-learn ---------------------------------------------------------------------

struct BpeLearn {
  std::string input, out, sweep_out = "-";
  std::size_t merges = 10000;
  std::vector<std::size_t> sweep;

  void add(CLI::App& app) {
    auto* s = app.add_subcommand("bpe-learn", "Learn BPE merge rules from a text corpus");
    s->add_option("--input", input, "Training text, one sentence per line ('-' for stdin)")->required()->check(kInputFile);
    s->add_option("--merges", merges, "Number of merge operations")->capture_default_str();
    s->add_option("--out", out, "Output prefix; writes PREFIX.codes and PREFIX.vocab");
    s->add_option("--sweep", sweep, "Comma-separated merge counts; prints vocab size and mean length per count")
        ->delimiter(',');
    s->add_option("--sweep-out", sweep_out, "CSV destination for --sweep")->capture_default_str();
    s->callback([this] { run(); });
  }

  void run() {
    if (out.empty() && sweep.empty()) throw CLI::ValidationError("bpe-learn", "need --out and/or --sweep");
    const auto lines = pl::read_lines(input);
    if (!out.empty()) {
      const auto t = pl::learn_from_lines(lines, merges);
      pl::save_bpe(out, t);
      std::cerr << "learned " << t.num_merges() << " merges, vocabulary " << t.vocab_size() << " -> "
                << pl::codes_path(out) << ", " << pl::vocab_path(out) << '\n';
    }
    if (!sweep.empty()) {
      std::ostringstream os;
      os << "merges,learned,vocab_size,mean_tokens\n";
      for (const auto& r : mdn::bpe::sweep_merge_ops(pl::tokenize(lines), sweep)) {
        os << r.requested_merges << ',' << r.learned_merges << ',' << r.vocab_size << ',' << r.mean_tokens << '\n';
      }
      if (sweep_out == "-") std::cout << os.str();
      else pl::write_text(sweep_out, os.str());
    }
  }
};

// ---- bpe-apply ---------------------------------------------------------------------

struct BpeApply {
  std::string bpe, input = "-", output = "-";
  bool ids = false, decode = false;

  void add(CLI::App& app) {
    auto* s = app.add_subcommand("bpe-apply", "Segment text with a learned BPE model (or undo segmentation)");
    s->add_option("--bpe", bpe, "BPE model prefix")->required();
    s->add_option("--input", input, "Input text ('-' for stdin)")->capture_default_str()->check(kInputFile);
    s->add_option("--output", output, "Output text ('-' for stdout)")->capture_default_str();
    s->add_flag("--ids", ids, "Emit vocabulary ids instead of subword strings");
    s->add_flag("--decode", decode, "Join subword strings (or ids with --ids) back into words");
    s->callback([this] { run(); });
  }

  void run() {
    const auto t = pl::load_bpe(bpe);
    std::vector<std::string> out;
    for (const auto& line : pl::read_lines(input)) {
      if (decode) {
        const auto toks = mdn::bpe::split_whitespace(line);
        if (ids) {
          std::vector<int> v;
          for (const auto& s : toks) {
            try {
              v.push_back(std::stoi(s));
            } catch (const std::exception&) {
              throw mdn::DataError("bpe-apply: '" + s + "' is not an id");
            }
          }
          out.push_back(mdn::bpe::decode_ids(v, t));
        } else {
          out.push_back(mdn::bpe::join_subwords(toks));
        }
        continue;
      }
      const auto seq = mdn::bpe::encode_words(mdn::bpe::simple_tokenize(line), t);
      std::string s;
      for (std::size_t i = 0; i < seq.ids.size(); ++i) {
        if (i) s += ' ';
        s += ids ? std::to_string(seq.ids[i]) : seq.surface[i];
      }
      out.push_back(std::move(s));
    }
    pl::write_lines(output, out);
  }
};

// ---- train -------------------------------------------------------------------------

struct Train {
  std::string src, tgt, src_bpe, tgt_bpe, out, model_config, train_config, init, teacher, loss_csv;
  std::string preset = "baseline";
  std::size_t rank = 64, max_units = mdn::bpe::kDefaultMaxUnits;
  std::optional<std::size_t> steps, warmup, batch_tokens, checkpoint_interval, log_interval;
  std::optional<double> lr, label_smoothing, decoder_dropout;
  std::optional<std::uint64_t> seed;
  double kd_alpha = 0.5, kd_temperature = 1.0;

  void add(CLI::App& app) {
    auto* s = app.add_subcommand("train", "Train a model on a parallel corpus");
    s->add_option("--src", src, "Source side, one sentence per line")->required()->check(CLI::ExistingFile);
    s->add_option("--tgt", tgt, "Target side, one sentence per line")->required()->check(CLI::ExistingFile);
    s->add_option("--src-bpe", src_bpe, "Source BPE model prefix")->required();
    s->add_option("--tgt-bpe", tgt_bpe, "Target BPE model prefix")->required();
    s->add_option("--out", out, "Checkpoint directory")->required();
    s->add_option("--preset", preset, "Architecture when no model config is given")
        ->check(CLI::IsMember({"baseline", "mdn"}))
        ->capture_default_str();
    s->add_option("--model-config", model_config, "Model config JSON")->check(CLI::ExistingFile);
    s->add_option("--train-config", train_config, "Training config JSON")->check(CLI::ExistingFile);
    s->add_option("--rank", rank, "Output rank for the mdn preset")->capture_default_str();
    s->add_option("--init", init, "Start from this checkpoint (e.g. distill-init output)")->check(CLI::ExistingFile);
    s->add_option("--teacher", teacher, "Teacher checkpoint for knowledge distillation")->check(CLI::ExistingFile);
    s->add_option("--kd-alpha", kd_alpha, "Gold-label weight in the distillation loss")->capture_default_str();
    s->add_option("--kd-temperature", kd_temperature, "Distillation temperature")->capture_default_str();
    s->add_option("--steps", steps, "Training steps");
    s->add_option("--lr", lr, "Peak learning rate");
    s->add_option("--warmup", warmup, "Warmup steps");
    s->add_option("--batch-tokens", batch_tokens, "Tokens per batch");
    s->add_option("--label-smoothing", label_smoothing, "Label smoothing (overrides the model config)");
    s->add_option("--decoder-dropout", decoder_dropout, "Decoder dropout (overrides the model config)");
    s->add_option("--checkpoint-interval", checkpoint_interval, "Steps between checkpoints (0: final only)");
    s->add_option("--log-interval", log_interval, "Steps between progress lines");
    s->add_option("--seed", seed, "Random seed");
    s->add_option("--max-units", max_units, "Drop sentence pairs longer than this many subwords")
        ->capture_default_str();
    s->add_option("--loss-csv", loss_csv, "Write the loss curve here (default OUT/loss.csv)");
    s->callback([this] { run(); });
  }

  void run() {
    const auto st = pl::load_bpe(src_bpe), tt = pl::load_bpe(tgt_bpe);
    const auto vmeta = pl::vocab_meta(st, tt);

    std::optional<mdn::Transformer<float>> model;
    if (!init.empty()) {
      if (!model_config.empty()) throw CLI::ValidationError("train", "--init and --model-config are exclusive");
      json meta;
      model.emplace(load_model(init, &meta));
      pl::check_vocab_meta(meta, st, tt, "--init checkpoint");
    }

    mdn::TrainConfig tc;
    if (preset == "mdn" && init.empty()) tc = mdn::deep_configuration(tc);
    if (!train_config.empty()) tc = read_config<mdn::TrainConfig>(train_config);
    if (steps) tc.max_steps = *steps;
    if (lr) tc.peak_lr = *lr;
    if (warmup) tc.warmup_steps = *warmup;
    if (batch_tokens) tc.batch_tokens = *batch_tokens;
    if (label_smoothing) tc.label_smoothing = *label_smoothing;
    if (decoder_dropout) tc.decoder_dropout_override = *decoder_dropout;
    if (checkpoint_interval) tc.checkpoint_interval = *checkpoint_interval;
    if (log_interval) tc.log_interval = *log_interval;
    if (seed) tc.seed = *seed;
    tc.validate();

    if (!model) {
      mdn::ModelConfig mc;
      if (!model_config.empty()) {
        mc = read_config<mdn::ModelConfig>(model_config);
        mc.src_vocab = st.vocab_size();
        mc.tgt_vocab = tt.vocab_size();
      } else {
        mc = pl::preset_config(preset, mdn::baseline_config(st.vocab_size(), tt.vocab_size()), rank);
      }
      mc.validate();
      model.emplace(mc, tc.seed);
    }
    const auto& mc = model->config();
    if (mc.src_vocab != st.vocab_size() || mc.tgt_vocab != tt.vocab_size()) {
      throw mdn::DataError("model vocabulary " + std::to_string(mc.src_vocab) + "/" + std::to_string(mc.tgt_vocab) +
                           " does not match BPE models " + std::to_string(st.vocab_size()) + "/" +
                           std::to_string(tt.vocab_size()));
    }

    std::optional<mdn::Transformer<float>> teacher_model;
    mdn::DistillConfig dc;
    dc.alpha = kd_alpha;
    dc.temperature = kd_temperature;
    dc.validate();
    if (!teacher.empty()) {
      json meta;
      teacher_model.emplace(load_model(teacher, &meta));
      pl::check_vocab_meta(meta, st, tt, "teacher checkpoint");
      if (teacher_model->config().tgt_vocab != mc.tgt_vocab) throw mdn::DataError("teacher target vocabulary differs");
    }

    echo("model config", mc);
    echo("train config", tc);
    std::cerr << "parameters: " << mdn::count_params(mc).total << '\n';

    const auto corpus = pl::encode_parallel(pl::read_lines(src), pl::read_lines(tgt), st, tt, max_units);
    std::cerr << "training pairs: " << corpus.examples.size() << " (dropped " << corpus.dropped << ")\n";
    if (corpus.examples.empty()) throw mdn::DataError("no usable training pairs");

    fs::create_directories(out);
    mdn::TrainHooks hooks;
    hooks.checkpoint_dir = out;
    hooks.checkpoint_meta = vmeta;
    hooks.checkpoint_meta["train"] = tc;
    hooks.on_log = [](const mdn::LossRow& r) {
      std::cerr << "step " << r.step << " loss " << std::fixed << std::setprecision(4) << r.loss << " tok/s "
                << std::setprecision(0) << r.tokens_per_sec << std::defaultfloat << '\n';
    };
    std::optional<mdn::Teacher<float>> tch;
    if (teacher_model) tch = mdn::Teacher<float>{&*teacher_model, dc};
    const auto res = mdn::train_loop(*model, corpus.examples, tc, tch ? &*tch : nullptr, hooks);

    const auto final_path = mdn::checkpoint_path(out, res.steps);
    if (res.checkpoints.empty() || res.checkpoints.back() != final_path) {
      mdn::save_checkpoint(final_path, mdn::to_checkpoint(*model, res.steps, hooks.checkpoint_meta));
    }
    std::ostringstream csv;
    mdn::write_loss_csv(csv, res.curve);
    pl::write_text(loss_csv.empty() ? (fs::path(out) / "loss.csv").string() : loss_csv, csv.str());
    std::cerr << "saved " << final_path << '\n';
  }
};

// ---- distill-init ------------------------------------------------------------------

struct DistillInit {
  std::string teacher, out, model_config, src_bpe, tgt_bpe;
  std::string preset = "mdn";
  std::size_t rank = 64;
  std::optional<std::size_t> head_index;
  std::uint64_t seed = 1;

  void add(CLI::App& app) {
    auto* s = app.add_subcommand("distill-init", "Initialize a student from a teacher checkpoint by weight distillation");
    s->add_option("--teacher", teacher, "Teacher checkpoint")->required()->check(CLI::ExistingFile);
    s->add_option("--out", out, "Student checkpoint to write")->required();
    s->add_option("--preset", preset, "Student architecture when no model config is given")
        ->check(CLI::IsMember({"baseline", "mdn"}))
        ->capture_default_str();
    s->add_option("--model-config", model_config, "Student model config JSON")->check(CLI::ExistingFile);
    s->add_option("--rank", rank, "Output rank for the mdn preset")->capture_default_str();
    s->add_option("--head-index", head_index, "Teacher head kept by single-head students (default: seeded choice)");
    s->add_option("--src-bpe", src_bpe, "Source BPE model prefix; must match the teacher");
    s->add_option("--tgt-bpe", tgt_bpe, "Target BPE model prefix; must match the teacher");
    s->add_option("--seed", seed, "Seed for parameters not copied from the teacher")->capture_default_str();
    s->callback([this] { run(); });
  }

  void run() {
    json meta;
    const auto t = load_model(teacher, &meta);
    if (src_bpe.empty() != tgt_bpe.empty()) throw CLI::ValidationError("distill-init", "give both --src-bpe and --tgt-bpe");
    json student_meta = json::object();
    if (!src_bpe.empty()) {
      const auto st = pl::load_bpe(src_bpe), tt = pl::load_bpe(tgt_bpe);
      if (!meta.contains("src_vocab_checksum")) throw mdn::DataError("teacher checkpoint records no vocabulary");
      pl::check_vocab_meta(meta, st, tt, "teacher checkpoint");
    }
    for (const char* key : {"src_vocab_checksum", "tgt_vocab_checksum"}) {
      if (meta.contains(key)) student_meta[key] = meta[key];
    }

    mdn::ModelConfig sc;
    if (!model_config.empty()) {
      sc = read_config<mdn::ModelConfig>(model_config);
      sc.src_vocab = t.config().src_vocab;
      sc.tgt_vocab = t.config().tgt_vocab;
    } else {
      sc = pl::preset_config(preset, t.config(), rank);
    }
    sc.validate();
    mdn::DistillConfig dc;
    dc.head_index = head_index;
    dc.head_seed = seed;
    echo("student config", sc);
    mdn::WeightDistillReport rep;
    const auto student = mdn::weight_distill(t, sc, dc, seed, &rep);
    student_meta["distill"] = {{"teacher", teacher}};
    mdn::save_checkpoint(out, mdn::to_checkpoint(student, 0, student_meta));
    std::cerr << "student parameters: " << mdn::count_params(sc).total << " -> " << out << '\n';
  }
};

// ---- translate ---------------------------------------------------------------------

struct Translate {
  std::string model, src_bpe, tgt_bpe, input = "-", output = "-";
  mdn::TranslateOptions opt;

  void add(CLI::App& app) {
    auto* s = app.add_subcommand("translate", "Translate text with beam search");
    s->add_option("--model", model, "Checkpoint")->required()->check(CLI::ExistingFile);
    s->add_option("--src-bpe", src_bpe, "Source BPE model prefix")->required();
    s->add_option("--tgt-bpe", tgt_bpe, "Target BPE model prefix")->required();
    s->add_option("--input", input, "Source text ('-' for stdin)")->capture_default_str()->check(kInputFile);
    s->add_option("--output", output, "Translations ('-' for stdout)")->capture_default_str();
    s->add_option("--beam", opt.beam.beam, "Beam width")->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--batch", opt.batch, "Sentences per batch")->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--threads", opt.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--max-len-factor", opt.beam.max_len_factor, "Output limit: factor * source length + extra")
        ->capture_default_str();
    s->add_option("--max-len-extra", opt.beam.max_len_extra, "Output limit: factor * source length + extra")
        ->capture_default_str();
    s->add_option("--length-alpha", opt.beam.length_alpha, "Length-normalization exponent")->capture_default_str();
    s->callback([this] { run(); });
  }

  void run() {
    json meta;
    const auto m = load_model(model, &meta);
    const auto st = pl::load_bpe(src_bpe), tt = pl::load_bpe(tgt_bpe);
    pl::check_vocab_meta(meta, st, tt, "model checkpoint");
    pl::write_lines(output, pl::translate_lines(m, pl::read_lines(input), st, tt, opt));
  }
};

// ---- average -----------------------------------------------------------------------

struct Average {
  std::vector<std::string> inputs;
  std::string dir, out;
  std::size_t last = 5;

  void add(CLI::App& app) {
    auto* s = app.add_subcommand("average", "Average checkpoints elementwise");
    auto* in = s->add_option("--inputs", inputs, "Checkpoints to average")->check(CLI::ExistingFile);
    auto* d = s->add_option("--dir", dir, "Checkpoint directory; the last --last checkpoints are used")
                  ->check(CLI::ExistingDirectory);
    in->excludes(d);
    s->add_option("--last", last, "How many of the newest checkpoints in --dir")->capture_default_str()
        ->check(CLI::PositiveNumber);
    s->add_option("--out", out, "Averaged checkpoint")->required();
    s->callback([this] { run(); });
  }

  void run() {
    std::vector<std::string> paths = inputs;
    if (!dir.empty()) {
      for (const auto& e : fs::directory_iterator(dir)) {
        const auto name = e.path().filename().string();
        if (name.rfind("checkpoint_", 0) == 0 && e.path().extension() == ".bin") paths.push_back(e.path().string());
      }
      std::sort(paths.begin(), paths.end());
      if (paths.size() > last) paths.erase(paths.begin(), paths.end() - static_cast<std::ptrdiff_t>(last));
    }
    if (paths.empty()) throw CLI::ValidationError("average", "no checkpoints given (use --inputs or --dir)");
    std::vector<mdn::Checkpoint> cks;
    for (const auto& p : paths) {
      cks.push_back(mdn::load_checkpoint(p));
      pl::check_same_vocab(cks.front().meta, cks.back().meta, p);
      std::cerr << "averaging " << p << '\n';
    }
    mdn::save_checkpoint(out, mdn::checkpoint_average(cks));
  }
};

// ---- bleu --------------------------------------------------------------------------

struct Bleu {
  std::string hyp, ref;

  void add(CLI::App& app) {
    auto* s = app.add_subcommand("bleu", "Corpus BLEU of tokenized hypotheses against references");
    s->add_option("--hyp", hyp, "Hypotheses ('-' for stdin)")->required()->check(kInputFile);
    s->add_option("--ref", ref, "References")->required()->check(CLI::ExistingFile);
    s->callback([this] { run(); });
  }

  void run() {
    std::vector<std::vector<std::string>> h, r;
    for (const auto& l : pl::read_lines(hyp)) h.push_back(mdn::bpe::split_whitespace(l));
    for (const auto& l : pl::read_lines(ref)) r.push_back(mdn::bpe::split_whitespace(l));
    const auto s = mdn::bleu_stats(h, r);
    const double b = mdn::bleu_from_stats(s);
    std::cout << std::fixed << std::setprecision(2) << "BLEU = " << b << ' ';
    for (std::size_t n = 0; n < 4; ++n) {
      std::cout << (n ? "/" : "") << std::setprecision(1)
                << (s.totals[n] ? 100.0 * static_cast<double>(s.matches[n]) / static_cast<double>(s.totals[n]) : 0.0);
    }
    std::cout << " (hyp_len " << s.hyp_len << ", ref_len " << s.ref_len << ")\n";
  }
};

// ---- model sources shared by profile and sweep ----------------------------------------

struct ModelSource {
  std::string preset = "baseline", model_config;
  std::size_t vocab = 8000, rank = 64;
  std::uint64_t seed = 1;

  void add_common(CLI::App* s) {
    s->add_option("--model-config", model_config, "Base model config JSON for presets")->check(CLI::ExistingFile);
    s->add_option("--vocab", vocab, "Vocabulary size for preset models")->capture_default_str();
    s->add_option("--rank", rank, "Output rank for the mdn preset")->capture_default_str();
    s->add_option("--seed", seed, "Seed for random weights and inputs")->capture_default_str();
  }

  mdn::ModelConfig base() const {
    mdn::ModelConfig c = model_config.empty() ? mdn::ModelConfig{} : read_config<mdn::ModelConfig>(model_config);
    c.src_vocab = c.tgt_vocab = vocab;
    return c;
  }

  mdn::Transformer<float> make(const std::string& checkpoint, const std::string& preset_name) const {
    if (!checkpoint.empty()) return load_model(checkpoint);
    const auto c = pl::preset_config(preset_name, base(), rank);
    c.validate();
    echo(preset_name + " config", c);
    return mdn::Transformer<float>(c, seed);
  }
};

struct InputSource {
  std::string input, src_bpe;
  std::size_t sentences = 20, length = 20;

  void add(CLI::App* s) {
    s->add_option("--input", input, "Source text to decode (needs --src-bpe); default random ids")
        ->check(CLI::ExistingFile);
    s->add_option("--src-bpe", src_bpe, "Source BPE model prefix for --input");
    s->add_option("--sentences", sentences, "Random sentences when no --input")->capture_default_str();
    s->add_option("--length", length, "Random sentence length")->capture_default_str();
  }

  std::vector<std::vector<int>> load(std::size_t vocab, std::uint64_t seed) const {
    if (input.empty()) return pl::random_sources(sentences, length, vocab, seed);
    if (src_bpe.empty()) throw CLI::ValidationError("--input", "needs --src-bpe");
    const auto t = pl::load_bpe(src_bpe);
    std::vector<std::vector<int>> out;
    for (const auto& l : pl::read_lines(input)) {
      auto ids = pl::encode_line(l, t);
      if (!ids.empty()) out.push_back(std::move(ids));
    }
    return out;
  }
};

// ---- profile -----------------------------------------------------------------------

struct Profile {
  ModelSource src;
  InputSource in;
  std::string model, json_out;
  std::size_t beam = 4, batch = 1;
  mdn::TimingProtocol timing;

  void add(CLI::App& app) {
    auto* s = app.add_subcommand("profile", "Time the five transformer components during translation");
    s->add_option("--model", model, "Checkpoint (default: a preset with random weights)")->check(CLI::ExistingFile);
    s->add_option("--preset", src.preset, "Preset when no checkpoint is given")
        ->check(CLI::IsMember({"baseline", "mdn"}))
        ->capture_default_str();
    src.add_common(s);
    in.add(s);
    s->add_option("--beam", beam, "Beam width")->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--batch", batch, "Sentences per batch")->capture_default_str()->check(CLI::PositiveNumber);
    s->add_option("--warmup", timing.warmup, "Discarded warmup runs")->capture_default_str();
    s->add_option("--runs", timing.runs, "Measured runs (median reported)")->capture_default_str()
        ->check(CLI::PositiveNumber);
    s->add_option("--json", json_out, "Write the report as JSON");
    s->callback([this] { run(); });
  }

  void run() {
    const auto m = src.make(model, src.preset);
    const auto data = in.load(m.config().src_vocab, src.seed);
    const auto r = mdn::profile_translation(m, data, beam, batch, timing);
    auto row = [&](const char* name, double s) {
      std::cout << std::left << std::setw(22) << name << std::right << std::fixed << std::setprecision(4)
                << std::setw(12) << s << std::setw(9) << std::setprecision(1) << 100.0 * s / r.total << "%\n";
    };
    std::cout << std::left << std::setw(22) << "component" << std::right << std::setw(12) << "seconds" << std::setw(10)
              << "share\n";
    for (std::size_t c = 0; c < mdn::kNumComponents; ++c) row(std::string(mdn::kComponentKeys[c]).c_str(), r.seconds[c]);
    row("other", r.other);
    row("encoder total", r.encoder_seconds());
    row("decoder total", r.decoder_seconds());
    row("total", r.total);
    std::cout << std::setprecision(2) << "sentences/sec " << r.sentences_per_sec << "\nmachine: " << r.machine << '\n';
    if (!json_out.empty()) pl::write_text(json_out, mdn::to_json(r).dump(2) + "\n");
  }
};

// ---- sweep -------------------------------------------------------------------------

struct Sweep {
  ModelSource src;
  InputSource in;
  std::string baseline, candidate, csv = "-";
  mdn::SweepOptions opt;

  void add(CLI::App& app) {
    auto* s = app.add_subcommand("sweep", "Speedup of a candidate over a baseline across batch sizes and beam widths");
    s->add_option("--baseline", baseline, "Baseline checkpoint (default: baseline preset)")->check(CLI::ExistingFile);
    s->add_option("--candidate", candidate, "Candidate checkpoint (default: mdn preset)")->check(CLI::ExistingFile);
    src.add_common(s);
    in.add(s);
    s->add_option("--batches", opt.batch_sizes, "Batch sizes")->delimiter(',')->capture_default_str();
    s->add_option("--beams", opt.beam_widths, "Beam widths")->delimiter(',')->capture_default_str();
    s->add_option("--fixed-beam", opt.fixed_beam, "Beam used along the batch axis")->capture_default_str();
    s->add_option("--fixed-batch", opt.fixed_batch, "Batch used along the beam axis")->capture_default_str();
    s->add_flag("--full-grid", opt.full_grid, "Measure every (batch, beam) pair");
    s->add_option("--warmup", opt.timing.warmup, "Discarded warmup runs")->capture_default_str();
    s->add_option("--runs", opt.timing.runs, "Measured runs (median reported)")->capture_default_str();
    s->add_option("--csv", csv, "CSV destination ('-' for stdout)")->capture_default_str();
    s->callback([this] { run(); });
  }

  void run() {
    const auto b = src.make(baseline, "baseline");
    const auto c = src.make(candidate, "mdn");
    if (b.config().src_vocab != c.config().src_vocab) throw mdn::DataError("models use different source vocabularies");
    const auto data = in.load(b.config().src_vocab, src.seed);
    std::ostringstream os;
    mdn::write_sweep_csv(os, mdn::sensitivity_sweep(b, c, data, opt));
    if (csv == "-") std::cout << os.str();
    else pl::write_text(csv, os.str());
  }
};

// ---- ablate ------------------------------------------------------------------------

struct Ablate {
  pl::AblationOptions opt;
  std::string train_src, train_tgt, test_src, test_tgt, model_config, train_config, csv;
  std::optional<std::size_t> steps;

  void add(CLI::App& app) {
    auto* s = app.add_subcommand("ablate", "Train and measure each cumulative step from the baseline to the full system");
    s->add_option("--train-src", train_src, "Training source text")->required()->check(CLI::ExistingFile);
    s->add_option("--train-tgt", train_tgt, "Training target text")->required()->check(CLI::ExistingFile);
    s->add_option("--test-src", test_src, "Held-out source text")->required()->check(CLI::ExistingFile);
    s->add_option("--test-tgt", test_tgt, "Held-out target text")->required()->check(CLI::ExistingFile);
    s->add_option("--model-config", model_config, "Baseline model config JSON")->check(CLI::ExistingFile);
    s->add_option("--train-config", train_config, "Training config JSON")->check(CLI::ExistingFile);
    s->add_option("--steps", steps, "Training steps per row");
    s->add_option("--base-merges", opt.base_merges, "Baseline merge operations")->capture_default_str();
    s->add_option("--reduced-merges", opt.reduced_merges, "Merge operations from the second row on")
        ->capture_default_str();
    s->add_option("--rank", opt.rank, "Output factorization rank")->capture_default_str();
    s->add_option("--beam", opt.speed_beam, "Beam width for speed and BLEU")->capture_default_str();
    s->add_option("--batch", opt.speed_batch, "Batch size for speed and BLEU")->capture_default_str();
    s->add_option("--seed", opt.seed, "Seed")->capture_default_str();
    s->add_option("--csv", csv, "Also write the table as CSV");
    s->callback([this] { run(); });
  }

  void run() {
    if (!model_config.empty()) opt.base = read_config<mdn::ModelConfig>(model_config);
    if (!train_config.empty()) opt.train = read_config<mdn::TrainConfig>(train_config);
    if (steps) opt.train.max_steps = *steps;
    opt.decode.beam.beam = opt.speed_beam;
    opt.decode.batch = opt.speed_batch;
    echo("base model config", opt.base);
    echo("train config", opt.train);
    pl::AblationData d{pl::read_lines(train_src), pl::read_lines(train_tgt), pl::read_lines(test_src),
                       pl::read_lines(test_tgt)};
    const auto table = pl::run_ablation(d, opt, &std::cerr);
    mdn::write_speedup_table(std::cout, table);
    if (!csv.empty()) {
      std::ostringstream os;
      mdn::write_speedup_csv(os, table);
      pl::write_text(csv, os.str());
    }
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mini-decoder translation toolkit: BPE, training, distillation, decoding and benchmarks"};
  app.set_config("--config", "", "TOML file supplying flag values (flags on the command line win)");
  app.require_subcommand(1);
  BpeLearn bpe_learn;
  BpeApply bpe_apply;
  Train train;
  DistillInit distill_init;
  Translate translate;
  Average average;
  Bleu bleu;
  Profile profile;
  Sweep sweep;
  Ablate ablate;
  bpe_learn.add(app);
  bpe_apply.add(app);
  train.add(app);
  distill_init.add(app);
  translate.add(app);
  average.add(app);
  bleu.add(app);
  profile.add(app);
  sweep.add(app);
  ablate.add(app);
  app.parse_complete_callback([&app] {
    for (const auto* sub : app.get_subcommands()) {
      std::cerr << "# resolved configuration\n[" << sub->get_name() << "]\n" << sub->config_to_str(true, false);
    }
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  } catch (const mdn::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const mdn::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const mdn::ShapeError& e) {
    std::cerr << "shape error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
