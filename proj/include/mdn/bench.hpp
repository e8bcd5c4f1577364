#pragma once

// BLEU, component profiling, throughput sweeps and ablation tables.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "mdn/bpe.hpp"
#include "mdn/config.hpp"
#include "mdn/infer.hpp"
#include "mdn/model.hpp"
#include "mdn/profile.hpp"

namespace mdn {

// ---- BLEU ----------------------------------------------------------------------

struct BleuStats {
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;
};

inline BleuStats bleu_stats(const std::vector<std::vector<std::string>>& hyps,
                            const std::vector<std::vector<std::string>>& refs) {
  if (hyps.size() != refs.size()) throw DataError("bleu: hypothesis and reference counts differ");
  if (hyps.empty()) throw DataError("bleu: empty corpus");
  BleuStats s;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    const auto& h = hyps[i];
    const auto& r = refs[i];
    s.hyp_len += h.size();
    s.ref_len += r.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      std::map<std::vector<std::string>, std::size_t> ref_counts;
      for (std::size_t k = 0; k + n <= r.size(); ++k) ++ref_counts[{r.begin() + k, r.begin() + k + n}];
      std::map<std::vector<std::string>, std::size_t> hyp_counts;
      for (std::size_t k = 0; k + n <= h.size(); ++k) ++hyp_counts[{h.begin() + k, h.begin() + k + n}];
      for (const auto& [gram, c] : hyp_counts) {
        auto it = ref_counts.find(gram);
        s.matches[n - 1] += std::min(c, it == ref_counts.end() ? 0 : it->second);
        s.totals[n - 1] += c;
      }
    }
  }
  return s;
}

inline double bleu_from_stats(const BleuStats& s) {
  double log_p = 0;
  for (std::size_t n = 0; n < 4; ++n) {
    if (s.matches[n] == 0 || s.totals[n] == 0) return 0.0;
    log_p += std::log(static_cast<double>(s.matches[n]) / static_cast<double>(s.totals[n]));
  }
  if (s.hyp_len == 0) return 0.0;
  const double bp = s.hyp_len >= s.ref_len
                        ? 1.0
                        : std::exp(1.0 - static_cast<double>(s.ref_len) / static_cast<double>(s.hyp_len));
  return 100.0 * bp * std::exp(log_p / 4.0);
}

// Corpus BLEU-4 over whitespace-tokenized lines; case-sensitive, unsmoothed.
inline double bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
  std::vector<std::vector<std::string>> h, r;
  for (const auto& x : hyps) h.push_back(bpe::split_whitespace(x));
  for (const auto& x : refs) r.push_back(bpe::split_whitespace(x));
  return bleu_from_stats(bleu_stats(h, r));
}

// ---- timing ----------------------------------------------------------------------

inline std::string machine_descriptor() {
  std::string cpu = "unknown cpu";
  std::ifstream f("/proc/cpuinfo");
  for (std::string line; std::getline(f, line);) {
    if (line.rfind("model name", 0) == 0) {
      cpu = line.substr(line.find(':') + 2);
      break;
    }
  }
  std::ostringstream os;
  os << cpu << "; " << std::thread::hardware_concurrency() << " hw threads; single worker thread";
#if defined(__VERSION__)
  os << "; compiler " << __VERSION__;
#endif
  return os.str();
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

struct TimingProtocol {
  std::size_t warmup = 3;
  std::size_t runs = 5;
};

struct ProfileReport {
  std::array<double, kNumComponents> seconds{};
  double other = 0.0;
  double total = 0.0;
  double sentences_per_sec = 0.0;
  std::size_t sentences = 0;
  std::string machine;

  double decoder_seconds() const {
    return seconds[static_cast<std::size_t>(Component::DecoderAttention)] +
           seconds[static_cast<std::size_t>(Component::DecoderFfn)] +
           seconds[static_cast<std::size_t>(Component::OutputProjection)];
  }
  double encoder_seconds() const {
    return seconds[static_cast<std::size_t>(Component::EncoderAttention)] +
           seconds[static_cast<std::size_t>(Component::EncoderFfn)];
  }
};

inline nlohmann::json to_json(const ProfileReport& r) {
  nlohmann::json j;
  for (std::size_t c = 0; c < kNumComponents; ++c) j[std::string(kComponentKeys[c])] = r.seconds[c];
  j["other"] = r.other;
  j["total"] = r.total;
  j["sentences_per_sec"] = r.sentences_per_sec;
  j["sentences"] = r.sentences;
  j["machine"] = r.machine;
  return j;
}

// Translates `src` (runs + warmup) times on the calling thread and reports
// the per-component medians of the measured runs.
template <typename T>
ProfileReport profile_translation(const Transformer<T>& model, const std::vector<std::vector<int>>& src,
                                  std::size_t beam, std::size_t batch, const TimingProtocol& proto = {}) {
  if (src.empty()) throw DataError("profile: no input sentences");
  TranslateOptions opt;
  opt.beam.beam = beam;
  opt.batch = batch;
  opt.threads = 1;
  std::vector<std::array<double, kNumComponents>> comp;
  std::vector<double> totals;
  for (std::size_t i = 0; i < proto.warmup + std::max<std::size_t>(1, proto.runs); ++i) {
    Profiler p;
    const auto t0 = std::chrono::steady_clock::now();
    {
      ProfilerActivation act(p);
      translate_batch(model, src, opt);
    }
    const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (i < proto.warmup) continue;
    comp.push_back(p.all());
    totals.push_back(total);
  }
  ProfileReport r;
  for (std::size_t c = 0; c < kNumComponents; ++c) {
    std::vector<double> v;
    for (const auto& a : comp) v.push_back(a[c]);
    r.seconds[c] = median(v);
  }
  r.total = median(totals);
  double sum = 0;
  for (double s : r.seconds) sum += s;
  r.other = std::max(0.0, r.total - sum);
  r.sentences = src.size();
  r.sentences_per_sec = static_cast<double>(src.size()) / r.total;
  r.machine = machine_descriptor();
  return r;
}

// Median sentences/sec over the measured runs.
template <typename T>
double measure_throughput(const Transformer<T>& model, const std::vector<std::vector<int>>& src, std::size_t beam,
                          std::size_t batch, const TimingProtocol& proto = {}) {
  TranslateOptions opt;
  opt.beam.beam = beam;
  opt.batch = batch;
  opt.threads = 1;
  std::vector<double> sps;
  for (std::size_t i = 0; i < proto.warmup + std::max<std::size_t>(1, proto.runs); ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    translate_batch(model, src, opt);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (i >= proto.warmup) sps.push_back(static_cast<double>(src.size()) / secs);
  }
  return median(sps);
}

// ---- sensitivity sweep -------------------------------------------------------------

struct SweepPoint {
  std::size_t batch = 0;
  std::size_t beam = 0;
  double baseline_sps = 0.0;
  double candidate_sps = 0.0;
  double speedup = 0.0;  // candidate / baseline
};

struct SweepOptions {
  std::vector<std::size_t> batch_sizes{1, 4, 16, 64};
  std::vector<std::size_t> beam_widths{1, 2, 4, 16};
  std::size_t fixed_beam = 4;    // beam used along the batch axis
  std::size_t fixed_batch = 1;   // batch used along the beam axis
  bool full_grid = false;
  TimingProtocol timing;
};

// Batch axis at fixed beam, then beam axis at fixed batch (or the full grid).
template <typename T>
std::vector<SweepPoint> sensitivity_sweep(const Transformer<T>& baseline, const Transformer<T>& candidate,
                                          const std::vector<std::vector<int>>& src, const SweepOptions& o = {}) {
  std::vector<std::pair<std::size_t, std::size_t>> points;
  if (o.full_grid) {
    for (auto b : o.batch_sizes) {
      for (auto w : o.beam_widths) points.emplace_back(b, w);
    }
  } else {
    for (auto b : o.batch_sizes) points.emplace_back(b, o.fixed_beam);
    for (auto w : o.beam_widths) points.emplace_back(o.fixed_batch, w);
  }
  std::vector<SweepPoint> out;
  for (auto [b, w] : points) {
    SweepPoint p;
    p.batch = b;
    p.beam = w;
    p.baseline_sps = measure_throughput(baseline, src, w, b, o.timing);
    p.candidate_sps = measure_throughput(candidate, src, w, b, o.timing);
    p.speedup = p.candidate_sps / p.baseline_sps;
    out.push_back(p);
  }
  return out;
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepPoint>& pts) {
  os << "batch,beam,baseline_sps,candidate_sps,speedup\n";
  for (const auto& p : pts) {
    os << p.batch << ',' << p.beam << ',' << p.baseline_sps << ',' << p.candidate_sps << ',' << p.speedup << '\n';
  }
}

// Number of adjacent pairs where the sequence decreases.
inline std::size_t rank_inversions(const std::vector<double>& v) {
  std::size_t n = 0;
  for (std::size_t i = 0; i + 1 < v.size(); ++i) n += v[i + 1] < v[i];
  return n;
}

// ---- speedup tables and ablation -----------------------------------------------------

struct SpeedupRow {
  std::string label;
  double bleu = 0.0;
  double sentences_per_sec = 0.0;
  double speedup = 1.0;
  std::optional<double> reference_bleu;  // reference values, display only
  std::optional<double> reference_sps;
};

struct SpeedupTable {
  std::string baseline;
  std::vector<SpeedupRow> rows;
};

inline SpeedupTable make_speedup_table(std::vector<SpeedupRow> rows, const std::string& baseline) {
  const auto it = std::find_if(rows.begin(), rows.end(), [&](const SpeedupRow& r) { return r.label == baseline; });
  if (it == rows.end()) throw DataError("speedup table: no row labelled " + baseline);
  const double base = it->sentences_per_sec;
  for (auto& r : rows) r.speedup = r.label == baseline ? 1.0 : r.sentences_per_sec / base;
  return {baseline, std::move(rows)};
}

inline void write_speedup_table(std::ostream& os, const SpeedupTable& t) {
  os << std::left << std::setw(24) << "system" << std::right << std::setw(9) << "BLEU" << std::setw(12) << "sent/s"
     << std::setw(10) << "speedup" << std::setw(14) << "ref BLEU" << std::setw(14) << "ref sent/s" << '\n';
  auto opt = [](const std::optional<double>& v) {
    std::ostringstream s;
    if (v) s << std::fixed << std::setprecision(2) << *v;
    else s << '-';
    return s.str();
  };
  for (const auto& r : t.rows) {
    os << std::left << std::setw(24) << r.label << std::right << std::fixed << std::setprecision(2) << std::setw(9)
       << r.bleu << std::setw(12) << r.sentences_per_sec << std::setw(9) << r.speedup << 'x' << std::setw(14)
       << opt(r.reference_bleu) << std::setw(14) << opt(r.reference_sps) << '\n';
  }
  os << "ref columns: WMT14 En-De CPU reference figures, for orientation only\n";
  os << "reference end-to-end CPU speedup: 3.80x (a second reference quotes 3.61x)\n";
}

inline void write_speedup_csv(std::ostream& os, const SpeedupTable& t) {
  os << "system,bleu,sentences_per_sec,speedup,reference_bleu,reference_sps\n";
  for (const auto& r : t.rows) {
    os << r.label << ',' << r.bleu << ',' << r.sentences_per_sec << ',' << r.speedup << ','
       << (r.reference_bleu ? std::to_string(*r.reference_bleu) : "") << ','
       << (r.reference_sps ? std::to_string(*r.reference_sps) : "") << '\n';
  }
}

// One cumulative ablation row: the model to build and how to train it.
struct AblationStep {
  std::string label;
  ModelConfig model;
  bool structural = false;      // changes the decoder/output architecture
  bool deep_schedule = false;
  bool weight_distill = false;
  std::optional<double> decoder_dropout_override;
  std::optional<double> label_smoothing;
  std::optional<std::size_t> target_merges;  // BPE merge count for this row
  std::optional<double> reference_bleu;
  std::optional<double> reference_sps;
};

// The cumulative path from the baseline to the full system. Each entry
// applies one change on top of the previous one.
inline std::vector<AblationStep> ablation_path(const ModelConfig& base, std::size_t base_merges,
                                               std::size_t reduced_merges, std::size_t rank = 64) {
  std::vector<AblationStep> out;
  AblationStep s;
  s.label = "Baseline";
  s.model = base;
  s.target_merges = base_merges;
  s.reference_bleu = 27.21;
  s.reference_sps = 7.17;
  out.push_back(s);
  const std::size_t target_total = count_params(base).total;

  auto push = [&](std::string label, double ref_bleu, double ref_sps, bool structural) {
    s.label = std::move(label);
    s.structural = structural;
    s.reference_bleu = ref_bleu;
    s.reference_sps = ref_sps;
    out.push_back(s);
  };
  s.target_merges = reduced_merges;
  push("+ Merge Operations", 27.45, 7.72, false);
  s.model.dec_layers = 1;
  s.model.enc_layers = match_encoder_depth(s.model, target_total);
  push("+ Shallow Decoder", 26.46, 19.44, true);
  s.model.dec_heads = 1;
  s.model.dec_head_dim = std::max<std::size_t>(1, s.model.hidden / 8);
  push("+ Pruning Heads", 24.47, 21.99, true);
  s.model.dec_ffn_enabled = false;
  push("+ Dropping FFN", 23.26, 22.36, true);
  s.model.output_rank = std::min({rank, s.model.hidden, s.model.tgt_vocab});
  push("+ Output Factorization", 22.83, 23.19, true);
  s.model.norm_placement = NormPlacement::Pre;
  s.deep_schedule = true;
  push("+ Deep Configuration", 23.78, 24.21, false);
  s.weight_distill = true;
  push("+ WD", 27.09, 22.96, false);
  s.decoder_dropout_override = 0.0;
  push("- Decoder Dropout", 27.18, 23.53, false);
  s.label_smoothing = 0.0;
  push("- Label Smoothing", 27.23, 23.52, false);
  return out;
}

// Decoder-side parameters: decoder blocks plus the output projection.
inline std::size_t decoder_side_params(const ModelConfig& c) {
  const auto p = count_params(c);
  return p.decoder + p.output;
}

struct AblationMeasurement {
  double bleu = 0.0;
  double sentences_per_sec = 0.0;
};

// Runs `steps[0]` as the baseline followed by every later row; the runner
// builds, trains and measures one row. An empty `steps` is an error; a
// single step yields the baseline row alone.
inline SpeedupTable ablation_report(const std::vector<AblationStep>& steps,
                                    const std::function<AblationMeasurement(const AblationStep&)>& runner) {
  if (steps.empty()) throw DataError("ablation: no baseline step");
  std::vector<SpeedupRow> rows;
  for (const auto& s : steps) {
    const auto m = runner(s);
    rows.push_back({s.label, m.bleu, m.sentences_per_sec, 1.0, s.reference_bleu, s.reference_sps});
  }
  return make_speedup_table(std::move(rows), steps.front().label);
}

}  // namespace mdn
