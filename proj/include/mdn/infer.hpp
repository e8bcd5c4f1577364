#pragma once

// Lockstep batched beam search over any incremental scorer.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <exception>
#include <mutex>
#include <optional>
#include <limits>
#include <memory>
#include <span>
#include <thread>
#include <vector>

#include "mdn/bpe.hpp"
#include "mdn/model.hpp"
#include "mdn/ops.hpp"

namespace mdn {

inline double length_normalize(double score, std::size_t length, double alpha) {
  if (length == 0) throw ShapeError("length_normalize: length must be >= 1");
  if (alpha == 0.0 || length == 1) return score;
  return score / std::pow(static_cast<double>(length), alpha);
}

// start(sources) returns one initial state per source; step() advances the
// given states by one token each and writes N x vocab() log-probabilities.
template <typename S>
concept Scorer = requires(S& s, const std::vector<std::vector<int>>& src,
                          std::span<typename S::State* const> states, std::span<const int> prev,
                          std::vector<double>& out) {
  { s.start(src) } -> std::same_as<std::vector<typename S::State>>;
  s.step(states, prev, out);
  { s.vocab() } -> std::convertible_to<std::size_t>;
};

struct BeamConfig {
  std::size_t beam = 4;
  double length_alpha = 1.0;
  double max_len_factor = 1.5;
  std::size_t max_len_extra = 10;
  std::optional<std::size_t> max_len;  // overrides the source-relative limit
  int bos = bpe::kBosId;
  int eos = bpe::kEosId;

  std::size_t limit(std::size_t src_len) const {
    if (max_len) return *max_len;
    return static_cast<std::size_t>(std::floor(static_cast<double>(src_len) * max_len_factor)) + max_len_extra;
  }
};

struct Hypothesis {
  std::vector<int> tokens;  // without BOS/EOS
  double score = 0.0;       // summed log-probability, including EOS when finished
  double normalized = 0.0;
  bool finished_with_eos = false;
};

namespace detail {
struct Candidate {
  double score;
  std::size_t parent;
  int token;
};
inline bool better(const Candidate& a, const Candidate& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.parent != b.parent) return a.parent < b.parent;
  return a.token < b.token;
}
}  // namespace detail

// Each step keeps the `beam` best (hypothesis, token) extensions; those
// ending in EOS are finished, the rest stay live. A sentence stops when no
// live hypothesis can still beat its best finished one or at the length
// limit. Returns the best finished hypothesis by normalized score.
template <Scorer S>
std::vector<Hypothesis> beam_search(S& scorer, const std::vector<std::vector<int>>& src, const BeamConfig& cfg) {
  using State = typename S::State;
  if (cfg.beam == 0) throw ShapeError("beam width must be >= 1");
  if (src.empty()) return {};
  const std::size_t vocab = scorer.vocab();

  struct Live {
    State state;
    std::vector<int> tokens;
    int last;
    double score;
  };
  struct Sentence {
    std::vector<Live> live;
    std::vector<Hypothesis> finished;
    std::size_t limit;
    bool done = false;
  };

  auto initial = scorer.start(src);
  std::vector<Sentence> sent(src.size());
  for (std::size_t s = 0; s < src.size(); ++s) {
    sent[s].limit = std::max<std::size_t>(1, cfg.limit(src[s].size()));
    sent[s].live.push_back({std::move(initial[s]), {}, cfg.bos, 0.0});
  }

  auto finish = [&](Sentence& st, std::vector<int> tokens, double score, bool eos) {
    Hypothesis h;
    h.tokens = std::move(tokens);
    h.score = score;
    h.finished_with_eos = eos;
    h.normalized = length_normalize(score, std::max<std::size_t>(1, h.tokens.size() + (eos ? 1 : 0)), cfg.length_alpha);
    st.finished.push_back(std::move(h));
  };

  std::vector<State*> states;
  std::vector<int> prev;
  std::vector<double> logp;
  std::vector<detail::Candidate> cand;
  for (std::size_t t = 1;; ++t) {
    states.clear();
    prev.clear();
    for (auto& st : sent) {
      if (st.done) continue;
      for (auto& l : st.live) {
        states.push_back(&l.state);
        prev.push_back(l.last);
      }
    }
    if (states.empty()) break;
    scorer.step(std::span<State* const>(states), std::span<const int>(prev), logp);

    std::size_t row = 0;
    for (auto& st : sent) {
      if (st.done) continue;
      cand.clear();
      for (std::size_t h = 0; h < st.live.size(); ++h, ++row) {
        const double* lp = logp.data() + row * vocab;
        for (std::size_t v = 0; v < vocab; ++v) {
          cand.push_back({st.live[h].score + lp[v], h, static_cast<int>(v)});
        }
      }
      const std::size_t keep = std::min(cfg.beam, cand.size());
      std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(keep), cand.end(), detail::better);

      std::vector<std::size_t> uses(st.live.size(), 0);
      for (std::size_t i = 0; i < keep; ++i) {
        if (cand[i].token != cfg.eos) ++uses[cand[i].parent];
      }
      std::vector<Live> next;
      for (std::size_t i = 0; i < keep; ++i) {
        const auto& c = cand[i];
        auto& parent = st.live[c.parent];
        if (c.token == cfg.eos) {
          finish(st, parent.tokens, c.score, true);
          continue;
        }
        Live child{--uses[c.parent] == 0 ? std::move(parent.state) : parent.state, parent.tokens, c.token, c.score};
        child.tokens.push_back(c.token);
        next.push_back(std::move(child));
      }
      st.live = std::move(next);
      if (t >= st.limit) {
        for (auto& l : st.live) finish(st, std::move(l.tokens), l.score, false);
        st.live.clear();
      }
      if (st.live.empty()) {
        st.done = true;
        continue;
      }
      if (!st.finished.empty()) {
        double best_finished = -std::numeric_limits<double>::infinity();
        for (const auto& f : st.finished) best_finished = std::max(best_finished, f.normalized);
        double bound = -std::numeric_limits<double>::infinity();
        for (const auto& l : st.live) bound = std::max(bound, length_normalize(l.score, st.limit, cfg.length_alpha));
        if (best_finished >= bound) {
          st.done = true;
          st.live.clear();
        }
      }
    }
  }

  std::vector<Hypothesis> out;
  for (auto& st : sent) {
    auto best = std::max_element(st.finished.begin(), st.finished.end(), [](const Hypothesis& a, const Hypothesis& b) {
      return a.normalized < b.normalized;
    });
    out.push_back(*best);
  }
  return out;
}

// Scorer backed by the transformer's cached incremental decoder.
template <typename T>
class TransformerScorer {
 public:
  using State = DecoderState<T>;
  explicit TransformerScorer(const Transformer<T>& m) : model_(m) {}

  std::vector<State> start(const std::vector<std::vector<int>>& src) {
    std::vector<State> out;
    for (auto& c : model_.prepare_sources(src)) out.push_back(model_.start_state(std::move(c)));
    return out;
  }

  void step(std::span<State* const> states, std::span<const int> prev, std::vector<double>& out) {
    const auto logits = model_.decoder_step(states, prev);
    const std::size_t v = logits.cols(), n = logits.rows();
    out.resize(n * v);
    std::vector<T> row(v);
    for (std::size_t r = 0; r < n; ++r) {
      std::copy_n(logits.ptr() + r * v, v, row.data());
      detail::log_softmax_inplace(row.data(), v);
      for (std::size_t c = 0; c < v; ++c) out[r * v + c] = static_cast<double>(row[c]);
    }
  }

  std::size_t vocab() const { return model_.config().tgt_vocab; }

 private:
  const Transformer<T>& model_;
};

// Token-by-token argmax decoding (lowest id wins ties).
template <Scorer S>
std::vector<int> greedy_decode(S& scorer, const std::vector<int>& src, const BeamConfig& cfg) {
  auto init = scorer.start({src});
  auto state = std::move(init[0]);
  std::vector<int> out;
  int last = cfg.bos;
  std::vector<double> lp;
  const std::size_t limit = std::max<std::size_t>(1, cfg.limit(src.size()));
  for (std::size_t t = 0; t < limit; ++t) {
    auto* ptr = &state;
    scorer.step(std::span<typename S::State* const>(&ptr, 1), std::span<const int>(&last, 1), lp);
    const auto best = static_cast<int>(std::max_element(lp.begin(), lp.begin() + static_cast<std::ptrdiff_t>(scorer.vocab())) - lp.begin());
    if (best == cfg.eos) break;
    out.push_back(best);
    last = best;
  }
  return out;
}

struct TranslateOptions {
  BeamConfig beam;
  std::size_t batch = 64;
  std::size_t threads = 1;
};

// Splits the input into batches, decodes them (batches spread over worker
// threads), and returns hypotheses in input order.
template <typename T>
std::vector<Hypothesis> translate_batch(const Transformer<T>& model, const std::vector<std::vector<int>>& src,
                                        const TranslateOptions& opt) {
  if (opt.batch == 0) throw ShapeError("batch size must be >= 1");
  std::vector<Hypothesis> out(src.size());
  // Empty sources translate to empty output and are not sent to the model.
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (!src[i].empty()) todo.push_back(i);
  }
  const std::size_t nb = (todo.size() + opt.batch - 1) / opt.batch;
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto worker = [&] {
    try {
      TransformerScorer<T> scorer(model);
      for (std::size_t b = next++; b < nb; b = next++) {
        const std::size_t first = b * opt.batch, last = std::min(todo.size(), first + opt.batch);
        std::vector<std::vector<int>> chunk;
        for (std::size_t i = first; i < last; ++i) chunk.push_back(src[todo[i]]);
        auto hyps = beam_search(scorer, chunk, opt.beam);
        for (std::size_t i = 0; i < hyps.size(); ++i) out[todo[first + i]] = std::move(hyps[i]);
      }
    } catch (...) {
      std::lock_guard lock(error_mu);
      if (!error) error = std::current_exception();
      next = nb;
    }
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(opt.threads, nb));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
  return out;
}

}  // namespace mdn
