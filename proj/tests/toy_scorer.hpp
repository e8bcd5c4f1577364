#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "mdn/infer.hpp"

namespace mdn::testing {

// Source-independent scorer whose log-probabilities come from a table
// indexed by [position][previous token][next token].
class TableScorer {
 public:
  struct State {
    std::size_t pos = 0;
  };

  TableScorer(std::size_t vocab, std::size_t positions, std::uint64_t seed, double peak) : vocab_(vocab) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> pick(0, vocab - 1);
    table_.resize(positions * vocab * vocab);
    for (std::size_t p = 0; p < positions; ++p) {
      for (std::size_t a = 0; a < vocab; ++a) {
        double* row = &table_[(p * vocab + a) * vocab];
        double z = 0;
        for (std::size_t b = 0; b < vocab; ++b) z += row[b] = u(rng);
        // peak > 0 concentrates mass on one token per row
        const std::size_t hot = pick(rng);
        row[hot] += peak * z;
        z += peak * z;
        for (std::size_t b = 0; b < vocab; ++b) row[b] = std::log(row[b] / z);
      }
    }
  }

  std::vector<State> start(const std::vector<std::vector<int>>& src) { return std::vector<State>(src.size()); }

  void step(std::span<State* const> states, std::span<const int> prev, std::vector<double>& out) {
    out.resize(states.size() * vocab_);
    for (std::size_t i = 0; i < states.size(); ++i) {
      const double* row = &table_[(states[i]->pos * vocab_ + static_cast<std::size_t>(prev[i])) * vocab_];
      std::copy_n(row, vocab_, out.data() + i * vocab_);
      ++states[i]->pos;
    }
  }

  std::size_t vocab() const { return vocab_; }

  double logp(std::size_t pos, int prev, int next) const {
    return table_[(pos * vocab_ + static_cast<std::size_t>(prev)) * vocab_ + static_cast<std::size_t>(next)];
  }

 private:
  std::size_t vocab_;
  std::vector<double> table_;
};

// Best output over every sequence the decoder may emit within `limit`
// steps: k < limit tokens followed by EOS, or exactly `limit` tokens.
inline Hypothesis exhaustive_best(const TableScorer& s, std::size_t limit, const BeamConfig& cfg) {
  Hypothesis best;
  best.normalized = -std::numeric_limits<double>::infinity();
  std::vector<int> seq;
  std::function<void(int, double)> rec = [&](int last, double score) {
    const std::size_t pos = seq.size();
    if (pos == limit) {
      const double n = length_normalize(score, limit, cfg.length_alpha);
      if (n > best.normalized) best = {seq, score, n, false};
      return;
    }
    const double eos = score + s.logp(pos, last, cfg.eos);
    const double n = length_normalize(eos, pos + 1, cfg.length_alpha);
    if (n > best.normalized) best = {seq, eos, n, true};
    for (int t = 0; t < static_cast<int>(s.vocab()); ++t) {
      if (t == cfg.eos) continue;
      seq.push_back(t);
      rec(t, score + s.logp(pos, last, t));
      seq.pop_back();
    }
  };
  rec(cfg.bos, 0.0);
  return best;
}

}  // namespace mdn::testing
