#pragma once

// Byte-pair encoding: learning merge rules from a word-frequency table,
// applying them to words, and encoding whole sentences to vocabulary ids.
//
// Conventions
//  - A word is split into UTF-8 code points and the last one carries the
//    end-of-word marker "</w>" ("low" -> l o w</w>).
//  - Pair frequencies count every adjacent occurrence, overlapping ones
//    included ("aaa" holds (a,a) twice). Merging rewrites left to right.
//  - Equal frequencies are broken by the lexicographically smaller
//    (left, right) pair, compared bytewise.
//  - Learning stops after `num_merges` rules or when no pair occurs at least
//    twice.
//  - Vocabulary ids: 4 specials, then the alphabet sorted bytewise, then one
//    id per merge rule in learned order. A rule whose merged string equals an
//    existing symbol still owns its id slot; lookups resolve to the first id.
//    So vocab_size == 4 + |alphabet| + |merges|.
//
// Text is pre-split by simple_tokenize: whitespace separates words and every
// ASCII punctuation character becomes its own token.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mdn/error.hpp"

namespace mdn::bpe {

inline constexpr std::string_view kEndOfWord = "</w>";
inline constexpr std::string_view kHeader = "#version: mdn-bpe-1";

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kNumSpecials = 4;

inline const std::vector<std::string>& special_tokens() {
  static const std::vector<std::string> s = {"<pad>", "<s>", "</s>", "<unk>"};
  return s;
}

// Splits into UTF-8 code points. Malformed bytes become one-byte symbols.
inline std::vector<std::string> utf8_chars(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = 1;
    if (c >= 0xF0) len = 4;
    else if (c >= 0xE0) len = 3;
    else if (c >= 0xC0) len = 2;
    if (i + len > s.size()) len = 1;
    for (std::size_t j = 1; j < len; ++j) {
      if ((static_cast<unsigned char>(s[i + j]) & 0xC0) != 0x80) {
        len = 1;
        break;
      }
    }
    out.emplace_back(s.substr(i, len));
    i += len;
  }
  return out;
}

inline std::vector<std::string> simple_tokenize(std::string_view line) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : line) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(ch);
    }
  }
  flush();
  return out;
}

inline std::vector<std::string> split_whitespace(std::string_view line) {
  std::vector<std::string> out;
  std::istringstream is{std::string(line)};
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

inline std::vector<std::string> word_symbols(std::string_view word) {
  auto chars = utf8_chars(word);
  if (!chars.empty()) chars.back() += kEndOfWord;
  return chars;
}

struct MergeRule {
  std::string left, right;
  std::string merged() const { return left + right; }
  bool operator==(const MergeRule&) const = default;
};

struct PairHash {
  std::size_t operator()(const std::pair<std::string, std::string>& p) const {
    const std::size_t h1 = std::hash<std::string>{}(p.first);
    const std::size_t h2 = std::hash<std::string>{}(p.second);
    return h1 ^ (h2 + 0x9e3779b97f4a7c15ULL + (h1 << 6) + (h1 >> 2));
  }
};

class MergeTable {
 public:
  MergeTable() { rebuild(); }
  MergeTable(std::vector<MergeRule> merges, std::vector<std::string> alphabet)
      : merges_(std::move(merges)), alphabet_(std::move(alphabet)) {
    std::sort(alphabet_.begin(), alphabet_.end());
    alphabet_.erase(std::unique(alphabet_.begin(), alphabet_.end()), alphabet_.end());
    rebuild();
  }

  const std::vector<MergeRule>& merges() const { return merges_; }
  const std::vector<std::string>& alphabet() const { return alphabet_; }
  std::size_t num_merges() const { return merges_.size(); }
  std::size_t vocab_size() const { return tokens_.size(); }

  // Rank of a rule, or -1.
  int rank(const std::string& left, const std::string& right) const {
    auto it = ranks_.find({left, right});
    return it == ranks_.end() ? -1 : it->second;
  }

  int id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnkId : it->second;
  }
  bool contains(const std::string& token) const { return ids_.count(token) != 0; }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  // First k rules with the same alphabet.
  MergeTable truncated(std::size_t k) const {
    std::vector<MergeRule> m(merges_.begin(),
                             merges_.begin() + static_cast<std::ptrdiff_t>(std::min(k, merges_.size())));
    return MergeTable(std::move(m), alphabet_);
  }

  bool operator==(const MergeTable& o) const {
    return merges_ == o.merges_ && alphabet_ == o.alphabet_;
  }

 private:
  void rebuild() {
    tokens_ = special_tokens();
    tokens_.insert(tokens_.end(), alphabet_.begin(), alphabet_.end());
    for (const auto& r : merges_) tokens_.push_back(r.merged());
    ids_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) ids_.emplace(tokens_[i], static_cast<int>(i));
    ranks_.clear();
    for (std::size_t i = 0; i < merges_.size(); ++i) {
      ranks_.emplace(std::make_pair(merges_[i].left, merges_[i].right), static_cast<int>(i));
    }
  }

  std::vector<MergeRule> merges_;
  std::vector<std::string> alphabet_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
  std::unordered_map<std::pair<std::string, std::string>, int, PairHash> ranks_;
};

using WordCounts = std::map<std::string, std::uint64_t>;

inline WordCounts count_words(const std::vector<std::vector<std::string>>& sentences) {
  WordCounts wc;
  for (const auto& s : sentences) {
    for (const auto& w : s) ++wc[w];
  }
  return wc;
}

namespace detail {

// Pair-count bookkeeping over interned symbols for incremental learning.
class PairLearner {
 public:
  explicit PairLearner(const WordCounts& corpus) {
    for (const auto& [word, freq] : corpus) {
      if (word.empty() || freq == 0) continue;
      std::vector<int> syms;
      for (const auto& s : word_symbols(word)) syms.push_back(intern(s));
      words_.push_back(std::move(syms));
      freqs_.push_back(static_cast<std::int64_t>(freq));
    }
    for (std::uint32_t w = 0; w < words_.size(); ++w) add_word_pairs(w, +1);
    for (const auto& [key, cnt] : counts_) {
      if (cnt > 0) queue_.insert(Entry{cnt, key});
    }
    tracking_ = true;
  }

  bool empty() const { return words_.empty(); }

  std::vector<std::string> alphabet() const {
    std::vector<std::string> a(symbols_.begin(), symbols_.begin() + static_cast<std::ptrdiff_t>(base_symbols_));
    return a;
  }

  // Applies the best pair if it occurs at least twice.
  bool merge_best(MergeRule& rule) {
    if (queue_.empty()) return false;
    const Entry best = *queue_.begin();
    if (best.count < 2) return false;
    const int a = static_cast<int>(best.key >> 32);
    const int b = static_cast<int>(best.key & 0xffffffffu);
    rule = MergeRule{symbols_[static_cast<std::size_t>(a)], symbols_[static_cast<std::size_t>(b)]};
    const int c = intern(rule.merged(), /*base=*/false);

    std::vector<std::uint32_t> affected(where_[best.key].begin(), where_[best.key].end());
    std::sort(affected.begin(), affected.end());
    for (std::uint32_t w : affected) {
      add_word_pairs(w, -1);
      auto& syms = words_[w];
      std::vector<int> merged;
      merged.reserve(syms.size());
      for (std::size_t i = 0; i < syms.size(); ++i) {
        if (i + 1 < syms.size() && syms[i] == a && syms[i + 1] == b) {
          merged.push_back(c);
          ++i;
        } else {
          merged.push_back(syms[i]);
        }
      }
      syms = std::move(merged);
      add_word_pairs(w, +1);
    }
    flush_dirty();
    return true;
  }

 private:
  struct Entry {
    std::int64_t count;
    std::uint64_t key;
  };
  struct EntryLess {
    const std::vector<std::string>* symbols;
    bool operator()(const Entry& x, const Entry& y) const {
      if (x.count != y.count) return x.count > y.count;
      const auto& xl = (*symbols)[x.key >> 32];
      const auto& yl = (*symbols)[y.key >> 32];
      if (xl != yl) return xl < yl;
      return (*symbols)[x.key & 0xffffffffu] < (*symbols)[y.key & 0xffffffffu];
    }
  };

  static std::uint64_t key_of(int a, int b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
           static_cast<std::uint32_t>(b);
  }

  int intern(const std::string& s, bool base = true) {
    auto [it, inserted] = index_.emplace(s, static_cast<int>(symbols_.size()));
    if (inserted) {
      symbols_.push_back(s);
      if (base) base_symbols_ = symbols_.size();
    }
    return it->second;
  }

  void add_word_pairs(std::uint32_t w, int sign) {
    const auto& syms = words_[w];
    const std::int64_t f = freqs_[w] * sign;
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      const std::uint64_t k = key_of(syms[i], syms[i + 1]);
      if (tracking_) mark_dirty(k);
      counts_[k] += f;
      if (sign > 0) {
        where_[k].insert(w);
      } else {
        where_[k].erase(w);
      }
    }
  }

  void mark_dirty(std::uint64_t k) {
    if (dirty_.emplace(k, 0).second) {
      auto it = counts_.find(k);
      dirty_[k] = it == counts_.end() ? 0 : it->second;
    }
  }

  void flush_dirty() {
    for (const auto& [k, old_count] : dirty_) {
      if (old_count > 0) queue_.erase(Entry{old_count, k});
      const std::int64_t now = counts_[k];
      if (now > 0) {
        queue_.insert(Entry{now, k});
      } else {
        counts_.erase(k);
        where_.erase(k);
      }
    }
    dirty_.clear();
  }

  std::vector<std::string> symbols_;
  std::size_t base_symbols_ = 0;
  std::unordered_map<std::string, int> index_;
  std::vector<std::vector<int>> words_;
  std::vector<std::int64_t> freqs_;
  std::unordered_map<std::uint64_t, std::int64_t> counts_;
  std::unordered_map<std::uint64_t, std::unordered_set<std::uint32_t>> where_;
  std::unordered_map<std::uint64_t, std::int64_t> dirty_;
  std::set<Entry, EntryLess> queue_{EntryLess{&symbols_}};
  bool tracking_ = false;
};

}  // namespace detail

inline MergeTable learn_bpe(const WordCounts& corpus, std::size_t num_merges) {
  detail::PairLearner learner(corpus);
  if (learner.empty()) throw DataError("learn_bpe: empty corpus");
  std::vector<MergeRule> rules;
  rules.reserve(num_merges);
  MergeRule r;
  while (rules.size() < num_merges && learner.merge_best(r)) rules.push_back(r);
  return MergeTable(std::move(rules), learner.alphabet());
}

// Segments one word: repeatedly merges every occurrence of the lowest-ranked
// adjacent pair until no rule applies.
inline std::vector<std::string> apply_bpe(std::string_view word, const MergeTable& table) {
  auto syms = word_symbols(word);
  while (syms.size() > 1) {
    int best = -1;
    std::size_t at = 0;
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      const int r = table.rank(syms[i], syms[i + 1]);
      if (r >= 0 && (best < 0 || r < best)) {
        best = r;
        at = i;
      }
    }
    if (best < 0) break;
    const std::string left = syms[at], right = syms[at + 1];
    std::vector<std::string> next;
    next.reserve(syms.size());
    for (std::size_t i = 0; i < syms.size(); ++i) {
      if (i + 1 < syms.size() && syms[i] == left && syms[i + 1] == right) {
        next.push_back(left + right);
        ++i;
      } else {
        next.push_back(std::move(syms[i]));
      }
    }
    syms = std::move(next);
  }
  return syms;
}

// Concatenates subwords; every end-of-word marker becomes a word break.
inline std::string join_subwords(const std::vector<std::string>& subwords) {
  std::string out;
  bool pending_space = false;
  for (const auto& s : subwords) {
    if (pending_space) out.push_back(' ');
    pending_space = false;
    std::string_view sv = s;
    if (sv.size() >= kEndOfWord.size() && sv.substr(sv.size() - kEndOfWord.size()) == kEndOfWord) {
      sv.remove_suffix(kEndOfWord.size());
      pending_space = true;
    }
    out.append(sv);
  }
  return out;
}

struct TokenSequence {
  std::vector<int> ids;
  std::vector<std::string> surface;
};

inline TokenSequence encode_words(const std::vector<std::string>& words, const MergeTable& table) {
  TokenSequence seq;
  for (const auto& w : words) {
    for (auto& sub : apply_bpe(w, table)) {
      seq.ids.push_back(table.id(sub));
      seq.surface.push_back(std::move(sub));
    }
  }
  return seq;
}

inline std::string decode_ids(const std::vector<int>& ids, const MergeTable& table) {
  std::vector<std::string> subs;
  for (int id : ids) {
    if (id < kNumSpecials || static_cast<std::size_t>(id) >= table.vocab_size()) continue;
    subs.push_back(table.token(id));
  }
  return join_subwords(subs);
}

inline constexpr std::size_t kDefaultMaxUnits = 250;

struct EncodedCorpus {
  std::vector<TokenSequence> sequences;
  std::vector<std::size_t> kept;  // input index of each kept sequence
  std::size_t dropped = 0;
};

// Encodes pre-tokenized sentences, dropping those longer than max_units
// subword units.
inline EncodedCorpus encode_corpus(const std::vector<std::vector<std::string>>& sentences,
                                   const MergeTable& table,
                                   std::size_t max_units = kDefaultMaxUnits) {
  EncodedCorpus out;
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    auto seq = encode_words(sentences[i], table);
    if (seq.ids.size() > max_units) {
      ++out.dropped;
      continue;
    }
    out.sequences.push_back(std::move(seq));
    out.kept.push_back(i);
  }
  return out;
}

struct SweepRow {
  std::size_t requested_merges = 0;
  std::size_t learned_merges = 0;
  std::size_t vocab_size = 0;
  double mean_tokens = 0.0;
};

// Vocabulary size and mean sentence length per merge count. Learning is
// greedy, so the table for k merges is the first k rules of the largest one.
inline std::vector<SweepRow> sweep_merge_ops(const std::vector<std::vector<std::string>>& sentences,
                                             const std::vector<std::size_t>& merge_counts) {
  if (sentences.empty()) throw DataError("sweep_merge_ops: empty corpus");
  const std::size_t max_k =
      merge_counts.empty() ? 0 : *std::max_element(merge_counts.begin(), merge_counts.end());
  const MergeTable full = learn_bpe(count_words(sentences), max_k);
  std::vector<SweepRow> rows;
  for (std::size_t k : merge_counts) {
    const MergeTable t = full.truncated(k);
    std::size_t total = 0;
    for (const auto& s : sentences) total += encode_words(s, t).ids.size();
    rows.push_back({k, t.num_merges(), t.vocab_size(),
                    static_cast<double>(total) / static_cast<double>(sentences.size())});
  }
  return rows;
}

// ---- file formats ---------------------------------------------------------

inline void write_merges(std::ostream& os, const MergeTable& table) {
  os << kHeader << '\n';
  for (const auto& r : table.merges()) os << r.left << ' ' << r.right << '\n';
}

inline void write_vocab(std::ostream& os, const MergeTable& table) {
  for (std::size_t i = 0; i < table.vocab_size(); ++i) os << table.tokens()[i] << '\t' << i << '\n';
}

inline std::vector<MergeRule> read_merges(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kHeader) {
    throw DataError("merge table: missing header '" + std::string(kHeader) + "'");
  }
  std::vector<MergeRule> rules;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto sp = line.find(' ');
    if (sp == std::string::npos || sp == 0 || sp + 1 == line.size() ||
        line.find(' ', sp + 1) != std::string::npos) {
      throw DataError("merge table: malformed rule on line " + std::to_string(lineno));
    }
    rules.push_back({line.substr(0, sp), line.substr(sp + 1)});
  }
  return rules;
}

inline std::vector<std::string> read_vocab(std::istream& is) {
  std::vector<std::string> tokens;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos) throw DataError("vocab: missing tab on line " + std::to_string(lineno));
    const std::string tok = line.substr(0, tab);
    std::size_t id = 0;
    try {
      id = std::stoul(line.substr(tab + 1));
    } catch (const std::exception&) {
      throw DataError("vocab: bad id on line " + std::to_string(lineno));
    }
    if (id != tokens.size()) throw DataError("vocab: ids must be dense and ordered (line " + std::to_string(lineno) + ")");
    tokens.push_back(tok);
  }
  return tokens;
}

// Rebuilds a table from its merge file and vocabulary file.
inline MergeTable load_table(std::istream& merges_in, std::istream& vocab_in) {
  auto rules = read_merges(merges_in);
  auto tokens = read_vocab(vocab_in);
  const std::size_t specials = special_tokens().size();
  if (tokens.size() < specials + rules.size()) throw DataError("vocab is smaller than the merge table implies");
  for (std::size_t i = 0; i < specials; ++i) {
    if (tokens[i] != special_tokens()[i]) throw DataError("vocab: unexpected special token '" + tokens[i] + "'");
  }
  const std::size_t alpha_end = tokens.size() - rules.size();
  std::vector<std::string> alphabet(tokens.begin() + static_cast<std::ptrdiff_t>(specials),
                                    tokens.begin() + static_cast<std::ptrdiff_t>(alpha_end));
  for (std::size_t i = 0; i < rules.size(); ++i) {
    if (tokens[alpha_end + i] != rules[i].merged()) {
      throw DataError("vocab entry " + std::to_string(alpha_end + i) + " does not match merge rule");
    }
  }
  MergeTable t(std::move(rules), alphabet);
  if (t.alphabet() != alphabet) throw DataError("vocab: alphabet is not sorted and unique");
  return t;
}

inline MergeTable load_table(const std::string& merges_path, const std::string& vocab_path) {
  std::ifstream m(merges_path), v(vocab_path);
  if (!m) throw DataError("cannot open merge table " + merges_path);
  if (!v) throw DataError("cannot open vocabulary " + vocab_path);
  return load_table(m, v);
}

// FNV-1a over the vocabulary file contents, used to check that teacher and
// student share a vocabulary.
inline std::uint64_t vocab_checksum(const MergeTable& table) {
  std::ostringstream os;
  write_vocab(os, table);
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : os.str()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace mdn::bpe
