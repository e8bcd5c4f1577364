#pragma once

// Encoder-decoder transformer with independently switchable decoder tricks:
// decoder depth, single narrow head, FFN removal and low-rank output
// projection. Two decoding paths share every kernel:
//  - forward(): packed teacher-forced pass used for training;
//  - decoder_step(): one token for many hypotheses at once, reusing cached
//    self-attention keys/values and per-sentence cross-attention projections.
// Because the GEMM kernels are row-independent, the two paths agree.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mdn/config.hpp"
#include "mdn/ops.hpp"
#include "mdn/profile.hpp"
#include "mdn/tensor.hpp"

namespace mdn {

template <typename T>
struct Linear {
  Tensor<T> weight;  // in x out
  Tensor<T> bias;    // out
};

template <typename T>
Tensor<T> apply(const Linear<T>& l, const Tensor<T>& x) {
  return add_bias(matmul(x, l.weight), l.bias);
}

template <typename T>
struct Norm {
  Tensor<T> gain, bias;
};

template <typename T>
Tensor<T> apply(const Norm<T>& n, const Tensor<T>& x) {
  return layer_norm(x, n.gain, n.bias);
}

template <typename T>
struct AttentionParams {
  Linear<T> q, k, v;  // hidden -> heads*head_dim
  Linear<T> o;        // heads*head_dim -> hidden
  std::size_t heads = 1;
  std::size_t head_dim = 1;
  std::size_t width() const { return heads * head_dim; }
};

template <typename T>
struct FeedForwardParams {
  Linear<T> in, out;
};

template <typename T>
struct EncoderLayer {
  AttentionParams<T> self_attn;
  Norm<T> self_attn_norm;
  FeedForwardParams<T> ffn;
  Norm<T> ffn_norm;
};

template <typename T>
struct DecoderLayer {
  AttentionParams<T> self_attn;
  Norm<T> self_attn_norm;
  AttentionParams<T> cross_attn;
  Norm<T> cross_attn_norm;
  std::optional<FeedForwardParams<T>> ffn;
  std::optional<Norm<T>> ffn_norm;
};

// Full W (V x H), or W = A B^T with A (V x E) and B (H x E). No bias.
template <typename T>
struct OutputProjection {
  Tensor<T> weight;
  Tensor<T> a, b;
  bool factorized() const { return a.defined(); }
};

// Logits for hidden rows h (N x H). The factorized path multiplies (h B) A^T,
// which costs E (H + V) per row instead of H V.
template <typename T>
Tensor<T> output_logits(const Tensor<T>& h, const OutputProjection<T>& proj) {
  ProfileScope scope(Component::OutputProjection);
  if (proj.factorized()) return matmul_nt(matmul(h, proj.b), proj.a);
  return matmul_nt(h, proj.weight);
}

// Multiply count of one output projection for one hidden row.
inline std::size_t output_multiplies(std::size_t hidden, std::size_t vocab,
                                     std::optional<std::size_t> rank) {
  return rank ? *rank * (hidden + vocab) : hidden * vocab;
}

// ---- parameter accounting ---------------------------------------------------

struct ParamCounts {
  std::size_t embeddings = 0;
  std::size_t encoder = 0;
  std::size_t decoder = 0;
  std::size_t output = 0;
  std::size_t total = 0;
  double decoder_fraction = 0.0;
};

namespace detail {
inline std::size_t attention_params(std::size_t hidden, std::size_t width) {
  return 3 * (hidden * width + width) + width * hidden + hidden;
}
inline std::size_t ffn_params(std::size_t hidden, std::size_t ffn) {
  return 2 * hidden * ffn + ffn + hidden;
}
}  // namespace detail

// Closed-form counts. Decoder covers the decoder blocks and its final norm;
// the output projection and both embedding tables are reported separately.
inline ParamCounts count_params(const ModelConfig& c) {
  const std::size_t h = c.hidden;
  const std::size_t norm = 2 * h;
  const bool pre = c.norm_placement == NormPlacement::Pre;
  ParamCounts p;
  p.embeddings = c.src_vocab * h + c.tgt_vocab * h;
  const std::size_t enc_layer = detail::attention_params(h, h) + detail::ffn_params(h, c.ffn_dim) + 2 * norm;
  p.encoder = c.enc_layers * enc_layer + (pre && c.enc_layers > 0 ? norm : 0);
  std::size_t dec_layer = 2 * detail::attention_params(h, c.dec_attn_width()) + 2 * norm;
  if (c.dec_ffn_enabled) dec_layer += detail::ffn_params(h, c.ffn_dim) + norm;
  p.decoder = c.dec_layers * dec_layer + (pre && c.dec_layers > 0 ? norm : 0);
  p.output = c.output_rank ? c.tgt_vocab * *c.output_rank + h * *c.output_rank : c.tgt_vocab * h;
  p.total = p.embeddings + p.encoder + p.decoder + p.output;
  p.decoder_fraction = static_cast<double>(p.decoder) / static_cast<double>(p.total);
  return p;
}

// Encoder depth for `c` whose total parameter count is closest to target.
inline std::size_t match_encoder_depth(ModelConfig c, std::size_t target_total) {
  std::size_t best = 0;
  double best_gap = -1.0;
  for (std::size_t layers = 0; layers <= 1024; ++layers) {
    c.enc_layers = layers;
    const double total = static_cast<double>(count_params(c).total);
    const double gap = std::abs(total - static_cast<double>(target_total));
    if (best_gap < 0 || gap < best_gap) {
      best_gap = gap;
      best = layers;
    }
    if (total > static_cast<double>(target_total)) break;
  }
  return best;
}

// ---- forward-pass options ---------------------------------------------------

struct DropoutStats {
  std::size_t encoder_masks = 0;
  std::size_t decoder_masks = 0;
};

struct ForwardOptions {
  bool train = false;
  std::mt19937_64* rng = nullptr;
  DropoutStats* stats = nullptr;
  std::optional<double> decoder_dropout_override;  // wins over the model config
};

// Sinusoidal position encoding value for (position, channel).
template <typename T>
T position_encoding(std::size_t pos, std::size_t channel, std::size_t hidden) {
  const double k = static_cast<double>(channel / 2 * 2) / static_cast<double>(hidden);
  const double angle = static_cast<double>(pos) / std::pow(10000.0, k);
  return static_cast<T>(channel % 2 == 0 ? std::sin(angle) : std::cos(angle));
}

// ---- incremental decoding state ----------------------------------------------

// Cross-attention keys/values of one source sentence, computed once.
template <typename T>
struct SourceCache {
  std::size_t length = 0;
  std::vector<std::vector<T>> cross_k, cross_v;  // per decoder layer, length x width
};

// Per-hypothesis decoder state: self-attention keys/values of the consumed
// prefix for every layer.
template <typename T>
struct DecoderState {
  std::shared_ptr<const SourceCache<T>> source;
  std::size_t length = 0;
  std::vector<std::vector<T>> self_k, self_v;
};

// Rows of a packed batch and the attention segments that keep sentences apart.
struct PackedBatch {
  std::vector<int> ids;
  std::vector<std::size_t> positions;
  std::vector<std::size_t> offsets;  // start row of each sentence
  std::vector<std::size_t> lengths;
};

inline PackedBatch pack(const std::vector<std::vector<int>>& seqs) {
  PackedBatch p;
  for (const auto& s : seqs) {
    if (s.empty()) throw ShapeError("pack: empty sequence");
    p.offsets.push_back(p.ids.size());
    p.lengths.push_back(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      p.ids.push_back(s[i]);
      p.positions.push_back(i);
    }
  }
  if (p.ids.empty()) throw ShapeError("pack: empty batch");
  return p;
}

template <typename T>
class Transformer {
 public:
  using Params = std::vector<std::pair<std::string, Tensor<T>>>;

  // Randomly initialized model. Each tensor draws from its own generator
  // seeded by (seed, name), so toggling one parameter group leaves every
  // other group's values unchanged.
  explicit Transformer(ModelConfig cfg, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build();
    for (auto& [name, t] : named_parameters()) init_tensor(name, t, seed);
  }

  const ModelConfig& config() const { return cfg_; }

  // Parameter handles in a fixed order; the tensors alias the model's storage.
  Params named_parameters() const {
    Params out;
    out.emplace_back("src_embed", src_embed_);
    out.emplace_back("tgt_embed", tgt_embed_);
    for (std::size_t i = 0; i < enc_.size(); ++i) {
      const std::string p = "encoder.layers." + std::to_string(i) + ".";
      const auto& l = enc_[i];
      add_attention(out, p + "self_attn.", l.self_attn);
      add_norm(out, p + "self_attn_norm.", l.self_attn_norm);
      add_linear(out, p + "ffn.in.", l.ffn.in);
      add_linear(out, p + "ffn.out.", l.ffn.out);
      add_norm(out, p + "ffn_norm.", l.ffn_norm);
    }
    if (enc_final_) add_norm(out, "encoder.final_norm.", *enc_final_);
    for (std::size_t i = 0; i < dec_.size(); ++i) {
      const std::string p = "decoder.layers." + std::to_string(i) + ".";
      const auto& l = dec_[i];
      add_attention(out, p + "self_attn.", l.self_attn);
      add_norm(out, p + "self_attn_norm.", l.self_attn_norm);
      add_attention(out, p + "cross_attn.", l.cross_attn);
      add_norm(out, p + "cross_attn_norm.", l.cross_attn_norm);
      if (l.ffn) {
        add_linear(out, p + "ffn.in.", l.ffn->in);
        add_linear(out, p + "ffn.out.", l.ffn->out);
        add_norm(out, p + "ffn_norm.", *l.ffn_norm);
      }
    }
    if (dec_final_) add_norm(out, "decoder.final_norm.", *dec_final_);
    if (out_.factorized()) {
      out.emplace_back("output.A", out_.a);
      out.emplace_back("output.B", out_.b);
    } else {
      out.emplace_back("output.weight", out_.weight);
    }
    return out;
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [n, t] : named_parameters()) out.push_back(t);
    return out;
  }

  // Handle to one named parameter; throws if absent.
  Tensor<T> parameter(const std::string& name) const {
    for (auto& [n, t] : named_parameters()) {
      if (n == name) return t;
    }
    throw DataError("no parameter named " + name);
  }

  // Deep copy with independent storage.
  Transformer clone() const {
    Transformer c(*this);
    c.build();
    auto src = named_parameters();
    auto dst = c.named_parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
      std::copy(src[i].second.data().begin(), src[i].second.data().end(),
                dst[i].second.mutable_data().begin());
    }
    return c;
  }

  const std::vector<EncoderLayer<T>>& encoder_layers() const { return enc_; }
  const std::vector<DecoderLayer<T>>& decoder_layers() const { return dec_; }
  const OutputProjection<T>& output_projection() const { return out_; }

  // Packed encoder output (total source tokens x hidden).
  Tensor<T> encode(const PackedBatch& src, const ForwardOptions& opt = {}) const {
    auto x = embed(src_embed_, src, rate(opt, cfg_.dropout_embed, false), opt, false);
    std::vector<AttentionSegment> segs;
    for (std::size_t s = 0; s < src.offsets.size(); ++s) {
      segs.push_back({src.offsets[s], src.lengths[s], src.offsets[s], src.lengths[s]});
    }
    for (const auto& layer : enc_) {
      {
        ProfileScope scope(Component::EncoderAttention);
        x = sublayer(x, layer.self_attn_norm, rate(opt, cfg_.dropout_attn, false), opt, false,
                     [&](const Tensor<T>& in) {
                       return attention(layer.self_attn, in, in, segs, false);
                     });
      }
      {
        ProfileScope scope(Component::EncoderFfn);
        x = sublayer(x, layer.ffn_norm, rate(opt, cfg_.dropout_ffn, false), opt, false,
                     [&](const Tensor<T>& in) { return feed_forward(layer.ffn, in); });
      }
    }
    if (enc_final_) x = apply(*enc_final_, x);
    return x;
  }

  Tensor<T> encode(const std::vector<std::vector<int>>& src, const ForwardOptions& opt = {}) const {
    return encode(pack(src), opt);
  }

  // Teacher-forced decoder hidden states (total target rows x hidden) for
  // decoder inputs `tgt_in` (each starting with BOS) against packed encoder
  // output `enc` of `src`.
  Tensor<T> decode_hidden(const PackedBatch& tgt_in, const PackedBatch& src, const Tensor<T>& enc,
                          const ForwardOptions& opt = {}) const {
    if (tgt_in.offsets.size() != src.offsets.size()) {
      throw ShapeError("decode: source and target batch sizes differ");
    }
    auto x = embed(tgt_embed_, tgt_in, rate(opt, cfg_.dropout_embed, true), opt, true);
    std::vector<AttentionSegment> self_segs, cross_segs;
    for (std::size_t s = 0; s < tgt_in.offsets.size(); ++s) {
      self_segs.push_back({tgt_in.offsets[s], tgt_in.lengths[s], tgt_in.offsets[s], tgt_in.lengths[s]});
      cross_segs.push_back({tgt_in.offsets[s], tgt_in.lengths[s], src.offsets[s], src.lengths[s]});
    }
    for (const auto& layer : dec_) {
      {
        ProfileScope scope(Component::DecoderAttention);
        x = sublayer(x, layer.self_attn_norm, rate(opt, cfg_.dropout_attn, true), opt, true,
                     [&](const Tensor<T>& in) {
                       return attention(layer.self_attn, in, in, self_segs, true);
                     });
        x = sublayer(x, layer.cross_attn_norm, rate(opt, cfg_.dropout_attn, true), opt, true,
                     [&](const Tensor<T>& in) {
                       return attention(layer.cross_attn, in, enc, cross_segs, false);
                     });
      }
      if (layer.ffn) {
        ProfileScope scope(Component::DecoderFfn);
        x = sublayer(x, *layer.ffn_norm, rate(opt, cfg_.dropout_ffn, true), opt, true,
                     [&](const Tensor<T>& in) { return feed_forward(*layer.ffn, in); });
      }
    }
    if (dec_final_) x = apply(*dec_final_, x);
    return x;
  }

  // Teacher-forced logits (total target rows x V_tgt).
  Tensor<T> forward(const std::vector<std::vector<int>>& src,
                    const std::vector<std::vector<int>>& tgt_in,
                    const ForwardOptions& opt = {}) const {
    const auto ps = pack(src);
    const auto pt = pack(tgt_in);
    const auto enc = encode(ps, opt);
    return output_logits(decode_hidden(pt, ps, enc, opt), out_);
  }

  // Runs the encoder over a batch and precomputes each sentence's
  // cross-attention keys and values for every decoder layer.
  std::vector<std::shared_ptr<const SourceCache<T>>> prepare_sources(
      const std::vector<std::vector<int>>& src) const {
    NoGradGuard ng;
    const auto ps = pack(src);
    const auto enc = encode(ps);
    std::vector<std::shared_ptr<SourceCache<T>>> caches;
    for (std::size_t s = 0; s < src.size(); ++s) {
      auto c = std::make_shared<SourceCache<T>>();
      c->length = ps.lengths[s];
      caches.push_back(std::move(c));
    }
    {
      ProfileScope scope(Component::DecoderAttention);
      for (const auto& layer : dec_) {
        const std::size_t w = layer.cross_attn.width();
        const auto k = apply(layer.cross_attn.k, enc);
        const auto v = apply(layer.cross_attn.v, enc);
        for (std::size_t s = 0; s < src.size(); ++s) {
          const auto first = static_cast<std::ptrdiff_t>(ps.offsets[s] * w);
          const auto last = static_cast<std::ptrdiff_t>((ps.offsets[s] + ps.lengths[s]) * w);
          caches[s]->cross_k.emplace_back(k.data().begin() + first, k.data().begin() + last);
          caches[s]->cross_v.emplace_back(v.data().begin() + first, v.data().begin() + last);
        }
      }
    }
    return {caches.begin(), caches.end()};
  }

  DecoderState<T> start_state(std::shared_ptr<const SourceCache<T>> source) const {
    DecoderState<T> st;
    st.source = std::move(source);
    st.self_k.assign(dec_.size(), {});
    st.self_v.assign(dec_.size(), {});
    return st;
  }

  // Feeds prev_tokens[n] to states[n] and returns next-token logits
  // (N x V_tgt). Each state grows by exactly one position.
  Tensor<T> decoder_step(std::span<DecoderState<T>* const> states,
                         std::span<const int> prev_tokens) const {
    NoGradGuard ng;
    const std::size_t n = states.size();
    if (n == 0 || prev_tokens.size() != n) {
      throw ShapeError("decoder_step: need one previous token per state");
    }
    PackedBatch rows;
    for (std::size_t r = 0; r < n; ++r) {
      const auto* st = states[r];
      if (!st || !st->source || st->self_k.size() != dec_.size() || st->self_v.size() != dec_.size()) {
        throw ShapeError("decoder_step: state does not belong to this model");
      }
      for (std::size_t l = 0; l < dec_.size(); ++l) {
        const std::size_t w = dec_[l].self_attn.width();
        if (st->self_k[l].size() != st->length * w || st->self_v[l].size() != st->length * w) {
          throw ShapeError("decoder_step: cached prefix does not match state length");
        }
      }
      rows.ids.push_back(prev_tokens[r]);
      rows.positions.push_back(st->length);
    }
    ForwardOptions opt;
    auto x = embed(tgt_embed_, rows, 0.0, opt, true);
    std::vector<T> probs;
    for (std::size_t l = 0; l < dec_.size(); ++l) {
      const auto& layer = dec_[l];
      {
        ProfileScope scope(Component::DecoderAttention);
        x = sublayer(x, layer.self_attn_norm, 0.0, opt, true, [&](const Tensor<T>& in) {
          const auto& p = layer.self_attn;
          const std::size_t w = p.width();
          const auto q = apply(p.q, in), k = apply(p.k, in), v = apply(p.v, in);
          std::vector<T> ctx(n * w);
          for (std::size_t r = 0; r < n; ++r) {
            auto& ck = states[r]->self_k[l];
            auto& cv = states[r]->self_v[l];
            ck.insert(ck.end(), k.data().begin() + static_cast<std::ptrdiff_t>(r * w),
                      k.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * w));
            cv.insert(cv.end(), v.data().begin() + static_cast<std::ptrdiff_t>(r * w),
                      v.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * w));
            attend_cached(p, q.ptr() + r * w, ck.data(), cv.data(), states[r]->length + 1, probs,
                          ctx.data() + r * w);
          }
          return apply(p.o, Tensor<T>({n, w}, std::move(ctx)));
        });
        x = sublayer(x, layer.cross_attn_norm, 0.0, opt, true, [&](const Tensor<T>& in) {
          const auto& p = layer.cross_attn;
          const std::size_t w = p.width();
          const auto q = apply(p.q, in);
          std::vector<T> ctx(n * w);
          for (std::size_t r = 0; r < n; ++r) {
            const auto& src = *states[r]->source;
            attend_cached(p, q.ptr() + r * w, src.cross_k[l].data(), src.cross_v[l].data(),
                          src.length, probs, ctx.data() + r * w);
          }
          return apply(p.o, Tensor<T>({n, w}, std::move(ctx)));
        });
      }
      if (layer.ffn) {
        ProfileScope scope(Component::DecoderFfn);
        x = sublayer(x, *layer.ffn_norm, 0.0, opt, true,
                     [&](const Tensor<T>& in) { return feed_forward(*layer.ffn, in); });
      }
    }
    for (auto* st : states) ++st->length;
    if (dec_final_) x = apply(*dec_final_, x);
    return output_logits(x, out_);
  }

  // Single-state convenience wrapper.
  Tensor<T> decoder_step(DecoderState<T>& state, int prev_token) const {
    DecoderState<T>* ptr = &state;
    return decoder_step(std::span<DecoderState<T>* const>(&ptr, 1), std::span<const int>(&prev_token, 1));
  }

  // Projection, attention and output projection with explicit segments.
  Tensor<T> attention(const AttentionParams<T>& p, const Tensor<T>& xq, const Tensor<T>& xkv,
                      std::span<const AttentionSegment> segs, bool causal) const {
    const auto q = apply(p.q, xq);
    const auto k = apply(p.k, xkv);
    const auto v = apply(p.v, xkv);
    return apply(p.o, scaled_dot_attention(q, k, v, segs, p.heads, p.head_dim, causal));
  }

 private:
  static void add_linear(Params& out, const std::string& p, const Linear<T>& l) {
    out.emplace_back(p + "weight", l.weight);
    out.emplace_back(p + "bias", l.bias);
  }
  static void add_norm(Params& out, const std::string& p, const Norm<T>& n) {
    out.emplace_back(p + "gain", n.gain);
    out.emplace_back(p + "bias", n.bias);
  }
  static void add_attention(Params& out, const std::string& p, const AttentionParams<T>& a) {
    add_linear(out, p + "q.", a.q);
    add_linear(out, p + "k.", a.k);
    add_linear(out, p + "v.", a.v);
    add_linear(out, p + "o.", a.o);
  }

  static Linear<T> make_linear(std::size_t in, std::size_t out) {
    return {Tensor<T>::zeros({in, out}, true), Tensor<T>::zeros({out}, true)};
  }
  static Norm<T> make_norm(std::size_t h) {
    return {Tensor<T>::full({h}, T(1), true), Tensor<T>::zeros({h}, true)};
  }
  static AttentionParams<T> make_attention(std::size_t h, std::size_t heads, std::size_t head_dim) {
    const std::size_t w = heads * head_dim;
    return {make_linear(h, w), make_linear(h, w), make_linear(h, w), make_linear(w, h), heads, head_dim};
  }

  // Allocates fresh zero/one-initialized storage for every parameter.
  void build() {
    const std::size_t h = cfg_.hidden;
    const bool pre = cfg_.norm_placement == NormPlacement::Pre;
    src_embed_ = Tensor<T>::zeros({cfg_.src_vocab, h}, true);
    tgt_embed_ = Tensor<T>::zeros({cfg_.tgt_vocab, h}, true);
    enc_.clear();
    for (std::size_t i = 0; i < cfg_.enc_layers; ++i) {
      enc_.push_back({make_attention(h, cfg_.enc_heads, cfg_.enc_head_dim()), make_norm(h),
                      {make_linear(h, cfg_.ffn_dim), make_linear(cfg_.ffn_dim, h)}, make_norm(h)});
    }
    enc_final_.reset();
    if (pre && cfg_.enc_layers > 0) enc_final_ = make_norm(h);
    dec_.clear();
    for (std::size_t i = 0; i < cfg_.dec_layers; ++i) {
      DecoderLayer<T> l{make_attention(h, cfg_.dec_heads, cfg_.dec_head_dim), make_norm(h),
                        make_attention(h, cfg_.dec_heads, cfg_.dec_head_dim), make_norm(h),
                        std::nullopt, std::nullopt};
      if (cfg_.dec_ffn_enabled) {
        l.ffn = FeedForwardParams<T>{make_linear(h, cfg_.ffn_dim), make_linear(cfg_.ffn_dim, h)};
        l.ffn_norm = make_norm(h);
      }
      dec_.push_back(std::move(l));
    }
    dec_final_.reset();
    if (pre && cfg_.dec_layers > 0) dec_final_ = make_norm(h);
    out_ = {};
    if (cfg_.output_rank) {
      out_.a = Tensor<T>::zeros({cfg_.tgt_vocab, *cfg_.output_rank}, true);
      out_.b = Tensor<T>::zeros({h, *cfg_.output_rank}, true);
    } else {
      out_.weight = Tensor<T>::zeros({cfg_.tgt_vocab, h}, true);
    }
  }

  static std::uint64_t name_hash(const std::string& s) {
    std::uint64_t x = 1469598103934665603ULL;
    for (unsigned char c : s) {
      x ^= c;
      x *= 1099511628211ULL;
    }
    return x;
  }

  void init_tensor(const std::string& name, Tensor<T>& t, std::uint64_t seed) const {
    auto ends_with = [&](const char* suf) {
      const std::string s(suf);
      return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    if (ends_with("bias") || ends_with("gain")) return;  // zeros / ones from build()
    std::mt19937_64 rng(seed ^ name_hash(name));
    auto data = t.mutable_data();
    if (name == "src_embed" || name == "tgt_embed") {
      std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(cfg_.hidden)));
      for (auto& v : data) v = static_cast<T>(nd(rng));
      return;
    }
    // Xavier-uniform over the matrix's two dims.
    const double fan = static_cast<double>(t.dim(0) + t.dim(1));
    const double bound = std::sqrt(6.0 / fan);
    std::uniform_real_distribution<double> ud(-bound, bound);
    for (auto& v : data) v = static_cast<T>(ud(rng));
  }

  double rate(const ForwardOptions& opt, double base, bool decoder) const {
    if (!opt.train) return 0.0;
    if (decoder && opt.decoder_dropout_override) return *opt.decoder_dropout_override;
    if (decoder && cfg_.dropout_decoder_override) return *cfg_.dropout_decoder_override;
    return base;
  }

  Tensor<T> maybe_dropout(const Tensor<T>& x, double p, const ForwardOptions& opt, bool decoder) const {
    if (p <= 0.0) return x;
    if (!opt.rng) throw ShapeError("dropout requested without a generator");
    std::size_t* counter = nullptr;
    if (opt.stats) counter = decoder ? &opt.stats->decoder_masks : &opt.stats->encoder_masks;
    return dropout(x, p, *opt.rng, counter);
  }

  Tensor<T> embed(const Tensor<T>& table, const PackedBatch& b, double p, const ForwardOptions& opt,
                  bool decoder) const {
    const std::size_t h = cfg_.hidden;
    auto x = scale(embedding(table, std::span<const int>(b.ids)), static_cast<T>(std::sqrt(static_cast<double>(h))));
    std::vector<T> pe(b.ids.size() * h);
    for (std::size_t r = 0; r < b.ids.size(); ++r) {
      for (std::size_t c = 0; c < h; ++c) pe[r * h + c] = position_encoding<T>(b.positions[r], c, h);
    }
    x = add(x, Tensor<T>({b.ids.size(), h}, std::move(pe)));
    return maybe_dropout(x, p, opt, decoder);
  }

  template <typename F>
  Tensor<T> sublayer(const Tensor<T>& x, const Norm<T>& norm, double p, const ForwardOptions& opt,
                     bool decoder, F&& body) const {
    if (cfg_.norm_placement == NormPlacement::Pre) {
      return add(x, maybe_dropout(body(apply(norm, x)), p, opt, decoder));
    }
    return apply(norm, add(x, maybe_dropout(body(x), p, opt, decoder)));
  }

  static Tensor<T> feed_forward(const FeedForwardParams<T>& f, const Tensor<T>& x) {
    return apply(f.out, relu(apply(f.in, x)));
  }

  static void attend_cached(const AttentionParams<T>& p, const T* q, const T* k, const T* v,
                            std::size_t n_keys, std::vector<T>& probs, T* out) {
    const std::size_t w = p.width();
    const T sc = T(1) / std::sqrt(static_cast<T>(p.head_dim));
    probs.resize(n_keys);
    for (std::size_t h = 0; h < p.heads; ++h) {
      const std::size_t off = h * p.head_dim;
      detail::attend_row(q + off, k + off, v + off, n_keys, w, p.head_dim, sc, probs.data(), out + off);
    }
  }

  ModelConfig cfg_;
  Tensor<T> src_embed_, tgt_embed_;
  std::vector<EncoderLayer<T>> enc_;
  std::optional<Norm<T>> enc_final_;
  std::vector<DecoderLayer<T>> dec_;
  std::optional<Norm<T>> dec_final_;
  OutputProjection<T> out_;
};

// Component of a parameter name as reported by count_params.
inline std::string param_group(const std::string& name) {
  if (name == "src_embed" || name == "tgt_embed") return "embeddings";
  if (name.rfind("encoder.", 0) == 0) return "encoder";
  if (name.rfind("decoder.", 0) == 0) return "decoder";
  return "output";
}

}  // namespace mdn
