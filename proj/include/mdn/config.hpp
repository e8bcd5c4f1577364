#pragma once

#include <cstddef>
#include <optional>
#include <set>
#include <string>

#include "json.hpp"
#include "mdn/error.hpp"

namespace mdn {

enum class NormPlacement { Pre, Post };

inline std::string to_string(NormPlacement p) { return p == NormPlacement::Pre ? "pre" : "post"; }

inline NormPlacement parse_norm_placement(const std::string& s) {
  if (s == "pre") return NormPlacement::Pre;
  if (s == "post") return NormPlacement::Post;
  throw DataError("norm_placement must be \"pre\" or \"post\", got \"" + s + "\"");
}

// Every architecture knob. Each of the decoder tricks (depth, head pruning,
// FFN removal, output factorization) is an independent field.
struct ModelConfig {
  std::size_t hidden = 512;
  std::size_t ffn_dim = 2048;
  std::size_t enc_layers = 6;
  std::size_t dec_layers = 6;
  std::size_t enc_heads = 8;
  std::size_t dec_heads = 8;
  std::size_t dec_head_dim = 64;
  bool dec_ffn_enabled = true;
  std::optional<std::size_t> output_rank;  // absent: full V x H projection
  NormPlacement norm_placement = NormPlacement::Post;
  std::size_t src_vocab = 32000;
  std::size_t tgt_vocab = 32000;
  double dropout_attn = 0.1;
  double dropout_ffn = 0.1;
  double dropout_embed = 0.1;
  std::optional<double> dropout_decoder_override;  // replaces all decoder-side rates
  double label_smoothing = 0.1;

  std::size_t dec_attn_width() const { return dec_heads * dec_head_dim; }
  std::size_t enc_head_dim() const { return hidden / enc_heads; }

  void validate() const {
    auto fail = [](const std::string& m) { throw DataError("invalid model config: " + m); };
    if (hidden == 0 || ffn_dim == 0) fail("hidden and ffn_dim must be positive");
    if (src_vocab == 0 || tgt_vocab == 0) fail("vocabulary sizes must be positive");
    if (enc_heads == 0 || hidden % enc_heads != 0) fail("enc_heads must divide hidden");
    if (dec_heads == 0 || dec_head_dim == 0) fail("dec_heads and dec_head_dim must be positive");
    if (dec_heads * dec_head_dim > hidden) fail("dec_heads * dec_head_dim exceeds hidden");
    if (output_rank && (*output_rank == 0 || *output_rank > std::min(hidden, tgt_vocab))) {
      fail("output_rank must be in [1, min(hidden, tgt_vocab)]");
    }
    for (double p : {dropout_attn, dropout_ffn, dropout_embed}) {
      if (p < 0.0 || p >= 1.0) fail("dropout rates must be in [0, 1)");
    }
    if (dropout_decoder_override && (*dropout_decoder_override < 0.0 || *dropout_decoder_override >= 1.0)) {
      fail("dropout_decoder_override must be in [0, 1)");
    }
    if (label_smoothing < 0.0 || label_smoothing >= 1.0) fail("label_smoothing must be in [0, 1)");
  }

  bool operator==(const ModelConfig&) const = default;
};

// Transformer-base.
inline ModelConfig baseline_config(std::size_t src_vocab, std::size_t tgt_vocab) {
  ModelConfig c;
  c.src_vocab = src_vocab;
  c.tgt_vocab = tgt_vocab;
  return c;
}

// The decoder tricks applied to `base`: one layer, one head of width H/8,
// no FFN, rank-64 (capped at H) output factorization. The encoder is left
// as is; see match_encoder_depth.
inline ModelConfig mini_decoder_structure(ModelConfig base, std::size_t rank = 64) {
  base.dec_layers = 1;
  base.dec_head_dim = base.hidden / 8 ? base.hidden / 8 : 1;
  base.dec_heads = 1;
  base.dec_ffn_enabled = false;
  base.output_rank = std::min({rank, base.hidden, base.tgt_vocab});
  return base;
}

// Deep configuration plus the weak-regularization strategy.
inline ModelConfig mini_decoder_training_setup(ModelConfig c) {
  c.norm_placement = NormPlacement::Pre;
  c.dropout_decoder_override = 0.0;
  c.label_smoothing = 0.0;
  return c;
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"hidden", c.hidden},
                     {"ffn_dim", c.ffn_dim},
                     {"enc_layers", c.enc_layers},
                     {"dec_layers", c.dec_layers},
                     {"enc_heads", c.enc_heads},
                     {"dec_heads", c.dec_heads},
                     {"dec_head_dim", c.dec_head_dim},
                     {"dec_ffn_enabled", c.dec_ffn_enabled},
                     {"output_rank", c.output_rank ? nlohmann::json(*c.output_rank) : nlohmann::json()},
                     {"norm_placement", to_string(c.norm_placement)},
                     {"src_vocab", c.src_vocab},
                     {"tgt_vocab", c.tgt_vocab},
                     {"dropout_attn", c.dropout_attn},
                     {"dropout_ffn", c.dropout_ffn},
                     {"dropout_embed", c.dropout_embed},
                     {"dropout_decoder_override", c.dropout_decoder_override
                                                      ? nlohmann::json(*c.dropout_decoder_override)
                                                      : nlohmann::json()},
                     {"label_smoothing", c.label_smoothing}};
}

namespace detail {
inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& known,
                                const char* what) {
  if (!j.is_object()) throw DataError(std::string(what) + ": expected a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!known.count(k)) throw DataError(std::string(what) + ": unknown field \"" + k + "\"");
  }
}

template <typename V>
void read_field(const nlohmann::json& j, const char* key, V& out) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("field \"") + key + "\": " + e.what());
  }
}

template <typename V>
void read_optional(const nlohmann::json& j, const char* key, std::optional<V>& out) {
  if (!j.contains(key)) return;
  if (j.at(key).is_null()) {
    out.reset();
    return;
  }
  V v{};
  read_field(j, key, v);
  out = v;
}
}  // namespace detail

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  detail::reject_unknown_keys(
      j,
      {"hidden", "ffn_dim", "enc_layers", "dec_layers", "enc_heads", "dec_heads", "dec_head_dim",
       "dec_ffn_enabled", "output_rank", "norm_placement", "src_vocab", "tgt_vocab",
       "dropout_attn", "dropout_ffn", "dropout_embed", "dropout_decoder_override",
       "label_smoothing"},
      "model config");
  detail::read_field(j, "hidden", c.hidden);
  detail::read_field(j, "ffn_dim", c.ffn_dim);
  detail::read_field(j, "enc_layers", c.enc_layers);
  detail::read_field(j, "dec_layers", c.dec_layers);
  detail::read_field(j, "enc_heads", c.enc_heads);
  detail::read_field(j, "dec_heads", c.dec_heads);
  detail::read_field(j, "dec_head_dim", c.dec_head_dim);
  detail::read_field(j, "dec_ffn_enabled", c.dec_ffn_enabled);
  detail::read_optional(j, "output_rank", c.output_rank);
  if (j.contains("norm_placement")) {
    std::string s;
    detail::read_field(j, "norm_placement", s);
    c.norm_placement = parse_norm_placement(s);
  }
  detail::read_field(j, "src_vocab", c.src_vocab);
  detail::read_field(j, "tgt_vocab", c.tgt_vocab);
  detail::read_field(j, "dropout_attn", c.dropout_attn);
  detail::read_field(j, "dropout_ffn", c.dropout_ffn);
  detail::read_field(j, "dropout_embed", c.dropout_embed);
  detail::read_optional(j, "dropout_decoder_override", c.dropout_decoder_override);
  detail::read_field(j, "label_smoothing", c.label_smoothing);
}

}  // namespace mdn
