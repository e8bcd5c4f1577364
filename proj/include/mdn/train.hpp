#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "mdn/bpe.hpp"
#include "mdn/checkpoint.hpp"
#include "mdn/distill.hpp"
#include "mdn/model.hpp"
#include "mdn/optim.hpp"

namespace mdn {

struct TrainConfig {
  double peak_lr = 1e-3;
  std::size_t warmup_steps = 4000;
  std::size_t batch_tokens = 4096;
  std::size_t max_steps = 1000;
  std::optional<double> label_smoothing;           // absent: use the model config
  std::optional<double> decoder_dropout_override;  // absent: use the model config
  std::size_t checkpoint_interval = 0;             // 0: no checkpoints
  std::size_t log_interval = 100;
  std::uint64_t seed = 1;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;

  void validate() const {
    if (!(peak_lr > 0.0)) throw DataError("peak_lr must be positive");
    if (batch_tokens == 0) throw DataError("batch_tokens must be positive");
    if (label_smoothing && (*label_smoothing < 0.0 || *label_smoothing >= 1.0)) {
      throw DataError("label_smoothing must be in [0, 1)");
    }
    if (decoder_dropout_override && (*decoder_dropout_override < 0.0 || *decoder_dropout_override >= 1.0)) {
      throw DataError("decoder_dropout_override must be in [0, 1)");
    }
  }
  bool operator==(const TrainConfig&) const = default;
};

// Longer warmup and a doubled peak rate; pair with pre-norm models.
inline TrainConfig deep_configuration(TrainConfig c) {
  c.warmup_steps = 8000;
  c.peak_lr *= 2.0;
  return c;
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); };
  j = nlohmann::json{{"peak_lr", c.peak_lr},
                     {"warmup_steps", c.warmup_steps},
                     {"batch_tokens", c.batch_tokens},
                     {"max_steps", c.max_steps},
                     {"label_smoothing", opt(c.label_smoothing)},
                     {"decoder_dropout_override", opt(c.decoder_dropout_override)},
                     {"checkpoint_interval", c.checkpoint_interval},
                     {"log_interval", c.log_interval},
                     {"seed", c.seed},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"adam_eps", c.adam_eps}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  detail::reject_unknown_keys(j,
                              {"peak_lr", "warmup_steps", "batch_tokens", "max_steps", "label_smoothing",
                               "decoder_dropout_override", "checkpoint_interval", "log_interval", "seed",
                               "beta1", "beta2", "adam_eps"},
                              "train config");
  detail::read_field(j, "peak_lr", c.peak_lr);
  detail::read_field(j, "warmup_steps", c.warmup_steps);
  detail::read_field(j, "batch_tokens", c.batch_tokens);
  detail::read_field(j, "max_steps", c.max_steps);
  detail::read_optional(j, "label_smoothing", c.label_smoothing);
  detail::read_optional(j, "decoder_dropout_override", c.decoder_dropout_override);
  detail::read_field(j, "checkpoint_interval", c.checkpoint_interval);
  detail::read_field(j, "log_interval", c.log_interval);
  detail::read_field(j, "seed", c.seed);
  detail::read_field(j, "beta1", c.beta1);
  detail::read_field(j, "beta2", c.beta2);
  detail::read_field(j, "adam_eps", c.adam_eps);
  c.validate();
}

// Inverse square-root schedule with linear warmup; step is 1-based.
inline double learning_rate(const TrainConfig& c, std::size_t step) {
  const double s = static_cast<double>(std::max<std::size_t>(step, 1));
  if (c.warmup_steps == 0) return c.peak_lr;
  const double w = static_cast<double>(c.warmup_steps);
  return c.peak_lr * std::min(s / w, std::sqrt(w / s));
}

// Mean over rows of cross-entropy against (1 - eps) on gold and eps / (V - 1)
// on every other class.
template <typename T>
Tensor<T> label_smoothed_ce(const Tensor<T>& logits, std::span<const int> gold, double eps) {
  if (eps < 0.0 || eps >= 1.0) throw DataError("label smoothing must be in [0, 1)");
  if (logits.rank() != 2) throw ShapeError("label_smoothed_ce: logits must be a matrix");
  const std::size_t n = logits.rows(), v = logits.cols();
  if (gold.size() != n) throw ShapeError("label_smoothed_ce: one gold id per row required");
  const double off = v > 1 ? eps / static_cast<double>(v - 1) : 0.0;
  const double on = v > 1 ? 1.0 - eps : 1.0;
  std::vector<T> grad(n * v);
  std::vector<T> lp(v);
  double total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (gold[r] < 0 || static_cast<std::size_t>(gold[r]) >= v) throw DataError("gold id out of range");
    std::copy_n(logits.ptr() + r * v, v, lp.data());
    detail::log_softmax_inplace(lp.data(), v);
    double row = 0;
    for (std::size_t c = 0; c < v; ++c) {
      const double q = static_cast<std::size_t>(gold[r]) == c ? on : off;
      if (q > 0) row -= q * static_cast<double>(lp[c]);
      grad[r * v + c] = static_cast<T>(std::exp(static_cast<double>(lp[c])) - q);
    }
    total += row;
  }
  const T inv_n = T(1) / static_cast<T>(n);
  for (auto& g : grad) g *= inv_n;
  auto ln = logits.node();
  return make_result<T>({1}, {static_cast<T>(total / static_cast<double>(n))}, {ln},
                        [ln, grad = std::move(grad)](detail::Node<T>& o) {
                          auto& g = ln->ensure_grad();
                          const T go = o.grad[0];
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += go * grad[i];
                        });
}

// One sentence pair; target ids exclude BOS and EOS.
struct Example {
  std::vector<int> src, tgt;
};

struct Batch {
  std::vector<std::vector<int>> src, tgt_in;
  std::vector<int> gold;
  std::size_t tokens = 0;
};

inline Batch make_batch(const std::vector<Example>& data, std::span<const std::size_t> idx) {
  Batch b;
  for (std::size_t i : idx) {
    const auto& e = data[i];
    if (e.src.empty()) throw DataError("training example with empty source");
    b.src.push_back(e.src);
    std::vector<int> in{bpe::kBosId};
    in.insert(in.end(), e.tgt.begin(), e.tgt.end());
    b.tgt_in.push_back(std::move(in));
    b.gold.insert(b.gold.end(), e.tgt.begin(), e.tgt.end());
    b.gold.push_back(bpe::kEosId);
    b.tokens += e.src.size() + e.tgt.size() + 1;
  }
  return b;
}

// One shuffled epoch split into batches of at most `budget` tokens
// (source + target + EOS); a single longer example forms its own batch.
inline std::vector<std::vector<std::size_t>> token_batches(const std::vector<Example>& data, std::size_t budget,
                                                           std::mt19937_64& rng) {
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> cur;
  std::size_t tokens = 0;
  for (std::size_t i : order) {
    const std::size_t t = data[i].src.size() + data[i].tgt.size() + 1;
    if (!cur.empty() && tokens + t > budget) {
      out.push_back(std::move(cur));
      cur.clear();
      tokens = 0;
    }
    cur.push_back(i);
    tokens += t;
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

struct LossRow {
  std::size_t step = 0;
  double loss = 0.0;
  double tokens_per_sec = 0.0;
};

inline void write_loss_csv(std::ostream& os, const std::vector<LossRow>& rows) {
  os << "step,loss,tokens_per_sec\n";
  for (const auto& r : rows) os << r.step << ',' << r.loss << ',' << r.tokens_per_sec << '\n';
}

template <typename T>
struct Teacher {
  const Transformer<T>* model = nullptr;
  DistillConfig config;
};

struct TrainResult {
  std::vector<LossRow> curve;
  std::vector<std::string> checkpoints;
  DropoutStats dropout;
  std::size_t steps = 0;
};

struct TrainHooks {
  std::function<void(const LossRow&)> on_log;
  std::function<bool(std::size_t step)> stop;  // polled at log steps
  nlohmann::json checkpoint_meta = nlohmann::json::object();
  std::string checkpoint_dir;  // empty: keep nothing on disk
};

inline std::string checkpoint_path(const std::string& dir, std::size_t step) {
  char name[32];
  std::snprintf(name, sizeof name, "checkpoint_%08zu.bin", step);
  return (std::filesystem::path(dir) / name).string();
}

// Trains `model` in place. With a teacher, the word-level distillation loss
// replaces label-smoothed cross-entropy.
template <typename T>
TrainResult train_loop(Transformer<T>& model, const std::vector<Example>& data, const TrainConfig& cfg,
                       const Teacher<std::type_identity_t<T>>* teacher = nullptr, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (data.empty()) throw DataError("no training data");
  if (teacher && !teacher->model) throw DataError("teacher without a model");
  if (!hooks.checkpoint_dir.empty()) std::filesystem::create_directories(hooks.checkpoint_dir);
  const double eps = cfg.label_smoothing.value_or(model.config().label_smoothing);

  Adam<T> opt(model.parameters(), {cfg.peak_lr, cfg.beta1, cfg.beta2, cfg.adam_eps});
  std::mt19937_64 rng(cfg.seed);
  TrainResult res;
  ForwardOptions fwd{true, &rng, &res.dropout, cfg.decoder_dropout_override};

  std::size_t step = 0;
  while (step < cfg.max_steps) {
    for (const auto& idx : token_batches(data, cfg.batch_tokens, rng)) {
      if (step >= cfg.max_steps) break;
      ++step;
      const auto t0 = std::chrono::steady_clock::now();
      const Batch b = make_batch(data, idx);
      opt.set_lr(learning_rate(cfg, step));
      opt.zero_grad();
      const auto logits = model.forward(b.src, b.tgt_in, fwd);
      Tensor<T> loss;
      if (teacher) {
        Tensor<T> tl;
        {
          NoGradGuard ng;
          tl = teacher->model->forward(b.src, b.tgt_in);
        }
        loss = kd_loss(logits, tl, b.gold, teacher->config);
      } else {
        loss = label_smoothed_ce(logits, b.gold, eps);
      }
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv)) {
        throw NumericError("non-finite loss at step " + std::to_string(step) + " (lr " +
                           std::to_string(learning_rate(cfg, step)) + ")");
      }
      loss.backward();
      opt.step();
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      LossRow row{step, lv, secs > 0 ? static_cast<double>(b.tokens) / secs : 0.0};
      res.curve.push_back(row);
      if (!hooks.checkpoint_dir.empty() && cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0) {
        const auto path = checkpoint_path(hooks.checkpoint_dir, step);
        save_checkpoint(path, to_checkpoint(model, step, hooks.checkpoint_meta));
        res.checkpoints.push_back(path);
      }
      if (cfg.log_interval > 0 && step % cfg.log_interval == 0) {
        if (hooks.on_log) hooks.on_log(row);
        if (hooks.stop && hooks.stop(step)) {
          res.steps = step;
          return res;
        }
      }
    }
  }
  res.steps = step;
  return res;
}

}  // namespace mdn
