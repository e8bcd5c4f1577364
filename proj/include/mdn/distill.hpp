#pragma once

// Teacher-to-student weight surgery and the word-level distillation loss.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mdn/config.hpp"
#include "mdn/model.hpp"
#include "mdn/ops.hpp"

namespace mdn {

struct DistillConfig {
  double alpha = 0.5;        // weight of the gold cross-entropy term
  double temperature = 1.0;
  std::optional<std::size_t> head_index;  // absent: seeded random choice
  std::uint64_t head_seed = 0;

  void validate() const {
    if (alpha < 0.0 || alpha > 1.0) throw DataError("distill alpha must be in [0, 1]");
    if (!(temperature > 0.0)) throw DataError("distill temperature must be positive");
  }
  bool operator==(const DistillConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const DistillConfig& c) {
  j = nlohmann::json{{"alpha", c.alpha},
                     {"temperature", c.temperature},
                     {"head_index", c.head_index ? nlohmann::json(*c.head_index) : nlohmann::json()},
                     {"head_seed", c.head_seed}};
}

inline void from_json(const nlohmann::json& j, DistillConfig& c) {
  detail::reject_unknown_keys(j, {"alpha", "temperature", "head_index", "head_seed"}, "distill config");
  detail::read_field(j, "alpha", c.alpha);
  detail::read_field(j, "temperature", c.temperature);
  detail::read_optional(j, "head_index", c.head_index);
  detail::read_field(j, "head_seed", c.head_seed);
  c.validate();
}

// student layer i <- teacher layer i mod teacher_depth
inline std::vector<std::size_t> round_robin_mapping(std::size_t teacher_depth, std::size_t student_depth) {
  if (teacher_depth == 0 && student_depth > 0) throw ShapeError("round robin: teacher has no layers");
  std::vector<std::size_t> m(student_depth);
  for (std::size_t i = 0; i < student_depth; ++i) m[i] = i % teacher_depth;
  return m;
}

namespace detail {

template <typename T>
void copy_tensor(const Tensor<T>& from, Tensor<T> to, const char* what) {
  if (from.dims() != to.dims()) {
    throw ShapeError(std::string(what) + ": shape " + shape_str(from.dims()) + " vs " + shape_str(to.dims()));
  }
  std::copy(from.data().begin(), from.data().end(), to.mutable_data().begin());
}

template <typename T>
void copy_linear(const Linear<T>& from, const Linear<T>& to, const char* what) {
  copy_tensor(from.weight, to.weight, what);
  copy_tensor(from.bias, to.bias, what);
}

template <typename T>
void copy_norm(const Norm<T>& from, const Norm<T>& to, const char* what) {
  copy_tensor(from.gain, to.gain, what);
  copy_tensor(from.bias, to.bias, what);
}

template <typename T>
void copy_attention(const AttentionParams<T>& from, const AttentionParams<T>& to, const char* what) {
  copy_linear(from.q, to.q, what);
  copy_linear(from.k, to.k, what);
  copy_linear(from.v, to.v, what);
  copy_linear(from.o, to.o, what);
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& w, std::size_t first, std::size_t count) {
  const std::size_t rows = w.rows(), cols = w.cols();
  std::vector<T> out(rows * count);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(w.ptr() + r * cols + first, count, out.data() + r * count);
  }
  return Tensor<T>(w.rank() == 1 ? Shape{count} : Shape{rows, count}, std::move(out));
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& w, std::size_t first, std::size_t count) {
  const std::size_t cols = w.cols();
  std::vector<T> out(w.ptr() + first * cols, w.ptr() + (first + count) * cols);
  return Tensor<T>({count, cols}, std::move(out));
}

}  // namespace detail

// Copies every tensor of teacher encoder layer (i mod L) into student layer i.
template <typename T>
std::vector<std::size_t> round_robin_encoder_init(const Transformer<T>& teacher, Transformer<T>& student) {
  const auto& tl = teacher.encoder_layers();
  const auto& sl = student.encoder_layers();
  const auto mapping = round_robin_mapping(tl.size(), sl.size());
  for (std::size_t i = 0; i < sl.size(); ++i) {
    const auto& t = tl[mapping[i]];
    const auto& s = sl[i];
    detail::copy_attention(t.self_attn, s.self_attn, "encoder layer");
    detail::copy_norm(t.self_attn_norm, s.self_attn_norm, "encoder layer");
    detail::copy_linear(t.ffn.in, s.ffn.in, "encoder layer");
    detail::copy_linear(t.ffn.out, s.ffn.out, "encoder layer");
    detail::copy_norm(t.ffn_norm, s.ffn_norm, "encoder layer");
  }
  return mapping;
}

// Single-head attention weights cut from head `head` of a teacher block:
// Q/K/V column slices with their biases, the matching rows of the output
// projection, and the full output bias. Returns fresh storage.
template <typename T>
AttentionParams<T> select_head(const AttentionParams<T>& teacher, std::size_t head) {
  if (head >= teacher.heads) {
    throw ShapeError("head index " + std::to_string(head) + " out of range for " +
                     std::to_string(teacher.heads) + " heads");
  }
  const std::size_t d = teacher.head_dim, first = head * d;
  auto cut = [&](const Linear<T>& l) {
    return Linear<T>{detail::slice_cols(l.weight, first, d), detail::slice_cols(l.bias, first, d)};
  };
  AttentionParams<T> s;
  s.q = cut(teacher.q);
  s.k = cut(teacher.k);
  s.v = cut(teacher.v);
  s.o = {detail::slice_rows(teacher.o.weight, first, d), teacher.o.bias.clone()};
  s.heads = 1;
  s.head_dim = d;
  return s;
}

// Writes select_head(teacher, head) into an existing single-head student block.
template <typename T>
void select_head_init(const AttentionParams<T>& teacher, std::size_t head, const AttentionParams<T>& student) {
  if (student.heads != 1 || student.head_dim != teacher.head_dim) {
    throw ShapeError("head selection needs a single-head student with the teacher's head width");
  }
  detail::copy_attention(select_head(teacher, head), student, "head selection");
}

// ---- truncated SVD -----------------------------------------------------------

struct SvdResult {
  std::size_t rows = 0, cols = 0, rank = 0;
  std::vector<double> u;      // rows x rank
  std::vector<double> sigma;  // rank, descending
  std::vector<double> v;      // cols x rank
};

// Thin SVD by one-sided Jacobi rotations in double precision.
inline SvdResult jacobi_svd(std::span<const double> w, std::size_t rows, std::size_t cols,
                            std::size_t max_sweeps = 100) {
  if (w.size() != rows * cols || rows == 0 || cols == 0) throw ShapeError("svd: bad matrix shape");
  const bool transposed = rows < cols;
  const std::size_t m = transposed ? cols : rows;  // m >= n
  const std::size_t n = transposed ? rows : cols;
  // Columns stored contiguously: a[j*m + i].
  std::vector<double> a(m * n), vmat(n * n, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      if (transposed) a[r * m + c] = w[r * cols + c];
      else a[c * m + r] = w[r * cols + c];
    }
  }
  for (std::size_t j = 0; j < n; ++j) vmat[j * n + j] = 1.0;

  const double tol = static_cast<double>(m) * std::numeric_limits<double>::epsilon();
  bool converged = false;
  for (std::size_t sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
    converged = true;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double* ap = a.data() + p * m;
        double* aq = a.data() + q * m;
        double alpha = 0, beta = 0, gamma = 0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += ap[i] * ap[i];
          beta += aq[i] * aq[i];
          gamma += ap[i] * aq[i];
        }
        if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t), s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = ap[i], y = aq[i];
          ap[i] = c * x - s * y;
          aq[i] = s * x + c * y;
        }
        double* vp = vmat.data() + p * n;
        double* vq = vmat.data() + q * n;
        for (std::size_t i = 0; i < n; ++i) {
          const double x = vp[i], y = vq[i];
          vp[i] = c * x - s * y;
          vq[i] = s * x + c * y;
        }
      }
    }
  }
  if (!converged) throw NumericError("svd: Jacobi iteration did not converge");

  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0;
    for (std::size_t i = 0; i < m; ++i) s += a[j * m + i] * a[j * m + i];
    norms[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

  // Left vectors of the working matrix are normalized columns of a; right
  // vectors are columns of vmat. Swap roles if we worked on the transpose.
  SvdResult r;
  r.rows = rows;
  r.cols = cols;
  r.rank = n;
  r.sigma.resize(n);
  std::vector<double> left(m * n, 0.0), right(n * n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    r.sigma[k] = norms[j];
    for (std::size_t i = 0; i < m; ++i) left[i * n + k] = norms[j] > 0 ? a[j * m + i] / norms[j] : 0.0;
    for (std::size_t i = 0; i < n; ++i) right[i * n + k] = vmat[j * n + i];
  }
  if (transposed) {
    r.u = std::move(right);  // rows(=n) x n
    r.v = std::move(left);   // cols(=m) x n
  } else {
    r.u = std::move(left);
    r.v = std::move(right);
  }
  return r;
}

// Rank-E factors of W (V x H): A = U_E diag(sigma_E) (V x E), B = V_E (H x E),
// so W ~= A B^T with minimal Frobenius error.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> svd_factorize_output(const Tensor<T>& w, std::size_t rank) {
  if (w.rank() != 2) throw ShapeError("svd_factorize_output: W must be a matrix");
  const std::size_t rows = w.dim(0), cols = w.dim(1);
  if (rank == 0 || rank > std::min(rows, cols)) {
    throw ShapeError("svd_factorize_output: rank must be in [1, min(V, H)]");
  }
  std::vector<double> wd(w.data().begin(), w.data().end());
  const auto s = jacobi_svd(wd, rows, cols);
  std::vector<T> a(rows * rank), b(cols * rank);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t k = 0; k < rank; ++k) a[i * rank + k] = static_cast<T>(s.u[i * s.rank + k] * s.sigma[k]);
  }
  for (std::size_t i = 0; i < cols; ++i) {
    for (std::size_t k = 0; k < rank; ++k) b[i * rank + k] = static_cast<T>(s.v[i * s.rank + k]);
  }
  return {Tensor<T>({rows, rank}, std::move(a), true), Tensor<T>({cols, rank}, std::move(b), true)};
}

// ---- distillation loss ---------------------------------------------------------

// Mean over rows of alpha * CE(gold) + (1 - alpha) * T^2 * KL(p_t^T || p_s^T).
// Gradient flows to the student logits only.
template <typename T>
Tensor<T> kd_loss(const Tensor<T>& student, const Tensor<T>& teacher, std::span<const int> gold,
                  const DistillConfig& cfg) {
  cfg.validate();
  if (student.rank() != 2 || student.dims() != teacher.dims()) {
    throw ShapeError("kd_loss: student " + shape_str(student.dims()) + " vs teacher " + shape_str(teacher.dims()));
  }
  const std::size_t n = student.rows(), v = student.cols();
  if (gold.size() != n) throw ShapeError("kd_loss: one gold id per row required");
  const T alpha = static_cast<T>(cfg.alpha), temp = static_cast<T>(cfg.temperature);
  std::vector<T> grad(n * v);
  std::vector<T> ls(v), ls_t(v), lt_t(v);
  double total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (gold[r] < 0 || static_cast<std::size_t>(gold[r]) >= v) throw DataError("kd_loss: gold id out of range");
    const T* s = student.ptr() + r * v;
    const T* t = teacher.ptr() + r * v;
    std::copy_n(s, v, ls.data());
    detail::log_softmax_inplace(ls.data(), v);
    for (std::size_t c = 0; c < v; ++c) {
      ls_t[c] = s[c] / temp;
      lt_t[c] = t[c] / temp;
    }
    detail::log_softmax_inplace(ls_t.data(), v);
    detail::log_softmax_inplace(lt_t.data(), v);
    double kl = 0;
    for (std::size_t c = 0; c < v; ++c) {
      const T pt = std::exp(lt_t[c]);
      if (pt > 0) kl += static_cast<double>(pt) * static_cast<double>(lt_t[c] - ls_t[c]);
    }
    total += cfg.alpha * -static_cast<double>(ls[gold[r]]) +
             (1.0 - cfg.alpha) * cfg.temperature * cfg.temperature * kl;
    T* g = grad.data() + r * v;
    for (std::size_t c = 0; c < v; ++c) {
      const T ps = std::exp(ls[c]);
      const T onehot = static_cast<std::size_t>(gold[r]) == c ? T(1) : T(0);
      g[c] = alpha * (ps - onehot) + (T(1) - alpha) * temp * (std::exp(ls_t[c]) - std::exp(lt_t[c]));
    }
  }
  const T inv_n = T(1) / static_cast<T>(n);
  for (auto& x : grad) x *= inv_n;
  auto sn = student.node();
  return make_result<T>({1}, {static_cast<T>(total / static_cast<double>(n))}, {sn},
                        [sn, grad = std::move(grad)](detail::Node<T>& o) {
                          auto& g = sn->ensure_grad();
                          const T go = o.grad[0];
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += go * grad[i];
                        });
}

// ---- whole-model surgery ------------------------------------------------------------

struct WeightDistillReport {
  std::vector<std::size_t> encoder_mapping;
  std::vector<std::size_t> decoder_mapping;
  std::vector<std::size_t> self_attn_heads;   // per student decoder layer; empty when copied whole
  std::vector<std::size_t> cross_attn_heads;
  bool output_svd = false;
};

namespace detail {
template <typename T>
void init_attention_from(const AttentionParams<T>& t, const AttentionParams<T>& s, const DistillConfig& cfg,
                         std::mt19937_64& rng, std::vector<std::size_t>& picked) {
  if (t.heads == s.heads && t.head_dim == s.head_dim) {
    copy_attention(t, s, "decoder attention");
    return;
  }
  std::size_t head;
  if (cfg.head_index) {
    head = *cfg.head_index;
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, t.heads - 1);
    head = pick(rng);
  }
  select_head_init(t, head, s);
  picked.push_back(head);
}
}  // namespace detail

// Builds a student for `student_cfg` initialized from `teacher`: embeddings
// copied, encoder round-robin, decoder layers copied (heads selected when
// the student is single-head), output projection copied or SVD-factorized.
// Parameters without a teacher counterpart keep their seeded random init.
// The teacher is not modified.
template <typename T>
Transformer<T> weight_distill(const Transformer<T>& teacher, const ModelConfig& student_cfg,
                              const DistillConfig& cfg, std::uint64_t seed,
                              WeightDistillReport* report = nullptr) {
  cfg.validate();
  const auto& tc = teacher.config();
  if (tc.src_vocab != student_cfg.src_vocab || tc.tgt_vocab != student_cfg.tgt_vocab ||
      tc.hidden != student_cfg.hidden) {
    throw ShapeError("weight distillation requires matching vocabularies and hidden size");
  }
  Transformer<T> student(student_cfg, seed);
  WeightDistillReport rep;
  detail::copy_tensor(teacher.parameter("src_embed"), student.parameter("src_embed"), "src_embed");
  detail::copy_tensor(teacher.parameter("tgt_embed"), student.parameter("tgt_embed"), "tgt_embed");
  rep.encoder_mapping = round_robin_encoder_init(teacher, student);

  std::mt19937_64 rng(cfg.head_seed);
  const auto& td = teacher.decoder_layers();
  const auto& sd = student.decoder_layers();
  rep.decoder_mapping = round_robin_mapping(td.size(), sd.size());
  for (std::size_t i = 0; i < sd.size(); ++i) {
    const auto& t = td[rep.decoder_mapping[i]];
    const auto& s = sd[i];
    detail::init_attention_from(t.self_attn, s.self_attn, cfg, rng, rep.self_attn_heads);
    detail::init_attention_from(t.cross_attn, s.cross_attn, cfg, rng, rep.cross_attn_heads);
    detail::copy_norm(t.self_attn_norm, s.self_attn_norm, "decoder norm");
    detail::copy_norm(t.cross_attn_norm, s.cross_attn_norm, "decoder norm");
    if (s.ffn && t.ffn) {
      detail::copy_linear(t.ffn->in, s.ffn->in, "decoder ffn");
      detail::copy_linear(t.ffn->out, s.ffn->out, "decoder ffn");
      detail::copy_norm(*t.ffn_norm, *s.ffn_norm, "decoder ffn norm");
    }
  }
  for (const char* name : {"encoder.final_norm.gain", "encoder.final_norm.bias", "decoder.final_norm.gain",
                           "decoder.final_norm.bias"}) {
    try {
      detail::copy_tensor(teacher.parameter(name), student.parameter(name), name);
    } catch (const DataError&) {
      // absent on one side
    }
  }

  const auto& tp = teacher.output_projection();
  const auto& sp = student.output_projection();
  Tensor<T> w = tp.weight;
  if (tp.factorized()) {
    NoGradGuard ng;
    w = matmul_nt(tp.a, tp.b);
  }
  if (sp.factorized()) {
    if (tp.factorized() && tp.a.dims() == sp.a.dims()) {
      detail::copy_tensor(tp.a, sp.a, "output.A");
      detail::copy_tensor(tp.b, sp.b, "output.B");
    } else {
      auto [a, b] = svd_factorize_output(w, sp.a.dim(1));
      detail::copy_tensor(a, sp.a, "output.A");
      detail::copy_tensor(b, sp.b, "output.B");
      rep.output_svd = true;
    }
  } else {
    detail::copy_tensor(w, sp.weight, "output.weight");
  }
  if (report) *report = std::move(rep);
  return student;
}

}  // namespace mdn
