#pragma once

// Differentiable ops over Tensor. Only the shapes the transformer needs are
// supported: 2-D matmuls, row-wise normalizations, row bias broadcast and
// segment-aware attention. Rank > 2 inputs are treated as (rows x last dim).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "mdn/kernels.hpp"
#include "mdn/tensor.hpp"

namespace mdn {

inline constexpr double kLayerNormEps = 1e-5;

namespace detail {

template <typename T>
void require_matrix(const Tensor<T>& t, const char* what) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(what) + ": expected a matrix, got " + shape_str(t.dims()));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.dims() != b.dims()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.dims()) +
                     " vs " + shape_str(b.dims()));
  }
}

// In-place numerically stable softmax over n contiguous values.
template <typename T>
void softmax_inplace(T* x, std::size_t n) {
  T mx = x[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  T sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = std::exp(x[i] - mx);
    sum += x[i];
  }
  const T inv = T(1) / sum;
  for (std::size_t i = 0; i < n; ++i) x[i] *= inv;
}

// In-place log-softmax over n contiguous values.
template <typename T>
void log_softmax_inplace(T* x, std::size_t n) {
  T mx = x[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  T sum = 0;
  for (std::size_t i = 0; i < n; ++i) sum += std::exp(x[i] - mx);
  const T lse = mx + std::log(sum);
  for (std::size_t i = 0; i < n; ++i) x[i] -= lse;
}

// One query row of one head against n_keys key/value rows spaced `stride`
// apart. Writes the attention weights to probs[0..n_keys) and the weighted
// value sum to out[0..head_dim). Shared by the training op and incremental
// decoding so both paths perform identical arithmetic.
template <typename T>
void attend_row(const T* q, const T* k, const T* v, std::size_t n_keys,
                std::size_t stride, std::size_t head_dim, T scale, T* probs, T* out) {
  for (std::size_t j = 0; j < n_keys; ++j) {
    probs[j] = kernels::dot(q, k + j * stride, head_dim) * scale;
  }
  softmax_inplace(probs, n_keys);
  std::fill(out, out + head_dim, T(0));
  for (std::size_t j = 0; j < n_keys; ++j) {
    const T p = probs[j];
    const T* vr = v + j * stride;
    for (std::size_t d = 0; d < head_dim; ++d) out[d] += p * vr[d];
  }
}

}  // namespace detail

// a (m x k) * b (k x n)
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dims differ " + shape_str(a.dims()) + " * " +
                     shape_str(b.dims()));
  }
  std::vector<T> out(m * n);
  kernels::gemm_nn(m, n, k, a.ptr(), b.ptr(), out.data());
  auto an = a.node(), bn = b.node();
  return make_result<T>({m, n}, std::move(out), {an, bn},
                        [an, bn, m, n, k](detail::Node<T>& o) {
                          if (an->requires_grad) {  // dA = G * B^T
                            kernels::gemm_nt(m, k, n, o.grad.data(), bn->data.data(),
                                             an->ensure_grad().data(), true);
                          }
                          if (bn->requires_grad) {  // dB = A^T * G
                            kernels::gemm_tn(k, n, m, an->data.data(), o.grad.data(),
                                             bn->ensure_grad().data(), true);
                          }
                        });
}

// a (m x k) * b^T, with b stored (n x k)
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw ShapeError("matmul_nt: inner dims differ " + shape_str(a.dims()) + " * T" +
                     shape_str(b.dims()));
  }
  std::vector<T> out(m * n);
  kernels::gemm_nt(m, n, k, a.ptr(), b.ptr(), out.data());
  auto an = a.node(), bn = b.node();
  return make_result<T>({m, n}, std::move(out), {an, bn},
                        [an, bn, m, n, k](detail::Node<T>& o) {
                          if (an->requires_grad) {  // dA = G * B
                            kernels::gemm_nn(m, k, n, o.grad.data(), bn->data.data(),
                                             an->ensure_grad().data(), true);
                          }
                          if (bn->requires_grad) {  // dB = G^T * A
                            kernels::gemm_tn(n, k, m, o.grad.data(), an->data.data(),
                                             bn->ensure_grad().data(), true);
                          }
                        });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.ptr()[i] + b.ptr()[i];
  auto an = a.node(), bn = b.node();
  return make_result<T>(a.dims(), std::move(out), {an, bn}, [an, bn](detail::Node<T>& o) {
    for (auto* p : {an.get(), bn.get()}) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

// Elementwise product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.ptr()[i] * b.ptr()[i];
  auto an = a.node(), bn = b.node();
  return make_result<T>(a.dims(), std::move(out), {an, bn}, [an, bn](detail::Node<T>& o) {
    if (an->requires_grad) {
      auto& g = an->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bn->data[i];
    }
    if (bn->requires_grad) {
      auto& g = bn->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * an->data[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.ptr()[i] * s;
  auto an = a.node();
  return make_result<T>(a.dims(), std::move(out), {an}, [an, s](detail::Node<T>& o) {
    auto& g = an->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * s;
  });
}

// x (rows x n) + bias (n), broadcast over rows.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t n = x.cols(), rows = x.rows();
  if (bias.numel() != n) {
    throw ShapeError("add_bias: bias " + shape_str(bias.dims()) + " vs rows of width " +
                     std::to_string(n));
  }
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = x.ptr()[r * n + c] + bias.ptr()[c];
  }
  auto xn = x.node(), bn = bias.node();
  return make_result<T>(x.dims(), std::move(out), {xn, bn},
                        [xn, bn, rows, n](detail::Node<T>& o) {
                          if (xn->requires_grad) {
                            auto& g = xn->ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                          }
                          if (bn->requires_grad) {
                            auto& g = bn->ensure_grad();
                            for (std::size_t r = 0; r < rows; ++r) {
                              for (std::size_t c = 0; c < n; ++c) g[c] += o.grad[r * n + c];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(x.ptr()[i], T(0));
  auto xn = x.node();
  return make_result<T>(x.dims(), std::move(out), {xn}, [xn](detail::Node<T>& o) {
    auto& g = xn->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xn->data[i] > T(0)) g[i] += o.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  auto xn = x.node();
  return make_result<T>({1}, {s}, {xn}, [xn](detail::Node<T>& o) {
    auto& g = xn->ensure_grad();
    for (auto& v : g) v += o.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// Softmax along `axis`, stabilized by max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("softmax: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t len = x.dim(axis);

  std::vector<T> out(x.data().begin(), x.data().end());
  std::vector<T> lane(len);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      for (std::size_t i = 0; i < len; ++i) lane[i] = out[base + i * inner];
      detail::softmax_inplace(lane.data(), len);
      for (std::size_t i = 0; i < len; ++i) out[base + i * inner] = lane[i];
    }
  }
  auto xn = x.node();
  return make_result<T>(x.dims(), std::move(out), {xn},
                        [xn, outer, inner, len](detail::Node<T>& o) {
                          auto& g = xn->ensure_grad();
                          for (std::size_t a = 0; a < outer; ++a) {
                            for (std::size_t in = 0; in < inner; ++in) {
                              const std::size_t base = a * len * inner + in;
                              T dotgp = 0;
                              for (std::size_t i = 0; i < len; ++i) {
                                dotgp += o.grad[base + i * inner] * o.data[base + i * inner];
                              }
                              for (std::size_t i = 0; i < len; ++i) {
                                const std::size_t idx = base + i * inner;
                                g[idx] += o.data[idx] * (o.grad[idx] - dotgp);
                              }
                            }
                          }
                        });
}

// Normalizes each row over the last axis, then applies gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(kLayerNormEps)) {
  const std::size_t n = x.cols(), rows = x.rows();
  if (gain.numel() != n || bias.numel() != n) {
    throw ShapeError("layer_norm: gain/bias width does not match " + shape_str(x.dims()));
  }
  std::vector<T> out(x.numel()), xhat(x.numel()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * n;
    T mu = 0;
    for (std::size_t c = 0; c < n; ++c) mu += xr[c];
    mu /= static_cast<T>(n);
    T var = 0;
    for (std::size_t c = 0; c < n; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<T>(n);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t c = 0; c < n; ++c) {
      const T h = (xr[c] - mu) * inv;
      xhat[r * n + c] = h;
      out[r * n + c] = gain.ptr()[c] * h + bias.ptr()[c];
    }
  }
  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  return make_result<T>(
      x.dims(), std::move(out), {xn, gn, bn},
      [xn, gn, bn, rows, n, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](detail::Node<T>& o) {
        if (gn->requires_grad || bn->requires_grad) {
          auto& gg = gn->ensure_grad();
          auto& gb = bn->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < n; ++c) {
              gg[c] += o.grad[r * n + c] * xhat[r * n + c];
              gb[c] += o.grad[r * n + c];
            }
          }
        }
        if (!xn->requires_grad) return;
        auto& gx = xn->ensure_grad();
        std::vector<T> dh(n);
        for (std::size_t r = 0; r < rows; ++r) {
          T mean_dh = 0, mean_dh_h = 0;
          for (std::size_t c = 0; c < n; ++c) {
            dh[c] = o.grad[r * n + c] * gn->data[c];
            mean_dh += dh[c];
            mean_dh_h += dh[c] * xhat[r * n + c];
          }
          mean_dh /= static_cast<T>(n);
          mean_dh_h /= static_cast<T>(n);
          for (std::size_t c = 0; c < n; ++c) {
            gx[r * n + c] += inv_std[r] * (dh[c] - mean_dh - xhat[r * n + c] * mean_dh_h);
          }
        }
      });
}

// Gathers rows of `table` (vocab x dim).
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids) {
  detail::require_matrix(table, "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw ShapeError("embedding: empty id list");
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw DataError("embedding: id " + std::to_string(ids[i]) + " outside vocabulary of " +
                      std::to_string(vocab));
    }
    std::copy_n(table.ptr() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  auto tn = table.node();
  std::vector<int> idv(ids.begin(), ids.end());
  return make_result<T>({ids.size(), d}, std::move(out), {tn},
                        [tn, d, idv = std::move(idv)](detail::Node<T>& o) {
                          auto& g = tn->ensure_grad();
                          for (std::size_t i = 0; i < idv.size(); ++i) {
                            T* row = g.data() + static_cast<std::size_t>(idv[i]) * d;
                            for (std::size_t c = 0; c < d; ++c) row[c] += o.grad[i * d + c];
                          }
                        });
}

// Inverted dropout. A mask is drawn (and *masks_drawn incremented) only when
// p > 0; p == 0 is an exact identity.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, std::mt19937_64& rng,
                  std::size_t* masks_drawn = nullptr) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ShapeError("dropout: rate must be < 1");
  if (masks_drawn) ++*masks_drawn;
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.numel()), out(x.numel());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = uni(rng) >= p ? keep_scale : T(0);
    out[i] = x.ptr()[i] * mask[i];
  }
  auto xn = x.node();
  return make_result<T>(x.dims(), std::move(out), {xn},
                        [xn, mask = std::move(mask)](detail::Node<T>& o) {
                          auto& g = xn->ensure_grad();
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * mask[i];
                        });
}

// A contiguous block of query rows attending a contiguous block of key rows.
struct AttentionSegment {
  std::size_t q_offset = 0, q_len = 0, k_offset = 0, k_len = 0;
};

// Multi-head scaled dot-product attention over packed rows.
//
// q is (Nq x heads*head_dim), k and v are (Nk x heads*head_dim). Each segment
// pairs a run of query rows with a run of key rows; rows of different
// segments never see each other, so a batch of variable-length sentences is
// packed without padding. With `causal`, query i of a segment sees keys
// j <= i + (k_len - q_len). Heads are returned concatenated.
template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               std::span<const AttentionSegment> segments, std::size_t heads,
                               std::size_t head_dim, bool causal) {
  const std::size_t width = heads * head_dim;
  if (heads == 0 || head_dim == 0) throw ShapeError("attention: zero heads or head_dim");
  if (q.cols() != width || k.cols() != width || v.cols() != width) {
    throw ShapeError("attention: expected width " + std::to_string(width) + ", got q" +
                     shape_str(q.dims()) + " k" + shape_str(k.dims()) + " v" +
                     shape_str(v.dims()));
  }
  if (k.rows() != v.rows()) throw ShapeError("attention: key/value row counts differ");
  for (const auto& s : segments) {
    if (s.q_offset + s.q_len > q.rows() || s.k_offset + s.k_len > k.rows() || s.k_len == 0) {
      throw ShapeError("attention: segment outside packed rows");
    }
    if (causal && s.k_len < s.q_len) throw ShapeError("attention: causal segment with k_len < q_len");
  }

  const T sc = T(1) / std::sqrt(static_cast<T>(head_dim));
  // probs for (segment, head, query) rows stored back to back; offsets per segment.
  std::vector<std::size_t> prob_offset(segments.size());
  std::size_t total = 0;
  for (std::size_t s = 0; s < segments.size(); ++s) {
    prob_offset[s] = total;
    total += heads * segments[s].q_len * segments[s].k_len;
  }
  std::vector<T> probs(total, T(0));
  std::vector<T> out(q.rows() * width, T(0));

  for (std::size_t s = 0; s < segments.size(); ++s) {
    const auto& sg = segments[s];
    const std::size_t shift = sg.k_len - (causal ? sg.q_len : 0);
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < sg.q_len; ++i) {
        const std::size_t nk = causal ? i + 1 + shift : sg.k_len;
        T* pr = probs.data() + prob_offset[s] + (h * sg.q_len + i) * sg.k_len;
        detail::attend_row(q.ptr() + (sg.q_offset + i) * width + h * head_dim,
                           k.ptr() + sg.k_offset * width + h * head_dim,
                           v.ptr() + sg.k_offset * width + h * head_dim, nk, width, head_dim,
                           sc, pr, out.data() + (sg.q_offset + i) * width + h * head_dim);
      }
    }
  }

  auto qn = q.node(), kn = k.node(), vn = v.node();
  std::vector<AttentionSegment> segs(segments.begin(), segments.end());
  return make_result<T>(
      q.dims(), std::move(out), {qn, kn, vn},
      [qn, kn, vn, segs = std::move(segs), prob_offset = std::move(prob_offset),
       probs = std::move(probs), heads, head_dim, width, causal, sc](detail::Node<T>& o) {
        auto& gq = qn->ensure_grad();
        auto& gk = kn->ensure_grad();
        auto& gv = vn->ensure_grad();
        std::vector<T> dp;
        for (std::size_t s = 0; s < segs.size(); ++s) {
          const auto& sg = segs[s];
          const std::size_t shift = sg.k_len - (causal ? sg.q_len : 0);
          dp.resize(sg.k_len);
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < sg.q_len; ++i) {
              const std::size_t nk = causal ? i + 1 + shift : sg.k_len;
              const T* pr = probs.data() + prob_offset[s] + (h * sg.q_len + i) * sg.k_len;
              const T* go = o.grad.data() + (sg.q_offset + i) * width + h * head_dim;
              const T* qr = qn->data.data() + (sg.q_offset + i) * width + h * head_dim;
              T* gqr = gq.data() + (sg.q_offset + i) * width + h * head_dim;
              T dot_pd = 0;
              for (std::size_t j = 0; j < nk; ++j) {
                const std::size_t kr = (sg.k_offset + j) * width + h * head_dim;
                dp[j] = kernels::dot(go, vn->data.data() + kr, head_dim);
                dot_pd += dp[j] * pr[j];
                for (std::size_t d = 0; d < head_dim; ++d) gv[kr + d] += pr[j] * go[d];
              }
              for (std::size_t j = 0; j < nk; ++j) {
                const std::size_t kr = (sg.k_offset + j) * width + h * head_dim;
                const T ds = pr[j] * (dp[j] - dot_pd) * sc;
                for (std::size_t d = 0; d < head_dim; ++d) {
                  gqr[d] += ds * kn->data[kr + d];
                  gk[kr + d] += ds * qr[d];
                }
              }
            }
          }
        }
      });
}

}  // namespace mdn
