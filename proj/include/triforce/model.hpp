// Copyright 2026 The TriForce-CPU Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "triforce/kv_cache.hpp"
#include "triforce/tensor.hpp"
#include "triforce/weights.hpp"

namespace triforce {

/// Logits for the last rows() positions of one forward call.
class Logits {
 public:
  Logits() = default;
  Logits(std::size_t rows, std::size_t vocab) : vocab_(vocab), data_(rows * vocab, 0.0f) {}

  std::size_t rows() const { return vocab_ == 0 ? 0 : data_.size() / vocab_; }
  std::size_t vocab() const { return vocab_; }
  std::span<float> row(std::size_t r) { return std::span<float>(data_).subspan(r * vocab_, vocab_); }
  std::span<const float> row(std::size_t r) const {
    return std::span<const float>(data_).subspan(r * vocab_, vocab_);
  }
  std::span<const float> last() const { return row(rows() - 1); }

  /// Rows [first, rows()).
  Logits tail_from(std::size_t first) const {
    Logits out;
    out.vocab_ = vocab_;
    out.data_.assign(data_.begin() + static_cast<std::ptrdiff_t>(first * vocab_), data_.end());
    return out;
  }

 private:
  std::size_t vocab_ = 0;
  std::vector<float> data_;
};

struct AttentionProbe {
  std::size_t layer = 0;
  std::size_t head = 0;
  Position query_pos = 0;
  std::vector<float> weights;  // over positions [0, query_pos]
};

namespace detail {

/// Indices (into `scores`) of the `budget` largest scores, ties to the lower
/// index, returned ascending.
inline void top_budget(std::span<const float> scores, std::size_t budget, std::vector<std::uint32_t>& out) {
  out.resize(scores.size());
  std::iota(out.begin(), out.end(), 0u);
  if (budget >= scores.size()) return;
  auto better = [&](std::uint32_t a, std::uint32_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  std::nth_element(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(budget), out.end(), better);
  out.resize(budget);
  std::sort(out.begin(), out.end());
}

}  // namespace detail

/// One causal forward over `tokens`, appended after the cache's current
/// length. Returns one logits row per input token.
inline Logits forward(const ModelWeights& w, std::span<const Token> tokens, KVCache& cache) {
  const ModelConfig& c = w.config;
  if (tokens.empty()) throw ContractError("forward called with no tokens");
  if (!cache.compatible_with(c)) throw ContractError("cache shape does not match model config");
  for (Token t : tokens) {
    if (t < 0 || static_cast<std::uint32_t>(t) >= c.vocab_size) {
      throw ContractError("token id " + std::to_string(t) + " outside vocabulary");
    }
  }
  const std::size_t n = tokens.size();
  const std::size_t d = c.d_model();
  const std::size_t kvd = c.kv_dim();
  const std::size_t hd = c.head_dim;
  const std::size_t group = c.group_size();
  const std::size_t ff = c.d_ff;
  const Position start = cache.begin_forward(n);
  const std::size_t budget = cache.per_head_budget();
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

  std::vector<float> x(n * d);
  for (std::size_t r = 0; r < n; ++r) {
    auto e = w.tok_embeddings.row(static_cast<std::size_t>(tokens[r]));
    std::copy(e.begin(), e.end(), x.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  std::vector<float> rc(n * hd / 2), rs(n * hd / 2);
  for (std::size_t r = 0; r < n; ++r) {
    kernels::rope_angles(start + static_cast<Position>(r), hd, c.rope_theta,
                         std::span<float>(rc).subspan(r * hd / 2, hd / 2),
                         std::span<float>(rs).subspan(r * hd / 2, hd / 2));
  }

  std::vector<float> h(n * d), q(n * d), k(n * kvd), v(n * kvd), att(n * d), o(n * d);
  std::vector<float> g(n * ff), u(n * ff);
  std::vector<std::uint32_t> idx, sel;
  std::vector<float> scores, head_scores, summed;

  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const LayerWeights& L = w.layers[l];
    for (std::size_t r = 0; r < n; ++r) {
      kernels::rms_norm(std::span<const float>(x).subspan(r * d, d), L.attn_norm.data(), c.norm_eps,
                        std::span<float>(h).subspan(r * d, d));
    }
    kernels::matmul(h, n, d, L.wq.data(), d, q);
    kernels::matmul(h, n, d, L.wk.data(), kvd, k);
    kernels::matmul(h, n, d, L.wv.data(), kvd, v);
    for (std::size_t r = 0; r < n; ++r) {
      std::span<const float> cr = std::span<const float>(rc).subspan(r * hd / 2, hd / 2);
      std::span<const float> sr = std::span<const float>(rs).subspan(r * hd / 2, hd / 2);
      for (std::size_t hh = 0; hh < c.n_heads; ++hh) {
        kernels::rope_rotate(std::span<float>(q).subspan(r * d + hh * hd, hd), cr, sr);
      }
      for (std::size_t hh = 0; hh < c.n_kv_heads; ++hh) {
        kernels::rope_rotate(std::span<float>(k).subspan(r * kvd + hh * hd, hd), cr, sr);
      }
    }
    for (std::size_t r = 0; r < n; ++r) {
      const Position p = start + static_cast<Position>(r);
      cache.record_query(l, std::span<const float>(q).subspan(r * d, d));
      cache.append(l, p, std::span<const float>(k).subspan(r * kvd, kvd),
                   std::span<const float>(v).subspan(r * kvd, kvd));
    }

    for (std::size_t r = 0; r < n; ++r) {
      const Position p = start + static_cast<Position>(r);
      const bool probe = r + 1 == n;
      cache.exposure(l, p, idx);
      const KvStore& st = cache.layer(l);
      const std::size_t m = idx.size();
      summed.assign(m, 0.0f);
      scores.resize(m);
      for (std::size_t hh = 0; hh < c.n_heads; ++hh) {
        const std::size_t kv_off = (hh / group) * hd;
        std::span<const float> qh = std::span<const float>(q).subspan(r * d + hh * hd, hd);
        for (std::size_t j = 0; j < m; ++j) scores[j] = kernels::dot(qh, st.key(idx[j]).subspan(kv_off, hd)) * scale;
        detail::top_budget(scores, budget == 0 ? m : budget, sel);
        head_scores.resize(sel.size());
        for (std::size_t j = 0; j < sel.size(); ++j) head_scores[j] = scores[sel[j]];
        kernels::softmax(head_scores);
        float* out = att.data() + r * d + hh * hd;
        std::fill(out, out + hd, 0.0f);
        for (std::size_t j = 0; j < sel.size(); ++j) {
          const float a = head_scores[j];
          auto vj = st.value(idx[sel[j]]).subspan(kv_off, hd);
          for (std::size_t e = 0; e < hd; ++e) out[e] += a * vj[e];
          summed[sel[j]] += a;
        }
        if (probe) {
          auto& row = cache.probe_row(l, hh);
          row.assign(static_cast<std::size_t>(p) + 1, 0.0f);
          for (std::size_t j = 0; j < sel.size(); ++j) {
            row[static_cast<std::size_t>(st.positions[idx[sel[j]]])] = head_scores[j];
          }
        }
      }
      cache.observe(l, p, idx, summed);
    }

    kernels::matmul(att, n, d, L.wo.data(), d, o);
    for (std::size_t i = 0; i < n * d; ++i) x[i] += o[i];

    for (std::size_t r = 0; r < n; ++r) {
      kernels::rms_norm(std::span<const float>(x).subspan(r * d, d), L.ffn_norm.data(), c.norm_eps,
                        std::span<float>(h).subspan(r * d, d));
    }
    kernels::matmul(h, n, d, L.w1.data(), ff, g);
    kernels::matmul(h, n, d, L.w3.data(), ff, u);
    for (std::size_t i = 0; i < n * ff; ++i) g[i] = kernels::silu(g[i]) * u[i];
    kernels::matmul(g, n, ff, L.w2.data(), d, o);
    for (std::size_t i = 0; i < n * d; ++i) x[i] += o[i];
  }
  cache.set_probe_position(start + static_cast<Position>(n) - 1);

  for (std::size_t r = 0; r < n; ++r) {
    kernels::rms_norm(std::span<const float>(x).subspan(r * d, d), w.final_norm.data(), c.norm_eps,
                      std::span<float>(h).subspan(r * d, d));
  }
  Logits logits(n, c.vocab_size);
  for (std::size_t r = 0; r < n; ++r) {
    std::span<const float> hr = std::span<const float>(h).subspan(r * d, d);
    auto out = logits.row(r);
    if (w.tied_head) {
      for (std::size_t t = 0; t < c.vocab_size; ++t) out[t] = kernels::dot(hr, w.tok_embeddings.row(t));
    } else {
      kernels::matmul(hr, 1, d, w.output.data(), c.vocab_size, out);
    }
    for (float val : out) {
      if (!std::isfinite(val)) throw Error("non-finite logits at position " + std::to_string(start + r));
    }
  }
  return logits;
}

inline Logits prefill(const ModelWeights& w, std::span<const Token> tokens, KVCache& cache) {
  if (tokens.empty()) throw ContractError("prefill needs at least one token");
  if (tokens.size() > w.config.max_seq) {
    throw CapacityError("prompt of " + std::to_string(tokens.size()) + " tokens exceeds max_seq");
  }
  return forward(w, tokens, cache);
}

inline Logits decode_step(const ModelWeights& w, Token token, KVCache& cache) {
  if (cache.length() == 0) throw ContractError("decode_step on an empty cache; prefill first");
  const Token t[1] = {token};
  return forward(w, t, cache);
}

inline Logits decode_chunk(const ModelWeights& w, std::span<const Token> tokens, KVCache& cache) {
  if (tokens.empty()) throw ContractError("decode_chunk needs at least one token");
  if (cache.length() == 0) throw ContractError("decode_chunk on an empty cache; prefill first");
  return forward(w, tokens, cache);
}

/// Attention row of the most recent query at (layer, head).
inline AttentionProbe attention_probe(const ModelWeights& w, const KVCache& cache, std::size_t layer,
                                      std::size_t head) {
  if (layer >= w.config.n_layers) throw ContractError("probe layer " + std::to_string(layer) + " out of range");
  if (head >= w.config.n_heads) throw ContractError("probe head " + std::to_string(head) + " out of range");
  if (cache.probe_position() < 0) throw ContractError("no forward has run on this cache");
  return {layer, head, cache.probe_position(), cache.probe_row(layer, head)};
}

inline void require_shared_vocab(const ModelConfig& a, const ModelConfig& b) {
  if (a.vocab_size != b.vocab_size) {
    throw ContractError("draft and target vocabularies differ (" + std::to_string(a.vocab_size) + " vs " +
                        std::to_string(b.vocab_size) + ")");
  }
}

}  // namespace triforce
