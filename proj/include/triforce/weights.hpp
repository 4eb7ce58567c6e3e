// Copyright 2026 The TriForce-CPU Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "triforce/model_config.hpp"
#include "triforce/rng.hpp"
#include "triforce/tensor.hpp"

namespace triforce {

struct LayerWeights {
  Tensor attn_norm;  // [d_model]
  Tensor wq;         // [d_model, n_heads * head_dim]
  Tensor wk;         // [d_model, n_kv_heads * head_dim]
  Tensor wv;         // [d_model, n_kv_heads * head_dim]
  Tensor wo;         // [n_heads * head_dim, d_model]
  Tensor ffn_norm;   // [d_model]
  Tensor w1;         // [d_model, d_ff] gate
  Tensor w3;         // [d_model, d_ff] up
  Tensor w2;         // [d_ff, d_model] down
};

struct ModelWeights {
  ModelConfig config;
  bool tied_head = false;
  Tensor tok_embeddings;  // [vocab, d_model]
  std::vector<LayerWeights> layers;
  Tensor final_norm;  // [d_model]
  Tensor output;      // [d_model, vocab]; empty when tied_head

  /// Named tensors in canonical (file) order.
  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.emplace_back("tok_embeddings", &tok_embeddings);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      const std::string p = "layers." + std::to_string(i) + ".";
      out.emplace_back(p + "attn_norm", &l.attn_norm);
      out.emplace_back(p + "wq", &l.wq);
      out.emplace_back(p + "wk", &l.wk);
      out.emplace_back(p + "wv", &l.wv);
      out.emplace_back(p + "wo", &l.wo);
      out.emplace_back(p + "ffn_norm", &l.ffn_norm);
      out.emplace_back(p + "w1", &l.w1);
      out.emplace_back(p + "w3", &l.w3);
      out.emplace_back(p + "w2", &l.w2);
    }
    out.emplace_back("norm", &final_norm);
    if (!tied_head) out.emplace_back("output", &output);
    return out;
  }

  std::vector<std::pair<std::string, Tensor*>> named_tensors_mut() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (auto& [name, t] : std::as_const(*this).named_tensors()) {
      out.emplace_back(name, const_cast<Tensor*>(t));
    }
    return out;
  }

  /// 64-bit FNV-1a over config, head flag and every tensor payload.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ull;
      }
    };
    mix(&config.n_layers, sizeof(std::uint32_t) * 7);
    mix(&config.rope_theta, sizeof(float));
    mix(&config.norm_eps, sizeof(float));
    const unsigned char tied = tied_head ? 1 : 0;
    mix(&tied, 1);
    for (const auto& [name, t] : named_tensors()) mix(t->data().data(), t->size() * sizeof(float));
    return h;
  }

  bool all_finite() const {
    for (const auto& [name, t] : named_tensors()) {
      if (!t->all_finite()) return false;
    }
    return true;
  }
};

/// Expected shape of every tensor for a config, in canonical order.
inline std::vector<std::pair<std::string, std::vector<std::size_t>>> expected_shapes(
    const ModelConfig& c, bool tied_head) {
  const std::size_t d = c.d_model();
  std::vector<std::pair<std::string, std::vector<std::size_t>>> out;
  out.push_back({"tok_embeddings", {c.vocab_size, d}});
  for (std::uint32_t i = 0; i < c.n_layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    out.push_back({p + "attn_norm", {d}});
    out.push_back({p + "wq", {d, d}});
    out.push_back({p + "wk", {d, c.kv_dim()}});
    out.push_back({p + "wv", {d, c.kv_dim()}});
    out.push_back({p + "wo", {d, d}});
    out.push_back({p + "ffn_norm", {d}});
    out.push_back({p + "w1", {d, c.d_ff}});
    out.push_back({p + "w3", {d, c.d_ff}});
    out.push_back({p + "w2", {c.d_ff, d}});
  }
  out.push_back({"norm", {d}});
  if (!tied_head) out.push_back({"output", {d, c.vocab_size}});
  return out;
}

/// Allocates zero tensors with the canonical shapes.
inline ModelWeights allocate_weights(const ModelConfig& config, bool tied_head) {
  config.validate();
  ModelWeights w;
  w.config = config;
  w.tied_head = tied_head;
  w.layers.resize(config.n_layers);
  auto shapes = expected_shapes(config, tied_head);
  auto targets = w.named_tensors_mut();
  for (std::size_t i = 0; i < shapes.size(); ++i) *targets[i].second = Tensor(shapes[i].second);
  return w;
}

/// Deterministic initialization: tensors are filled in canonical order from
/// one Rng(seed) stream, matrices with normal(0, 0.02), norm gains with 1.
inline ModelWeights generate_weights(const ModelConfig& config, std::uint64_t seed,
                                     bool tied_head = false) {
  ModelWeights w = allocate_weights(config, tied_head);
  Rng rng(seed);
  for (auto& [name, t] : w.named_tensors_mut()) {
    const bool is_gain = t->rank() == 1;
    for (float& v : t->data()) v = is_gain ? 1.0f : static_cast<float>(rng.normal(0.0, 0.02));
  }
  return w;
}

}  // namespace triforce
