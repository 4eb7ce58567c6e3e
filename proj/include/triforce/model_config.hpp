// Copyright 2026 The TriForce-CPU Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "triforce/error.hpp"

namespace triforce {

using Token = std::int32_t;
using Position = std::int64_t;

/// Llama-style decoder shape. Field order is also the on-disk order.
struct ModelConfig {
  std::uint32_t n_layers = 4;
  std::uint32_t n_heads = 8;
  std::uint32_t n_kv_heads = 8;
  std::uint32_t head_dim = 16;
  std::uint32_t d_ff = 256;
  std::uint32_t vocab_size = 260;
  std::uint32_t max_seq = 4096;
  float rope_theta = 10000.0f;
  float norm_eps = 1e-5f;

  std::size_t d_model() const { return std::size_t{n_heads} * head_dim; }
  std::size_t kv_dim() const { return std::size_t{n_kv_heads} * head_dim; }
  std::size_t group_size() const { return n_heads / n_kv_heads; }

  void validate() const {
    auto fail = [](const std::string& what) { throw ContractError("invalid ModelConfig: " + what); };
    if (n_layers == 0) fail("n_layers must be >= 1");
    if (n_heads == 0 || n_kv_heads == 0) fail("head counts must be >= 1");
    if (n_heads % n_kv_heads != 0) fail("n_heads must be a multiple of n_kv_heads");
    if (head_dim == 0 || head_dim % 2 != 0) fail("head_dim must be even and positive");
    if (d_ff == 0) fail("d_ff must be >= 1");
    if (vocab_size < 2) fail("vocab_size must be >= 2");
    if (max_seq == 0) fail("max_seq must be >= 1");
    if (!(rope_theta > 0.0f)) fail("rope_theta must be positive");
    if (!(norm_eps >= 0.0f)) fail("norm_eps must be non-negative");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

namespace presets {

/// Desk-scale stand-in for the long-context target model.
inline ModelConfig target() { return ModelConfig{}; }

/// Desk-scale stand-in for the small draft model.
inline ModelConfig draft() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 4;
  c.n_kv_heads = 4;
  c.head_dim = 16;
  c.d_ff = 128;
  return c;
}

/// 16-symbol model used for distribution-level tests.
inline ModelConfig toy_target() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 4;
  c.n_kv_heads = 2;
  c.head_dim = 8;
  c.d_ff = 64;
  c.vocab_size = 16;
  c.max_seq = 256;
  return c;
}

inline ModelConfig toy_draft() {
  ModelConfig c = toy_target();
  c.n_layers = 1;
  c.n_heads = 2;
  c.n_kv_heads = 2;
  c.d_ff = 32;
  return c;
}

inline ModelConfig by_name(const std::string& name) {
  if (name == "target") return target();
  if (name == "draft") return draft();
  if (name == "toy-target") return toy_target();
  if (name == "toy-draft") return toy_draft();
  throw ContractError("unknown model preset '" + name + "'");
}

}  // namespace presets
}  // namespace triforce
