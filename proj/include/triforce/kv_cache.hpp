// Copyright 2026 The TriForce-CPU Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "triforce/model_config.hpp"

namespace triforce {

enum class CachePolicy { Full, Streaming, H2O, Retrieval, TopK };

inline const char* to_string(CachePolicy p) {
  switch (p) {
    case CachePolicy::Full: return "full";
    case CachePolicy::Streaming: return "streaming";
    case CachePolicy::H2O: return "h2o";
    case CachePolicy::Retrieval: return "retrieval";
    case CachePolicy::TopK: return "topk";
  }
  return "?";
}

/// Per-layer key/value rows kept sorted by absolute position.
struct KvStore {
  std::size_t width = 0;  // n_kv_heads * head_dim
  std::vector<Position> positions;
  std::vector<float> keys;
  std::vector<float> values;

  std::size_t size() const { return positions.size(); }

  std::span<const float> key(std::size_t i) const { return {keys.data() + i * width, width}; }
  std::span<const float> value(std::size_t i) const { return {values.data() + i * width, width}; }

  void push_back(Position pos, std::span<const float> k, std::span<const float> v) {
    positions.push_back(pos);
    keys.insert(keys.end(), k.begin(), k.end());
    values.insert(values.end(), v.begin(), v.end());
  }

  void erase(std::size_t i) {
    positions.erase(positions.begin() + static_cast<std::ptrdiff_t>(i));
    const auto off = static_cast<std::ptrdiff_t>(i * width);
    const auto w = static_cast<std::ptrdiff_t>(width);
    keys.erase(keys.begin() + off, keys.begin() + off + w);
    values.erase(values.begin() + off, values.begin() + off + w);
  }

  /// Removes entries [first, last).
  void erase_range(std::size_t first, std::size_t last) {
    if (first >= last) return;
    positions.erase(positions.begin() + static_cast<std::ptrdiff_t>(first),
                    positions.begin() + static_cast<std::ptrdiff_t>(last));
    const auto a = static_cast<std::ptrdiff_t>(first * width);
    const auto b = static_cast<std::ptrdiff_t>(last * width);
    keys.erase(keys.begin() + a, keys.begin() + b);
    values.erase(values.begin() + a, values.begin() + b);
  }

  void truncate(std::size_t n) {
    positions.resize(n);
    keys.resize(n * width);
    values.resize(n * width);
  }

  /// Number of entries with position <= pos.
  std::size_t count_upto(Position pos) const {
    return static_cast<std::size_t>(std::upper_bound(positions.begin(), positions.end(), pos) -
                                    positions.begin());
  }

  std::optional<std::size_t> find(Position pos) const {
    auto it = std::lower_bound(positions.begin(), positions.end(), pos);
    if (it == positions.end() || *it != pos) return std::nullopt;
    return static_cast<std::size_t>(it - positions.begin());
  }

  friend bool operator==(const KvStore&, const KvStore&) = default;
};

/// State shared by every cache policy. A cache covers positions
/// [0, length()); entries at positions >= committed() are speculative and can
/// be dropped by rollback(). The model drives it through the forward hooks.
class KVCache {
 public:
  explicit KVCache(const ModelConfig& cfg)
      : n_heads_(cfg.n_heads),
        n_kv_heads_(cfg.n_kv_heads),
        head_dim_(cfg.head_dim),
        max_seq_(cfg.max_seq),
        layers_(cfg.n_layers, KvStore{cfg.kv_dim(), {}, {}, {}}),
        queries_(cfg.n_layers),
        probes_(std::size_t{cfg.n_layers} * cfg.n_heads) {}

  virtual ~KVCache() = default;
  KVCache(const KVCache&) = default;
  KVCache& operator=(const KVCache&) = default;

  virtual CachePolicy policy() const = 0;
  virtual std::unique_ptr<KVCache> clone() const = 0;

  std::size_t length() const { return length_; }
  std::size_t committed() const { return committed_; }
  std::size_t n_layers() const { return layers_.size(); }
  std::size_t n_heads() const { return n_heads_; }
  std::size_t n_kv_heads() const { return n_kv_heads_; }
  std::size_t head_dim() const { return head_dim_; }
  std::size_t max_seq() const { return max_seq_; }
  const KvStore& layer(std::size_t l) const { return layers_.at(l); }

  /// True when this cache was built for a model of this shape.
  bool compatible_with(const ModelConfig& cfg) const {
    return cfg.n_layers == layers_.size() && cfg.n_heads == n_heads_ &&
           cfg.n_kv_heads == n_kv_heads_ && cfg.head_dim == head_dim_;
  }

  // ---- forward hooks ------------------------------------------------------

  /// Reserves positions [length, length + count) for a forward pass.
  Position begin_forward(std::size_t count) {
    if (length_ + count > max_seq_) {
      throw CapacityError("sequence of " + std::to_string(length_ + count) + " positions exceeds max_seq " +
                          std::to_string(max_seq_));
    }
    const auto start = static_cast<Position>(length_);
    length_ += count;
    query_start_ = start;
    query_rows_ = count;
    for (auto& q : queries_) q.clear();
    return start;
  }

  virtual void append(std::size_t layer, Position pos, std::span<const float> k, std::span<const float> v) {
    layers_[layer].push_back(pos, k, v);
  }

  /// Store indices a query at `query_pos` may attend to, ascending.
  virtual void exposure(std::size_t layer, Position query_pos, std::vector<std::uint32_t>& out) const {
    const std::size_t n = layers_[layer].count_upto(query_pos);
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<std::uint32_t>(i);
  }

  /// Nonzero: each head further keeps only its top-scoring entries.
  virtual std::size_t per_head_budget() const { return 0; }

  /// Attention weights of one query, summed over heads, aligned with `idx`.
  virtual void observe(std::size_t /*layer*/, Position /*query_pos*/, std::span<const std::uint32_t> /*idx*/,
                       std::span<const float> /*weights*/) {}

  void record_query(std::size_t layer, std::span<const float> q) {
    queries_[layer].insert(queries_[layer].end(), q.begin(), q.end());
  }

  /// Post-RoPE query (all heads) recorded for `pos` in the latest forward.
  std::span<const float> query(std::size_t layer, Position pos) const {
    if (pos < query_start_ || pos >= query_start_ + static_cast<Position>(query_rows_)) {
      throw ContractError("no query recorded for position " + std::to_string(pos));
    }
    const std::size_t w = n_heads_ * head_dim_;
    return {queries_.at(layer).data() + static_cast<std::size_t>(pos - query_start_) * w, w};
  }

  /// Dense attention row over positions [0, query_pos] of the last query in
  /// the latest forward; zeros where the policy hid an entry.
  std::vector<float>& probe_row(std::size_t layer, std::size_t head) { return probes_[layer * n_heads_ + head]; }
  const std::vector<float>& probe_row(std::size_t layer, std::size_t head) const {
    return probes_.at(layer * n_heads_ + head);
  }
  Position probe_position() const { return probe_pos_; }
  void set_probe_position(Position p) { probe_pos_ = p; }

  // ---- speculation control -------------------------------------------------

  /// Marks positions below n as accepted.
  virtual void commit(std::size_t n) {
    check_range(n, "commit");
    committed_ = n;
  }

  /// Drops every entry at position >= n.
  virtual void rollback(std::size_t n) {
    check_range(n, "rollback");
    for (auto& s : layers_) s.truncate(s.count_upto(static_cast<Position>(n) - 1));
    length_ = n;
  }

  /// Entries a query at the next position would see (max over layers).
  std::size_t exposed_count() const {
    std::vector<std::uint32_t> idx;
    std::size_t m = 0;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      exposure(l, static_cast<Position>(length_), idx);
      m = std::max(m, idx.size());
    }
    return m;
  }

  /// Positions a query at the next position would see in `layer`.
  std::vector<Position> exposed_positions(std::size_t layer) const {
    std::vector<std::uint32_t> idx;
    exposure(layer, static_cast<Position>(length_), idx);
    std::vector<Position> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(layers_[layer].positions[i]);
    return out;
  }

 protected:
  void check_range(std::size_t n, const char* op) const {
    if (n < committed_ || n > length_) {
      throw ContractError(std::string(op) + "(" + std::to_string(n) + ") outside [committed=" +
                          std::to_string(committed_) + ", length=" + std::to_string(length_) + "]");
    }
  }

  /// Replaces this cache's entries with a copy of `src`'s (same shape).
  void copy_entries_from(const KVCache& src) {
    layers_ = src.layers_;
    length_ = src.length_;
    committed_ = src.length_;
  }

  std::size_t n_heads_;
  std::size_t n_kv_heads_;
  std::size_t head_dim_;
  std::size_t max_seq_;
  std::vector<KvStore> layers_;
  std::size_t length_ = 0;
  std::size_t committed_ = 0;

 private:
  Position query_start_ = 0;
  std::size_t query_rows_ = 0;
  std::vector<std::vector<float>> queries_;
  std::vector<std::vector<float>> probes_;
  Position probe_pos_ = -1;
};

/// Keeps every entry: the exact cache the target model verifies with.
class FullCache final : public KVCache {
 public:
  using KVCache::KVCache;
  CachePolicy policy() const override { return CachePolicy::Full; }
  std::unique_ptr<KVCache> clone() const override { return std::make_unique<FullCache>(*this); }
};

/// Upper-bound reference: keeps every entry, but each head of each query
/// attends only to the `budget` entries with the highest exact scores.
class TopKCache final : public KVCache {
 public:
  TopKCache(const ModelConfig& cfg, std::size_t budget) : KVCache(cfg), budget_(budget) {
    if (budget_ == 0) throw ContractError("top-k budget must be >= 1");
  }

  /// Starts from a copy of a full cache's entries.
  static TopKCache from_source(const KVCache& src, const ModelConfig& cfg, std::size_t budget) {
    TopKCache c(cfg, budget);
    c.copy_entries_from(src);
    return c;
  }

  CachePolicy policy() const override { return CachePolicy::TopK; }
  std::unique_ptr<KVCache> clone() const override { return std::make_unique<TopKCache>(*this); }
  std::size_t per_head_budget() const override { return budget_; }
  std::size_t budget() const { return budget_; }

 private:
  std::size_t budget_;
};

}  // namespace triforce
