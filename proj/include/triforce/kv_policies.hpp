// Copyright 2026 The TriForce-CPU Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <memory>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "triforce/kv_cache.hpp"
#include "triforce/tensor.hpp"

namespace triforce {

// ---------------------------------------------------------------------------
// Streaming (attention sinks + recent window)
// ---------------------------------------------------------------------------

struct StreamingConfig {
  std::size_t n_sink = 4;
  std::size_t budget = 64;

  void validate() const {
    if (n_sink >= budget) throw ContractError("streaming cache needs n_sink < budget");
  }
};

/// Every query sees the first n_sink positions plus the most recent
/// budget - n_sink positions at or before it. Committed entries that can no
/// longer fall into any future window are evicted on commit().
class StreamingCache final : public KVCache {
 public:
  StreamingCache(const ModelConfig& cfg, StreamingConfig sc) : KVCache(cfg), cfg_(sc) { cfg_.validate(); }

  static StreamingCache from_source(const KVCache& src, const ModelConfig& cfg, StreamingConfig sc) {
    StreamingCache c(cfg, sc);
    c.copy_entries_from(src);
    c.trim();
    return c;
  }

  CachePolicy policy() const override { return CachePolicy::Streaming; }
  std::unique_ptr<KVCache> clone() const override { return std::make_unique<StreamingCache>(*this); }
  const StreamingConfig& config() const { return cfg_; }

  void exposure(std::size_t layer, Position query_pos, std::vector<std::uint32_t>& out) const override {
    const std::size_t n = layers_[layer].count_upto(query_pos);
    out.clear();
    if (n <= cfg_.budget) {
      for (std::size_t i = 0; i < n; ++i) out.push_back(static_cast<std::uint32_t>(i));
      return;
    }
    const std::size_t recent = cfg_.budget - cfg_.n_sink;
    for (std::size_t i = 0; i < cfg_.n_sink; ++i) out.push_back(static_cast<std::uint32_t>(i));
    for (std::size_t i = n - recent; i < n; ++i) out.push_back(static_cast<std::uint32_t>(i));
  }

  void commit(std::size_t n) override {
    KVCache::commit(n);
    trim();
  }

 private:
  void trim() {
    const std::size_t recent = cfg_.budget - cfg_.n_sink;
    for (auto& s : layers_) {
      const std::size_t c = s.count_upto(static_cast<Position>(committed_) - 1);
      if (c > cfg_.budget) s.erase_range(cfg_.n_sink, c - recent);
    }
  }

  StreamingConfig cfg_;
};

// ---------------------------------------------------------------------------
// H2O (heavy hitters by cumulative attention)
// ---------------------------------------------------------------------------

struct H2OConfig {
  std::size_t budget = 64;
  std::size_t recent_window = 32;

  static H2OConfig with_budget(std::size_t budget) { return {budget, budget / 2}; }

  void validate() const {
    if (budget == 0 || recent_window >= budget) throw ContractError("h2o cache needs recent_window < budget");
  }
};

/// Accumulates per-entry attention (summed over heads) and, on commit(),
/// evicts the committed non-recent entry with the lowest cumulative score
/// (ties: oldest) until at most `budget` committed entries remain.
/// Observations from speculative queries are buffered until their query is
/// committed, so rollback() discards them.
class H2OCache final : public KVCache {
 public:
  H2OCache(const ModelConfig& cfg, H2OConfig hc) : KVCache(cfg), cfg_(hc), scores_(cfg.n_layers) { cfg_.validate(); }

  CachePolicy policy() const override { return CachePolicy::H2O; }
  std::unique_ptr<KVCache> clone() const override { return std::make_unique<H2OCache>(*this); }
  const H2OConfig& config() const { return cfg_; }
  const std::vector<double>& scores(std::size_t layer) const { return scores_.at(layer); }

  void append(std::size_t layer, Position pos, std::span<const float> k, std::span<const float> v) override {
    KVCache::append(layer, pos, k, v);
    scores_[layer].push_back(0.0);
  }

  void observe(std::size_t layer, Position query_pos, std::span<const std::uint32_t> idx,
               std::span<const float> weights) override {
    if (idx.size() != weights.size()) throw DimensionError("h2o attention row length mismatch");
    Observation o{layer, query_pos, {}, {weights.begin(), weights.end()}};
    o.positions.reserve(idx.size());
    for (auto i : idx) o.positions.push_back(layers_[layer].positions[i]);
    pending_.push_back(std::move(o));
  }

  /// Direct h2o update for callers that supply their own attention row,
  /// indexed like exposed_positions(layer).
  void observe_positions(std::size_t layer, Position query_pos, std::span<const Position> positions,
                         std::span<const float> weights) {
    if (positions.size() != weights.size()) throw DimensionError("h2o attention row length mismatch");
    pending_.push_back({layer, query_pos, {positions.begin(), positions.end()}, {weights.begin(), weights.end()}});
  }

  void commit(std::size_t n) override {
    KVCache::commit(n);
    std::vector<Observation> keep;
    for (auto& o : pending_) {
      if (o.query_pos >= static_cast<Position>(n)) {
        keep.push_back(std::move(o));
        continue;
      }
      auto& st = layers_[o.layer];
      for (std::size_t j = 0; j < o.positions.size(); ++j) {
        if (auto i = st.find(o.positions[j])) scores_[o.layer][*i] += o.weights[j];
      }
    }
    pending_ = std::move(keep);
    evict();
  }

  void rollback(std::size_t n) override {
    KVCache::rollback(n);
    for (std::size_t l = 0; l < layers_.size(); ++l) scores_[l].resize(layers_[l].size());
    std::erase_if(pending_, [n](const Observation& o) { return o.query_pos >= static_cast<Position>(n); });
  }

 private:
  struct Observation {
    std::size_t layer;
    Position query_pos;
    std::vector<Position> positions;
    std::vector<float> weights;
  };

  void evict() {
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      auto& st = layers_[l];
      auto& sc = scores_[l];
      std::size_t c = st.count_upto(static_cast<Position>(committed_) - 1);
      while (c > cfg_.budget) {
        const std::size_t candidates = c - cfg_.recent_window;
        std::size_t victim = 0;
        for (std::size_t i = 1; i < candidates; ++i) {
          if (sc[i] < sc[victim]) victim = i;
        }
        st.erase(victim);
        sc.erase(sc.begin() + static_cast<std::ptrdiff_t>(victim));
        --c;
      }
    }
  }

  H2OConfig cfg_;
  std::vector<std::vector<double>> scores_;
  std::vector<Observation> pending_;
};

// ---------------------------------------------------------------------------
// Retrieval cache (chunked mean-key scoring over a retained full cache)
// ---------------------------------------------------------------------------

struct RetrievalConfig {
  std::size_t chunk_size = 16;
  std::size_t budget = 256;
  std::size_t rebuild_stride = 128;
  double rebuild_accept_threshold = 0.8;
  std::size_t rolling_window = 16;

  void validate() const {
    if (chunk_size == 0) throw ContractError("retrieval chunk_size must be >= 1");
    if (budget == 0 || budget % chunk_size != 0) {
      throw ContractError("retrieval budget " + std::to_string(budget) + " must be a positive multiple of chunk_size " +
                          std::to_string(chunk_size));
    }
    if (!(rebuild_accept_threshold > 0.0 && rebuild_accept_threshold < 1.0)) {
      throw ContractError("rebuild_accept_threshold must lie in (0, 1)");
    }
    if (rolling_window == 0) throw ContractError("rolling_window must be >= 1");
    if (rebuild_stride == 0) throw ContractError("rebuild_stride must be >= 1");
  }
};

struct ChunkScoreTable {
  struct Layer {
    std::vector<std::pair<Position, Position>> chunks;  // [begin, end) positions
    std::vector<std::vector<double>> mean_keys;         // per chunk, kv_dim
    std::vector<double> scores;
    std::vector<std::uint32_t> ranking;   // all chunks, score desc then id asc
    std::vector<std::uint32_t> selected;  // importance order, same key
    std::uint32_t forced_chunk = 0;       // most recent chunk, always selected
  };

  std::size_t chunk_size = 0;
  std::size_t budget = 0;
  std::size_t context = 0;
  bool clamped = false;  // budget covered the whole context
  std::vector<Layer> layers;
};

/// Ranks chunks of one layer's store. `query` holds all heads' post-RoPE
/// query vectors; a chunk's score is the mean over query heads of
/// dot(query_head, mean_key_of_its_kv_group) / sqrt(head_dim).
inline ChunkScoreTable::Layer score_layer_chunks(const KvStore& store, std::span<const float> query,
                                                 std::size_t n_heads, std::size_t n_kv_heads, std::size_t head_dim,
                                                 std::size_t chunk_size, std::size_t n_select) {
  ChunkScoreTable::Layer out;
  const std::size_t n = store.size();
  const std::size_t n_chunks = (n + chunk_size - 1) / chunk_size;
  const std::size_t group = n_heads / n_kv_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  for (std::size_t c = 0; c < n_chunks; ++c) {
    const std::size_t b = c * chunk_size;
    const std::size_t e = std::min(n, b + chunk_size);
    out.chunks.emplace_back(store.positions[b], store.positions[e - 1] + 1);
    std::vector<double> mk(store.width, 0.0);
    for (std::size_t i = b; i < e; ++i) {
      auto k = store.key(i);
      for (std::size_t j = 0; j < mk.size(); ++j) mk[j] += k[j];
    }
    for (double& v : mk) v /= static_cast<double>(e - b);
    // double accumulation: near-tied chunks must not reorder on rounding
    double total = 0.0;
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t g = h / group;
      double d = 0.0;
      for (std::size_t j = 0; j < head_dim; ++j) d += static_cast<double>(query[h * head_dim + j]) * mk[g * head_dim + j];
      total += d * scale;
    }
    out.scores.push_back(total / static_cast<double>(n_heads));
    out.mean_keys.push_back(std::move(mk));
  }
  auto by_score = [&](std::uint32_t a, std::uint32_t b) {
    if (out.scores[a] != out.scores[b]) return out.scores[a] > out.scores[b];
    return a < b;
  };
  out.ranking.resize(n_chunks);
  std::iota(out.ranking.begin(), out.ranking.end(), 0u);
  std::sort(out.ranking.begin(), out.ranking.end(), by_score);
  if (n_chunks == 0) return out;
  out.forced_chunk = static_cast<std::uint32_t>(n_chunks - 1);
  out.selected.push_back(out.forced_chunk);
  for (auto c : out.ranking) {
    if (out.selected.size() >= n_select) break;
    if (c != out.forced_chunk) out.selected.push_back(c);
  }
  std::sort(out.selected.begin(), out.selected.end(), by_score);
  return out;
}

/// Budgeted view of a retained full cache. Exposes the union of the selected
/// chunks plus overwritten-in recent tokens; speculative entries live past
/// committed() until commit() overwrites them into the least important slots.
class RetrievalCache final : public KVCache {
 public:
  RetrievalCache(const ModelConfig& cfg, RetrievalConfig rc)
      : KVCache(cfg), cfg_(rc), importance_(cfg.n_layers) {
    cfg_.validate();
  }

  CachePolicy policy() const override { return CachePolicy::Retrieval; }
  std::unique_ptr<KVCache> clone() const override { return std::make_unique<RetrievalCache>(*this); }
  const RetrievalConfig& config() const { return cfg_; }
  const ChunkScoreTable& table() const { return table_; }
  std::size_t builds() const { return builds_; }

  /// Least important last.
  const std::deque<Position>& importance(std::size_t layer) const { return importance_.at(layer); }

  /// Scores `source` (a full cache covering [0, source.length())) against
  /// per-layer query vectors and rebuilds the exposed set.
  const ChunkScoreTable& build(const KVCache& source, const std::vector<std::span<const float>>& queries) {
    if (source.policy() != CachePolicy::Full && source.policy() != CachePolicy::TopK) {
      throw ContractError("retrieval cache must be built from a full cache");
    }
    if (queries.size() != layers_.size()) throw DimensionError("retrieval build needs one query per layer");
    const std::size_t ctx = source.length();
    table_ = ChunkScoreTable{};
    table_.chunk_size = cfg_.chunk_size;
    table_.budget = cfg_.budget;
    table_.context = ctx;
    table_.clamped = cfg_.budget >= ctx;
    const std::size_t n_select = cfg_.budget / cfg_.chunk_size;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const KvStore& src = source.layer(l);
      if (src.size() != ctx) throw ContractError("retrieval source must hold every position");
      auto t = score_layer_chunks(src, queries[l], n_heads_, n_kv_heads_, head_dim_, cfg_.chunk_size, n_select);
      std::vector<Position> keep;
      importance_[l].clear();
      for (auto c : t.selected) {
        for (Position p = t.chunks[c].first; p < t.chunks[c].second; ++p) importance_[l].push_back(p);
      }
      keep.assign(importance_[l].begin(), importance_[l].end());
      std::sort(keep.begin(), keep.end());
      KvStore st{src.width, {}, {}, {}};
      for (Position p : keep) {
        const auto i = static_cast<std::size_t>(p);
        st.push_back(p, src.key(i), src.value(i));
      }
      layers_[l] = std::move(st);
      table_.layers.push_back(std::move(t));
    }
    length_ = ctx;
    committed_ = ctx;
    ++builds_;
    return table_;
  }

  /// Appends committed tokens [length(), upto) with KV copied from the full
  /// cache, each replacing the least important slot once the budget is full.
  void absorb(const KVCache& source, std::size_t upto) {
    if (length_ != committed_) throw ContractError("absorb requires no speculative entries");
    if (upto > source.length()) throw ContractError("absorb past the source cache");
    for (auto p = static_cast<Position>(length_); p < static_cast<Position>(upto); ++p) {
      for (std::size_t l = 0; l < layers_.size(); ++l) {
        const KvStore& src = source.layer(l);
        const auto i = src.find(p);
        if (!i) throw ContractError("absorb source lacks position " + std::to_string(p));
        layers_[l].push_back(p, src.key(*i), src.value(*i));
        admit(l, p);
      }
    }
    if (upto > length_) {
      length_ = upto;
      committed_ = upto;
    }
  }

  /// Promotes speculative entries below n via the same overwrite rule.
  void commit(std::size_t n) override {
    const std::size_t old = committed_;
    KVCache::commit(n);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& st = layers_[l];
      const std::size_t b = st.count_upto(static_cast<Position>(old) - 1);
      const std::size_t e = st.count_upto(static_cast<Position>(n) - 1);
      std::vector<Position> fresh(st.positions.begin() + static_cast<std::ptrdiff_t>(b),
                                  st.positions.begin() + static_cast<std::ptrdiff_t>(e));
      for (Position p : fresh) admit(l, p);
    }
  }

 private:
  /// `p` is already stored; make room for it among the committed slots.
  void admit(std::size_t layer, Position p) {
    auto& imp = importance_[layer];
    if (imp.size() >= cfg_.budget) {
      const Position victim = imp.back();
      imp.pop_back();
      if (auto i = layers_[layer].find(victim)) layers_[layer].erase(*i);
    }
    imp.push_front(p);
  }

  RetrievalConfig cfg_;
  ChunkScoreTable table_;
  std::vector<std::deque<Position>> importance_;
  std::size_t builds_ = 0;
};

/// Debug dump of cache state as one JSON object:
///   {"policy":"h2o","length":N,"committed":N,"layers":[{"stored":[..],
///    "exposed":[..],"h2o_scores":[..],"importance":[..]}, ...]}
/// "stored" are the positions held, "exposed" those the next query reads.
/// h2o_scores (per stored entry) and importance (retrieval, most important
/// first) appear only for their policies. Keys and values are not dumped.
inline void write_cache_json(std::ostream& os, const KVCache& c) {
  auto list = [&os](const auto& xs) {
    os << "[";
    bool first = true;
    for (const auto& x : xs) {
      os << (first ? "" : ",") << x;
      first = false;
    }
    os << "]";
  };
  const auto* h2o = dynamic_cast<const H2OCache*>(&c);
  const auto* retr = dynamic_cast<const RetrievalCache*>(&c);
  os << "{\"policy\":\"" << to_string(c.policy()) << "\",\"length\":" << c.length()
     << ",\"committed\":" << c.committed() << ",\"layers\":[";
  for (std::size_t l = 0; l < c.n_layers(); ++l) {
    os << (l ? "," : "") << "{\"stored\":";
    list(c.layer(l).positions);
    os << ",\"exposed\":";
    list(c.exposed_positions(l));
    if (h2o) {
      const auto prec = os.precision(17);
      os << ",\"h2o_scores\":";
      list(h2o->scores(l));
      os.precision(prec);
    }
    if (retr) {
      os << ",\"importance\":";
      list(retr->importance(l));
    }
    os << "}";
  }
  os << "]}";
}

/// Fixed-capacity window of per-round acceptance rates.
class RollingMean {
 public:
  explicit RollingMean(std::size_t capacity = 16) : capacity_(capacity) {}

  void push(double v) {
    values_.push_back(v);
    if (values_.size() > capacity_) values_.pop_front();
  }
  void clear() { values_.clear(); }
  bool full() const { return values_.size() >= capacity_; }
  std::size_t size() const { return values_.size(); }
  std::size_t capacity() const { return capacity_; }
  double mean() const {
    if (values_.empty()) return 1.0;
    return std::accumulate(values_.begin(), values_.end(), 0.0) / static_cast<double>(values_.size());
  }

 private:
  std::size_t capacity_;
  std::deque<double> values_;
};

inline bool retrieval_should_rebuild(const RetrievalConfig& cfg, const RollingMean& acceptance,
                                     std::size_t tokens_since_build) {
  if (tokens_since_build >= cfg.rebuild_stride) return true;
  return acceptance.full() && acceptance.mean() < cfg.rebuild_accept_threshold;
}

}  // namespace triforce
