// Copyright 2026 The TriForce-CPU Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "triforce/kv_cache.hpp"
#include "triforce/kv_policies.hpp"
#include "triforce/model.hpp"
#include "triforce/rng.hpp"
#include "triforce/sampling.hpp"
#include "triforce/speculation.hpp"
#include "triforce/tokenizer.hpp"
#include "triforce/weights.hpp"

namespace triforce {

// ---------------------------------------------------------------------------
// Attention mass recovery
// ---------------------------------------------------------------------------

/// Recovered attention mass per layer (rows) and budget (columns).
struct RecoveryCurve {
  std::size_t context = 0;
  std::vector<std::size_t> budgets;
  std::vector<std::size_t> layers;
  std::vector<std::vector<double>> mass;
};

namespace detail {

inline double top_mass(std::vector<float> w, std::size_t budget) {
  budget = std::min(budget, w.size());
  std::sort(w.begin(), w.end(), std::greater<>());
  double s = 0.0;
  for (std::size_t i = 0; i < budget; ++i) s += w[i];
  return s;
}

inline std::vector<std::size_t> measured_layers(std::size_t n_layers, bool skip_initial_two) {
  std::vector<std::size_t> out;
  for (std::size_t l = (skip_initial_two ? 2 : 0); l < n_layers; ++l) out.push_back(l);
  if (out.empty()) throw ContractError("no layers left to measure");
  return out;
}

/// Indices of the `budget` largest weights (ties: lower index).
inline std::vector<std::size_t> top_indices(std::span<const float> w, std::size_t budget) {
  std::vector<std::size_t> idx(w.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return w[a] > w[b]; });
  idx.resize(std::min(budget, idx.size()));
  return idx;
}

}  // namespace detail

/// Mass the top-`budget` weights of the final query's attention row capture,
/// averaged over heads. Budgets above the context length are clamped.
inline RecoveryCurve sparsity_recovery(const ModelWeights& w, std::span<const Token> context,
                                       const std::vector<std::size_t>& budgets, bool skip_initial_two = false) {
  if (context.size() > w.config.max_seq) throw CapacityError("context exceeds max_seq");
  FullCache cache(w.config);
  prefill(w, context, cache);
  RecoveryCurve c;
  c.context = context.size();
  c.budgets = budgets;
  c.layers = detail::measured_layers(w.config.n_layers, skip_initial_two);
  for (std::size_t l : c.layers) {
    std::vector<double> row(budgets.size(), 0.0);
    for (std::size_t h = 0; h < w.config.n_heads; ++h) {
      const auto& probe = cache.probe_row(l, h);
      for (std::size_t b = 0; b < budgets.size(); ++b) row[b] += detail::top_mass(probe, budgets[b]);
    }
    for (double& v : row) v /= static_cast<double>(w.config.n_heads);
    c.mass.push_back(std::move(row));
  }
  return c;
}

/// Frozen-index mass over the decode horizon. Offset 0 is the final prefill
/// query; offsets 1..horizon follow greedy continuation tokens.
struct LocalityCurve {
  std::size_t context = 0;
  std::size_t budget = 0;
  std::vector<std::size_t> layers;
  std::vector<std::vector<double>> frozen;  // [layer][offset]
  std::vector<std::vector<double>> fresh;   // [layer][offset]
};

inline LocalityCurve locality_recovery(const ModelWeights& w, std::span<const Token> context, std::size_t budget,
                                       std::size_t horizon, bool skip_initial_two = false) {
  if (horizon == 0) throw ContractError("locality horizon must be >= 1");
  if (context.size() + horizon > w.config.max_seq) throw CapacityError("context plus horizon exceeds max_seq");
  const std::size_t n = context.size();
  budget = std::min(budget, n);
  LocalityCurve c;
  c.context = n;
  c.budget = budget;
  c.layers = detail::measured_layers(w.config.n_layers, skip_initial_two);
  c.frozen.assign(c.layers.size(), std::vector<double>(horizon + 1, 0.0));
  c.fresh = c.frozen;
  FullCache cache(w.config);
  Logits l = prefill(w, context, cache);

  std::vector<std::vector<std::vector<std::size_t>>> frozen(c.layers.size());
  auto record = [&](std::size_t offset) {
    for (std::size_t li = 0; li < c.layers.size(); ++li) {
      if (offset == 0) frozen[li].resize(w.config.n_heads);
      for (std::size_t h = 0; h < w.config.n_heads; ++h) {
        const auto& row = cache.probe_row(c.layers[li], h);
        std::span<const float> region(row.data(), n);
        if (offset == 0) frozen[li][h] = detail::top_indices(region, budget);
        double fm = 0.0;
        for (std::size_t i : frozen[li][h]) fm += row[i];
        c.frozen[li][offset] += fm / static_cast<double>(w.config.n_heads);
        c.fresh[li][offset] +=
            detail::top_mass({region.begin(), region.end()}, budget) / static_cast<double>(w.config.n_heads);
      }
    }
  };
  record(0);
  for (std::size_t j = 1; j <= horizon; ++j) {
    l = decode_step(w, argmax(l.last()), cache);
    record(j);
  }
  return c;
}

// ---------------------------------------------------------------------------
// Needle task
// ---------------------------------------------------------------------------

struct NeedleCase {
  std::vector<Token> tokens;
  std::string passkey;
  std::size_t needle_pos = 0;  // token index of the first passkey digit
};

inline constexpr std::string_view kNeedlePrefix = "The pass key is ";
inline constexpr std::string_view kNeedleQuestion = "What is the pass key?";
inline constexpr std::size_t kPasskeyDigits = 5;

/// Lowercase filler with "The pass key is NNNNN. " placed so the first digit
/// lands uniformly in the middle 80% of the prompt, ending with the question.
/// Every prompt is exactly context_len tokens including BOS.
inline std::vector<NeedleCase> needle_corpus(std::size_t context_len, std::size_t n_cases, std::uint64_t seed) {
  const std::size_t sentence = kNeedlePrefix.size() + kPasskeyDigits + 2;
  const std::size_t tail = kNeedleQuestion.size();
  const std::size_t lo = context_len / 10;
  const std::size_t hi = context_len * 9 / 10;
  if (lo < 1 + kNeedlePrefix.size() || hi <= lo || hi - 1 + kPasskeyDigits + 2 + tail > context_len) {
    throw ContractError("needle context of " + std::to_string(context_len) + " tokens is too short");
  }
  static constexpr std::string_view kWords[] = {"grass", "sky",  "river", "stone", "quiet", "morning", "field",
                                                "cloud", "warm", "over",  "under", "slow",  "long",    "road",
                                                "tree",  "wind", "night", "day",   "sun",   "green"};
  Rng rng(seed);
  ByteTokenizer tok;
  std::vector<NeedleCase> out;
  for (std::size_t c = 0; c < n_cases; ++c) {
    NeedleCase nc;
    nc.passkey.push_back(static_cast<char>('1' + rng.uniform_int(0, 8)));
    for (std::size_t i = 1; i < kPasskeyDigits; ++i) nc.passkey.push_back(static_cast<char>('0' + rng.uniform_int(0, 9)));
    const std::size_t digit_pos = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(lo),
                                                                            static_cast<std::int64_t>(hi) - 1));
    // bytes before the sentence, after BOS
    const std::size_t before = digit_pos - 1 - kNeedlePrefix.size();
    const std::size_t after = context_len - 1 - before - sentence - tail;
    auto filler = [&](std::size_t len) {
      std::string s;
      while (s.size() < len) {
        s += kWords[rng.uniform_int(0, std::size(kWords) - 1)];
        s.push_back(' ');
      }
      s.resize(len);
      if (len > 0) s.back() = ' ';
      return s;
    };
    std::string text = filler(before);
    text += kNeedlePrefix;
    text += nc.passkey;
    text += ". ";
    text += filler(after);
    text += kNeedleQuestion;
    nc.tokens = tok.tokenize(text);
    nc.needle_pos = digit_pos;
    out.push_back(std::move(nc));
  }
  return out;
}

struct NeedlePlan {
  std::size_t context_len = 512;
  std::size_t needle_len = kPasskeyDigits;
};

/// Residual dimensions the planted circuit reserves (the last 22 of d_model).
struct PlantedLayout {
  std::size_t query_dim;   // set on trigger tokens: '?' and 'A'..'J'
  std::size_t marker_dim;  // set on digit tokens
  std::size_t digit_dim0;  // digit j identity at digit_dim0 + j
  std::size_t answer_dim0; // answer feature j at answer_dim0 + j
  std::size_t head = 0;    // planted head of the last layer
  std::size_t rope_pair_dim;  // q/k live in the slowest rotary pair

  static PlantedLayout for_config(const ModelConfig& c) {
    const std::size_t d = c.d_model();
    return {d - 22, d - 21, d - 20, d - 10, 0, c.head_dim - 2};
  }
  bool reserved(std::size_t dim) const { return dim >= query_dim; }
};

inline bool is_planted_trigger(Token t) { return t == '?' || (t >= 'A' && t <= 'J'); }

/// Random weights with one planted retrieval circuit in the last layer: after
/// a trigger token, head 0 puts at least `strength` of its attention on the
/// digit tokens of a context up to plan.context_len, copies their identities
/// into answer features, and the output head maps digit j to letter 'A'+j.
inline ModelWeights planted_attention_weights(const ModelConfig& cfg, const NeedlePlan& plan, double strength,
                                              std::uint64_t seed) {
  if (!(strength > 0.0) || strength > 0.99) throw ContractError("planted strength must lie in (0, 0.99]");
  if (cfg.d_model() < 64 || cfg.head_dim < 10 || cfg.vocab_size < 'J' + 1) {
    throw ContractError("config too small for the planted needle circuit");
  }
  if (plan.needle_len == 0 || plan.context_len <= plan.needle_len || plan.context_len > cfg.max_seq) {
    throw ContractError("invalid needle plan");
  }
  ModelWeights w = generate_weights(cfg, seed, false);
  const auto lay = PlantedLayout::for_config(cfg);
  const std::size_t d = cfg.d_model();
  const std::size_t hd = cfg.head_dim;

  for (std::size_t t = 0; t < cfg.vocab_size; ++t) {
    auto e = w.tok_embeddings.row(t);
    for (std::size_t i = lay.query_dim; i < d; ++i) e[i] = 0.0f;
    if (t >= '0' && t <= '9') {
      e[lay.marker_dim] = 1.0f;
      e[lay.digit_dim0 + (t - '0')] = 1.0f;
    }
    if (is_planted_trigger(static_cast<Token>(t))) e[lay.query_dim] = 1.0f;
  }
  auto clear_rows = [&](Tensor& m) {
    for (std::size_t r = lay.query_dim; r < d; ++r) {
      for (std::size_t j = 0; j < m.dim(1); ++j) m.at(r, j) = 0.0f;
    }
  };
  auto clear_cols = [&](Tensor& m) {
    for (std::size_t r = 0; r < m.dim(0); ++r) {
      for (std::size_t j = lay.query_dim; j < d; ++j) m.at(r, j) = 0.0f;
    }
  };
  for (auto& L : w.layers) {
    clear_rows(L.wq);
    clear_rows(L.wk);
    clear_rows(L.wv);
    clear_rows(L.w1);
    clear_rows(L.w3);
    clear_cols(L.wo);
    clear_cols(L.w2);
  }
  clear_rows(w.output);

  // Normalized magnitudes of the planted features at the last layer: the
  // reserved dims dominate the residual of digit and trigger tokens.
  const double hq = std::sqrt(static_cast<double>(d));
  const double hk = std::sqrt(static_cast<double>(d) / 2.0);
  const double n = static_cast<double>(plan.needle_len);
  const double others = static_cast<double>(plan.context_len) - n;
  const double margin = 1.0;
  const double gap_needed = std::log(strength * others / (n * (1.0 - strength))) + margin;
  const double slow = std::pow(static_cast<double>(cfg.rope_theta), -static_cast<double>(lay.rope_pair_dim) / hd);
  const double cos_min = std::cos(std::min(1.2, slow * static_cast<double>(plan.context_len)));
  const double gap = std::max(gap_needed, 1.0) / cos_min;
  const double qk = std::sqrt(gap * std::sqrt(static_cast<double>(hd)) / (hq * hk));

  LayerWeights& L = w.layers.back();
  const std::size_t head_q = lay.head * hd;
  const std::size_t head_kv = (lay.head / cfg.group_size()) * hd;
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t j = 0; j < hd; ++j) {
      L.wq.at(r, head_q + j) = 0.0f;
      L.wk.at(r, head_kv + j) = 0.0f;
      L.wv.at(r, head_kv + j) = 0.0f;
    }
  }
  for (std::size_t j = 0; j < hd; ++j) {
    for (std::size_t c = 0; c < d; ++c) L.wo.at(head_q + j, c) = 0.0f;
  }
  for (std::size_t j = 0; j < 10; ++j) {
    L.wv.at(lay.digit_dim0 + j, head_kv + j) = 1.0f;
    L.wo.at(head_q + j, lay.answer_dim0 + j) = 4.0f;
    w.output.at(lay.answer_dim0 + j, static_cast<std::size_t>('A' + j)) = 8.0f;
  }

  // The residual of earlier layers shrinks the normalized features somewhat,
  // so the estimate above is refined against a probe on a calibration prompt
  // (needle in the middle, trigger last). Scores scale with qk^2.
  Rng crng(seed ^ 0x9e3779b97f4a7c15ull);
  std::vector<Token> calib(plan.context_len);
  calib[0] = ByteTokenizer::kBos;
  for (std::size_t i = 1; i < calib.size(); ++i) calib[i] = static_cast<Token>('a' + crng.uniform_int(0, 25));
  const std::size_t at = plan.context_len / 2 - plan.needle_len / 2;
  for (std::size_t i = 0; i < plan.needle_len; ++i) calib[at + i] = static_cast<Token>('0' + crng.uniform_int(0, 9));
  calib.back() = '?';
  double scale = qk;
  for (int iter = 0; iter < 8; ++iter) {
    L.wq.at(lay.query_dim, head_q + lay.rope_pair_dim) = static_cast<float>(scale);
    L.wk.at(lay.marker_dim, head_kv + lay.rope_pair_dim) = static_cast<float>(scale);
    FullCache cache(cfg);
    prefill(w, calib, cache);
    const auto& row = cache.probe_row(cfg.n_layers - 1, lay.head);
    double m = 0.0;
    for (std::size_t i = 0; i < plan.needle_len; ++i) m += row[at + i];
    const double m_cap = std::min(m, 1.0 - 1e-12);
    const double realized = std::log(m_cap * others / (n * (1.0 - m_cap)));
    if (realized >= gap) break;
    scale *= std::sqrt(gap / std::max(realized, 0.25 * gap));
  }
  return w;
}

/// Attention mass the planted head puts on [needle_pos, needle_pos + len)
/// for the final query of `prompt`.
inline double planted_needle_mass(const ModelWeights& w, std::span<const Token> prompt, std::size_t needle_pos,
                                  std::size_t needle_len, KVCache& cache) {
  prefill(w, prompt, cache);
  const auto lay = PlantedLayout::for_config(w.config);
  const auto probe = attention_probe(w, cache, w.config.n_layers - 1, lay.head);
  double m = 0.0;
  for (std::size_t i = needle_pos; i < needle_pos + needle_len && i < probe.weights.size(); ++i) m += probe.weights[i];
  return m;
}

/// Planted-head mass on the needle for the last prompt query when the target
/// runs with `policy` at `budget` (the last token is decoded against the
/// bounded cache built from the rest of the prompt).
inline double policy_needle_mass(const ModelWeights& w, const NeedleCase& nc, CachePolicy policy, std::size_t budget,
                                 std::size_t chunk_size, std::size_t n_sink = 4) {
  const std::span<const Token> prompt(nc.tokens);
  const std::span<const Token> head = prompt.first(prompt.size() - 1);
  const auto& cfg = w.config;
  std::unique_ptr<KVCache> cache;
  switch (policy) {
    case CachePolicy::Full:
      cache = std::make_unique<FullCache>(cfg);
      prefill(w, head, *cache);
      break;
    case CachePolicy::Streaming:
      cache = std::make_unique<StreamingCache>(cfg, StreamingConfig{n_sink, budget});
      prefill(w, head, *cache);
      cache->commit(cache->length());
      break;
    case CachePolicy::H2O:
      cache = std::make_unique<H2OCache>(cfg, H2OConfig::with_budget(budget));
      prefill(w, head, *cache);
      cache->commit(cache->length());
      break;
    case CachePolicy::TopK:
      cache = std::make_unique<TopKCache>(cfg, budget);
      prefill(w, head, *cache);
      break;
    case CachePolicy::Retrieval: {
      FullCache full(cfg);
      prefill(w, prompt, full);
      std::vector<std::vector<float>> q;
      for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        auto s = full.query(l, static_cast<Position>(prompt.size()) - 1);
        q.emplace_back(s.begin(), s.end());
      }
      full.rollback(prompt.size() - 1);
      RetrievalConfig rc;
      rc.chunk_size = chunk_size;
      rc.budget = budget;
      auto r = std::make_unique<RetrievalCache>(cfg, rc);
      r->build(full, {q.begin(), q.end()});
      cache = std::move(r);
      break;
    }
  }
  decode_step(w, prompt.back(), *cache);
  const auto probe = attention_probe(w, *cache, cfg.n_layers - 1, PlantedLayout::for_config(cfg).head);
  double m = 0.0;
  for (std::size_t i = nc.needle_pos; i < nc.needle_pos + kPasskeyDigits; ++i) m += probe.weights[i];
  return m;
}

// ---------------------------------------------------------------------------
// Acceptance measurement
// ---------------------------------------------------------------------------

enum class Pairing { DraftStreamingVsRetrieval, RetrievalVsFull, StreamingVsFull, H2OVsFull, TopKVsFull };

inline const char* to_string(Pairing p) {
  switch (p) {
    case Pairing::DraftStreamingVsRetrieval: return "draft_streaming_vs_retrieval";
    case Pairing::RetrievalVsFull: return "retrieval_vs_full";
    case Pairing::StreamingVsFull: return "streaming_vs_full";
    case Pairing::H2OVsFull: return "h2o_vs_full";
    case Pairing::TopKVsFull: return "topk_vs_full";
  }
  return "?";
}

inline Pairing pairing_from_string(const std::string& s) {
  for (auto p : {Pairing::DraftStreamingVsRetrieval, Pairing::RetrievalVsFull, Pairing::StreamingVsFull,
                 Pairing::H2OVsFull, Pairing::TopKVsFull}) {
    if (s == to_string(p)) return p;
  }
  throw ContractError("unknown pairing '" + s + "'");
}

struct AcceptanceConfig {
  std::size_t budget = 64;        // bounded cache of the drafter (or retrieval verifier)
  std::size_t chunk_size = 16;
  std::size_t n_sink = 4;
  std::size_t draft_budget = 64;  // streaming budget of the small draft model
  std::size_t gamma = 4;
  std::size_t gen_len = 16;       // tokens generated per prompt
  double temperature = 0.0;
  std::uint64_t seed = 0;
};

struct AcceptanceStats {
  LevelCounters counters;
  std::vector<double> case_rates;
  RollingMean window{16};

  double rate() const { return counters.rate(); }
};

namespace detail {

struct PromptState {
  Decoder full;
  std::vector<std::vector<float>> last_query;
};

/// Full-cache prefill of all but the last prompt token, plus the per-layer
/// queries of the last token; both retrieval and the derived caches start here.
inline PromptState prefill_for_pairing(const ModelWeights& w, std::span<const Token> prompt) {
  PromptState s{Decoder(w, std::make_unique<FullCache>(w.config)), {}};
  s.full.sync(prompt, 0);
  for (std::size_t l = 0; l < w.config.n_layers; ++l) {
    auto q = s.full.cache().query(l, static_cast<Position>(prompt.size()) - 1);
    s.last_query.emplace_back(q.begin(), q.end());
  }
  s.full.settle(prompt);
  return s;
}

inline Decoder retrieval_decoder(const ModelWeights& w, const PromptState& s, std::span<const Token> prompt,
                                 std::size_t budget, std::size_t chunk_size) {
  RetrievalConfig rc;
  rc.chunk_size = chunk_size;
  rc.budget = budget;
  auto cache = std::make_unique<RetrievalCache>(w.config, rc);
  std::vector<std::span<const float>> qs(s.last_query.begin(), s.last_query.end());
  cache->build(s.full.cache(), qs);
  const std::size_t len = cache->length();
  return Decoder(w, std::move(cache), {prompt.begin(), prompt.begin() + static_cast<std::ptrdiff_t>(len)});
}

}  // namespace detail

/// Runs one speculation pairing over every prompt and aggregates acceptance.
inline AcceptanceStats measure_acceptance(Pairing pairing, const ModelWeights& target, const ModelWeights* draft,
                                          const std::vector<std::vector<Token>>& prompts,
                                          const AcceptanceConfig& cfg) {
  if (pairing == Pairing::DraftStreamingVsRetrieval) {
    if (draft == nullptr) throw ContractError("pairing needs a draft model");
    require_shared_vocab(target.config, draft->config);
  }
  AcceptanceStats stats;
  Rng rng(cfg.seed);
  for (const auto& prompt : prompts) {
    if (prompt.size() < 2) throw ContractError("acceptance prompts need at least two tokens");
    auto st = detail::prefill_for_pairing(target, prompt);
    std::vector<Token> hist(prompt.begin(), prompt.end() - 1);
    std::optional<Decoder> drafter;
    std::optional<Decoder> verifier;
    switch (pairing) {
      case Pairing::DraftStreamingVsRetrieval:
        drafter.emplace(*draft, std::make_unique<StreamingCache>(
                                    draft->config, StreamingConfig{cfg.n_sink, cfg.draft_budget}));
        verifier.emplace(detail::retrieval_decoder(target, st, prompt, cfg.budget, cfg.chunk_size));
        break;
      case Pairing::RetrievalVsFull:
        drafter.emplace(detail::retrieval_decoder(target, st, prompt, cfg.budget, cfg.chunk_size));
        break;
      case Pairing::StreamingVsFull:
        drafter.emplace(target,
                        std::make_unique<StreamingCache>(StreamingCache::from_source(
                            st.full.cache(), target.config, StreamingConfig{cfg.n_sink, cfg.budget})),
                        hist);
        break;
      case Pairing::TopKVsFull:
        drafter.emplace(target,
                        std::make_unique<TopKCache>(TopKCache::from_source(st.full.cache(), target.config, cfg.budget)),
                        hist);
        break;
      case Pairing::H2OVsFull: {
        Decoder h(target, std::make_unique<H2OCache>(target.config, H2OConfig::with_budget(cfg.budget)));
        h.sync(prompt, 0);
        h.settle(prompt);
        drafter.emplace(std::move(h));
        break;
      }
    }
    if (!verifier) verifier.emplace(std::move(st.full));
    const SpecRun run = speculative_generate(*drafter, *verifier, prompt, prompt.size() + cfg.gen_len, cfg.gamma,
                                             cfg.temperature, rng);
    stats.counters += run.counters;
    stats.case_rates.push_back(run.counters.rate());
    stats.window.push(run.counters.rate());
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Speedup model
// ---------------------------------------------------------------------------

/// Expected tokens from one verification of gamma drafts with i.i.d.
/// acceptance alpha: (1 - alpha^(gamma+1)) / (1 - alpha).
inline double expected_tokens(double alpha, std::size_t gamma) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractError("alpha must lie in [0, 1]");
  if (alpha == 1.0) return static_cast<double>(gamma + 1);
  return (1.0 - std::pow(alpha, static_cast<double>(gamma + 1))) / (1.0 - alpha);
}

/// Affine per-forward latency (ms): base + per_kv * exposed KV entries.
struct LatencyModel {
  double draft_base = 0.5;
  double draft_per_kv = 0.0;
  double target_base = 1.0;
  double target_per_kv = 0.01;

  double t_draft(std::size_t context, std::size_t draft_budget) const {
    return draft_base + draft_per_kv * static_cast<double>(std::min(context, draft_budget));
  }
  double t_target_retrieval(std::size_t context, std::size_t budget) const {
    return target_base + target_per_kv * static_cast<double>(std::min(context, budget));
  }
  double t_target_full(std::size_t context) const {
    return target_base + target_per_kv * static_cast<double>(context);
  }

  void validate() const {
    if (draft_base < 0 || draft_per_kv < 0 || target_base < 0 || target_per_kv < 0) {
      throw ContractError("latency parameters must be non-negative");
    }
    if (!(target_base + target_per_kv > 0)) throw ContractError("target latency must be positive");
  }
};

struct SpeedupInputs {
  double alpha1 = 0.8;
  double alpha2 = 0.9;
  std::size_t gamma1 = 2;
  std::size_t gamma2 = 6;
  std::size_t context = 4096;
  std::size_t budget = 256;
  std::size_t draft_budget = 256;
  LatencyModel latency;
};

struct SpeedupEstimate {
  double inner_rounds = 0.0;       // inner rounds per outer round
  double inner_tokens = 0.0;       // tokens per inner round
  double tokens_per_round = 0.0;   // committed tokens per outer round
  double time_per_round = 0.0;     // ms
  double speedup = 0.0;            // vs one full-cache forward per token
  double speedup_ci = 0.0;         // 95% half-width (simulation only)
  double inner_tokens_ci = 0.0;
};

/// Exact renewal form of the two-level loop: the inner loop's block length n
/// (gamma2 <= n <= gamma2 + gamma1) is computed by dynamic programming over
/// how far each inner round advances, and the outer round commits
/// expected_tokens(alpha2, n) tokens for that n.
inline SpeedupEstimate hierarchical_speedup(const SpeedupInputs& in) {
  if (in.gamma1 == 0 || in.gamma2 == 0) throw ContractError("gammas must be >= 1");
  in.latency.validate();
  const double a = in.alpha1;
  const std::size_t g1 = in.gamma1;
  const std::size_t g2 = in.gamma2;
  std::vector<double> step(g1 + 2, 0.0);  // P(inner round yields k tokens)
  for (std::size_t i = 0; i < g1; ++i) step[i + 1] = std::pow(a, static_cast<double>(i)) * (1.0 - a);
  step[g1 + 1] = std::pow(a, static_cast<double>(g1));
  std::vector<double> f(g2 + g1 + 1, 0.0);
  f[0] = 1.0;
  double rounds = 0.0;
  for (std::size_t n = 0; n < g2; ++n) {
    if (f[n] == 0.0) continue;
    rounds += f[n];
    for (std::size_t k = 1; k <= g1 + 1; ++k) f[n + k] += f[n] * step[k];
  }
  double tokens = 0.0;
  for (std::size_t n = g2; n < f.size(); ++n) tokens += f[n] * expected_tokens(in.alpha2, n);
  SpeedupEstimate e;
  e.inner_rounds = rounds;
  e.inner_tokens = expected_tokens(a, g1);
  e.tokens_per_round = tokens;
  const auto& L = in.latency;
  const double tf = L.t_target_full(in.context);
  e.time_per_round = rounds * (static_cast<double>(g1) * L.t_draft(in.context, in.draft_budget) +
                               L.t_target_retrieval(in.context, in.budget)) +
                     tf;
  e.speedup = tokens * tf / e.time_per_round;
  return e;
}

/// Monte-Carlo run of the same loop with Bernoulli acceptances. The
/// confidence half-widths come from 50 batch means.
inline SpeedupEstimate simulate_speedup(const SpeedupInputs& in, std::size_t rounds, std::uint64_t seed) {
  if (rounds < 100) throw ContractError("simulate_speedup needs at least 100 rounds");
  if (in.gamma1 == 0 || in.gamma2 == 0) throw ContractError("gammas must be >= 1");
  in.latency.validate();
  const auto& L = in.latency;
  const double tf = L.t_target_full(in.context);
  const double t_inner =
      static_cast<double>(in.gamma1) * L.t_draft(in.context, in.draft_budget) + L.t_target_retrieval(in.context, in.budget);
  Rng rng(seed);
  constexpr std::size_t kBatches = 50;
  std::vector<double> batch_speedup, batch_inner;
  double tok_all = 0, time_all = 0, inner_rounds_all = 0, inner_tok_all = 0;
  double tok_b = 0, time_b = 0, irnd_b = 0, itok_b = 0;
  for (std::size_t r = 0; r < rounds; ++r) {
    std::size_t n = 0, inner = 0;
    while (n < in.gamma2) {
      ++inner;
      std::size_t i = 0;
      while (i < in.gamma1 && rng.uniform() < in.alpha1) ++i;
      n += i + 1;
    }
    std::size_t j = 0;
    while (j < n && rng.uniform() < in.alpha2) ++j;
    const double tok = static_cast<double>(j + 1);
    const double time = static_cast<double>(inner) * t_inner + tf;
    tok_b += tok;
    time_b += time;
    irnd_b += static_cast<double>(inner);
    itok_b += static_cast<double>(n);
    const std::size_t batch_end = (batch_speedup.size() + 1) * rounds / kBatches;
    if (r + 1 == batch_end) {
      batch_speedup.push_back(tok_b * tf / time_b);
      batch_inner.push_back(itok_b / irnd_b);
      tok_all += tok_b;
      time_all += time_b;
      inner_rounds_all += irnd_b;
      inner_tok_all += itok_b;
      tok_b = time_b = irnd_b = itok_b = 0;
    }
  }
  auto half_width = [](const std::vector<double>& v) {
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0;
    for (double x : v) ss += (x - m) * (x - m);
    const double sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
    return 1.96 * sd / std::sqrt(static_cast<double>(v.size()));
  };
  SpeedupEstimate e;
  const double R = static_cast<double>(rounds);
  e.inner_rounds = inner_rounds_all / R;
  e.inner_tokens = inner_tok_all / inner_rounds_all;
  e.tokens_per_round = tok_all / R;
  e.time_per_round = time_all / R;
  e.speedup = tok_all * tf / time_all;
  e.speedup_ci = half_width(batch_speedup);
  e.inner_tokens_ci = half_width(batch_inner);
  return e;
}

}  // namespace triforce
