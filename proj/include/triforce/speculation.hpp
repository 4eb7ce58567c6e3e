// Copyright 2026 The TriForce-CPU Authors.
// SPDX-License-Identifier: Apache-2.0

// Speculative decoding primitives and the two-level TriForce loop.
//
// Random stream order within a session: every draft token consumes one
// uniform when sampled, every verification consumes one coin, and every
// correction or bonus token consumes one uniform. This holds at temperature 0
// too (the draws are then irrelevant), so traces replay exactly.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "triforce/kv_cache.hpp"
#include "triforce/kv_policies.hpp"
#include "triforce/model.hpp"
#include "triforce/sampling.hpp"

namespace triforce {

// ---------------------------------------------------------------------------
// Decoder: a model bound to one cache plus the tokens that cache has seen
// ---------------------------------------------------------------------------

class Decoder {
 public:
  Decoder(const ModelWeights& w, std::unique_ptr<KVCache> cache, std::vector<Token> fed = {})
      : w_(&w), cache_(std::move(cache)), fed_(std::move(fed)) {
    if (!cache_->compatible_with(w.config)) throw ContractError("decoder cache does not match its model");
    if (fed_.size() != cache_->length()) throw ContractError("decoder token history does not match cache length");
  }

  Decoder(const Decoder& o)
      : w_(o.w_), cache_(o.cache_->clone()), fed_(o.fed_), forwards_(o.forwards_), rows_(o.rows_) {}
  Decoder& operator=(const Decoder& o) {
    if (this != &o) *this = Decoder(o);
    return *this;
  }
  Decoder(Decoder&&) noexcept = default;
  Decoder& operator=(Decoder&&) noexcept = default;

  const ModelWeights& weights() const { return *w_; }
  KVCache& cache() { return *cache_; }
  const KVCache& cache() const { return *cache_; }
  const std::vector<Token>& fed() const { return fed_; }
  std::size_t forwards() const { return forwards_; }
  std::size_t rows_forwarded() const { return rows_; }

  /// Reuses at most `max_keep` cached tokens that agree with `seq`, then
  /// forwards the rest. Returns logits for positions [keep, seq.size()).
  Logits sync(std::span<const Token> seq, std::size_t max_keep) {
    if (seq.empty()) throw ContractError("decoder sync on an empty sequence");
    std::size_t keep = 0;
    const std::size_t lim = std::min({fed_.size(), seq.size() - 1, max_keep});
    while (keep < lim && fed_[keep] == seq[keep]) ++keep;
    cache_->rollback(keep);
    fed_.resize(keep);
    Logits out = forward(*w_, seq.subspan(keep), *cache_);
    fed_.insert(fed_.end(), seq.begin() + static_cast<std::ptrdiff_t>(keep), seq.end());
    ++forwards_;
    rows_ += seq.size() - keep;
    return out;
  }

  /// Next-token logits after `seq`.
  std::span<const float> advance(std::span<const Token> seq, Logits& buf) {
    buf = sync(seq, seq.size() - 1);
    return buf.last();
  }

  /// Logits at positions |context|-1 .. |context|+|extra|-1, i.e. the
  /// distributions for each of `extra` plus the one after it.
  Logits score(std::span<const Token> context, std::span<const Token> extra) {
    if (context.empty()) throw ContractError("score needs a non-empty context");
    std::vector<Token> full(context.begin(), context.end());
    full.insert(full.end(), extra.begin(), extra.end());
    Logits l = sync(full, context.size() - 1);
    return l.tail_from(l.rows() - (extra.size() + 1));
  }

  /// Drops entries that disagree with `seq` and commits the rest, leaving the
  /// last token of `seq` to be fed by the next call.
  void settle(std::span<const Token> seq) {
    std::size_t keep = 0;
    const std::size_t lim = std::min(fed_.size(), seq.empty() ? 0 : seq.size() - 1);
    while (keep < lim && fed_[keep] == seq[keep]) ++keep;
    cache_->rollback(keep);
    cache_->commit(keep);
    fed_.resize(keep);
  }

  /// For callers that rebuild the cache contents directly.
  void reset_history(std::vector<Token> fed) {
    if (fed.size() != cache_->length()) throw ContractError("history does not match cache length");
    fed_ = std::move(fed);
  }

 private:
  const ModelWeights* w_;
  std::unique_ptr<KVCache> cache_;
  std::vector<Token> fed_;
  std::size_t forwards_ = 0;
  std::size_t rows_ = 0;
};

// ---------------------------------------------------------------------------
// Verify / correct
// ---------------------------------------------------------------------------

/// Accepts x with probability min(1, p(x)/q(x)); consumes one uniform.
inline bool verify_token(Token x, const ProbVector& q, const ProbVector& p, Rng& rng) {
  const auto i = static_cast<std::size_t>(x);
  if (i >= q.size() || q.size() != p.size()) throw ContractError("verify_token: token or vocab mismatch");
  if (!(q[i] > 0.0)) throw ContractError("verify_token: draft probability of token is zero");
  const double u = rng.uniform();
  return u < p[i] / q[i];
}

/// Sample from normalize(max(p - q, 0)), or from p when that residual is
/// zero; consumes one uniform.
inline Token correct_token(const ProbVector& q, const ProbVector& p, Rng& rng) {
  if (q.size() != p.size()) throw ContractError("correct_token: vocab mismatch");
  ProbVector r{p.role, std::vector<double>(p.size())};
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    r.p[i] = std::max(p[i] - q[i], 0.0);
    z += r.p[i];
  }
  if (!(z > 1e-15)) return sample_from(p, rng);
  for (double& v : r.p) v /= z;
  return sample_from(r, rng);
}

/// Tokens proposed by a drafter with the distributions they were drawn from.
struct Draft {
  std::vector<Token> tokens;
  std::vector<ProbVector> probs;
};

/// gamma tokens sampled autoregressively from `drafter` after `context`.
inline Draft draft_round(Decoder& drafter, std::span<const Token> context, std::size_t gamma, double temperature,
                         Rng& rng, ProbVector::Role role = ProbVector::Role::Draft) {
  if (gamma == 0) throw ContractError("draft_round needs gamma >= 1");
  Draft d;
  std::vector<Token> seq(context.begin(), context.end());
  Logits buf;
  for (std::size_t i = 0; i < gamma; ++i) {
    ProbVector q = to_probs(drafter.advance(seq, buf), temperature, role);
    const Token x = sample_from(q, rng);
    d.tokens.push_back(x);
    d.probs.push_back(std::move(q));
    seq.push_back(x);
  }
  return d;
}

struct VerifyResult {
  std::vector<Token> tokens;        // accepted drafts, then one corrected or bonus token
  std::vector<ProbVector> probs;    // verifier distribution at each emitted position
  std::size_t accepted = 0;
  bool rejected = false;            // false: all accepted, last token is a bonus
};

/// Scores all drafted tokens in one forward of `verifier`, then verifies them
/// in order, correcting at the first rejection or adding a bonus token.
inline VerifyResult verify_block(Decoder& verifier, std::span<const Token> context, const Draft& draft,
                                 double temperature, Rng& rng, ProbVector::Role role = ProbVector::Role::Target) {
  if (draft.tokens.size() != draft.probs.size() || draft.tokens.empty()) {
    throw ContractError("verify_block: malformed draft");
  }
  const Logits l = verifier.score(context, draft.tokens);
  VerifyResult r;
  for (std::size_t i = 0; i < draft.tokens.size(); ++i) {
    ProbVector p = to_probs(l.row(i), temperature, role);
    if (verify_token(draft.tokens[i], draft.probs[i], p, rng)) {
      r.tokens.push_back(draft.tokens[i]);
      r.probs.push_back(std::move(p));
      ++r.accepted;
      continue;
    }
    r.tokens.push_back(correct_token(draft.probs[i], p, rng));
    r.probs.push_back(std::move(p));
    r.rejected = true;
    return r;
  }
  ProbVector p = to_probs(l.row(draft.tokens.size()), temperature, role);
  r.tokens.push_back(sample_from(p, rng));
  r.probs.push_back(std::move(p));
  return r;
}

// ---------------------------------------------------------------------------
// Trace
// ---------------------------------------------------------------------------

enum class TokenSource { DraftModel, RetrievalSelfSpec, Corrected, Bonus };

inline const char* to_string(TokenSource s) {
  switch (s) {
    case TokenSource::DraftModel: return "draft";
    case TokenSource::RetrievalSelfSpec: return "retrieval";
    case TokenSource::Corrected: return "corrected";
    case TokenSource::Bonus: return "bonus";
  }
  return "?";
}

/// Counters for one verification level. proposed counts drafted tokens that
/// were actually verified (accepted + rejected); drafts after a rejection are
/// discarded unverified.
struct LevelCounters {
  std::size_t rounds = 0;
  std::size_t drafted = 0;
  std::size_t proposed = 0;
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::size_t bonus = 0;

  double rate() const { return proposed == 0 ? 0.0 : static_cast<double>(accepted) / static_cast<double>(proposed); }

  void add(const VerifyResult& r, std::size_t drafted_now) {
    ++rounds;
    drafted += drafted_now;
    accepted += r.accepted;
    rejected += r.rejected ? 1 : 0;
    proposed += r.accepted + (r.rejected ? 1 : 0);
    bonus += r.rejected ? 0 : 1;
  }

  LevelCounters& operator+=(const LevelCounters& o) {
    rounds += o.rounds;
    drafted += o.drafted;
    proposed += o.proposed;
    accepted += o.accepted;
    rejected += o.rejected;
    bonus += o.bonus;
    return *this;
  }
};

struct TraceToken {
  Position position = 0;
  Token token = 0;
  TokenSource source = TokenSource::DraftModel;
  bool accepted = false;  // passed outer verification as a drafted token
  std::size_t outer_round = 0;
};

struct StepTrace {
  std::vector<TraceToken> tokens;
  LevelCounters inner;  // draft model vs target with retrieval cache
  LevelCounters outer;  // target with retrieval cache vs target with full cache
  std::vector<double> outer_round_rates;
  std::size_t retrieval_builds = 0;
  std::size_t draft_forwards = 0;
  std::size_t retrieval_forwards = 0;
  std::size_t full_forwards = 0;

  /// One JSON object per emitted token:
  /// {"pos":..,"token":..,"source":"draft|retrieval|corrected|bonus","accepted":bool,"round":..}
  /// A non-negative `case_id` adds a leading "case" field.
  void write_jsonl(std::ostream& os, long case_id = -1) const {
    for (const auto& t : tokens) {
      os << "{";
      if (case_id >= 0) os << "\"case\":" << case_id << ",";
      os << "\"pos\":" << t.position << ",\"token\":" << t.token << ",\"source\":\"" << to_string(t.source)
         << "\",\"accepted\":" << (t.accepted ? "true" : "false") << ",\"round\":" << t.outer_round << "}\n";
    }
  }
};

// ---------------------------------------------------------------------------
// Two-level loop
// ---------------------------------------------------------------------------

struct SpecConfig {
  std::size_t gamma1 = 2;
  std::size_t gamma2 = 6;
  double temperature = 0.0;
  std::size_t target_len = 0;  // total sequence length to reach
  std::uint64_t seed = 0;
  RetrievalConfig retrieval;
  StreamingConfig draft_cache;

  void validate(std::size_t prefix_len) const {
    if (gamma1 == 0 || gamma2 == 0) throw ContractError("gamma1 and gamma2 must be >= 1");
    if (temperature < 0.0) throw ContractError("temperature must be >= 0");
    if (prefix_len == 0) throw ContractError("prefix must hold at least one token");
    if (target_len <= prefix_len) {
      throw ContractError("target length " + std::to_string(target_len) + " must exceed prefix length " +
                          std::to_string(prefix_len));
    }
    retrieval.validate();
    draft_cache.validate();
  }
};

/// Self-speculated block x-hat with the intermediate distributions p-hat.
struct InnerBlock {
  std::vector<Token> tokens;
  std::vector<ProbVector> probs;
  std::vector<TokenSource> sources;
};

/// Draft model proposes gamma1 tokens at a time, the retrieval-cache target
/// verifies them, until at least gamma2 tokens are collected.
inline InnerBlock inner_speculate(Decoder& draft, Decoder& retrieval, std::span<const Token> context,
                                  const SpecConfig& cfg, Rng& rng, LevelCounters& counters) {
  InnerBlock b;
  std::vector<Token> seq(context.begin(), context.end());
  while (b.tokens.size() < cfg.gamma2) {
    const Draft d = draft_round(draft, seq, cfg.gamma1, cfg.temperature, rng, ProbVector::Role::Draft);
    VerifyResult r = verify_block(retrieval, seq, d, cfg.temperature, rng, ProbVector::Role::Intermediate);
    counters.add(r, d.tokens.size());
    for (std::size_t i = 0; i < r.tokens.size(); ++i) {
      b.tokens.push_back(r.tokens[i]);
      b.probs.push_back(std::move(r.probs[i]));
      b.sources.push_back(i < r.accepted ? TokenSource::DraftModel : TokenSource::RetrievalSelfSpec);
    }
    seq.insert(seq.end(), r.tokens.begin(), r.tokens.end());
  }
  return b;
}

/// Full-cache target verifies the whole block in one forward.
inline VerifyResult outer_verify(Decoder& target, std::span<const Token> context, const InnerBlock& block,
                                 double temperature, Rng& rng) {
  Draft d{block.tokens, block.probs};
  return verify_block(target, context, d, temperature, rng, ProbVector::Role::Target);
}

class TriForceSession {
 public:
  TriForceSession(const ModelWeights& target, const ModelWeights& draft, std::span<const Token> prefix,
                  SpecConfig cfg)
      : cfg_(std::move(cfg)),
        seq_(prefix.begin(), prefix.end()),
        rng_(cfg_.seed),
        full_(target, std::make_unique<FullCache>(target.config)),
        retr_(target, std::make_unique<RetrievalCache>(target.config, cfg_.retrieval)),
        drafter_(draft, std::make_unique<StreamingCache>(draft.config, cfg_.draft_cache)),
        window_(cfg_.retrieval.rolling_window) {
    cfg_.validate(seq_.size());
    require_shared_vocab(target.config, draft.config);
    if (cfg_.target_len > target.config.max_seq || cfg_.target_len > draft.config.max_seq) {
      throw CapacityError("target length exceeds model max_seq");
    }
    full_.sync(seq_, 0);
    // The draft model's prefill is deferred to its first round (it only
    // needs the same prefix); the retrieval cache is built from the target's
    // prefill using the last prompt token's queries.
    const std::size_t t = seq_.size();
    std::vector<std::vector<float>> q(target.config.n_layers);
    for (std::size_t l = 0; l < q.size(); ++l) {
      auto s = full_.cache().query(l, static_cast<Position>(t - 1));
      q[l].assign(s.begin(), s.end());
    }
    full_.settle(seq_);
    rebuild(q);
  }

  bool done() const { return seq_.size() >= cfg_.target_len; }
  const std::vector<Token>& tokens() const { return seq_; }
  const StepTrace& trace() const { return trace_; }
  const SpecConfig& config() const { return cfg_; }
  const Decoder& full() const { return full_; }
  const Decoder& retrieval() const { return retr_; }
  const Decoder& drafter() const { return drafter_; }

  /// Restarts the random stream (used to branch many runs off one prefill).
  void reseed(std::uint64_t seed) { rng_ = Rng(seed); }

  /// One outer round. Returns the number of tokens appended.
  std::size_t step() {
    if (done()) return 0;
    const std::size_t before = seq_.size();
    InnerBlock b = inner_speculate(drafter_, retr_, seq_, cfg_, rng_, trace_.inner);
    const VerifyResult r = outer_verify(full_, seq_, b, cfg_.temperature, rng_);
    trace_.outer.add(r, b.tokens.size());
    const std::size_t round = trace_.outer.rounds - 1;
    const double proposed = static_cast<double>(r.accepted + (r.rejected ? 1 : 0));
    const double rate = proposed == 0.0 ? 1.0 : static_cast<double>(r.accepted) / proposed;
    trace_.outer_round_rates.push_back(rate);

    for (std::size_t i = 0; i < r.tokens.size() && seq_.size() < cfg_.target_len; ++i) {
      TraceToken t;
      t.position = static_cast<Position>(seq_.size());
      t.token = r.tokens[i];
      t.outer_round = round;
      if (i < r.accepted) {
        t.source = b.sources[i];
        t.accepted = true;
      } else {
        t.source = r.rejected ? TokenSource::Corrected : TokenSource::Bonus;
      }
      trace_.tokens.push_back(t);
      seq_.push_back(r.tokens[i]);
    }
    const std::size_t emitted = seq_.size() - before;

    full_.settle(seq_);
    drafter_.settle(seq_);
    window_.push(rate);
    since_build_ += emitted;
    if (retrieval_should_rebuild(cfg_.retrieval, window_, since_build_)) {
      // Score with the newest committed token's queries; its KV is not in
      // the full cache yet, so run it once and drop it again.
      full_.sync(seq_, seq_.size() - 1);
      std::vector<std::vector<float>> q(full_.weights().config.n_layers);
      const auto qpos = static_cast<Position>(seq_.size()) - 1;
      for (std::size_t l = 0; l < q.size(); ++l) {
        auto s = full_.cache().query(l, qpos);
        q[l].assign(s.begin(), s.end());
      }
      full_.settle(seq_);
      rebuild(q);
    } else {
      auto& rc = static_cast<RetrievalCache&>(retr_.cache());
      rc.rollback(rc.committed());
      rc.absorb(full_.cache(), full_.cache().length());
      retr_.reset_history({seq_.begin(), seq_.begin() + static_cast<std::ptrdiff_t>(rc.length())});
    }
    trace_.draft_forwards = drafter_.forwards();
    trace_.retrieval_forwards = retr_.forwards();
    trace_.full_forwards = full_.forwards();
    return emitted;
  }

  void run() {
    while (!done()) step();
  }

 private:
  void rebuild(const std::vector<std::vector<float>>& queries) {
    auto& rc = static_cast<RetrievalCache&>(retr_.cache());
    std::vector<std::span<const float>> qs(queries.begin(), queries.end());
    rc.build(full_.cache(), qs);
    retr_.reset_history({seq_.begin(), seq_.begin() + static_cast<std::ptrdiff_t>(rc.length())});
    window_.clear();
    since_build_ = 0;
    ++trace_.retrieval_builds;
  }

  SpecConfig cfg_;
  std::vector<Token> seq_;
  Rng rng_;
  Decoder full_;
  Decoder retr_;
  Decoder drafter_;
  RollingMean window_;
  std::size_t since_build_ = 0;
  StepTrace trace_;
};

struct Generation {
  std::vector<Token> tokens;  // prefix followed by generated tokens
  StepTrace trace;
};

inline Generation triforce_generate(const ModelWeights& target, const ModelWeights& draft,
                                    std::span<const Token> prefix, const SpecConfig& cfg) {
  TriForceSession s(target, draft, prefix, cfg);
  s.run();
  return {s.tokens(), s.trace()};
}

/// Plain decode loop with a full cache.
inline std::vector<Token> autoregressive_generate(const ModelWeights& w, std::span<const Token> prefix,
                                                  std::size_t target_len, double temperature, std::uint64_t seed) {
  if (prefix.empty()) throw ContractError("prefix must hold at least one token");
  if (target_len <= prefix.size()) throw ContractError("target length must exceed prefix length");
  if (target_len > w.config.max_seq) throw CapacityError("target length exceeds max_seq");
  FullCache cache(w.config);
  Rng rng(seed);
  std::vector<Token> out(prefix.begin(), prefix.end());
  Logits l = prefill(w, prefix, cache);
  while (true) {
    const Token t = sample(l.last(), temperature, rng);
    out.push_back(t);
    if (out.size() >= target_len) break;
    l = decode_step(w, t, cache);
  }
  return out;
}

struct SpecRun {
  std::vector<Token> tokens;
  LevelCounters counters;
};

/// Single-level speculative decoding of `drafter` against `verifier` from
/// whatever state the two decoders hold.
inline SpecRun speculative_generate(Decoder& drafter, Decoder& verifier, std::span<const Token> prefix,
                                    std::size_t target_len, std::size_t gamma, double temperature, Rng& rng) {
  if (target_len <= prefix.size()) throw ContractError("target length must exceed prefix length");
  SpecRun out{{prefix.begin(), prefix.end()}, {}};
  while (out.tokens.size() < target_len) {
    const Draft d = draft_round(drafter, out.tokens, gamma, temperature, rng);
    const VerifyResult r = verify_block(verifier, out.tokens, d, temperature, rng);
    out.counters.add(r, d.tokens.size());
    for (Token t : r.tokens) {
      if (out.tokens.size() >= target_len) break;
      out.tokens.push_back(t);
    }
    drafter.settle(out.tokens);
    verifier.settle(out.tokens);
  }
  return out;
}

}  // namespace triforce
