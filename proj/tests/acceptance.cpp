// Copyright 2026 The TriForce-CPU Authors.
// SPDX-License-Identifier: Apache-2.0

// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Run a subset with `triforce_acceptance 2 5`.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "stats.hpp"
#include "triforce/analytics.hpp"
#include "triforce/speculation.hpp"

using namespace triforce;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string format(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::vector<Token> random_tokens(std::size_t n, std::uint32_t vocab, Rng& rng) {
  std::vector<Token> t(n);
  for (auto& v : t) v = static_cast<Token>(rng.uniform_int(0, vocab - 1));
  return t;
}

ModelWeights uniform_head(ModelWeights w) {
  Tensor& head = w.tied_head ? w.tok_embeddings : w.output;
  std::fill(head.data().begin(), head.data().end(), 0.0f);
  return w;
}

// 1. TriForce at T=0 reproduces greedy decoding token for token.
Outcome greedy_losslessness() {
  const ModelWeights target = generate_weights(presets::target(), 1001);
  const ModelWeights draft = generate_weights(presets::draft(), 1002);
  const std::size_t chunk = 8;
  std::size_t runs = 0, identical = 0;
  Rng pick(1003);
  for (std::uint64_t c = 0; c < 100; ++c) {
    const std::size_t ctx = 64 + 32 * static_cast<std::size_t>(pick.uniform_int(0, 4));
    const std::size_t gen = 24 + static_cast<std::size_t>(pick.uniform_int(0, 16));
    Rng prng(5000 + c);
    auto prompt = random_tokens(ctx, target.config.vocab_size, prng);
    const auto ar = autoregressive_generate(target, prompt, ctx + gen, 0.0, c);
    for (std::size_t pct : {25, 50, 100}) {
      SpecConfig s;
      s.seed = c;
      s.target_len = ctx + gen;
      s.retrieval.chunk_size = chunk;
      s.retrieval.budget = ctx * pct / 100;
      s.retrieval.rebuild_stride = 16;
      s.draft_cache = {4, std::max<std::size_t>(ctx / 8, 5)};
      const auto g = triforce_generate(target, draft, prompt, s);
      ++runs;
      identical += g.tokens == ar;
    }
  }
  return {identical == runs, format("%zu/%zu (seed, prompt, budget) runs bit-identical to greedy", identical, runs)};
}

// 2. The first sampled token follows the target distribution.
Outcome stochastic_losslessness() {
  const ModelWeights target = generate_weights(presets::toy_target(), 2001);
  const ModelWeights draft = generate_weights(presets::toy_draft(), 2002);
  Rng prng(2003);
  const auto prefix = random_tokens(32, 16, prng);
  FullCache c(target.config);
  const Logits l = prefill(target, prefix, c);
  constexpr std::size_t kRuns = 50000;
  bool all = true;
  std::string detail;
  for (double temp : {0.2, 0.6, 1.0}) {
    const auto expected = to_probs(l.last(), temp).p;
    SpecConfig s;
    s.temperature = temp;
    s.target_len = prefix.size() + 8;
    s.retrieval.chunk_size = 4;
    s.retrieval.budget = 16;
    s.draft_cache = {2, 8};
    const TriForceSession base(target, draft, prefix, s);
    int passed = 0;
    std::string ps;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      std::vector<std::size_t> counts(16);
      for (std::size_t r = 0; r < kRuns; ++r) {
        TriForceSession run = base;
        run.reseed(seed * 1000003 + r);
        run.step();
        ++counts[static_cast<std::size_t>(run.tokens()[prefix.size()])];
      }
      const double p = stats::chi_square_gof(counts, expected).p_value;
      passed += p > 0.001;
      ps += format("%s%.3g", seed ? "," : "", p);
    }
    all = all && passed >= 2;
    detail += format("%sT=%.1f %d/3 (p=%s)", detail.empty() ? "" : "; ", temp, passed, ps.c_str());
  }
  return {all, detail};
}

// 3. On the planted needle task retrieval keeps the needle, eviction does not.
Outcome retrieval_vs_eviction() {
  const std::size_t ctx = 512;
  const ModelWeights w = planted_attention_weights(presets::target(), NeedlePlan{ctx, kPasskeyDigits}, 0.8, 3001);
  const auto cases = needle_corpus(ctx, 50, 3002);
  std::vector<std::vector<Token>> prompts;
  for (const auto& c : cases) prompts.push_back(c.tokens);
  AcceptanceConfig a;
  a.budget = 64;
  a.chunk_size = 16;
  a.gamma = 4;
  a.gen_len = 8;
  a.temperature = 0.0;
  const double topk = measure_acceptance(Pairing::TopKVsFull, w, nullptr, prompts, a).rate();
  const double retr = measure_acceptance(Pairing::RetrievalVsFull, w, nullptr, prompts, a).rate();
  const double stream = measure_acceptance(Pairing::StreamingVsFull, w, nullptr, prompts, a).rate();
  const bool ok = topk >= retr && retr > stream && retr - stream >= 0.3;
  return {ok, format("alpha topk=%.4f retrieval=%.4f streaming=%.4f", topk, retr, stream)};
}

// 4. Chunk ranking equals brute-force mean-key scoring.
Outcome chunk_scoring_oracle() {
  const ModelConfig cfg = presets::target();
  std::size_t layers = 0, equal = 0;
  Rng rng(4001);
  ModelWeights current;
  for (std::uint64_t c = 0; c < 1000; ++c) {
    if (c % 50 == 0) current = generate_weights(cfg, 4002 + c / 50);  // 20 weight draws
    const auto tokens = random_tokens(64, cfg.vocab_size, rng);
    FullCache full(cfg);
    prefill(current, tokens, full);
    std::vector<std::span<const float>> q;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) q.push_back(full.query(l, 63));
    RetrievalConfig rc;
    rc.chunk_size = 8;
    rc.budget = 16;
    RetrievalCache r(cfg, rc);
    const auto& table = r.build(full, q);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const auto scores = oracle::chunk_scores(full.layer(l), q[l], cfg.n_heads, cfg.n_kv_heads, cfg.head_dim, 8);
      ++layers;
      equal += table.layers[l].ranking == oracle::ranking(scores);
    }
  }
  return {equal == layers, format("%zu/%zu (context, layer) rankings equal", equal, layers)};
}

// 5. Closed-form speedup agrees with simulation.
Outcome speedup_consistency() {
  double worst = 0;
  for (double a1 : {0.3, 0.5, 0.8}) {
    for (double a2 : {0.8, 0.9, 0.95}) {
      SpeedupInputs in;
      in.alpha1 = a1;
      in.alpha2 = a2;
      in.gamma1 = 2;
      in.gamma2 = 6;
      const double cf = hierarchical_speedup(in).speedup;
      const double sim = simulate_speedup(in, 100000, 5001).speedup;
      worst = std::max(worst, std::abs(cf - sim) / sim);
    }
  }
  const double e = expected_tokens(0.8, 4);
  const bool ok = worst < 0.02 && std::abs(e - 3.3616) <= 1e-4;
  return {ok, format("max relative error %.4f over 9 points; expected_tokens(0.8, 4) = %.6f", worst, e)};
}

// 6. Speculate/rollback/commit sequences match a replay oracle.
Outcome rollback_soundness() {
  const ModelWeights w = generate_weights(presets::toy_target(), 6001);
  std::string detail;
  bool ok = true;
  for (CachePolicy p : {CachePolicy::Full, CachePolicy::Streaming, CachePolicy::H2O, CachePolicy::TopK,
                        CachePolicy::Retrieval}) {
    std::size_t good = 0;
    std::string first;
    for (std::uint64_t c = 0; c < 500; ++c) {
      const auto r = oracle::replay_case(p, w, 7000 + c);
      good += r.ok;
      if (!r.ok && first.empty()) first = r.failure;
    }
    ok = ok && good == 500;
    detail += format("%s%s %zu/500", detail.empty() ? "" : ", ", to_string(p), good);
    if (!first.empty()) detail += " (" + first + ")";
  }
  return {ok, detail};
}

// 7. Recovery curves are monotone, saturate, and frozen mass stays below fresh.
Outcome recovery_monotonicity() {
  const ModelWeights w = generate_weights(presets::target(), 8001);
  const std::vector<std::size_t> budgets{1, 2, 4, 8, 16, 32, 64, 128, 192, 256};
  constexpr double kTol = 1e-6;
  double worst_drop = 0, worst_full = 0, worst_offset0 = 0, worst_excess = 0;
  Rng rng(8002);
  for (int c = 0; c < 20; ++c) {
    const auto ctx = random_tokens(256, w.config.vocab_size, rng);
    const auto s = sparsity_recovery(w, ctx, budgets);
    for (const auto& row : s.mass) {
      for (std::size_t b = 1; b < row.size(); ++b) worst_drop = std::max(worst_drop, row[b - 1] - row[b]);
      worst_full = std::max(worst_full, std::abs(row.back() - 1.0));
    }
    const std::size_t bi = 5;  // budget 32
    const auto loc = locality_recovery(w, ctx, budgets[bi], 16);
    for (std::size_t li = 0; li < loc.layers.size(); ++li) {
      worst_offset0 = std::max(worst_offset0, std::abs(loc.frozen[li][0] - s.mass[li][bi]));
      for (std::size_t o = 0; o < loc.frozen[li].size(); ++o) {
        worst_excess = std::max(worst_excess, loc.frozen[li][o] - loc.fresh[li][o]);
      }
    }
  }
  const bool ok = worst_drop <= kTol && worst_full <= kTol && worst_offset0 <= kTol && worst_excess <= kTol;
  return {ok, format("max drop %.2e, |full-1| %.2e, |offset0-sparsity| %.2e, frozen-fresh %.2e", worst_drop,
                     worst_full, worst_offset0, worst_excess)};
}

// 8. A draft that knows nothing still cannot stall the loop.
Outcome progress_and_termination() {
  const ModelWeights target = generate_weights(presets::target(), 9001);
  const ModelWeights draft = uniform_head(generate_weights(presets::draft(), 9002));
  Rng rng(9003);
  std::size_t ok_trials = 0, max_rounds = 0;
  for (std::uint64_t t = 0; t < 50; ++t) {
    const std::size_t prefix_len = 32 + static_cast<std::size_t>(rng.uniform_int(0, 96));
    const auto prefix = random_tokens(prefix_len, target.config.vocab_size, rng);
    SpecConfig s;
    s.seed = t;
    s.temperature = t % 2 ? 1.0 : 0.0;
    s.target_len = prefix_len + 32;
    s.retrieval.chunk_size = 8;
    s.retrieval.budget = 16;
    s.draft_cache = {4, 16};
    TriForceSession sess(target, draft, prefix, s);
    std::size_t rounds = 0;
    bool ok = true;
    while (!sess.done() && ok) {
      ok = sess.step() >= 1 && ++rounds <= s.target_len - prefix_len;
    }
    max_rounds = std::max(max_rounds, rounds);
    ok_trials += ok && sess.done();
  }
  return {ok_trials == 50, format("%zu/50 trials progressed and terminated (max %zu rounds for 32 tokens)", ok_trials,
                                  max_rounds)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"greedy losslessness", greedy_losslessness},
      {"stochastic losslessness", stochastic_losslessness},
      {"retrieval vs eviction ordering", retrieval_vs_eviction},
      {"chunk-scoring oracle equivalence", chunk_scoring_oracle},
      {"speedup-model consistency", speedup_consistency},
      {"cache rollback soundness", rollback_soundness},
      {"recovery monotonicity", recovery_monotonicity},
      {"progress and termination", progress_and_termination},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s [%d] %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed ? 1 : 0;
}
