// Copyright 2026 The TriForce-CPU Authors.
// SPDX-License-Identifier: Apache-2.0

// Experiment runner. Every experiment writes into
//   $TRIFORCE_OUT (or output_dir) / <experiment> / <config-hash> /
// through a temporary directory that is renamed into place only when all
// artifacts are complete.

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <unistd.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "triforce/analytics.hpp"
#include "triforce/run_config.hpp"
#include "triforce/speculation.hpp"
#include "triforce/tokenizer.hpp"
#include "triforce/weights_io.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace triforce;

namespace {

constexpr const char* kToolVersion = "0.1.0";

// ---- artifacts ------------------------------------------------------------

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

class Csv {
 public:
  explicit Csv(std::vector<std::string> header) : header_(std::move(header)) {}

  void add(std::vector<std::string> row) {
    if (row.size() != header_.size()) throw Error("csv row width mismatch");
    rows_.push_back(std::move(row));
  }
  std::size_t size() const { return rows_.size(); }

  void write(const fs::path& p) const {
    std::ofstream f(p);
    auto line = [&f](const std::vector<std::string>& r) {
      for (std::size_t i = 0; i < r.size(); ++i) f << (i ? "," : "") << r[i];
      f << "\n";
    };
    line(header_);
    for (const auto& r : rows_) line(r);
    if (!f) throw Error("failed writing " + p.string());
  }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

class OutputDir {
 public:
  OutputDir(const RunConfig& cfg) : cfg_(cfg) {
    const char* env = std::getenv("TRIFORCE_OUT");
    const fs::path root = (env && *env) ? fs::path(env) : fs::path(cfg.output_dir);
    final_ = root / cfg.experiment / cfg.hash_hex();
    tmp_ = root / cfg.experiment / ("." + cfg.hash_hex() + ".tmp" + std::to_string(::getpid()));
    fs::remove_all(tmp_);
    fs::create_directories(tmp_);
  }
  ~OutputDir() {
    if (!done_) {
      std::error_code ec;
      fs::remove_all(tmp_, ec);
    }
  }

  fs::path path(const std::string& name) {
    artifacts_.push_back(name);
    const fs::path p = tmp_ / name;
    fs::create_directories(p.parent_path());
    return p;
  }

  void finish(const json& summary) {
    json m;
    m["tool"] = "triforce";
    m["version"] = kToolVersion;
    m["experiment"] = cfg_.experiment;
    m["config_hash"] = cfg_.hash_hex();
    m["seed"] = cfg_.seed;
    json c = json::object();
    for (const auto& [k, v] : cfg_.resolved()) c[k] = v;
    m["config"] = c;
    m["artifacts"] = artifacts_;
    m["summary"] = summary;
    std::ofstream(tmp_ / "manifest.json") << m.dump(2) << "\n";
    if (fs::exists(final_)) fs::remove_all(final_);
    fs::rename(tmp_, final_);
    done_ = true;
    std::cout << final_.string() << "\n";
  }

 private:
  const RunConfig& cfg_;
  fs::path final_;
  fs::path tmp_;
  std::vector<std::string> artifacts_;
  bool done_ = false;
};

// ---- shared setup ---------------------------------------------------------

struct Models {
  ModelWeights target;
  std::optional<ModelWeights> draft;
};

Models load_models(const RunConfig& cfg, bool want_draft) {
  Models m{load_weights(cfg.target_weights), std::nullopt};
  if (want_draft && !cfg.draft_weights.empty()) {
    m.draft = load_weights(cfg.draft_weights);
    require_shared_vocab(m.target.config, m.draft->config);
  }
  if (cfg.context_len + cfg.gen_len + 1 > m.target.config.max_seq) {
    auto it = cfg.lines.find("context_len");
    throw ConfigError(cfg.source, it == cfg.lines.end() ? 0 : it->second,
                      "context_len + gen_len exceeds the target max_seq of " +
                          std::to_string(m.target.config.max_seq));
  }
  return m;
}

std::vector<std::vector<Token>> build_prompts(const RunConfig& cfg, const ModelConfig& mc,
                                              std::vector<NeedleCase>* needles = nullptr) {
  std::vector<std::vector<Token>> out;
  if (!cfg.prompt.empty()) {
    ByteTokenizer tok(std::max<std::uint32_t>(mc.vocab_size, ByteTokenizer::kMinVocab));
    out.push_back(tok.tokenize(cfg.prompt));
    return out;
  }
  if (cfg.corpus == "needle") {
    auto cases = needle_corpus(cfg.context_len, cfg.corpus_cases, cfg.seed);
    for (const auto& c : cases) out.push_back(c.tokens);
    if (needles) *needles = std::move(cases);
    return out;
  }
  Rng rng(cfg.seed);
  const bool bytes = mc.vocab_size >= ByteTokenizer::kMinVocab;
  for (std::size_t i = 0; i < cfg.corpus_cases; ++i) {
    std::vector<Token> p;
    if (bytes) p.push_back(ByteTokenizer::kBos);
    while (p.size() < cfg.context_len) {
      p.push_back(bytes ? static_cast<Token>("abcdefghijklmnopqrstuvwxyz "[rng.uniform_int(0, 26)])
                        : static_cast<Token>(rng.uniform_int(0, mc.vocab_size - 1)));
    }
    out.push_back(std::move(p));
  }
  return out;
}

SpecConfig spec_config(const RunConfig& cfg, std::size_t prompt_len) {
  SpecConfig s;
  s.gamma1 = cfg.gamma1;
  s.gamma2 = cfg.gamma2;
  s.temperature = cfg.temperature;
  s.target_len = prompt_len + cfg.gen_len;
  s.seed = cfg.seed;
  s.retrieval.chunk_size = cfg.chunk_size;
  s.retrieval.budget = cfg.effective_retrieval_budget(prompt_len);
  s.retrieval.rebuild_stride = cfg.rebuild_stride;
  s.retrieval.rebuild_accept_threshold = cfg.rebuild_threshold;
  s.retrieval.rolling_window = cfg.rolling_window;
  s.draft_cache = {cfg.n_sink, cfg.effective_draft_budget(prompt_len)};
  return s;
}

AcceptanceConfig acceptance_config(const RunConfig& cfg) {
  AcceptanceConfig a;
  a.budget = cfg.budget;
  a.chunk_size = cfg.chunk_size;
  a.n_sink = cfg.n_sink;
  a.draft_budget = cfg.effective_draft_budget(cfg.context_len);
  a.gamma = cfg.gamma;
  a.gen_len = cfg.gen_len;
  a.temperature = cfg.temperature;
  a.seed = cfg.seed;
  return a;
}

LatencyModel latency(const RunConfig& cfg) {
  return {cfg.draft_base, cfg.draft_per_kv, cfg.target_base, cfg.target_per_kv};
}

std::string join_tokens(std::span<const Token> t) {
  std::string s;
  for (std::size_t i = 0; i < t.size(); ++i) s += (i ? " " : "") + std::to_string(t[i]);
  return s;
}

/// Runs fn(i) for i in [0, n) on a pool of `workers` threads.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex mu;
  auto work = [&] {
    for (std::size_t i; (i = next++) < n;) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!err) err = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < std::min(workers, n); ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

struct TriForceSummary {
  LevelCounters inner, outer;
  std::size_t outer_rounds = 0, emitted = 0, builds = 0;
  void add(const StepTrace& t) {
    inner += t.inner;
    outer += t.outer;
    outer_rounds += t.outer.rounds;
    emitted += t.tokens.size();
    builds += t.retrieval_builds;
  }
  double tokens_per_round() const { return outer_rounds ? double(emitted) / double(outer_rounds) : 0.0; }
};

// ---- experiments ----------------------------------------------------------

int cmd_generate(const RunConfig& cfg) {
  const Models m = load_models(cfg, true);
  OutputDir out(cfg);
  const auto prompts = build_prompts(cfg, m.target.config);
  std::ofstream tri(out.path("triforce_tokens.txt")), ar(out.path("ar_tokens.txt")), tr(out.path("trace.jsonl"));
  Csv summary({"case", "prompt_len", "generated", "outer_rounds", "inner_alpha", "outer_alpha", "tokens_per_round",
               "retrieval_builds", "matches_ar"});
  TriForceSummary total;
  std::size_t matches = 0;
  std::vector<Generation> gens(prompts.size());
  std::vector<std::vector<Token>> ars(prompts.size());
  parallel_for(prompts.size(), cfg.workers, [&](std::size_t i) {
    const auto& p = prompts[i];
    gens[i] = triforce_generate(m.target, *m.draft, p, spec_config(cfg, p.size()));
    ars[i] = autoregressive_generate(m.target, p, p.size() + cfg.gen_len, cfg.temperature, cfg.seed);
  });
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto& p = prompts[i];
    const auto& g = gens[i];
    const auto& a = ars[i];
    const std::span<const Token> gt(g.tokens), at(a);
    tri << join_tokens(gt.subspan(p.size())) << "\n";
    ar << join_tokens(at.subspan(p.size())) << "\n";
    g.trace.write_jsonl(tr, static_cast<long>(i));
    const bool same = g.tokens == a;
    matches += same ? 1 : 0;
    TriForceSummary one;
    one.add(g.trace);
    total.add(g.trace);
    summary.add({std::to_string(i), std::to_string(p.size()), std::to_string(g.tokens.size() - p.size()),
                 std::to_string(g.trace.outer.rounds), fmt(g.trace.inner.rate()), fmt(g.trace.outer.rate()),
                 fmt(one.tokens_per_round()), std::to_string(g.trace.retrieval_builds), same ? "1" : "0"});
  }
  tri.close();
  ar.close();
  tr.close();
  summary.write(out.path("summary.csv"));
  json s{{"cases", prompts.size()},
         {"matches_ar", matches},
         {"inner_alpha", total.inner.rate()},
         {"outer_alpha", total.outer.rate()},
         {"tokens_per_outer_round", total.tokens_per_round()}};
  out.finish(s);
  return 0;
}

std::vector<Pairing> pairings_of(const RunConfig& cfg) {
  std::vector<Pairing> out;
  for (const auto& p : cfg.pairings) {
    try {
      out.push_back(pairing_from_string(p));
    } catch (const ContractError& e) {
      auto it = cfg.lines.find("pairings");
      throw ConfigError(cfg.source, it == cfg.lines.end() ? 0 : it->second, e.what());
    }
  }
  return out;
}

int cmd_bench_acceptance(const RunConfig& cfg) {
  const auto pairings = pairings_of(cfg);
  const Models m = load_models(cfg, true);
  OutputDir out(cfg);
  const auto prompts = build_prompts(cfg, m.target.config);
  Csv agg({"pairing", "budget", "gamma", "cases", "proposed", "accepted", "alpha"});
  Csv per({"pairing", "case", "alpha"});
  json s = json::object();
  std::vector<AcceptanceStats> stats(pairings.size());
  parallel_for(pairings.size(), cfg.workers, [&](std::size_t i) {
    stats[i] = measure_acceptance(pairings[i], m.target, m.draft ? &*m.draft : nullptr, prompts,
                                  acceptance_config(cfg));
  });
  for (std::size_t i = 0; i < pairings.size(); ++i) {
    const auto& st = stats[i];
    agg.add({to_string(pairings[i]), std::to_string(cfg.budget), std::to_string(cfg.gamma),
             std::to_string(prompts.size()), std::to_string(st.counters.proposed),
             std::to_string(st.counters.accepted), fmt(st.rate())});
    for (std::size_t c = 0; c < st.case_rates.size(); ++c) {
      per.add({to_string(pairings[i]), std::to_string(c), fmt(st.case_rates[c])});
    }
    s[to_string(pairings[i])] = st.rate();
  }
  agg.write(out.path("acceptance.csv"));
  per.write(out.path("acceptance_cases.csv"));
  out.finish(s);
  return 0;
}

int cmd_speedup_model(const RunConfig& cfg) {
  OutputDir out(cfg);
  Csv et({"alpha", "gamma", "expected_tokens"});
  for (double a : cfg.alphas) {
    for (std::size_t g : cfg.gammas) et.add({fmt(a), std::to_string(g), fmt(expected_tokens(a, g))});
  }
  et.write(out.path("expected_tokens.csv"));
  Csv sp({"alpha1", "alpha2", "gamma1", "gamma2", "context", "budget", "draft_budget", "inner_rounds",
          "tokens_per_round", "time_per_round_ms", "speedup", "sim_speedup", "sim_ci"});
  struct Point {
    double a1, a2;
    std::size_t ctx;
  };
  std::vector<Point> pts;
  for (double a1 : cfg.alpha1) {
    for (double a2 : cfg.alpha2) {
      for (std::size_t c : cfg.contexts) pts.push_back({a1, a2, c});
    }
  }
  std::vector<std::pair<SpeedupEstimate, SpeedupEstimate>> res(pts.size());
  std::vector<SpeedupInputs> ins(pts.size());
  parallel_for(pts.size(), cfg.workers, [&](std::size_t i) {
    SpeedupInputs in;
    in.alpha1 = pts[i].a1;
    in.alpha2 = pts[i].a2;
    in.gamma1 = cfg.gamma1;
    in.gamma2 = cfg.gamma2;
    in.context = pts[i].ctx;
    in.budget = cfg.effective_retrieval_budget(pts[i].ctx);
    in.draft_budget = cfg.effective_draft_budget(pts[i].ctx);
    in.latency = latency(cfg);
    ins[i] = in;
    res[i] = {hierarchical_speedup(in), simulate_speedup(in, cfg.sim_rounds, cfg.seed ^ i)};
  });
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto& [cf, sim] = res[i];
    sp.add({fmt(pts[i].a1), fmt(pts[i].a2), std::to_string(cfg.gamma1), std::to_string(cfg.gamma2),
            std::to_string(pts[i].ctx), std::to_string(ins[i].budget), std::to_string(ins[i].draft_budget),
            fmt(cf.inner_rounds), fmt(cf.tokens_per_round), fmt(cf.time_per_round), fmt(cf.speedup),
            fmt(sim.speedup), fmt(sim.speedup_ci)});
  }
  sp.write(out.path("speedup.csv"));
  out.finish({{"expected_tokens_rows", et.size()}, {"speedup_rows", sp.size()}});
  return 0;
}

/// Tokens-per-round and speedup columns shared by the gamma sweeps.
std::vector<std::string> model_columns(const RunConfig& cfg, double a1, double a2, std::size_t g1, std::size_t g2) {
  SpeedupInputs in;
  in.alpha1 = a1;
  in.alpha2 = a2;
  in.gamma1 = g1;
  in.gamma2 = g2;
  in.context = cfg.contexts.empty() ? cfg.context_len : cfg.contexts.front();
  in.budget = cfg.effective_retrieval_budget(in.context);
  in.draft_budget = cfg.effective_draft_budget(in.context);
  in.latency = latency(cfg);
  const auto e = hierarchical_speedup(in);
  return {fmt(e.inner_rounds), fmt(e.tokens_per_round), fmt(e.time_per_round), fmt(e.speedup)};
}

int cmd_sweep(const RunConfig& cfg) {
  const std::string& axis = cfg.sweep_axis;
  auto value_error = [&](const std::string& key, const std::string& msg) {
    auto it = cfg.lines.find(key);
    return ConfigError(cfg.source, it == cfg.lines.end() ? 0 : it->second, key + ": " + msg);
  };
  auto as_size = [&](const std::string& key, const std::string& v) {
    try {
      const auto x = detail::parse_number<std::size_t>(v);
      if (x == 0) throw std::invalid_argument("must be >= 1");
      return x;
    } catch (const std::invalid_argument& e) {
      throw value_error(key, e.what());
    }
  };

  if (axis == "gamma") {
    OutputDir out(cfg);
    Csv csv({"gamma1", "gamma2", "alpha1", "alpha2", "inner_rounds", "tokens_per_round", "time_per_round_ms",
             "speedup"});
    const double a1 = cfg.alpha1.front(), a2 = cfg.alpha2.front();
    for (const auto& v1 : cfg.sweep_values) {
      for (const auto& v2 : cfg.sweep_values2) {
        const auto g1 = as_size("sweep_values", v1), g2 = as_size("sweep_values2", v2);
        auto row = std::vector<std::string>{std::to_string(g1), std::to_string(g2), fmt(a1), fmt(a2)};
        for (auto& c : model_columns(cfg, a1, a2, g1, g2)) row.push_back(c);
        csv.add(row);
      }
    }
    csv.write(out.path("sweep.csv"));
    out.finish({{"rows", csv.size()}});
    return 0;
  }

  const bool acceptance_axis = axis == "budget" || axis == "chunk_size";
  std::vector<RunConfig> points;
  for (std::size_t i = 0; i < cfg.sweep_values.size(); ++i) {
    RunConfig p = cfg;
    p.seed = cfg.seed ^ i;
    const std::string& v = cfg.sweep_values[i];
    if (axis == "temperature") {
      try {
        p.temperature = detail::parse_number<double>(v);
      } catch (const std::invalid_argument& e) {
        throw value_error("sweep_values", e.what());
      }
      if (p.temperature < 0) throw value_error("sweep_values", "temperature must be >= 0");
    } else {
      const auto x = as_size("sweep_values", v);
      if (axis == "budget") p.budget = p.retrieval_budget = x;
      if (axis == "chunk_size") p.chunk_size = x;
      if (axis == "gamma1") p.gamma1 = x;
      if (axis == "gamma2") p.gamma2 = x;
    }
    if (axis == "budget" && (p.budget <= p.n_sink || p.budget % p.chunk_size != 0)) {
      throw value_error("sweep_values", "budget " + v + " must exceed n_sink and be a multiple of chunk_size");
    }
    if (axis == "chunk_size" && p.budget % p.chunk_size != 0) {
      throw value_error("sweep_values", "chunk_size " + v + " must divide budget " + std::to_string(p.budget));
    }
    points.push_back(std::move(p));
  }
  const auto pairings = acceptance_axis ? pairings_of(cfg) : std::vector<Pairing>{};
  const Models m = load_models(cfg, true);
  if (!acceptance_axis && !m.draft) throw value_error("draft_weights", "required for this sweep axis");
  OutputDir out(cfg);
  const auto prompts = build_prompts(cfg, m.target.config);

  std::vector<std::vector<std::vector<std::string>>> rows(points.size());
  parallel_for(points.size(), cfg.workers, [&](std::size_t i) {
    const RunConfig& p = points[i];
    const std::string& v = cfg.sweep_values[i];
    if (acceptance_axis) {
      for (Pairing pr : pairings) {
        const auto st = measure_acceptance(pr, m.target, m.draft ? &*m.draft : nullptr, prompts, acceptance_config(p));
        rows[i].push_back({axis, v, to_string(pr), std::to_string(st.counters.proposed),
                           std::to_string(st.counters.accepted), fmt(st.rate()), "", "", "", "", "", ""});
      }
      return;
    }
    TriForceSummary sum;
    for (const auto& pr : prompts) sum.add(triforce_generate(m.target, *m.draft, pr, spec_config(p, pr.size())).trace);
    std::vector<std::string> row = {axis, v, "triforce", std::to_string(sum.outer.proposed),
                                    std::to_string(sum.outer.accepted), fmt(sum.outer.rate()),
                                    fmt(sum.inner.rate()), fmt(sum.tokens_per_round())};
    const auto mc = model_columns(p, sum.inner.rate(), sum.outer.rate(), p.gamma1, p.gamma2);
    row.insert(row.end(), mc.begin(), mc.end());
    rows[i].push_back(std::move(row));
  });
  Csv csv({"axis", "value", "pairing", "proposed", "accepted", "alpha", "inner_alpha", "measured_tokens_per_round",
           "model_inner_rounds", "model_tokens_per_round", "model_time_per_round_ms", "model_speedup"});
  for (auto& r : rows) {
    for (auto& row : r) {
      if (acceptance_axis) row.resize(12);
      csv.add(row);
    }
  }
  csv.write(out.path("sweep.csv"));
  out.finish({{"rows", csv.size()}, {"axis", axis}});
  return 0;
}

int cmd_measure(const RunConfig& cfg) {
  const Models m = load_models(cfg, false);
  const auto& w = m.target;
  OutputDir out(cfg);
  std::vector<NeedleCase> needles;
  const auto prompts = build_prompts(cfg, w.config, &needles);
  json s = json::object();
  if (cfg.measure == "sparsity") {
    Csv csv({"case", "layer", "budget", "mass"});
    std::vector<RecoveryCurve> curves(prompts.size());
    parallel_for(prompts.size(), cfg.workers,
                 [&](std::size_t i) { curves[i] = sparsity_recovery(w, prompts[i], cfg.budgets, cfg.skip_initial_layers); });
    for (std::size_t i = 0; i < curves.size(); ++i) {
      const auto& c = curves[i];
      for (std::size_t li = 0; li < c.layers.size(); ++li) {
        for (std::size_t b = 0; b < c.budgets.size(); ++b) {
          csv.add({std::to_string(i), std::to_string(c.layers[li]), std::to_string(c.budgets[b]), fmt(c.mass[li][b])});
        }
      }
    }
    csv.write(out.path("sparsity.csv"));
    s["rows"] = csv.size();
  } else if (cfg.measure == "locality") {
    Csv csv({"case", "layer", "offset", "budget", "frozen_mass", "fresh_mass"});
    std::vector<LocalityCurve> curves(prompts.size());
    parallel_for(prompts.size(), cfg.workers, [&](std::size_t i) {
      curves[i] = locality_recovery(w, prompts[i], cfg.budget, cfg.horizon, cfg.skip_initial_layers);
    });
    for (std::size_t i = 0; i < curves.size(); ++i) {
      const auto& c = curves[i];
      for (std::size_t li = 0; li < c.layers.size(); ++li) {
        for (std::size_t o = 0; o < c.frozen[li].size(); ++o) {
          csv.add({std::to_string(i), std::to_string(c.layers[li]), std::to_string(o), std::to_string(c.budget),
                   fmt(c.frozen[li][o]), fmt(c.fresh[li][o])});
        }
      }
    }
    csv.write(out.path("locality.csv"));
    s["rows"] = csv.size();
  } else {
    if (cfg.corpus != "needle") {
      auto it = cfg.lines.find("corpus");
      throw ConfigError(cfg.source, it == cfg.lines.end() ? 0 : it->second, "corpus: needle measurement needs corpus = needle");
    }
    Csv mass({"case", "needle_pos", "policy", "budget", "needle_mass"});
    const CachePolicy policies[] = {CachePolicy::Full, CachePolicy::Streaming, CachePolicy::H2O, CachePolicy::Retrieval,
                                    CachePolicy::TopK};
    std::vector<std::vector<double>> masses(needles.size());
    parallel_for(needles.size(), cfg.workers, [&](std::size_t i) {
      for (auto p : policies) masses[i].push_back(policy_needle_mass(w, needles[i], p, cfg.budget, cfg.chunk_size, cfg.n_sink));
    });
    for (std::size_t i = 0; i < needles.size(); ++i) {
      for (std::size_t j = 0; j < std::size(policies); ++j) {
        mass.add({std::to_string(i), std::to_string(needles[i].needle_pos), to_string(policies[j]),
                  std::to_string(cfg.budget), fmt(masses[i][j])});
      }
    }
    mass.write(out.path("needle_mass.csv"));
    Csv acc({"pairing", "budget", "gamma", "proposed", "accepted", "alpha"});
    for (Pairing p : {Pairing::TopKVsFull, Pairing::RetrievalVsFull, Pairing::StreamingVsFull, Pairing::H2OVsFull}) {
      const auto st = measure_acceptance(p, w, nullptr, prompts, acceptance_config(cfg));
      acc.add({to_string(p), std::to_string(cfg.budget), std::to_string(cfg.gamma),
               std::to_string(st.counters.proposed), std::to_string(st.counters.accepted), fmt(st.rate())});
      s[to_string(p)] = st.rate();
    }
    acc.write(out.path("needle_acceptance.csv"));
  }
  out.finish(s);
  return 0;
}

// ---- gen-weights ----------------------------------------------------------

struct GenWeightsArgs {
  std::string preset = "target";
  std::uint64_t seed = 0;
  std::string out;
  bool tied = false;
  bool uniform_head = false;
  double planted_strength = 0.0;
  std::size_t planted_context = 512;
};

int cmd_gen_weights(const GenWeightsArgs& a) {
  ModelConfig c;
  try {
    c = presets::by_name(a.preset);
  } catch (const ContractError& e) {
    throw ConfigError("--preset", 0, e.what());
  }
  if (a.planted_strength > 0 && a.tied) throw ConfigError("--tied", 0, "planted weights use an untied head");
  ModelWeights w = a.planted_strength > 0
                       ? planted_attention_weights(c, NeedlePlan{a.planted_context, kPasskeyDigits}, a.planted_strength,
                                                   a.seed)
                       : generate_weights(c, a.seed, a.tied);
  if (a.uniform_head) {
    Tensor& head = w.tied_head ? w.tok_embeddings : w.output;
    std::fill(head.data().begin(), head.data().end(), 0.0f);
  }
  if (const fs::path dir = fs::path(a.out).parent_path(); !dir.empty()) fs::create_directories(dir);
  save_weights(w, a.out);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(w.checksum()));
  std::cout << a.out << " checksum " << buf << "\n";
  return 0;
}

RunConfig load_run_config(const std::string& subcommand, const std::string& path,
                          const std::vector<std::string>& sets) {
  RunConfig cfg = path.empty() ? RunConfig{} : RunConfig::from_file(path);
  if (!cfg.experiment.empty() && cfg.experiment != subcommand) {
    throw ConfigError(cfg.source, cfg.lines["experiment"],
                      "experiment '" + cfg.experiment + "' does not match subcommand '" + subcommand + "'");
  }
  const std::string src = cfg.source;
  cfg.source = "--set";
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set", 0, "expected key=value, got '" + kv + "'");
    cfg.set(detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)), 0);
  }
  cfg.source = src;
  cfg.experiment = subcommand;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TriForce CPU research engine"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  GenWeightsArgs gw;
  auto* gen_weights = app.add_subcommand("gen-weights", "Write deterministic weights for a preset");
  gen_weights->add_option("--preset", gw.preset, "target | draft | toy-target | toy-draft")->capture_default_str();
  gen_weights->add_option("--seed", gw.seed, "weight seed")->capture_default_str();
  gen_weights->add_option("--out", gw.out, "output weight file")->required();
  gen_weights->add_flag("--tied", gw.tied, "tie the output head to the embeddings");
  gen_weights->add_flag("--uniform-head", gw.uniform_head, "zero the output head (uniform next-token distribution)");
  gen_weights->add_option("--planted-strength", gw.planted_strength, "plant the needle circuit with this mass");
  gen_weights->add_option("--planted-context", gw.planted_context, "context length the planted circuit must cover")
      ->capture_default_str();

  struct Sub {
    CLI::App* app;
    std::string config;
    std::vector<std::string> sets;
    std::string kind;
  };
  std::map<std::string, Sub> subs;
  for (const char* name : {"generate", "bench-acceptance", "sweep", "speedup-model", "measure"}) {
    auto& s = subs[name];
    s.app = app.add_subcommand(name);
    if (std::string(name) == "measure") s.app->add_option("kind", s.kind, "sparsity | locality | needle")->required();
    s.app->add_option("config", s.config, "key = value config file");
    s.app->add_option("--set", s.sets, "override one config key (key=value)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen_weights->parsed()) return cmd_gen_weights(gw);
    for (auto& [name, s] : subs) {
      if (!s.app->parsed()) continue;
      if (name == "measure") s.sets.insert(s.sets.begin(), "measure=" + s.kind);
      const RunConfig cfg = load_run_config(name, s.config, s.sets);
      if (name == "generate") return cmd_generate(cfg);
      if (name == "bench-acceptance") return cmd_bench_acceptance(cfg);
      if (name == "sweep") return cmd_sweep(cfg);
      if (name == "speedup-model") return cmd_speedup_model(cfg);
      if (name == "measure") return cmd_measure(cfg);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
