// Copyright 2026 The TriForce-CPU Authors.
// SPDX-License-Identifier: Apache-2.0

// Flat experiment config: one `key = value` per line, `#` starts a comment,
// blank lines ignored. Lists are comma separated. Every key has a default
// except the weight paths an experiment needs.

#pragma once

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "triforce/error.hpp"

namespace triforce {

class ConfigError : public Error {
 public:
  ConfigError(const std::string& source, int line, const std::string& msg)
      : Error(line > 0 ? source + ":" + std::to_string(line) + ": " + msg : source + ": " + msg), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string cur;
  std::stringstream ss(v);
  while (std::getline(ss, cur, ',')) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

}  // namespace detail

struct RunConfig {
  // experiment and models
  std::string experiment;  // generate | bench-acceptance | sweep | speedup-model | measure
  std::string target_weights;
  std::string draft_weights;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::string output_dir = "out";

  // prompts / corpus
  std::string corpus = "random";  // random | needle
  std::size_t corpus_cases = 8;
  std::size_t context_len = 256;
  std::string prompt;  // literal text; overrides the corpus for generate

  // speculation
  std::size_t gamma1 = 2;
  std::size_t gamma2 = 6;
  double temperature = 0.0;
  std::size_t gen_len = 32;
  std::size_t retrieval_budget = 0;  // 0: context/4 rounded down to a chunk, at least one
  std::size_t chunk_size = 16;
  std::size_t rebuild_stride = 128;
  double rebuild_threshold = 0.8;
  std::size_t rolling_window = 16;
  std::size_t draft_budget = 0;  // 0: context/8, at least n_sink + 1
  std::size_t n_sink = 4;

  // acceptance
  std::vector<std::string> pairings = {"retrieval_vs_full", "streaming_vs_full", "h2o_vs_full", "topk_vs_full"};
  std::size_t budget = 64;
  std::size_t gamma = 4;

  // sweep
  std::string sweep_axis = "budget";  // budget | chunk_size | gamma1 | gamma2 | temperature | gamma
  std::vector<std::string> sweep_values;
  std::vector<std::string> sweep_values2;

  // speedup model
  std::vector<double> alpha1 = {0.8};
  std::vector<double> alpha2 = {0.9};
  std::vector<double> alphas = {0.5, 0.8, 0.9};
  std::vector<std::size_t> gammas = {1, 2, 4, 6, 8};
  std::vector<std::size_t> contexts = {4096, 16384, 65536, 131072};
  double draft_base = 0.5;
  double draft_per_kv = 0.0;
  double target_base = 1.0;
  double target_per_kv = 0.01;
  std::size_t sim_rounds = 100000;

  // measurement
  std::string measure = "sparsity";  // sparsity | locality | needle
  std::vector<std::size_t> budgets = {16, 32, 64, 128, 256};
  std::size_t horizon = 16;
  bool skip_initial_layers = false;
  double needle_strength = 0.8;

  std::map<std::string, int> lines;  // key -> defining line (0: command line)
  std::string source = "<config>";

  /// Resolved values as canonical key=value strings, sorted by key.
  std::vector<std::pair<std::string, std::string>> resolved() const;

  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& [k, v] : resolved()) {
      if (k == "output_dir" || k == "workers") continue;  // do not affect artifacts
      for (unsigned char c : k + "=" + v + "\n") {
        h ^= c;
        h *= 1099511628211ull;
      }
    }
    return h;
  }

  std::string hash_hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash()));
    return buf;
  }

  void set(const std::string& key, const std::string& value, int line);
  void apply_text(const std::string& text);
  void validate() const;

  static RunConfig from_text(const std::string& text, const std::string& source = "<config>") {
    RunConfig c;
    c.source = source;
    c.apply_text(text);
    return c;
  }

  static RunConfig from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError(path, 0, "cannot open config file");
    std::stringstream ss;
    ss << f.rdbuf();
    return from_text(ss.str(), path);
  }

  std::size_t effective_retrieval_budget(std::size_t context) const {
    if (retrieval_budget != 0) return retrieval_budget;
    const std::size_t b = (context / 4) / chunk_size * chunk_size;
    return std::max(b, chunk_size);
  }
  std::size_t effective_draft_budget(std::size_t context) const {
    if (draft_budget != 0) return draft_budget;
    return std::max(context / 8, n_sink + 1);
  }

 private:
  struct Field {
    std::function<void(RunConfig&, const std::string&)> parse;
    std::function<std::string(const RunConfig&)> print;
  };
  static const std::map<std::string, Field>& fields();
};

namespace detail {

template <typename T>
T parse_number(const std::string& s) {
  T v{};
  const char* b = s.data();
  const char* e = b + s.size();
  std::from_chars_result r;
  if constexpr (std::is_floating_point_v<T>) {
    try {
      std::size_t used = 0;
      v = static_cast<T>(std::stod(s, &used));
      if (used != s.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw std::invalid_argument("expected a number, got '" + s + "'");
    }
  } else {
    r = std::from_chars(b, e, v);
    if (r.ec != std::errc() || r.ptr != e) throw std::invalid_argument("expected a non-negative integer, got '" + s + "'");
    return v;
  }
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw std::invalid_argument("expected true/false, got '" + s + "'");
}

template <typename T>
std::string print_value(const T& v) {
  if constexpr (std::is_same_v<T, std::string>) {
    return v;
  } else if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_floating_point_v<T>) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);  // shortest round-trip
    return std::string(buf, r.ptr);
  } else {
    return std::to_string(v);
  }
}

template <typename T>
std::string print_list(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + print_value(v[i]);
  return s;
}

}  // namespace detail

inline const std::map<std::string, RunConfig::Field>& RunConfig::fields() {
  using detail::parse_number;
  static const std::map<std::string, Field> f = [] {
    std::map<std::string, Field> m;
    auto str = [&m](const char* k, std::string RunConfig::*p) {
      m[k] = {[p](RunConfig& c, const std::string& v) { c.*p = v; }, [p](const RunConfig& c) { return c.*p; }};
    };
    auto size = [&m](const char* k, std::size_t RunConfig::*p) {
      m[k] = {[p](RunConfig& c, const std::string& v) { c.*p = parse_number<std::size_t>(v); },
              [p](const RunConfig& c) { return detail::print_value(c.*p); }};
    };
    auto real = [&m](const char* k, double RunConfig::*p) {
      m[k] = {[p](RunConfig& c, const std::string& v) { c.*p = parse_number<double>(v); },
              [p](const RunConfig& c) { return detail::print_value(c.*p); }};
    };
    auto boolean = [&m](const char* k, bool RunConfig::*p) {
      m[k] = {[p](RunConfig& c, const std::string& v) { c.*p = detail::parse_bool(v); },
              [p](const RunConfig& c) { return detail::print_value(c.*p); }};
    };
    auto strs = [&m](const char* k, std::vector<std::string> RunConfig::*p) {
      m[k] = {[p](RunConfig& c, const std::string& v) { c.*p = detail::split_list(v); },
              [p](const RunConfig& c) { return detail::print_list(c.*p); }};
    };
    auto sizes = [&m](const char* k, std::vector<std::size_t> RunConfig::*p) {
      m[k] = {[p](RunConfig& c, const std::string& v) {
                std::vector<std::size_t> out;
                for (const auto& s : detail::split_list(v)) out.push_back(parse_number<std::size_t>(s));
                c.*p = out;
              },
              [p](const RunConfig& c) { return detail::print_list(c.*p); }};
    };
    auto reals = [&m](const char* k, std::vector<double> RunConfig::*p) {
      m[k] = {[p](RunConfig& c, const std::string& v) {
                std::vector<double> out;
                for (const auto& s : detail::split_list(v)) out.push_back(parse_number<double>(s));
                c.*p = out;
              },
              [p](const RunConfig& c) { return detail::print_list(c.*p); }};
    };
    str("experiment", &RunConfig::experiment);
    str("target_weights", &RunConfig::target_weights);
    str("draft_weights", &RunConfig::draft_weights);
    str("output_dir", &RunConfig::output_dir);
    m["seed"] = {[](RunConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>(v); },
                 [](const RunConfig& c) { return std::to_string(c.seed); }};
    size("workers", &RunConfig::workers);
    str("corpus", &RunConfig::corpus);
    size("corpus_cases", &RunConfig::corpus_cases);
    size("context_len", &RunConfig::context_len);
    str("prompt", &RunConfig::prompt);
    size("gamma1", &RunConfig::gamma1);
    size("gamma2", &RunConfig::gamma2);
    real("temperature", &RunConfig::temperature);
    size("gen_len", &RunConfig::gen_len);
    size("retrieval_budget", &RunConfig::retrieval_budget);
    size("chunk_size", &RunConfig::chunk_size);
    size("rebuild_stride", &RunConfig::rebuild_stride);
    real("rebuild_threshold", &RunConfig::rebuild_threshold);
    size("rolling_window", &RunConfig::rolling_window);
    size("draft_budget", &RunConfig::draft_budget);
    size("n_sink", &RunConfig::n_sink);
    strs("pairings", &RunConfig::pairings);
    size("budget", &RunConfig::budget);
    size("gamma", &RunConfig::gamma);
    str("sweep_axis", &RunConfig::sweep_axis);
    strs("sweep_values", &RunConfig::sweep_values);
    strs("sweep_values2", &RunConfig::sweep_values2);
    reals("alpha1", &RunConfig::alpha1);
    reals("alpha2", &RunConfig::alpha2);
    reals("alphas", &RunConfig::alphas);
    sizes("gammas", &RunConfig::gammas);
    sizes("contexts", &RunConfig::contexts);
    real("draft_base", &RunConfig::draft_base);
    real("draft_per_kv", &RunConfig::draft_per_kv);
    real("target_base", &RunConfig::target_base);
    real("target_per_kv", &RunConfig::target_per_kv);
    size("sim_rounds", &RunConfig::sim_rounds);
    str("measure", &RunConfig::measure);
    sizes("budgets", &RunConfig::budgets);
    size("horizon", &RunConfig::horizon);
    boolean("skip_initial_layers", &RunConfig::skip_initial_layers);
    real("needle_strength", &RunConfig::needle_strength);
    return m;
  }();
  return f;
}

inline std::vector<std::pair<std::string, std::string>> RunConfig::resolved() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [k, f] : fields()) out.emplace_back(k, f.print(*this));
  return out;
}

inline void RunConfig::set(const std::string& key, const std::string& value, int line) {
  const auto& f = fields();
  auto it = f.find(key);
  if (it == f.end()) throw ConfigError(source, line, "unknown key '" + key + "'");
  try {
    it->second.parse(*this, value);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(source, line, key + ": " + e.what());
  }
  lines[key] = line;
}

inline void RunConfig::apply_text(const std::string& text) {
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find('#');
    if (hash != std::string::npos) raw.resize(hash);
    const std::string s = detail::trim(raw);
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError(source, line, "expected 'key = value'");
    const std::string key = detail::trim(s.substr(0, eq));
    if (key.empty()) throw ConfigError(source, line, "missing key before '='");
    if (lines.count(key) && lines[key] > 0) {
      throw ConfigError(source, line, "duplicate key '" + key + "' (first set on line " +
                                          std::to_string(lines[key]) + ")");
    }
    set(key, detail::trim(s.substr(eq + 1)), line);
  }
}

inline void RunConfig::validate() const {
  auto fail = [this](const std::string& key, const std::string& msg) {
    auto it = lines.find(key);
    throw ConfigError(source, it == lines.end() ? 0 : it->second, key + ": " + msg);
  };
  static const std::vector<std::string> kinds = {"generate", "bench-acceptance", "sweep", "speedup-model", "measure"};
  if (std::find(kinds.begin(), kinds.end(), experiment) == kinds.end()) {
    fail("experiment", "must be one of generate, bench-acceptance, sweep, speedup-model, measure");
  }
  auto need_file = [&](const std::string& key, const std::string& path) {
    if (path.empty()) fail(key, "required for experiment '" + experiment + "'");
    if (!std::filesystem::exists(path)) fail(key, "file '" + path + "' does not exist");
  };
  const bool gamma_grid = experiment == "sweep" && sweep_axis == "gamma";
  const bool needs_target = experiment != "speedup-model" && !gamma_grid;
  if (needs_target) need_file("target_weights", target_weights);
  const bool needs_draft = experiment == "generate" ||
                           (experiment == "sweep" && (sweep_axis == "gamma1" || sweep_axis == "gamma2" ||
                                                      sweep_axis == "temperature")) ||
                           std::find(pairings.begin(), pairings.end(), "draft_streaming_vs_retrieval") != pairings.end();
  if (needs_draft && experiment != "speedup-model" && !gamma_grid && experiment != "measure") {
    need_file("draft_weights", draft_weights);
  }
  if (corpus != "random" && corpus != "needle") fail("corpus", "must be 'random' or 'needle'");
  if (corpus_cases == 0) fail("corpus_cases", "must be >= 1");
  if (context_len < 2) fail("context_len", "must be >= 2");
  if (gamma1 == 0) fail("gamma1", "must be >= 1");
  if (gamma2 == 0) fail("gamma2", "must be >= 1");
  if (gamma == 0) fail("gamma", "must be >= 1");
  if (temperature < 0) fail("temperature", "must be >= 0");
  if (gen_len == 0) fail("gen_len", "must be >= 1");
  if (chunk_size == 0) fail("chunk_size", "must be >= 1");
  if (retrieval_budget % chunk_size != 0) fail("retrieval_budget", "must be a multiple of chunk_size");
  if (!(rebuild_threshold > 0 && rebuild_threshold < 1)) fail("rebuild_threshold", "must lie in (0, 1)");
  if (rolling_window == 0) fail("rolling_window", "must be >= 1");
  if (rebuild_stride == 0) fail("rebuild_stride", "must be >= 1");
  if (draft_budget != 0 && draft_budget <= n_sink) fail("draft_budget", "must exceed n_sink");
  if (budget <= n_sink) fail("budget", "must exceed n_sink");
  if (workers == 0) fail("workers", "must be >= 1");
  if (sim_rounds < 100) fail("sim_rounds", "must be >= 100");
  using AlphaList = std::pair<const char*, const std::vector<double>*>;
  for (const auto& [key, list] : {AlphaList{"alpha1", &alpha1}, AlphaList{"alpha2", &alpha2}, AlphaList{"alphas", &alphas}}) {
    for (double a : *list) {
      if (!(a >= 0 && a <= 1)) fail(key, "acceptance rates must lie in [0, 1]");
    }
  }
  if (experiment == "sweep") {
    static const std::vector<std::string> axes = {"budget", "chunk_size", "gamma1", "gamma2", "temperature", "gamma"};
    if (std::find(axes.begin(), axes.end(), sweep_axis) == axes.end()) {
      fail("sweep_axis", "must be one of budget, chunk_size, gamma1, gamma2, temperature, gamma");
    }
    if (sweep_values.empty()) fail("sweep_values", "required for sweep");
    if (sweep_axis == "gamma" && sweep_values2.empty()) fail("sweep_values2", "required for the gamma grid");
  }
  if (experiment == "measure" && measure != "sparsity" && measure != "locality" && measure != "needle") {
    fail("measure", "must be one of sparsity, locality, needle");
  }
  if (!(needle_strength > 0 && needle_strength <= 0.99)) fail("needle_strength", "must lie in (0, 0.99]");
}

}  // namespace triforce
