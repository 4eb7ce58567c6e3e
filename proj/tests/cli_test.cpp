// Copyright 2026 The TriForce-CPU Authors.
// SPDX-License-Identifier: Apache-2.0

// Runs the triforce binary end to end in a scratch directory.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::vector<std::string> out;
  std::ifstream f(p);
  for (std::string l; std::getline(f, l);) out.push_back(l);
  return out;
}

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root = new fs::path(fs::temp_directory_path() / ("triforce_cli_test_" + std::to_string(::getpid())));
    fs::remove_all(*root);
    fs::create_directories(*root);
    ASSERT_EQ(run("gen-weights --preset toy-target --seed 1 --out " + w("t.bin")).code, 0);
    ASSERT_EQ(run("gen-weights --preset toy-draft --seed 2 --out " + w("d.bin")).code, 0);
    ASSERT_EQ(run("gen-weights --preset toy-draft --seed 2 --uniform-head --out " + w("u.bin")).code, 0);
  }
  static void TearDownTestSuite() {
    fs::remove_all(*root);
    delete root;
  }

  static std::string w(const std::string& name) { return (*root / name).string(); }

  // Runs the binary with TRIFORCE_OUT pointing at the scratch output root.
  static Result run(const std::string& args) {
    const std::string cmd =
        "TRIFORCE_OUT=" + (*root / "out").string() + " " + TRIFORCE_CLI + " " + args + " 2>" + w("stderr.txt");
    Result r;
    FILE* p = ::popen(cmd.c_str(), "r");
    if (!p) return r;
    char buf[4096];
    for (std::size_t n; (n = std::fread(buf, 1, sizeof buf, p)) > 0;) r.out.append(buf, n);
    const int status = ::pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
  }

  static fs::path result_dir(const Result& r) {
    auto s = r.out;
    while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
    return s.substr(s.rfind('\n') == std::string::npos ? 0 : s.rfind('\n') + 1);
  }

  static fs::path* root;
};
fs::path* CliTest::root = nullptr;

TEST_F(CliTest, GreedyGenerateMatchesAutoregressive) {
  const auto before = slurp(w("t.bin"));
  const auto r = run("generate --set target_weights=" + w("t.bin") + " --set draft_weights=" + w("d.bin") +
                     " --set context_len=48 --set gen_len=24 --set corpus_cases=3 --set chunk_size=4"
                     " --set retrieval_budget=16 --set draft_budget=8 --set n_sink=2 --set budget=8");
  ASSERT_EQ(r.code, 0) << slurp(w("stderr.txt"));
  const fs::path dir = result_dir(r);
  const auto tri = lines_of(dir / "triforce_tokens.txt");
  const auto ar = lines_of(dir / "ar_tokens.txt");
  ASSERT_EQ(tri.size(), 3u);
  EXPECT_EQ(tri, ar);
  const auto summary = lines_of(dir / "summary.csv");
  ASSERT_EQ(summary.size(), 4u);
  EXPECT_EQ(summary[0], "case,prompt_len,generated,outer_rounds,inner_alpha,outer_alpha,tokens_per_round,"
                        "retrieval_builds,matches_ar");
  for (std::size_t i = 1; i < summary.size(); ++i) EXPECT_EQ(summary[i].substr(summary[i].rfind(',') + 1), "1");
  EXPECT_EQ(lines_of(dir / "trace.jsonl").empty(), false);

  const auto manifest = nlohmann::json::parse(slurp(dir / "manifest.json"));
  EXPECT_EQ(manifest["experiment"], "generate");
  EXPECT_EQ(manifest["config_hash"], dir.filename().string());
  EXPECT_EQ(manifest["config"]["context_len"], "48");
  EXPECT_EQ(slurp(w("t.bin")), before);

  // same config: same directory, same bytes
  const auto again = run("generate --set target_weights=" + w("t.bin") + " --set draft_weights=" + w("d.bin") +
                         " --set context_len=48 --set gen_len=24 --set corpus_cases=3 --set chunk_size=4"
                         " --set retrieval_budget=16 --set draft_budget=8 --set n_sink=2 --set budget=8");
  ASSERT_EQ(again.code, 0);
  EXPECT_EQ(result_dir(again), dir);
  EXPECT_EQ(lines_of(dir / "triforce_tokens.txt"), tri);
}

TEST_F(CliTest, GammaGridHasEveryPoint) {
  const auto r = run("sweep --set sweep_axis=gamma --set sweep_values=1,2,3,4,5,6,7,8 "
                     "--set sweep_values2=1,2,4,6,8,10,12,16 --set sim_rounds=1000");
  ASSERT_EQ(r.code, 0) << slurp(w("stderr.txt"));
  EXPECT_EQ(lines_of(result_dir(r) / "sweep.csv").size(), 65u);
}

TEST_F(CliTest, SpeedupModelWritesTheExpectedTokenTable) {
  const auto r = run("speedup-model --set sim_rounds=2000 --set contexts=4096 --set retrieval_budget=256");
  ASSERT_EQ(r.code, 0) << slurp(w("stderr.txt"));
  const auto rows = lines_of(result_dir(r) / "expected_tokens.csv");
  EXPECT_EQ(rows[0], "alpha,gamma,expected_tokens");
  EXPECT_NE(std::find(rows.begin(), rows.end(), "0.8,4,3.3616"), rows.end());
  EXPECT_GE(lines_of(result_dir(r) / "speedup.csv").size(), 2u);
}

TEST_F(CliTest, ConfigFilesAndOverrides) {
  const fs::path cfg = *root / "bench.cfg";
  std::ofstream(cfg) << "experiment = bench-acceptance\ntarget_weights = " << w("t.bin") << "\n"
                     << "context_len = 40\ngen_len = 8\ncorpus_cases = 2\nchunk_size = 4\nbudget = 16\nn_sink = 2\n";
  const auto r = run("bench-acceptance " + cfg.string() + " --set pairings=topk_vs_full,streaming_vs_full");
  ASSERT_EQ(r.code, 0) << slurp(w("stderr.txt"));
  const auto rows = lines_of(result_dir(r) / "acceptance.csv");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], "pairing,budget,gamma,cases,proposed,accepted,alpha");
  EXPECT_EQ(rows[1].substr(0, rows[1].find(',')), "topk_vs_full");
}

TEST_F(CliTest, ErrorsExitNonZeroAndLeaveNothingBehind) {
  EXPECT_EQ(run("generate --set no_such_key=1").code, 1);
  EXPECT_NE(slurp(w("stderr.txt")).find("no_such_key"), std::string::npos);
  EXPECT_EQ(run("speedup-model --set alpha1=2").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("generate --set target_weights=/nonexistent").code, 1);

  const fs::path cfg = *root / "wrong.cfg";
  std::ofstream(cfg) << "experiment = sweep\n";
  EXPECT_EQ(run("speedup-model " + cfg.string()).code, 1);

  // failures after the output directory is opened
  EXPECT_EQ(run("measure needle --set target_weights=" + w("t.bin")).code, 1);
  EXPECT_EQ(run("measure needle --set corpus=needle --set context_len=40 --set target_weights=" + w("t.bin")).code, 2);
  const fs::path measure = *root / "out" / "measure";
  if (fs::exists(measure)) {
    EXPECT_TRUE(fs::is_empty(measure));
  }
}

TEST_F(CliTest, MeasureSparsity) {
  const auto r = run("measure sparsity --set target_weights=" + w("t.bin") +
                     " --set context_len=64 --set corpus_cases=2 --set budgets=4,16,64 --set workers=2");
  ASSERT_EQ(r.code, 0) << slurp(w("stderr.txt"));
  const auto rows = lines_of(result_dir(r) / "sparsity.csv");
  ASSERT_EQ(rows.size(), 1u + 2 * 2 * 3);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].find(",64,") != std::string::npos) {
      EXPECT_NEAR(std::stod(rows[i].substr(rows[i].rfind(',') + 1)), 1.0, 1e-6);
    }
  }
}

TEST_F(CliTest, UniformDraftStillGenerates) {
  const auto r = run("generate --set target_weights=" + w("t.bin") + " --set draft_weights=" + w("u.bin") +
                     " --set context_len=32 --set gen_len=16 --set corpus_cases=1 --set chunk_size=4"
                     " --set retrieval_budget=8 --set draft_budget=8 --set n_sink=2 --set budget=8");
  ASSERT_EQ(r.code, 0) << slurp(w("stderr.txt"));
  EXPECT_EQ(lines_of(result_dir(r) / "triforce_tokens.txt"), lines_of(result_dir(r) / "ar_tokens.txt"));
}

TEST_F(CliTest, GenWeightsRejectsBadArguments) {
  EXPECT_EQ(run("gen-weights --preset huge --out " + w("x.bin")).code, 1);
  EXPECT_EQ(run("gen-weights --preset target --tied --planted-strength 0.8 --out " + w("x.bin")).code, 1);
  EXPECT_EQ(run("gen-weights --preset target").code, 1);
  EXPECT_FALSE(fs::exists(w("x.bin")));
}

}  // namespace
