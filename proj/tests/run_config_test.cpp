// Copyright 2026 The TriForce-CPU Authors.
// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <gtest/gtest.h>

#include "triforce/run_config.hpp"

namespace triforce {
namespace {

int error_line(const std::string& text) {
  try {
    RunConfig::from_text(text, "t.cfg");
  } catch (const ConfigError& e) {
    return e.line();
  }
  return -1;
}

TEST(RunConfigTest, ParsesScalarsListsAndComments) {
  const auto c = RunConfig::from_text(
      "# a comment\n"
      "experiment = speedup-model\n"
      "\n"
      "gamma1 = 3   # trailing comment\n"
      "temperature=0.25\n"
      "alpha1 = 0.3, 0.5 ,0.8\n"
      "contexts = 1024,2048\n"
      "pairings = topk_vs_full\n"
      "skip_initial_layers = yes\n");
  EXPECT_EQ(c.experiment, "speedup-model");
  EXPECT_EQ(c.gamma1, 3u);
  EXPECT_DOUBLE_EQ(c.temperature, 0.25);
  EXPECT_EQ(c.alpha1, (std::vector<double>{0.3, 0.5, 0.8}));
  EXPECT_EQ(c.contexts, (std::vector<std::size_t>{1024, 2048}));
  EXPECT_EQ(c.pairings, (std::vector<std::string>{"topk_vs_full"}));
  EXPECT_TRUE(c.skip_initial_layers);
  EXPECT_EQ(c.lines.at("gamma1"), 4);
  EXPECT_NO_THROW(c.validate());
}

TEST(RunConfigTest, ErrorsCarryTheLine) {
  EXPECT_EQ(error_line("gamma1 = 2\ngamma2 = 3\ngamma1 = 4\n"), 3);
  EXPECT_EQ(error_line("seed = 1\nno_such_key = 1\n"), 2);
  EXPECT_EQ(error_line("seed = 1\n\njust words\n"), 3);
  EXPECT_EQ(error_line("gamma1 = two\n"), 1);
  EXPECT_EQ(error_line("gamma1 = -1\n"), 1);
  EXPECT_EQ(error_line(" = 5\n"), 1);
  EXPECT_EQ(error_line("temperature = 0.5x\n"), 1);
  EXPECT_EQ(error_line("skip_initial_layers = maybe\n"), 1);
  try {
    RunConfig::from_text("gamma1 = 2\ngamma1 = 3\n", "t.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("t.cfg:2"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("line 1"), std::string::npos);
  }
}

TEST(RunConfigTest, ValidationNamesTheOffendingKey) {
  auto fails_on = [](const std::string& text) {
    try {
      RunConfig::from_text(text, "v.cfg").validate();
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_NE(fails_on("experiment = nope\n").find("experiment"), std::string::npos);
  EXPECT_NE(fails_on("experiment = generate\n").find("target_weights"), std::string::npos);
  EXPECT_NE(fails_on("experiment = speedup-model\nalpha2 = 1.5\n").find("v.cfg:2: alpha2"), std::string::npos);
  EXPECT_NE(fails_on("experiment = speedup-model\nchunk_size = 16\nretrieval_budget = 40\n").find("retrieval_budget"),
            std::string::npos);
  EXPECT_NE(fails_on("experiment = speedup-model\nrebuild_threshold = 1\n").find("rebuild_threshold"),
            std::string::npos);
  EXPECT_NE(fails_on("experiment = sweep\nsweep_axis = gamma\nsweep_values = 1,2\n").find("sweep_values2"),
            std::string::npos);
  EXPECT_NE(fails_on("experiment = speedup-model\nneedle_strength = 1\n").find("needle_strength"), std::string::npos);
  EXPECT_EQ(fails_on("experiment = sweep\nsweep_axis = gamma\nsweep_values = 1\nsweep_values2 = 2\n"), "");
}

TEST(RunConfigTest, MissingWeightsFileIsReported) {
  const auto c = RunConfig::from_text("experiment = measure\ntarget_weights = /nonexistent/w.bin\n");
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(RunConfigTest, HashIsStableAndIgnoresPresentation) {
  const auto a = RunConfig::from_text("experiment = sweep\ngamma1 = 3\n");
  const auto b = RunConfig::from_text("# x\ngamma1=3\nexperiment=sweep\nworkers = 4\noutput_dir = elsewhere\n");
  const auto c = RunConfig::from_text("experiment = sweep\ngamma1 = 4\n");
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_NE(a.hash(), c.hash());
  EXPECT_EQ(a.hash_hex().size(), 16u);
  EXPECT_EQ(RunConfig::from_text("temperature = 0.1\n").hash(), RunConfig::from_text("temperature = 0.10\n").hash());
}

TEST(RunConfigTest, ResolvedValuesRoundTrip) {
  auto a = RunConfig::from_text("experiment = sweep\ntemperature = 0.8\nalpha1 = 0.1,0.7\n");
  std::string text;
  for (const auto& [k, v] : a.resolved()) text += k + " = " + v + "\n";
  const auto b = RunConfig::from_text(text);
  EXPECT_EQ(a.resolved(), b.resolved());
  for (const auto& [k, v] : a.resolved()) {
    if (k == "temperature") {
      EXPECT_EQ(v, "0.8");
    }
  }
}

TEST(RunConfigTest, EffectiveBudgets) {
  RunConfig c;
  EXPECT_EQ(c.effective_retrieval_budget(4096), 1024u);
  EXPECT_EQ(c.effective_retrieval_budget(20), 16u);
  EXPECT_EQ(c.effective_draft_budget(4096), 512u);
  EXPECT_EQ(c.effective_draft_budget(16), 5u);
  c.retrieval_budget = 64;
  c.draft_budget = 32;
  EXPECT_EQ(c.effective_retrieval_budget(4096), 64u);
  EXPECT_EQ(c.effective_draft_budget(4096), 32u);
}

TEST(RunConfigTest, ReadsFiles) {
  const auto path = std::filesystem::temp_directory_path() / "triforce_run_config_test.cfg";
  {
    std::ofstream f(path);
    f << "experiment = speedup-model\nbogus = 1\n";
  }
  try {
    RunConfig::from_file(path.string());
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.line(), 2);
    EXPECT_NE(std::string(e.what()).find(path.string()), std::string::npos);
  }
  std::filesystem::remove(path);
  EXPECT_THROW(RunConfig::from_file(path.string()), ConfigError);
}

}  // namespace
}  // namespace triforce
