#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mcdiff/checkpoint.hpp"
#include "support/tiny_model.hpp"

using namespace mcdiff;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int status;
  std::string output;
};

RunResult run_cli(const std::string& args) {
  const std::string cmd = std::string(MCDIFF_CLI) + " " + args + " 2>&1";
  RunResult r{0, {}};
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return {-1, "popen failed"};
  std::array<char, 512> buf;
  while (std::fgets(buf.data(), int(buf.size()), p)) r.output += buf.data();
  r.status = pclose(p);
  return r;
}

fs::path scratch(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("mcdiff_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST(ConfigJson, TrainConfigRoundTrip) {
  auto c = mcdiff::testing::tiny_train_config();
  c.d_x = 0.25;
  c.model.denoiser.channel_mult = {1, 2};
  const json j = c;
  const auto back = j.get<TrainConfig>();
  EXPECT_EQ(json(back), j);
  EXPECT_EQ(back.d_x, 0.25);
}

TEST(ConfigJson, PartialConfigKeepsDefaults) {
  const auto c = json::parse(R"({"iterations": 7, "model": {"denoiser": {"res_blocks": 1}}})").get<TrainConfig>();
  EXPECT_EQ(c.iterations, 7u);
  EXPECT_EQ(c.model.denoiser.res_blocks, 1u);
  EXPECT_EQ(c.batch, 32u);
  EXPECT_EQ(c.d_p, 0.1);
  EXPECT_EQ(c.model.cond.d_embed, 64u);
}

TEST(ConfigJson, UnknownKeysRejectedWithLocation) {
  try {
    json::parse(R"({"model": {"cond": {"d_embd": 8}}})").get<TrainConfig>();
    FAIL();
  } catch (const FormatError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("model.cond"), std::string::npos) << m;
    EXPECT_NE(m.find("d_embd"), std::string::npos) << m;
  }
}

TEST(ConfigJson, ConditionPreset) {
  const auto c = json::parse(R"("wide")").get<ConditionConfig>();
  EXPECT_EQ(c.d_embed, 768u);
  EXPECT_THROW(json::parse(R"("huge")").get<ConditionConfig>(), FormatError);
}

TEST(ConfigJson, SampleSpecRoundTrip) {
  const auto s = json::parse(R"({"steps": 20, "guidance": 1.5, "sigma": 7, "strength": 0.6, "seed": 3,
                                 "sampler": "ddpm", "selectors": null})")
                     .get<SampleSpec>();
  EXPECT_EQ(s.n_steps, 20);
  EXPECT_EQ(*s.sigma, 7);
  EXPECT_EQ(*s.strength, 0.6);
  EXPECT_EQ(s.sampler, SamplerKind::ddpm);
  EXPECT_FALSE(s.selectors);
  EXPECT_EQ(json(s).get<SampleSpec>().resolved_sigma(), 7);
  SampleSpec d;
  EXPECT_EQ(json(d).get<SampleSpec>().resolved_sigma(), 51);
  EXPECT_THROW(json::parse(R"({"sampler": "euler"})").get<SampleSpec>(), DomainError);
}

TEST(ConfigJson, LoadFileNamesPath) {
  const auto d = scratch("cfg");
  std::ofstream(d / "bad.json") << "{\"iterations\": ";
  try {
    load_json_file<TrainConfig>(d / "bad.json");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("bad.json"), std::string::npos);
  }
  EXPECT_THROW(load_json_file<TrainConfig>(d / "missing.json"), Error);
}

TEST(ConfigJson, OutDirFallsBackToEnvironment) {
  TrainConfig c;
  ::setenv("MCDIFF_OUT_DIR", "/tmp/somewhere", 1);
  EXPECT_EQ(c.output_dir(), fs::path("/tmp/somewhere"));
  ::unsetenv("MCDIFF_OUT_DIR");
  EXPECT_EQ(c.output_dir(), fs::path("runs"));
  c.out_dir = "x";
  EXPECT_EQ(c.output_dir(), fs::path("x"));
}

TEST(Cli, GenDataWritesFilesAndManifest) {
  const auto d = scratch("gen");
  const auto r = run_cli("gen-data --n 4 --seed 2 --out " + (d / "data").string());
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_EQ(read_manifest(d / "data" / "manifest.txt").size(), 4u);
  EXPECT_TRUE(fs::exists(d / "data" / "target_00003.ppm"));
  EXPECT_TRUE(fs::exists(d / "data" / "layout_00000.pgm"));
}

TEST(Cli, ErrorsNameTheFlagAndExitNonzero) {
  auto r = run_cli("gen-data --n 0 --out /tmp/mcdiff_cli_unused");
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.output.find("--n"), std::string::npos) << r.output;

  r = run_cli("sample --checkpoint /nonexistent/ck.bin --prompt 'red circle' --out /tmp/x.ppm");
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.output.find("--checkpoint"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("/nonexistent/ck.bin"), std::string::npos) << r.output;

  r = run_cli("train --config /nonexistent/cfg.json");
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.output.find("--config"), std::string::npos) << r.output;

  r = run_cli("bogus");
  EXPECT_NE(r.status, 0);
}

TEST(Cli, TrainSampleSweepEval) {
  const auto d = scratch("e2e");
  auto cfg = mcdiff::testing::tiny_train_config();
  cfg.iterations = 3;
  cfg.log_interval = 1;
  std::ofstream(d / "cfg.json") << json(cfg).dump();
  auto r = run_cli("train --config " + (d / "cfg.json").string() + " --out-dir " + (d / "run").string());
  ASSERT_EQ(r.status, 0) << r.output;
  const auto ck = d / "run" / "checkpoint.bin";
  ASSERT_TRUE(fs::exists(ck));
  EXPECT_TRUE(fs::exists(d / "run" / "train_log.jsonl"));
  EXPECT_EQ(load_checkpoint(ck).iteration, 3u);

  // Resume extends the same run.
  r = run_cli("train --resume --iterations 5 --config " + (d / "cfg.json").string() + " --out-dir " +
              (d / "run").string());
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_EQ(load_checkpoint(ck).iteration, 5u);

  write_pnm(d / "cond.pgm", render_layout<float>({ShapeKind::circle, ColorName::red, 8, 8, 4}, Canvas{16, 16}));
  r = run_cli("sample --checkpoint " + ck.string() + " --prompt 'blue circle' --cond " + (d / "cond.pgm").string() +
              " --sigma 2 --steps 3 --seed 4 --out " + (d / "a.ppm").string());
  ASSERT_EQ(r.status, 0) << r.output;
  r = run_cli("sample --checkpoint " + ck.string() + " --prompt 'blue circle' --cond " + (d / "cond.pgm").string() +
              " --sigma 2 --steps 3 --seed 4 --out " + (d / "b.ppm").string());
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_EQ(read_file_bytes(d / "a.ppm"), read_file_bytes(d / "b.ppm"));
  EXPECT_EQ(read_pnm<float>(d / "a.ppm").shape(), (Shape{3, 16, 16}));

  r = run_cli("sample --checkpoint " + ck.string() + " --prompt 'blue circle' --sigma 2 --steps 3 --out " +
              (d / "c.ppm").string());
  EXPECT_NE(r.status, 0);
  EXPECT_NE(r.output.find("--cond"), std::string::npos) << r.output;

  r = run_cli("sweep --checkpoint " + ck.string() + " --prompt 'blue circle' --cond " + (d / "cond.pgm").string() +
              " --sigmas 1,4 --scales 0,2 --strengths none,0.5 --seeds 0,1 --steps 3 --out-dir " +
              (d / "sweep").string());
  ASSERT_EQ(r.status, 0) << r.output;
  std::ifstream m(d / "sweep" / "metrics.jsonl");
  int lines = 0;
  for (std::string l; std::getline(m, l);) {
    const auto j = json::parse(l);
    EXPECT_TRUE(j.contains("iou"));
    ++lines;
  }
  EXPECT_EQ(lines, 2 * 2 * 2 * 2);
  // 2 sigma rows x 4 (s, strength) columns of 16x16 tiles.
  EXPECT_EQ(read_pnm<float>(d / "sweep" / "contact_sheet.ppm").shape(), (Shape{3, 2 * 16 + 1, 4 * 16 + 3}));

  // Eval over a generated dataset, scoring the ground-truth targets.
  r = run_cli("gen-data --n 3 --seed 1 --out " + (d / "ev").string());
  ASSERT_EQ(r.status, 0) << r.output;
  for (int i = 0; i < 3; ++i)
    fs::copy_file(d / "ev" / index_name("target", i, "ppm"), d / "ev" / index_name("generated", i, "ppm"));
  r = run_cli("eval --dir " + (d / "ev").string());
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_NE(r.output.find("\"iou\":1.0"), std::string::npos) << r.output;
  EXPECT_NE(r.output.find("\"color_ok\":true"), std::string::npos) << r.output;
}

TEST(Cli, ShowConfigParsesBack) {
  const auto r = run_cli("show-config");
  ASSERT_EQ(r.status, 0) << r.output;
  EXPECT_EQ(json(json::parse(r.output).get<TrainConfig>()), json(TrainConfig{}));
}
