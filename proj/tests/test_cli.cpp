#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "support.hpp"

namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  std::string cmd = std::string(SONONAV_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path small_config(const fs::path& dir) {
  fs::path p = dir / "small.json";
  std::ofstream(p) << R"({"phantom": {"dims": [120, 120, 176]}})";
  return p;
}

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  auto dir = sononav::testing::scratch_dir("cli_usage");
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("frobnicate"), 1);
  EXPECT_EQ(run("slice --seed 1"), 1);
  EXPECT_EQ(run("phantom --seed notanumber"), 1);
  EXPECT_EQ(run("phantom --config " + (dir / "absent.json").string()), 1);
  std::ofstream(dir / "bad.json") << R"({"phantom": {"dims": [120, 120, 176]}, "mystery": 1})";
  EXPECT_EQ(run("phantom --config " + (dir / "bad.json").string() + " --out " + (dir / "p").string()), 1);
  EXPECT_EQ(run("train-rl --volume x --goals y --view lumbar"), 1);
}

TEST(Cli, HelpExitsZero) { EXPECT_EQ(run("--help"), 0); }

TEST(Cli, MissingInputsExitTwo) {
  auto dir = sononav::testing::scratch_dir("cli_missing");
  EXPECT_EQ(run("confmap --image " + (dir / "none.pgm").string()), 2);
  EXPECT_EQ(run("slice --volume " + (dir / "none.svol").string() + " --pose '{\"p\":[1,2,3],\"q\":[1,0,0,0]}'"), 2);
  EXPECT_EQ(run("evaluate --models " + dir.string() + " --out " + (dir / "report").string()), 2);
}

TEST(Cli, PhantomSliceConfmapPipeline) {
  auto dir = sononav::testing::scratch_dir("cli_pipeline");
  std::string cfg = " --config " + small_config(dir).string() + " --seed 4";
  ASSERT_EQ(run("phantom" + cfg + " --out " + (dir / "ph").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "ph" / "volume.svol"));
  EXPECT_TRUE(fs::exists(dir / "ph" / "goals.json"));
  ASSERT_EQ(run("slice" + cfg + " --volume " + (dir / "ph" / "volume.svol").string() + " --goals " +
                (dir / "ph" / "goals.json").string() + " --view psl --out " + (dir / "s.pgm").string()),
            0);
  ASSERT_EQ(run("confmap" + cfg + " --image " + (dir / "s.pgm").string() + " --out " + (dir / "c.pgm").string() +
                " --means " + (dir / "means.json").string()),
            0);
  EXPECT_GT(fs::file_size(dir / "c.pgm"), 150u * 150u);
  // A pose and a view together are ambiguous.
  EXPECT_EQ(run("slice" + cfg + " --volume " + (dir / "ph" / "volume.svol").string() + " --goals " +
                (dir / "ph" / "goals.json").string() + " --view psl --pose '{\"p\":[1,2,3],\"q\":[1,0,0,0]}'"),
            1);
}
