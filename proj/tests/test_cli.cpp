#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

using namespace std::string_literals;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("nova_test_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

int run(const std::string& args, const fs::path& log = {}) {
  std::string cmd = std::string(NOVA_CLI_PATH) + " " + args;
  cmd += log.empty() ? " > /dev/null 2>&1" : " > " + log.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return out;
}

fs::path tiny_config(const fs::path& dir, std::size_t steps) {
  fs::create_directories(dir);
  const auto p = dir / "config.txt";
  std::ofstream(p) << "steps = " << steps
                   << "\nresolution = 16\nrays_per_view = 16\nsamples_per_ray = 8\nplane_resolution = 8\nreg_probes = 16\n";
  return p;
}

const fs::path& dataset() {
  static const fs::path dir = [] {
    auto d = scratch("data");
    EXPECT_EQ(run("synth --resolution 16 --out " + d.string()), 0);
    return d;
  }();
  return dir;
}

}  // namespace

TEST(Cli, SynthIsBitIdentical) {
  const auto a = scratch("synth_a"), b = scratch("synth_b");
  ASSERT_EQ(run("synth --resolution 16 --include-random --out " + a.string()), 0);
  ASSERT_EQ(run("synth --resolution 16 --include-random --out " + b.string()), 0);
  const auto ta = tree(a);
  EXPECT_EQ(ta, tree(b));
  EXPECT_GE(ta.size(), 20u);
}

TEST(Cli, EvalOfDatasetAgainstItself) {
  const auto out = scratch("eval_self");
  ASSERT_EQ(run("eval --data " + dataset().string() + " --candidate " + dataset().string() + " --out " + out.string()), 0);
  const auto text = slurp(out / "metrics.tsv");
  EXPECT_NE(text.find("front\t99.000000\t1.000000\t100.000000\t0.000000"), std::string::npos) << text;
  EXPECT_NE(text.find("mean\t99.000000"), std::string::npos) << text;
}

TEST(Cli, FitRenderEval) {
  const auto work = scratch("fit");
  const auto cfg = tiny_config(work, 5);
  ASSERT_EQ(run("fit --config " + cfg.string() + " --data " + dataset().string() + " --out " + (work / "a").string()), 0);
  std::istringstream log(slurp(work / "a" / "loss.log"));
  std::string line;
  int rows = 0;
  while (std::getline(log, line)) ++rows;
  EXPECT_EQ(rows, 6);
  ASSERT_EQ(run("render --checkpoint " + (work / "a" / "checkpoint").string() + " --azimuth 180 --out " +
                (work / "r").string()),
            0);
  EXPECT_TRUE(fs::exists(work / "r" / "render.png"));
  ASSERT_EQ(run("eval --data " + dataset().string() + " --checkpoint " + (work / "a" / "checkpoint").string() +
                " --out " + (work / "e").string()),
            0);
  EXPECT_NE(slurp(work / "e" / "metrics.tsv").find("back\t"), std::string::npos);
}

TEST(Cli, FitIsDeterministicAndResumable) {
  const auto work = scratch("resume");
  const auto c4 = tiny_config(work / "c4", 4), c8 = tiny_config(work / "c8", 8);
  const auto data = dataset().string();
  ASSERT_EQ(run("fit --config " + c8.string() + " --data " + data + " --out " + (work / "x").string()), 0);
  ASSERT_EQ(run("fit --config " + c8.string() + " --data " + data + " --out " + (work / "y").string()), 0);
  EXPECT_EQ(tree(work / "x"), tree(work / "y"));
  ASSERT_EQ(run("fit --config " + c4.string() + " --data " + data + " --out " + (work / "h").string()), 0);
  ASSERT_EQ(run("fit --config " + c8.string() + " --data " + data + " --checkpoint " +
                (work / "h" / "checkpoint").string() + " --out " + (work / "h").string()),
            0);
  EXPECT_EQ(tree(work / "x" / "checkpoint"), tree(work / "h" / "checkpoint"));
  EXPECT_EQ(slurp(work / "x" / "loss.log"), slurp(work / "h" / "loss.log"));
}

TEST(Cli, ErrorsExitNonZero) {
  const auto work = scratch("errors");
  fs::create_directories(work);
  EXPECT_NE(run("--bogus"), 0);
  EXPECT_NE(run("synth --out " + work.string() + " --frobnicate"), 0);
  EXPECT_NE(run("render --checkpoint " + (work / "nope").string() + " --out " + work.string()), 0);
  EXPECT_NE(run("eval --data " + dataset().string()), 0);
  std::ofstream(work / "bad.txt") << "learning_rate = 3\n";
  const auto log = work / "log.txt";
  EXPECT_EQ(run("fit --config " + (work / "bad.txt").string() + " --data " + dataset().string() + " --out " +
                    work.string(),
                log),
            1);
  EXPECT_NE(slurp(log).find("error: "), std::string::npos);
}
