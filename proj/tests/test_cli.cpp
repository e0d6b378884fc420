#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <regex>
#include <string>

#include <sys/wait.h>
#include <unistd.h>

namespace fs = std::filesystem;

#ifndef COPEFT_CLI_PATH
#error "COPEFT_CLI_PATH must name the CLI binary"
#endif

namespace {

struct CliResult {
  int code = -1;
  std::string out;  // stdout and stderr
};

CliResult run(const std::string& args) {
  const std::string cmd = std::string(COPEFT_CLI_PATH) + " " + args + " 2>&1";
  CliResult r;
  FILE* p = ::popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 512> buf;
  while (std::fgets(buf.data(), buf.size(), p)) r.out += buf.data();
  const int st = ::pclose(p);
  r.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

const std::regex kErrorLine(R"(^error: [a-z_]+: [^\n]*\n$)");

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() / ("copeft_cli_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::ofstream(dir / "domain.json") << R"({"grid":{"x_min":-8,"y_min":-8,"cell_size":1,"rows":16,"cols":16},
      "object_rate":2,"width_mean":1.5,"length_mean":2.5,"sensor_range":12})";
    std::ofstream(dir / "train.json") << R"({"model":{"hidden_channels":6,"feature_channels":8,"attn_dim":4},
      "base_epochs":1})";
  }
  void TearDown() override { fs::remove_all(dir); }
  std::string p(const std::string& name) const { return (dir / name).string(); }

  fs::path dir;
};

}  // namespace

TEST_F(Cli, FullWorkflow) {
  CliResult r = run("gen --domain " + p("domain.json") + " --count 6 --seed 3 --out " + p("d.jsonl"));
  ASSERT_EQ(r.code, 0) << r.out;
  r = run("gen --domain " + p("domain.json") + " --count 6 --seed 3 --out " + p("d2.jsonl"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(slurp(p("d.jsonl")), slurp(p("d2.jsonl")));

  r = run("train-base --data " + p("d.jsonl") + " --config " + p("train.json") + " --out " + p("base.cpft"));
  ASSERT_EQ(r.code, 0) << r.out;

  r = run("count-params --base " + p("base.cpft") + " --method copeft");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(std::regex_search(r.out, std::regex(R"(\{"method":"copeft","params_trainable":\d+,"params_total":\d+,"ratio":0\.\d{6}\})")))
      << r.out;

  const std::string adapt = "adapt --base " + p("base.cpft") + " --data " + p("d.jsonl") +
                            " --method copeft --rate 0.5 --seed 2 --epochs 1 --out ";
  r = run(adapt + p("delta.cpft"));
  ASSERT_EQ(r.code, 0) << r.out;
  r = run(adapt + p("delta2.cpft"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(slurp(p("delta.cpft")), slurp(p("delta2.cpft")));

  fs::create_directories(dir / "reports");
  r = run("eval --base " + p("base.cpft") + " --delta " + p("delta.cpft") + " --data " + p("d.jsonl") +
          " --seed 2 --no-clock --report " + p("reports/copeft.json"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(r.out.rfind("copeft AP50 ", 0), 0u) << r.out;
  r = run("eval --base " + p("base.cpft") + " --data " + p("d.jsonl") + " --no-clock --report " +
          p("reports/none.json"));
  ASSERT_EQ(r.code, 0) << r.out;

  r = run("report --in " + p("reports") + " --out " + p("t.csv"));
  ASSERT_EQ(r.code, 0) << r.out;
  const std::string csv = slurp(p("t.csv"));
  EXPECT_EQ(csv.rfind("method,seed,params_trainable,params_total,ratio,AP50,AP70,seconds\ncopeft,2,", 0), 0u) << csv;
  EXPECT_NE(csv.find("\nnone,0,0,"), std::string::npos) << csv;
}

TEST_F(Cli, ErrorsAreOneParsableLine) {
  CliResult r = run("");
  EXPECT_NE(r.code, 0);
  EXPECT_TRUE(std::regex_match(r.out, kErrorLine)) << r.out;

  r = run("gen --domain domain_A --count 2");
  EXPECT_NE(r.code, 0);
  EXPECT_TRUE(std::regex_match(r.out, kErrorLine)) << r.out;

  r = run("gen --domain nope --count 2 --seed 1 --out " + p("x.jsonl"));
  EXPECT_EQ(r.code, 1);
  EXPECT_TRUE(std::regex_match(r.out, kErrorLine)) << r.out;
  EXPECT_EQ(r.out.rfind("error: io: ", 0), 0u) << r.out;

  std::ofstream(dir / "bad.cpft") << "garbage";
  r = run("count-params --base " + p("bad.cpft") + " --method copeft");
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.out.rfind("error: format: ", 0), 0u) << r.out;
  EXPECT_TRUE(std::regex_match(r.out, kErrorLine)) << r.out;

  ASSERT_EQ(run("gen --domain " + p("domain.json") + " --count 2 --seed 1 --out " + p("d.jsonl")).code, 0);
  std::ofstream(dir / "bad.json") << "{\"model\": [1,2";
  r = run("train-base --data " + p("d.jsonl") + " --config " + p("bad.json") + " --out " + p("b.cpft"));
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.out.rfind("error: config: ", 0), 0u) << r.out;
  EXPECT_TRUE(std::regex_match(r.out, kErrorLine)) << r.out;
}

TEST_F(Cli, HelpExitsZero) {
  const CliResult r = run("--help");
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("count-params"), std::string::npos);
}
