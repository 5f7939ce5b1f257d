#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "senformer/commands.hpp"
#include "senformer/config.hpp"
#include "senformer/tensor_io.hpp"
#include "test_support.hpp"

namespace senf {
namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_command(args, out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

TEST(Cli, UnknownSubcommandIsUsageError) {
  auto r = run({"frobnicate"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("usage"), std::string::npos) << r.err;
}

TEST(Cli, UnknownFlagIsUsageError) {
  EXPECT_EQ(run({"synth", "--seed", "1", "--count", "1", "--bogus"}).code, 2);
  EXPECT_EQ(run({"gradcheck", "--scope", "everything"}).code, 2);
  EXPECT_EQ(run({}).code, 2);
}

TEST(Cli, RuntimeErrorIsOneLine) {
  auto dir = test::scratch_dir("cli_err");
  auto r = run({"eval", "--checkpoint", (dir / "none.senf").string(), "--data", (dir / "none.senf").string()});
  EXPECT_EQ(r.code, 1);
  auto l = lines(r.err);
  ASSERT_EQ(l.size(), 1u) << r.err;
  EXPECT_EQ(l[0].rfind("error: eval: ", 0), 0u) << l[0];
}

TEST(Cli, ParseLevels) {
  EXPECT_EQ(parse_levels("4,2,3"), (std::vector<std::size_t>{2, 3, 4}));
  EXPECT_EQ(parse_levels("3"), (std::vector<std::size_t>{3}));
  EXPECT_THROW(parse_levels("1,2"), std::invalid_argument);
  EXPECT_THROW(parse_levels("x"), std::invalid_argument);
  EXPECT_THROW(parse_levels(""), std::invalid_argument);
}

TEST(Cli, GradcheckOperatorSuite) {
  auto r = run({"gradcheck", "--scope", "op"});
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("max_rel_err"), std::string::npos);
  EXPECT_NE(r.out.find("conv2d"), std::string::npos);
  EXPECT_NE(r.out.find("checks passed"), std::string::npos);
}

TEST(Cli, GradcheckImpossibleToleranceFails) {
  auto r = run({"gradcheck", "--scope", "op", "--tol", "1e-30"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("FAIL"), std::string::npos);
}

class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = test::scratch_dir("cli_pipeline");
    std::ofstream(dir_ / "run.toml") << "[model]\nd = 16\nnum_blocks = 2\nn_classes = 4\n"
                                     << "[train]\nmax_iters = 4\nbatch_size = 2\ncrop_size = 32\neval_interval = 2\n"
                                     << "[data]\ntrain_count = 6\nval_count = 3\nsize = 32\n";
    auto s = run({"synth", "--seed", "3", "--count", "3", "--size", "32", "--classes", "4", "--out",
                  (dir_ / "val.senf").string()});
    ASSERT_EQ(s.code, 0) << s.err;
    auto t = run({"train", "--config", (dir_ / "run.toml").string(), "--out", (dir_ / "out").string()});
    ASSERT_EQ(t.code, 0) << t.err;
  }
  static std::filesystem::path dir_;
};
std::filesystem::path Pipeline::dir_;

TEST_F(Pipeline, TrainWritesOutputs) {
  EXPECT_TRUE(std::filesystem::exists(dir_ / "out" / "checkpoint.senf"));
  std::ifstream in(dir_ / "out" / "metrics.csv");
  std::stringstream ss;
  ss << in.rdbuf();
  auto csv = lines(ss.str());
  ASSERT_EQ(csv.size(), 5u);
  EXPECT_EQ(csv[0].rfind("iter,loss,lr", 0), 0u);
  auto echoed = parse_config(dir_ / "out" / "config.toml");
  EXPECT_TRUE(echoed == parse_config(dir_ / "run.toml"));
}

TEST_F(Pipeline, EvalSingleLearnerReportsOnlyIt) {
  auto r = run({"eval", "--checkpoint", (dir_ / "out" / "checkpoint.senf").string(), "--data",
                (dir_ / "val.senf").string(), "--learners", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto l = lines(r.out);
  ASSERT_EQ(l.size(), 2u) << r.out;
  EXPECT_EQ(l[0], "output,miou");
  EXPECT_EQ(l[1].rfind("d3,", 0), 0u);
}

TEST_F(Pipeline, EvalAllLearnersAddsEnsemble) {
  auto r = run({"eval", "--checkpoint", (dir_ / "out" / "checkpoint.senf").string(), "--data",
                (dir_ / "val.senf").string(), "--merge", "product"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto l = lines(r.out);
  ASSERT_EQ(l.size(), 6u) << r.out;
  EXPECT_EQ(l[5].rfind("ensemble,", 0), 0u);
}

TEST_F(Pipeline, EvalIsDeterministic) {
  const std::vector<std::string> args{"eval", "--checkpoint", (dir_ / "out" / "checkpoint.senf").string(), "--data",
                                      (dir_ / "val.senf").string()};
  EXPECT_EQ(run(args).out, run(args).out);
}

TEST_F(Pipeline, AnalyzeAllReports) {
  for (std::string kind : {"variance", "cosine", "ablation"}) {
    auto out = dir_ / ("report_" + kind);
    auto r = run({"analyze", "--checkpoint", (dir_ / "out" / "checkpoint.senf").string(), "--data",
                  (dir_ / "val.senf").string(), "--report", kind, "--out", out.string()});
    ASSERT_EQ(r.code, 0) << kind << ": " << r.err;
    EXPECT_TRUE(std::filesystem::exists(out / "manifest.json")) << kind;
  }
  EXPECT_EQ(run({"analyze", "--checkpoint", (dir_ / "out" / "checkpoint.senf").string(), "--data",
                 (dir_ / "val.senf").string(), "--report", "nonsense", "--out", (dir_ / "x").string()})
                .code,
            2);
}

TEST_F(Pipeline, ResumeContinuesToMaxIters) {
  auto r = run({"train", "--config", (dir_ / "run.toml").string(), "--out", (dir_ / "resumed").string(), "--resume",
                (dir_ / "out" / "checkpoint.senf").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_bundle(dir_ / "resumed" / "checkpoint.senf").meta["iter"], 4);
}

TEST(Cli, SynthIsDeterministic) {
  auto dir = test::scratch_dir("cli_synth");
  for (auto name : {"a.senf", "b.senf"}) {
    ASSERT_EQ(run({"synth", "--seed", "9", "--count", "2", "--size", "32", "--out", (dir / name).string()}).code, 0);
  }
  EXPECT_EQ(read_file(dir / "a.senf"), read_file(dir / "b.senf"));
}

}  // namespace
}  // namespace senf
