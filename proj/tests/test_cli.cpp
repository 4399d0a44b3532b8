#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "json.hpp"
#include "test_util.hpp"
#include "xmed/cli.hpp"
#include "xmed/image.hpp"
#include "xmed/model_io.hpp"
#include "xmed/report.hpp"

using namespace xmed;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun run(std::vector<std::string> args) {
  args.insert(args.begin(), "xmed");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// A small densenet trained once and shared by the tests below.
class CliFlow : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new fs::path(xmed::testing::scratch_dir("cli_flow"));
    const CliRun r = run({"train", "--synthetic", "200", "--model", "densenet-mini", "--epochs", "3", "--seed", "1",
                       "--img", "32", "--blocks", "2,2", "--growth", "4", "--out", (*dir_ / "m.xmed").string(),
                       "--log", (*dir_ / "log.jsonl").string(), "--quiet"});
    train_code_ = r.code;
    train_err_ = r.err;
  }
  static void TearDownTestSuite() { delete dir_; }

  static fs::path* dir_;
  static int train_code_;
  static std::string train_err_;
};

fs::path* CliFlow::dir_ = nullptr;
int CliFlow::train_code_ = -1;
std::string CliFlow::train_err_;

}  // namespace

TEST_F(CliFlow, TrainWritesModelAndLog) {
  ASSERT_EQ(train_code_, 0) << train_err_;
  const Model m = load_model(*dir_ / "m.xmed");
  EXPECT_EQ(m.architecture, "densenet-mini");
  EXPECT_EQ(m.class_names, (std::vector<std::string>{"lesion", "normal"}));
  EXPECT_EQ(m.input_shape(), (ImageShape{1, 32, 32}));
  std::istringstream log(slurp(*dir_ / "log.jsonl"));
  std::string line;
  int epochs = 0;
  while (std::getline(log, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("epoch"));
    ++epochs;
  }
  EXPECT_GE(epochs, 1);
  EXPECT_LE(epochs, 3);
}

TEST_F(CliFlow, EvalWritesValidReport) {
  ASSERT_EQ(train_code_, 0);
  const fs::path report = *dir_ / "report.json";
  const CliRun r = run({"eval", "--model", (*dir_ / "m.xmed").string(), "--synthetic", "200", "--seed", "1", "--report",
                     report.string(), "--name", "Synthetic"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("Synthetic |"), std::string::npos);
  EXPECT_NE(r.out.find("confusion tp="), std::string::npos);
  const auto j = nlohmann::json::parse(slurp(report));
  EXPECT_NO_THROW(validate_report_json(j));
  const MetricsReport rep = report_from_json(j);
  EXPECT_EQ(rep.confusion.tp + rep.confusion.fp + rep.confusion.tn + rep.confusion.fn, 30u);
}

TEST_F(CliFlow, ExplainWithZeroAlphaReproducesInput) {
  ASSERT_EQ(train_code_, 0);
  const fs::path data = *dir_ / "synth";
  ASSERT_EQ(run({"synth", "--out", data.string(), "--n", "4", "--img", "48", "--seed", "2"}).code, 0);
  EXPECT_TRUE(fs::exists(data / "boxes.json"));
  const fs::path image = data / "lesion" / "000000.png";
  const fs::path overlay = *dir_ / "overlay.png";
  const fs::path heat = *dir_ / "heat.png";
  const CliRun r = run({"explain", "--model", (*dir_ / "m.xmed").string(), "--image", image.string(), "--alpha", "0",
                     "--out", overlay.string(), "--heatmap", heat.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("layer dense2"), std::string::npos) << r.out;

  const Image8 got = read_png(overlay);
  const Image8 want = tensor_to_image(resize_bilinear(image_to_tensor(read_png(image), 1), 32, 32));
  ASSERT_EQ(got.height, 32u);
  ASSERT_EQ(got.channels, 3u);
  for (std::size_t y = 0; y < 32; ++y) {
    for (std::size_t x = 0; x < 32; ++x) {
      for (std::size_t c = 0; c < 3; ++c) ASSERT_EQ(got.at(y, x, c), want.at(y, x));
    }
  }
  EXPECT_EQ(read_png(heat).height, 32u);

  EXPECT_EQ(run({"explain", "--model", (*dir_ / "m.xmed").string(), "--image", image.string(), "--class", "5",
                 "--out", overlay.string()})
                .code,
            2);
}

TEST(Cli, ExitCodes) {
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"--help"}).code, 0);
  EXPECT_EQ(run({"train", "--bogus"}).code, 2);
  EXPECT_EQ(run({"train", "--out", "x"}).code, 2);
  EXPECT_EQ(run({"train", "--synthetic", "10", "--data", "d", "--out", "x"}).code, 2);
  EXPECT_EQ(run({"explain", "--model", "m", "--image", "i", "--out", "o", "--alpha", "1.5"}).code, 2);
  const fs::path dir = xmed::testing::scratch_dir("cli_errors");
  const CliRun missing = run({"eval", "--model", (dir / "nope.xmed").string(), "--synthetic", "20"});
  EXPECT_EQ(missing.code, 1);
  EXPECT_NE(missing.err.find("nope.xmed"), std::string::npos);
  { std::ofstream(dir / "junk.xmed") << "junk"; }
  EXPECT_EQ(run({"eval", "--model", (dir / "junk.xmed").string(), "--synthetic", "20"}).code, 1);
}
