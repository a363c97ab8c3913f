#include <gtest/gtest.h>
#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "mmfa/animator.hpp"
#include "mmfa/image_io.hpp"
#include "mmfa/pipeline.hpp"
#include "mmfa/service.hpp"

namespace fs = std::filesystem;
using namespace mmfa;
using json = nlohmann::json;

namespace {

struct Run {
  int code = -1;
  std::string output;
};

Run run(const std::string& args, const std::string& env = {}) {
  const std::string cmd = env + " " + std::string(MMFA_CLI_PATH) + " --log-level error " + args + " 2>&1";
  Run r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.output.append(buf, n);
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

io::Bytes read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return io::Bytes(std::istreambuf_iterator<char>(in), {});
}

// Shared scratch: a tiny dataset and a one-step checkpoint.
class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("mmfa_cli_" + std::to_string(::getpid()));
    fs::create_directories(root_);
    ASSERT_EQ(run("synth --out " + data_dir().string() + " --sequences 2 --frames 3").code, 0);
    std::vector<fs::path> seqs;
    for (const auto& e : fs::directory_iterator(data_dir()))
      if (e.is_directory()) seqs.push_back(e.path());
    std::sort(seqs.begin(), seqs.end());
    ASSERT_EQ(seqs.size(), 2u);
    frame_a_ = seqs[0] / "0000.png";
    frame_b_ = seqs[1] / "0001.png";

    pipeline::RunConfig c;
    c.net.num_keypoints = 6;
    c.batch_size = 2;
    c.vae_batch_size = 4;
    std::ofstream(config_path()) << c.to_json();
    auto r = run("train --config " + config_path().string() + " --dataset " + data_dir().string() +
                 " --steps 1 --out " + checkpoint().string());
    ASSERT_EQ(r.code, 0) << r.output;
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static fs::path data_dir() { return root_ / "data"; }
  static fs::path config_path() { return root_ / "config.json"; }
  static fs::path checkpoint() { return root_ / "model.ckpt"; }
  static std::string env() { return "MMFA_CHECKPOINT=" + checkpoint().string(); }

  static inline fs::path root_, frame_a_, frame_b_;
};

TEST_F(Cli, UsageErrorsExitWithOne) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("fly").code, 1);
  EXPECT_EQ(run("animate --source x.png").code, 1);
  EXPECT_EQ(run("canonical --source " + frame_a_.string() + " --out " + (root_ / "c.png").string(),
                "MMFA_CHECKPOINT=").code,
            1);
  EXPECT_EQ(run("edit --source " + frame_a_.string() + " --out o.png --translation 1,2,3", env()).code, 1);
  EXPECT_EQ(run("edit --source " + frame_a_.string() + " --out o.png --scale -2", env()).code, 1);
  EXPECT_EQ(run("interpolate --source a --driving b --alpha 2 --out o.png", env()).code, 1);
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, RuntimeFailuresExitWithTwo) {
  const auto out = (root_ / "r.png").string();
  EXPECT_EQ(run("canonical --source " + (root_ / "missing.png").string() + " --out " + out, env()).code, 2);
  const auto junk = root_ / "junk.ckpt";
  std::ofstream(junk) << "not a checkpoint";
  EXPECT_EQ(run("canonical --checkpoint " + junk.string() + " --source " + frame_a_.string() + " --out " + out).code,
            2);
  EXPECT_EQ(run("interpolate --source " + frame_a_.string() + " --driving " + frame_b_.string() +
                    " --alpha 0.5 --out " + out,
                env())
                .code,
            2);
}

TEST_F(Cli, OutputsMatchTheService) {
  auto model = animator::Animator::from_checkpoint(checkpoint());
  service::Service svc(model);
  const auto src = io::read_png(frame_a_), drv = io::read_png(frame_b_);
  auto payload = [](const torch::Tensor& t) { return io::base64_encode(io::encode_png(t)); };
  auto image_of = [](const service::Response& r) {
    return io::base64_decode(json::parse(r.body)["image"].get<std::string>());
  };

  const auto anim = root_ / "anim.png";
  ASSERT_EQ(run("animate --source " + frame_a_.string() + " --driving " + frame_b_.string() + " --out " +
                    anim.string(),
                env())
                .code,
            0);
  auto r = svc.handle("POST", "/animate", json{{"source", payload(src)}, {"driving", payload(drv)}}.dump());
  ASSERT_EQ(r.status, 200);
  EXPECT_EQ(read_bytes(anim), image_of(r));

  const auto canon = root_ / "canon.png";
  const auto kp = root_ / "canon.json";
  ASSERT_EQ(run("canonical --source " + frame_a_.string() + " --out " + canon.string() + " --keypoints-out " +
                    kp.string(),
                env())
                .code,
            0);
  r = svc.handle("POST", "/edit", json{{"source", payload(src)}}.dump());
  ASSERT_EQ(r.status, 200);
  EXPECT_EQ(read_bytes(canon), image_of(r));
  EXPECT_EQ(json::parse(std::ifstream(kp)).size(), 6u);

  const auto edited = root_ / "edit.png";
  ASSERT_EQ(run("edit --source " + frame_a_.string() + " --yaw 0.3 --translation 0.1,0 --out " + edited.string(),
                env())
                .code,
            0);
  r = svc.handle("POST", "/edit", json{{"source", payload(src)}, {"yaw", 0.3}, {"translation", {0.1, 0.0}}}.dump());
  ASSERT_EQ(r.status, 200);
  EXPECT_EQ(read_bytes(edited), image_of(r));
}

TEST_F(Cli, VaeTrainingEnablesInterpolationAndEvalPrintsMetrics) {
  const auto with_vae = root_ / "vae.ckpt";
  auto r = run("train-vae --dataset " + data_dir().string() + " --steps 2 --out " + with_vae.string(), env());
  ASSERT_EQ(r.code, 0) << r.output;
  const auto out = root_ / "interp.png";
  r = run("--checkpoint " + with_vae.string() + " interpolate --source " + frame_a_.string() + " --driving " +
          frame_b_.string() + " --alpha 0.5 --out " + out.string());
  EXPECT_EQ(r.code, 0) << r.output;
  EXPECT_TRUE(fs::exists(out));

  const auto jsonl = root_ / "eval.jsonl";
  r = run("eval --dataset " + data_dir().string() + " --jsonl " + jsonl.string(), env());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_NE(r.output.find("PSNR"), std::string::npos);
  EXPECT_TRUE(fs::exists(jsonl));
}

}  // namespace
