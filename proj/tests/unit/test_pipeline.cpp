#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "mmfa/checkpoint.hpp"
#include "mmfa/dataset.hpp"
#include "mmfa/error.hpp"
#include "mmfa/pipeline.hpp"

using namespace mmfa;
namespace fs = std::filesystem;

namespace {

pipeline::RunConfig small_config() {
  pipeline::RunConfig c;
  c.net.num_keypoints = 8;
  c.batch_size = 2;
  c.vae_batch_size = 8;
  c.seed = 11;
  return c;
}

const data::Dataset& dataset() {
  static const data::Dataset ds = [] {
    synth::SynthConfig s;
    s.sequences = 2;
    s.frames = 4;
    return data::synthesize_dataset(s);
  }();
  return ds;
}

fs::path temp_file(const std::string& name) {
  return fs::temp_directory_path() / ("mmfa_pipeline_" + std::to_string(::getpid()) + "_" + name);
}

std::vector<torch::Tensor> snapshot(const std::vector<torch::Tensor>& params) {
  std::vector<torch::Tensor> out;
  for (const auto& p : params) out.push_back(p.detach().clone());
  return out;
}

bool unchanged(const std::vector<torch::Tensor>& before, const std::vector<torch::Tensor>& params) {
  for (size_t i = 0; i < params.size(); ++i)
    if (!torch::equal(before[i], params[i])) return false;
  return true;
}

void bytes_of(const fs::path& p, std::vector<char>& out) {
  std::ifstream in(p, std::ios::binary);
  out.assign(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST(RunConfig, JsonRoundTripAndStrictness) {
  auto c = small_config();
  c.loss.lambda_mouth = 2.5;
  c.optimizer.final_lr_fraction = 0.1;
  c.net.jacobian = nets::JacobianMode::kIdentity;
  auto back = pipeline::RunConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.net.num_keypoints, 8);
  EXPECT_EQ(back.loss.lambda_mouth, 2.5);
  EXPECT_EQ(back.net.jacobian, nets::JacobianMode::kIdentity);
  EXPECT_THROW(pipeline::RunConfig::from_json(R"({"net": {"colour": 3}})"), InvalidArgument);
  EXPECT_THROW(pipeline::RunConfig::from_json(R"({"batch_size": "four"})"), InvalidArgument);
  EXPECT_THROW(pipeline::RunConfig::from_json("{"), InvalidArgument);
  auto partial = pipeline::RunConfig::from_json(R"({"steps": 3})");
  EXPECT_EQ(partial.steps, 3);
  EXPECT_EQ(partial.optimizer.learning_rate, 5e-5);
}

TEST(RunConfig, Validation) {
  auto c = small_config();
  EXPECT_NO_THROW(c.validate());
  c.optimizer.learning_rate = 0.0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = small_config();
  c.vae.feature_dim = 128;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = small_config();
  c.optimizer.final_lr_fraction = 0.0;
  EXPECT_THROW(c.validate(), InvalidArgument);
}

TEST(OptimizerConfig, CosineSchedule) {
  pipeline::OptimizerConfig o;
  o.learning_rate = 1.0;
  EXPECT_EQ(o.rate_at(50, 100), 1.0);
  o.final_lr_fraction = 0.1;
  EXPECT_DOUBLE_EQ(o.rate_at(0, 100), 1.0);
  EXPECT_NEAR(o.rate_at(50, 100), 0.55, 1e-12);
  EXPECT_NEAR(o.rate_at(100, 100), 0.1, 1e-12);
  EXPECT_NEAR(o.rate_at(500, 100), 0.1, 1e-12);
}

TEST(TrainStep, FiniteMetricsAndGradientFlow) {
  pipeline::TrainingState st(small_config());
  auto batch = pipeline::sample_batch(dataset(), st.rng, 2);
  auto m = pipeline::train_step(st, batch);
  EXPECT_EQ(st.step, 1);
  EXPECT_EQ(m.step, 1);
  for (const char* term : {"perceptual", "gan", "equivariance", "keypoint_prior", "deformation_prior", "expression",
                           "canonical", "landmark", "total", "discriminator"}) {
    EXPECT_TRUE(std::isfinite(m.at(std::string("loss.") + term))) << term;
  }
  for (const auto& [name, params] : pipeline::parameter_groups(st.model)) {
    EXPECT_GT(m.at("grad_norm." + name), 0.0) << name;
  }
  EXPECT_THROW(m.at("nope"), InvalidArgument);
  EXPECT_THROW(pipeline::train_step(st, {}), InvalidArgument);
}

TEST(TrainStep, ZeroWeightsLeaveParametersUnchanged) {
  auto cfg = small_config();
  cfg.loss.weights = {0, 0, 0, 0, 0, 0, 0, 0};
  pipeline::TrainingState st(cfg);
  auto before = snapshot(st.model->parameters());
  pipeline::train(st, dataset(), 1);
  EXPECT_TRUE(unchanged(before, st.model->parameters()));
}

TEST(TrainStep, NonFiniteLossAborts) {
  pipeline::TrainingState st(small_config());
  {
    torch::NoGradGuard no_grad;
    for (auto& p : st.model->generator->parameters()) p.fill_(std::numeric_limits<double>::quiet_NaN());
  }
  auto batch = pipeline::sample_batch(dataset(), st.rng, 2);
  EXPECT_THROW(pipeline::train_step(st, batch), TrainingError);
}

TEST(TrainStep, SeededRunsAreIdentical) {
  std::vector<double> a, b;
  for (auto* out : {&a, &b}) {
    pipeline::TrainingState st(small_config());
    pipeline::train(st, dataset(), 3, [&](const pipeline::Metrics& m) { out->push_back(m.at("loss.total")); });
  }
  EXPECT_EQ(a, b);
}

TEST(Metrics, JsonLines) {
  auto path = temp_file("metrics.jsonl");
  {
    pipeline::MetricsLog log(path);
    pipeline::Metrics m;
    m.step = 3;
    m.phase = "main";
    m.values["loss.total"] = 1.5;
    log.append(m);
    log.append(m);
  }
  std::ifstream in(path);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    ++lines;
    EXPECT_NE(line.find("\"step\":3"), std::string::npos);
    EXPECT_NE(line.find("loss.total"), std::string::npos);
  }
  EXPECT_EQ(lines, 2);
  fs::remove(path);
}

TEST(Checkpoint, ByteIdenticalRoundTrip) {
  pipeline::TrainingState st(small_config());
  pipeline::train(st, dataset(), 1);
  auto a = temp_file("a.ckpt");
  auto b = temp_file("b.ckpt");
  checkpoint::save_checkpoint(st, a);
  auto loaded = checkpoint::load_checkpoint(a);
  checkpoint::save_checkpoint(*loaded, b);
  std::vector<char> ba, bb;
  bytes_of(a, ba);
  bytes_of(b, bb);
  EXPECT_EQ(ba, bb);
  auto pa = st.model->named_parameters();
  auto pb = loaded->model->named_parameters();
  for (const auto& item : pa) EXPECT_TRUE(torch::equal(item.value(), pb[item.key()])) << item.key();
  EXPECT_EQ(loaded->step, 1);
  EXPECT_FALSE(checkpoint::has_vae(a));
  EXPECT_EQ(checkpoint::read_config(a).to_json(), st.config.to_json());
  fs::remove(a);
  fs::remove(b);
}

TEST(Checkpoint, CorruptionAndVersionErrors) {
  pipeline::TrainingState st(small_config());
  auto path = temp_file("c.ckpt");
  checkpoint::save_checkpoint(st, path);
  std::vector<char> bytes;
  bytes_of(path, bytes);

  auto write = [&](const std::vector<char>& data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
  };
  auto flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x5a;
  write(flipped);
  EXPECT_THROW(checkpoint::load_checkpoint(path), CheckpointError);

  auto truncated = std::vector<char>(bytes.begin(), bytes.begin() + static_cast<long>(bytes.size() / 3));
  write(truncated);
  EXPECT_THROW(checkpoint::load_checkpoint(path), CheckpointError);

  auto versioned = bytes;
  versioned[8] = 9;  // version field follows the 8-byte magic
  write(versioned);
  try {
    checkpoint::load_checkpoint(path);
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
  write({'n', 'o', 'p', 'e'});
  EXPECT_THROW(checkpoint::load_checkpoint(path), CheckpointError);
  EXPECT_THROW(checkpoint::load_checkpoint(temp_file("missing.ckpt")), CheckpointError);
  fs::remove(path);
}

TEST(Checkpoint, ContainerSections) {
  checkpoint::Container c;
  c.set("alpha", {1, 2, 3});
  c.set("beta", {});
  auto back = checkpoint::Container::parse(c.serialize());
  EXPECT_EQ(back.names(), (std::vector<std::string>{"alpha", "beta"}));
  EXPECT_EQ(back.get("alpha"), (checkpoint::Bytes{1, 2, 3}));
  EXPECT_TRUE(back.get("beta").empty());
  EXPECT_THROW(back.get("gamma"), CheckpointError);
  auto tensors = checkpoint::decode_tensors(checkpoint::encode_tensors(
      {{"x", torch::arange(6, torch::kFloat64).view({2, 3})}, {"y", torch::tensor({7}, torch::kLong)}}));
  ASSERT_EQ(tensors.size(), 2u);
  EXPECT_TRUE(torch::equal(tensors[0].second, torch::arange(6, torch::kFloat64).view({2, 3})));
  EXPECT_EQ(tensors[1].second.item<int64_t>(), 7);
}

TEST(Checkpoint, ResumeReproducesNextStep) {
  auto path = temp_file("resume.ckpt");
  pipeline::TrainingState continuous(small_config());
  pipeline::train(continuous, dataset(), 2);
  checkpoint::save_checkpoint(continuous, path);
  double next = 0.0;
  pipeline::train(continuous, dataset(), 1, [&](const auto& m) { next = m.at("loss.total"); });
  auto resumed = checkpoint::load_checkpoint(path);
  double again = 0.0;
  pipeline::train(*resumed, dataset(), 1, [&](const auto& m) { again = m.at("loss.total"); });
  EXPECT_NEAR(again, next, 1e-6);
  fs::remove(path);
}

TEST(VaeTraining, SmokeZeroWeightsAndOverfit) {
  auto cfg = small_config();
  pipeline::TrainingState st(cfg);
  auto features = pipeline::expression_features(st.model, dataset());
  EXPECT_EQ(features.sizes(), (std::vector<int64_t>{8, cfg.net.expr_dim}));
  auto m = pipeline::train_vae_step(st, features);
  for (const char* k : {"vae.reconstruction", "vae.kl", "vae.adversarial", "vae.total"}) {
    EXPECT_TRUE(std::isfinite(m.at(k))) << k;
  }
  EXPECT_TRUE(st.vae_trained);
  EXPECT_THROW(pipeline::train_vae_step(st, torch::zeros({4, 3})), ShapeError);

  auto zero = cfg;
  zero.vae_weights = {0.0, 0.0, 0.0};
  pipeline::TrainingState frozen(zero);
  auto before = snapshot(frozen.vae->parameters());
  pipeline::train_vae_step(frozen, features);
  EXPECT_TRUE(unchanged(before, frozen.vae->parameters()));

  // Overfit a fixed batch: reconstruction falls well below its first value.
  auto fit = cfg;
  fit.vae_weights = {1.0, 1e-4, 0.0};
  pipeline::TrainingState learner(fit);
  auto target = features / features.norm(2, 1, true);
  double first = 0.0, last = 0.0;
  pipeline::train_vae(learner, target, 300, [&](const auto& mm) {
    if (mm.step == 1) first = mm.at("vae.reconstruction");
    last = mm.at("vae.reconstruction");
  });
  EXPECT_LT(last, 0.5 * first);
}

TEST(VaeTraining, CheckpointCarriesVae) {
  auto path = temp_file("vae.ckpt");
  pipeline::TrainingState st(small_config());
  auto features = pipeline::expression_features(st.model, dataset());
  pipeline::train_vae(st, features, 2);
  checkpoint::save_checkpoint(st, path);
  EXPECT_TRUE(checkpoint::has_vae(path));
  vae::ExpressionVae other(st.config.vae);
  checkpoint::load_vae(path, other);
  auto pa = st.vae->named_parameters();
  for (const auto& item : other->named_parameters()) EXPECT_TRUE(torch::equal(item.value(), pa[item.key()]));
  auto loaded = checkpoint::load_checkpoint(path);
  EXPECT_EQ(loaded->vae_step, 2);
  EXPECT_TRUE(loaded->vae_trained);
  fs::remove(path);
}
