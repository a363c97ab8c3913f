#include <gtest/gtest.h>

#include "mmfa/error.hpp"
#include "mmfa/face_model.hpp"
#include "mmfa/geometry.hpp"
#include "mmfa/model.hpp"
#include "mmfa/nets.hpp"
#include "testing.hpp"

using namespace mmfa;
using namespace mmfa::nets;

namespace {

NetConfig small_config() {
  NetConfig c;
  c.num_keypoints = 6;
  return c;
}

torch::Tensor random_images(int64_t b, int64_t size, uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return torch::rand({b, 3, size, size}, gen, torch::kFloat32) * 2.0 - 1.0;
}

geometry::KeypointSet keypoints(model::AnimationModel& m, const model::FrameAnalysis& frame,
                                const geometry::KeypointSet& canonical) {
  auto delta = m->deformation(frame.expression, canonical);
  return geometry::compose_keypoints(canonical, model::motion_params(frame, delta));
}

bool finite(const torch::Tensor& t) { return torch::isfinite(t).all().item<bool>(); }

double grad_norm(torch::nn::Module& m) {
  double total = 0.0;
  for (const auto& p : m.parameters())
    if (p.grad().defined()) total += p.grad().pow(2).sum().item<double>();
  return std::sqrt(total);
}

}  // namespace

TEST(NetConfig, Validation) {
  NetConfig c;
  EXPECT_NO_THROW(c.validate());
  c.image_size = 96;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = NetConfig{};
  c.num_keypoints = 0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  EXPECT_EQ(NetConfig{}.generator_scales(), (std::vector<int64_t>{16, 32, 64}));
}

TEST(KeypointDetector, ShapeRangeDeterminismAndGradient) {
  auto cfg = small_config();
  KeypointDetector det(cfg);
  det->eval();
  auto images = random_images(3, 64, 1).requires_grad_(true);
  auto kp = det(images).points;
  EXPECT_EQ(kp.sizes(), (std::vector<int64_t>{3, 6, 3}));
  EXPECT_TRUE((kp.abs() <= 1.0).all().item<bool>());
  EXPECT_TRUE(torch::equal(kp, det(images).points));
  kp.sum().backward();
  EXPECT_GT(images.grad().norm().item<double>(), 0.0);
  EXPECT_THROW(det(torch::zeros({1, 3, 32, 32})), ShapeError);
  EXPECT_THROW(det(torch::zeros({1, 1, 64, 64})), ShapeError);
}

TEST(AffineEstimator, RangesAndDeterminism) {
  AffineEstimator aff(small_config());
  aff->eval();
  auto images = random_images(4, 64, 2);
  auto out = aff(images);
  EXPECT_TRUE((out.scale > 0).all().item<bool>());
  EXPECT_TRUE((out.translation.abs() <= 1.0).all().item<bool>());
  EXPECT_TRUE(torch::equal(out.scale, aff(images).scale));
  EXPECT_THROW(aff(torch::zeros({1, 3, 63, 63})), ShapeError);
}

TEST(AffineEstimator, PositiveScaleGradient) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(3);
  auto pre = torch::randn({25}, gen, torch::kFloat64) * 2.0;
  auto f = positive_scale(pre);
  EXPECT_TRUE((f > 0.5).all().item<bool>());
  EXPECT_TRUE((f < 2.0).all().item<bool>());
  auto check = oracle::check_gradient([](const auto& x) { return positive_scale(x[0]); }, {pre}, 25, 3);
  EXPECT_LT(check.max_relative_error, 1e-3);
}

TEST(ExpressionEncoder, ShapeAndGradient) {
  auto cfg = small_config();
  ExpressionEncoder enc(cfg);
  enc->eval();
  auto images = random_images(2, 64, 4).requires_grad_(true);
  auto f = enc(images).values;
  EXPECT_EQ(f.sizes(), (std::vector<int64_t>{2, cfg.expr_dim}));
  EXPECT_TRUE(finite(f));
  EXPECT_TRUE(torch::equal(f, enc(images).values));
  f.pow(2).sum().backward();
  EXPECT_GT(images.grad().norm().item<double>(), 0.0);
}

TEST(ExpressionDecoder, ShapeSensitivityAndSign) {
  auto cfg = small_config();
  ExpressionDecoder dec(cfg);
  dec->eval();
  auto gen = at::make_generator<at::CPUGeneratorImpl>(5);
  ExpressionLatent f{torch::randn({4, cfg.expr_dim}, gen, torch::kFloat32)};
  geometry::KeypointSet pc{torch::rand({4, 6, 3}, gen, torch::kFloat32) * 2 - 1};
  auto delta = dec(f, pc);
  EXPECT_EQ(delta.sizes(), (std::vector<int64_t>{4, 6, 3}));
  EXPECT_TRUE(finite(delta));
  EXPECT_TRUE((delta < 0).any().item<bool>());
  EXPECT_TRUE(torch::equal(delta, dec(f, pc)));
  geometry::KeypointSet moved{pc.points + 0.3};
  EXPECT_GT((dec(f, moved) - delta).abs().max().item<double>(), 1e-6);
  EXPECT_THROW(dec(f, geometry::KeypointSet{torch::zeros({4, 5, 3})}), ShapeError);
}

TEST(AppearanceEncoder, VolumeShape) {
  auto cfg = small_config();
  AppearanceEncoder app(cfg);
  auto images = random_images(1, 64, 6).requires_grad_(true);
  auto v = app(images);
  EXPECT_EQ(v.sizes(), (std::vector<int64_t>{1, 32, 16, 16, 16}));
  EXPECT_TRUE(finite(v));
  v.sum().backward();
  EXPECT_GT(images.grad().norm().item<double>(), 0.0);
}

TEST(DenseMotionNet, MasksSumToOneAndOcclusionInRange) {
  auto cfg = small_config();
  DenseMotionNet motion(cfg);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(7);
  auto volume = torch::randn({2, 32, 16, 16, 16}, gen, torch::kFloat32);
  geometry::KeypointSet ps{torch::rand({2, 6, 3}, gen, torch::kFloat32) - 0.5};
  geometry::KeypointSet pd{torch::rand({2, 6, 3}, gen, torch::kFloat32) - 0.5};
  auto jac = torch::eye(3).expand({2, 3, 3});
  auto out = motion(volume, ps, pd, jac);
  EXPECT_LT((out.masks.sum(1) - 1).abs().max().item<double>(), 1e-5);
  EXPECT_TRUE((out.masks >= 0).all().item<bool>());
  EXPECT_TRUE((out.occlusion >= 0).all().item<bool>() && (out.occlusion <= 1).all().item<bool>());
  EXPECT_EQ(out.occlusion.sizes(), (std::vector<int64_t>{2, 1, 16, 16}));
  EXPECT_THROW(motion(volume, geometry::KeypointSet{torch::zeros({2, 5, 3})}, pd, jac), ShapeError);
}

TEST(DenseMotionNet, EqualKeypointsGiveZeroHeatmapDifference) {
  auto cfg = small_config();
  DenseMotionNet motion(cfg);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(8);
  auto volume = torch::randn({1, 32, 16, 16, 16}, gen, torch::kFloat32);
  geometry::KeypointSet p{torch::rand({1, 6, 3}, gen, torch::kFloat32) - 0.5};
  auto inputs = motion->assemble(volume, p, p, torch::eye(3).unsqueeze(0));
  EXPECT_EQ(inputs.heatmaps.abs().max().item<double>(), 0.0);
  // With J = I and p_S = p_D every candidate is the identity flow.
  EXPECT_LT((inputs.candidates - inputs.candidates.select(1, 0).unsqueeze(1)).abs().max().item<double>(), 1e-6);
}

TEST(KeypointHeatmaps, GaussianOracle) {
  auto grid = torch::tensor({0.0, 0.0, 0.0, 0.1, 0.0, 0.0}, torch::kFloat64).view({2, 3});
  auto kp = torch::tensor({0.0, 0.0, 0.0}, torch::kFloat64).view({1, 1, 3});
  auto h = keypoint_heatmaps(grid, kp, 0.1);
  EXPECT_NEAR(h[0][0][0].item<double>(), 1.0, 1e-12);
  EXPECT_NEAR(h[0][0][1].item<double>(), std::exp(-0.5), 1e-12);
}

TEST(Generator, ScalesRangeAndGradient) {
  auto cfg = small_config();
  Generator g(cfg);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(9);
  auto volume = torch::randn({1, 32, 16, 16, 16}, gen, torch::kFloat32).requires_grad_(true);
  auto out = g(volume);
  ASSERT_EQ(out.images.size(), 3u);
  const std::vector<int64_t> sizes{16, 32, 64};
  torch::Tensor total = torch::zeros({});
  for (size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(out.images[i].sizes(), (std::vector<int64_t>{1, 3, sizes[i], sizes[i]}));
    EXPECT_TRUE((out.images[i].abs() <= 1.0).all().item<bool>());
    total = total + out.images[i].sum();
  }
  total.backward();
  EXPECT_GT(volume.grad().norm().item<double>(), 0.0);
  // Every head receives gradient on its own.
  for (size_t i = 0; i < 3; ++i) {
    auto v = volume.detach().requires_grad_(true);
    g(v).images[i].sum().backward();
    EXPECT_GT(v.grad().norm().item<double>(), 0.0) << "scale " << i;
  }
}

TEST(Discriminator, FeaturesAndLogits) {
  Discriminator d(small_config());
  d->eval();
  auto images = random_images(2, 64, 10).requires_grad_(true);
  auto out = d(images);
  EXPECT_GE(out.features.size(), 2u);
  EXPECT_EQ(out.logits.size(0), 2);
  EXPECT_TRUE(torch::equal(out.logits, d(images).logits));
  out.logits.sum().backward();
  EXPECT_GT(images.grad().norm().item<double>(), 0.0);
}

TEST(Nets, FiniteOnHundredRandomInputs) {
  auto cfg = small_config();
  model::AnimationModel m(cfg);
  m->eval();
  torch::NoGradGuard no_grad;
  for (int chunk = 0; chunk < 4; ++chunk) {
    auto images = random_images(25, 64, 100 + chunk) * 3.0;  // beyond the nominal range too
    auto kp = m->detector(images);
    auto aff = m->affine(images);
    auto f = m->expression_encoder(images);
    auto delta = m->expression_decoder(f, kp);
    auto d = m->discriminator(images.slice(0, 0, 5));
    for (const auto& t : {kp.points, aff.scale, aff.translation, f.values, delta, d.logits}) EXPECT_TRUE(finite(t));
    auto volume = m->appearance(images.slice(0, 0, 5));
    EXPECT_TRUE(finite(volume));
    auto gout = m->generator(volume);
    for (const auto& img : gout.images) EXPECT_TRUE(finite(img));
  }
}

TEST(Nets, EndToEndGradientsReachMotionNetworks) {
  auto cfg = small_config();
  model::AnimationModel m(cfg);
  auto source = random_images(2, 64, 11);
  auto driving = random_images(2, 64, 12);
  auto rs = geometry::rotation_from_euler(0.2, 0.1, 0.0, torch::kFloat32).expand({2, 3, 3});
  auto rd = geometry::rotation_from_euler(-0.1, 0.0, 0.1, torch::kFloat32).expand({2, 3, 3});
  auto s = m->analyze(source, rs);
  auto d = m->analyze(driving, rd);
  auto kp_s = keypoints(m, s, s.canonical);
  auto kp_d = keypoints(m, d, s.canonical);
  auto out = m->synthesize(source, kp_s, kp_d, rs, rd);
  (out.output.full() - driving).abs().mean().backward();
  EXPECT_GT(grad_norm(*m->detector), 0.0);
  EXPECT_GT(grad_norm(*m->affine), 0.0);
  EXPECT_GT(grad_norm(*m->expression_encoder), 0.0);
  EXPECT_GT(grad_norm(*m->expression_decoder), 0.0);
  EXPECT_GT(grad_norm(*m->appearance), 0.0);
  EXPECT_GT(grad_norm(*m->motion), 0.0);
  EXPECT_GT(grad_norm(*m->generator), 0.0);
}

TEST(Nets, ShapeContractsAtEverySize) {
  torch::NoGradGuard no_grad;
  for (int64_t size : {64, 128, 256}) {
    NetConfig cfg;
    cfg.image_size = size;
    cfg.num_keypoints = 4;
    model::AnimationModel m(cfg);
    m->eval();
    auto images = random_images(1, size, 13);
    auto r = torch::eye(3).unsqueeze(0);
    auto a = m->analyze(images, r);
    EXPECT_EQ(a.canonical.points.sizes(), (std::vector<int64_t>{1, 4, 3}));
    auto kp = keypoints(m, a, a.canonical);
    auto out = m->synthesize(images, kp, kp, r, r);
    const auto scales = cfg.generator_scales();
    ASSERT_EQ(out.output.images.size(), scales.size());
    for (size_t i = 0; i < scales.size(); ++i) EXPECT_EQ(out.output.images[i].size(-1), scales[i]);
    EXPECT_EQ(out.motion.masks.size(-1), size / 4);
    if (size == 256) {
      auto volume = m->appearance(images);
      EXPECT_EQ(volume.sizes(), (std::vector<int64_t>{1, 32, 16, 64, 64}));
    }
  }
}

TEST(PoseProvider, OracleFixedAndOrthonormal) {
  face::FrameMeta meta;
  meta.yaw = 0.3;
  auto images = torch::zeros({2, 3, 64, 64});
  OraclePoseProvider oracle;
  auto r = oracle.rotations(images, {meta, meta});
  EXPECT_TRUE(torch::allclose(r[0], geometry::rotation_from_euler(0.3, 0.0, 0.0, torch::kFloat32), 0, 1e-6));
  EXPECT_THROW(oracle.rotations(images, {meta, std::nullopt}), ProviderError);
  FixedPoseProvider fixed;
  EXPECT_TRUE(torch::equal(fixed.rotations(images, {}), torch::eye(3).expand({2, 3, 3})));
  auto gen = at::make_generator<at::CPUGeneratorImpl>(14);
  for (const auto& name : {"oracle", "fixed", "auto"}) {
    auto provider = make_pose_provider(name);
    face::MetaList metas;
    for (int i = 0; i < 2; ++i) {
      face::FrameMeta m;
      m.yaw = torch::rand({1}, gen).item<double>() - 0.5;
      m.pitch = torch::rand({1}, gen).item<double>() - 0.5;
      m.roll = torch::rand({1}, gen).item<double>() - 0.5;
      metas.push_back(m);
    }
    auto rot = provider->rotations(images, metas);
    auto err = (torch::matmul(rot.transpose(1, 2), rot) - torch::eye(3)).abs().max().item<double>();
    EXPECT_LT(err, 1e-5) << name;
  }
  EXPECT_THROW(make_pose_provider("pretrained"), ProviderError);
}

TEST(LandmarkProvider, PartitionAndOraclePassThrough) {
  EXPECT_EQ(face::kFaceLandmarks, 120);
  EXPECT_EQ(face::kMouthLandmarks, 20);
  EXPECT_EQ(face::kPupilLandmarks, 5);
  EXPECT_EQ(face::kLandmarkCount, 145);
  face::FrameMeta meta;
  for (int64_t i = 0; i < face::kLandmarkCount; ++i) meta.landmarks.push_back({0.001 * i, -0.002 * i});
  OracleLandmarkProvider oracle;
  auto lm = oracle.detect(torch::zeros({1, 3, 64, 64}), {meta});
  EXPECT_EQ(lm.sizes(), (std::vector<int64_t>{1, 145, 2}));
  EXPECT_NEAR(lm[0][100][0].item<double>(), 0.1, 1e-6);
  EXPECT_NEAR(lm[0][100][1].item<double>(), -0.2, 1e-6);
  EXPECT_THROW(oracle.detect(torch::zeros({1, 3, 64, 64}), {std::nullopt}), ProviderError);
  MomentLandmarkProvider moments;
  auto m = moments.detect(random_images(2, 64, 15), {});
  EXPECT_EQ(m.sizes(), (std::vector<int64_t>{2, 145, 2}));
  EXPECT_TRUE(finite(m));
  EXPECT_THROW(make_landmark_provider("pretrained"), ProviderError);
}
