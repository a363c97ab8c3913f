#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "mmfa/error.hpp"
#include "mmfa/face_model.hpp"
#include "mmfa/losses.hpp"
#include "mmfa/nets.hpp"
#include "testing.hpp"

using namespace mmfa;
using namespace mmfa::losses;

namespace {

const auto kF64 = torch::TensorOptions().dtype(torch::kFloat64);

torch::Tensor uniform(std::initializer_list<int64_t> shape, torch::Generator& gen) {
  return torch::rand(shape, gen, torch::kFloat64) * 2.0 - 1.0;
}

nets::GeneratorOutput pyramid_of(const torch::Tensor& image) {
  std::vector<int64_t> sizes{image.size(-1) / 4, image.size(-1) / 2, image.size(-1)};
  return {image_pyramid(image, sizes)};
}

MultiScalePerceptualLoss float64_perceptual() {
  MultiScalePerceptualLoss loss;
  loss.to(torch::kFloat64);
  return loss;
}

}  // namespace

TEST(Perceptual, ZeroOnIdenticalInputs) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(1);
  auto loss = float64_perceptual();
  auto image = uniform({2, 3, 32, 32}, gen);
  auto g = pyramid_of(image);
  EXPECT_EQ(loss(g, g.images).item<double>(), 0.0);
}

TEST(Perceptual, SymmetricAndStrictlyIncreasingPerScale) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(2);
  auto loss = float64_perceptual();
  auto a = uniform({1, 3, 32, 32}, gen);
  auto b = uniform({1, 3, 32, 32}, gen);
  EXPECT_NEAR(loss.single_scale(a, b).item<double>(), loss.single_scale(b, a).item<double>(), 1e-12);

  auto truth = pyramid_of(a);
  for (size_t scale = 0; scale < 3; ++scale) {
    auto perturbed = truth;
    perturbed.images[scale] = perturbed.images[scale] + 1e-3 * uniform({1, 3, truth.images[scale].size(-1),
                                                                          truth.images[scale].size(-1)}, gen);
    EXPECT_GT(loss(perturbed, truth.images).item<double>(), 0.0) << "scale " << scale;
  }
}

TEST(Perceptual, ScaleMismatchThrows) {
  auto loss = float64_perceptual();
  auto g = pyramid_of(torch::zeros({1, 3, 32, 32}, kF64));
  std::vector<torch::Tensor> truth(g.images.begin(), g.images.begin() + 2);
  EXPECT_THROW(loss(g, truth), ShapeError);
  truth = g.images;
  truth[1] = torch::zeros({1, 3, 8, 8}, kF64);
  EXPECT_THROW(loss(g, truth), ShapeError);
}

TEST(Perceptual, PluggableExtractor) {
  FeatureFn pixels = [](const torch::Tensor& x) { return std::vector<torch::Tensor>{x}; };
  EXPECT_THROW(MultiScalePerceptualLoss(pixels, std::nullopt, 0), InvalidArgument);
  MultiScalePerceptualLoss loss(pixels, std::nullopt, 1);
  auto a = torch::zeros({1, 3, 8, 8}, kF64);
  auto b = torch::full({1, 3, 8, 8}, 0.25, kF64);
  EXPECT_NEAR(loss.single_scale(a, b).item<double>(), 0.25, 1e-12);
}

TEST(Perceptual, Gradient) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(3);
  auto loss = float64_perceptual();
  auto truth = pyramid_of(uniform({1, 3, 16, 16}, gen));
  auto fn = [&](const std::vector<torch::Tensor>& x) { return loss(pyramid_of(x[0]), truth.images); };
  auto check = oracle::check_gradient(fn, {uniform({1, 3, 16, 16}, gen)}, 20, 3, 1e-6);
  EXPECT_LT(check.max_relative_error, 1e-3);
}

TEST(Gan, ClosedForms) {
  nets::DiscriminatorOutput ones{{torch::ones({1, 2, 3, 3}, kF64)}, torch::ones({1, 1, 2, 2}, kF64)};
  nets::DiscriminatorOutput zeros{{torch::ones({1, 2, 3, 3}, kF64)}, torch::zeros({1, 1, 2, 2}, kF64)};
  EXPECT_EQ(gan_losses(zeros, ones).generator.item<double>(), 0.0);
  EXPECT_DOUBLE_EQ(gan_losses(zeros, zeros).discriminator.item<double>(), 0.5);
  EXPECT_EQ(gan_losses(ones, ones).feature_matching.item<double>(), 0.0);
}

TEST(Gan, FeatureMatchingDetachesRealAndShapeChecks) {
  auto real_f = torch::zeros({1, 2, 3, 3}, kF64).requires_grad_(true);
  auto fake_f = torch::ones({1, 2, 3, 3}, kF64).requires_grad_(true);
  nets::DiscriminatorOutput real{{real_f}, torch::zeros({1, 1, 2, 2}, kF64)};
  nets::DiscriminatorOutput fake{{fake_f}, torch::zeros({1, 1, 2, 2}, kF64)};
  auto fm = gan_losses(real, fake).feature_matching;
  EXPECT_DOUBLE_EQ(fm.item<double>(), 1.0);
  fm.backward();
  EXPECT_FALSE(real_f.grad().defined());
  EXPECT_TRUE(fake_f.grad().defined());
  nets::DiscriminatorOutput other{{fake_f}, torch::zeros({1, 1, 3, 3}, kF64)};
  EXPECT_THROW(gan_losses(real, other), ShapeError);
}

TEST(Gan, Gradient) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(4);
  // Real features are detached by design, so they enter as a constant.
  auto real_features = uniform({1, 4, 3, 3}, gen);
  auto fn = [real_features](const std::vector<torch::Tensor>& x) {
    nets::DiscriminatorOutput real{{real_features}, x[0]};
    nets::DiscriminatorOutput fake{{x[1]}, x[2]};
    auto g = gan_losses(real, fake);
    return torch::stack({g.discriminator, g.generator, g.feature_matching});
  };
  auto check = oracle::check_gradient(
      fn, {uniform({1, 1, 2, 2}, gen), uniform({1, 4, 3, 3}, gen), uniform({1, 1, 2, 2}, gen)}, 24, 4, 1e-6);
  EXPECT_LT(check.max_relative_error, 1e-3);

  nets::NetConfig cfg;
  nets::Discriminator disc(cfg);
  disc->to(torch::kFloat64);
  auto real = uniform({1, 3, 64, 64}, gen);
  auto through = [&](const std::vector<torch::Tensor>& x) {
    auto g = gan_losses(disc, real, x[0]);
    return g.generator + g.feature_matching;
  };
  auto check_disc = oracle::check_gradient(through, {uniform({1, 3, 64, 64}, gen)}, 20, 5, 1e-6);
  EXPECT_LT(check_disc.max_relative_error, 1e-3);
}

TEST(Gan, DiscriminatorLossIgnoresGeneratorGradient) {
  nets::NetConfig cfg;
  nets::Discriminator disc(cfg);
  auto fake = torch::rand({1, 3, 64, 64}).requires_grad_(true);
  auto g = gan_losses(disc, torch::rand({1, 3, 64, 64}), fake);
  g.discriminator.backward();
  EXPECT_FALSE(fake.grad().defined());
}

TEST(Equivariance, ZeroForEquivariantKeypoints) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(6);
  auto p = uniform({2, 10, 2}, gen);
  EXPECT_EQ(equivariance_loss(p, p, geometry::AugmentTransform::identity()).item<double>(), 0.0);
  geometry::AugmentTransform shift;
  shift.translation = {0.1, 0.0};
  auto shifted = p + torch::tensor({0.1, 0.0}, kF64);
  EXPECT_NEAR(equivariance_loss(p, shifted, shift).item<double>(), 0.0, 1e-12);
  for (int i = 0; i < 25; ++i) {
    geometry::AugmentTransform t;
    t.angle = uniform({1}, gen).item<double>();
    t.scale = 0.6 + torch::rand({1}, gen, torch::kFloat64).item<double>();
    t.translation = {0.2 * uniform({1}, gen).item<double>(), 0.2 * uniform({1}, gen).item<double>()};
    EXPECT_LT(equivariance_loss(p, geometry::augment_points(p, t), t).item<double>(), 1e-12);
  }
}

TEST(Equivariance, IgnoredTranslationCostsKTimesShift) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(7);
  const int64_t k = 10;
  auto p = uniform({1, k, 2}, gen);
  geometry::AugmentTransform shift;
  shift.translation = {0.1, 0.0};
  EXPECT_NEAR(equivariance_loss(p, p, shift).item<double>(), k * 0.1, 1e-12);
  geometry::AugmentTransform singular;
  singular.scale = 0.0;
  EXPECT_THROW(equivariance_loss(p, p, singular), InvalidArgument);
}

TEST(Equivariance, Gradient) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(8);
  std::vector<geometry::AugmentTransform> ts(2);
  ts[0].angle = 0.2;
  ts[1].scale = 1.1;
  ts[1].translation = {0.05, -0.03};
  auto fn = [&](const std::vector<torch::Tensor>& x) { return equivariance_loss(x[0], x[1], ts); };
  auto check = oracle::check_gradient(fn, {uniform({2, 6, 2}, gen), uniform({2, 6, 2}, gen)}, 24, 8, 1e-6);
  EXPECT_LT(check.max_relative_error, 1e-3);
}

TEST(KeypointPrior, ClosedForms) {
  const double dt = 0.1, zt = 0.33;
  // Five points on a wide grid at the target depth.
  auto far = torch::tensor({{-0.8, -0.8, zt}, {0.8, -0.8, zt}, {-0.8, 0.8, zt}, {0.8, 0.8, zt}, {0.0, 0.0, zt}}, kF64);
  EXPECT_EQ(keypoint_prior_loss(far.unsqueeze(0), dt, zt).item<double>(), 0.0);
  auto coincident = far.clone();
  coincident[1] = coincident[0];
  EXPECT_NEAR(keypoint_prior_loss(coincident.unsqueeze(0), dt, zt).item<double>(), dt, 1e-12);
}

TEST(KeypointPrior, MatchesDoubleLoopOracleAndIsPermutationInvariant) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(9);
  const double dt = 0.1, zt = 0.33;
  auto p = uniform({1, 12, 3}, gen) * 0.4;
  double oracle = 0.0, depth = 0.0;
  for (int i = 0; i < 12; ++i) {
    depth += p[0][i][2].item<double>() / 12.0;
    for (int j = i + 1; j < 12; ++j) {
      double d2 = 0.0;
      for (int c = 0; c < 3; ++c) d2 += std::pow(p[0][i][c].item<double>() - p[0][j][c].item<double>(), 2);
      oracle += std::max(0.0, dt - d2);
    }
  }
  oracle += std::abs(depth - zt);
  EXPECT_NEAR(keypoint_prior_loss(p, dt, zt).item<double>(), oracle, 1e-12);
  auto perm = torch::randperm(12, gen, torch::kLong);
  EXPECT_NEAR(keypoint_prior_loss(p.index_select(1, perm), dt, zt).item<double>(), oracle, 1e-12);
}

TEST(KeypointPrior, Gradient) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(10);
  auto fn = [](const std::vector<torch::Tensor>& x) { return keypoint_prior_loss(x[0], 0.1, 0.33); };
  auto check = oracle::check_gradient(fn, {uniform({2, 8, 3}, gen) * 0.3}, 24, 10, 1e-6);
  EXPECT_LT(check.max_relative_error, 1e-3);
}

TEST(DeformationPrior, ClosedFormsOracleAndGradient) {
  EXPECT_EQ(deformation_prior_loss(torch::zeros({1, 5, 3}, kF64)).item<double>(), 0.0);
  EXPECT_NEAR(deformation_prior_loss(torch::full({1, 5, 3}, 0.1, kF64)).item<double>(), 0.1, 1e-15);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(11);
  auto d = uniform({2, 5, 3}, gen);
  double oracle = 0.0;
  auto flat = d.reshape(-1);
  for (int64_t i = 0; i < flat.numel(); ++i) oracle += std::abs(flat[i].item<double>());
  EXPECT_NEAR(deformation_prior_loss(d).item<double>(), oracle / flat.numel(), 1e-14);
  auto check = oracle::check_gradient([](const auto& x) { return deformation_prior_loss(x[0]); }, {d}, 20, 11, 1e-6);
  EXPECT_LT(check.max_relative_error, 1e-3);
}

TEST(ExpressionConsistency, CosineTriple) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(12);
  auto f = uniform({1, 256}, gen);
  EXPECT_NEAR(expression_consistency_loss({f}, {f}).item<double>(), 0.0, 1e-12);
  EXPECT_NEAR(expression_consistency_loss({f}, {-f}).item<double>(), 2.0, 1e-12);
  auto e0 = torch::zeros({1, 4}, kF64);
  auto e1 = e0.clone();
  e0[0][0] = 1.0;
  e1[0][1] = 3.0;
  EXPECT_NEAR(expression_consistency_loss({e0}, {e1}).item<double>(), 1.0, 1e-12);
  EXPECT_THROW(expression_consistency_loss({torch::zeros({1, 4}, kF64)}, {e1}), InvalidArgument);
  EXPECT_THROW(expression_consistency_loss({e0}, {torch::zeros({1, 5}, kF64)}), ShapeError);
  auto check = oracle::check_gradient(
      [](const auto& x) { return expression_consistency_loss({x[0]}, {x[1]}); },
      {uniform({3, 16}, gen), uniform({3, 16}, gen)}, 24, 12);
  EXPECT_LT(check.max_relative_error, 1e-3);
}

TEST(CanonicalConsistency, ClosedFormsOracleAndGradient) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(13);
  auto a = uniform({1, 7, 3}, gen);
  EXPECT_EQ(canonical_consistency_loss({a}, {a}).item<double>(), 0.0);
  auto shifted = a + torch::tensor({3.0, 4.0, 0.0}, kF64);
  EXPECT_NEAR(canonical_consistency_loss({a}, {shifted}).item<double>(), 5.0, 1e-12);
  auto b = uniform({1, 7, 3}, gen);
  double oracle = 0.0;
  for (int k = 0; k < 7; ++k) {
    double s = 0.0;
    for (int c = 0; c < 3; ++c) s += std::pow(a[0][k][c].item<double>() - b[0][k][c].item<double>(), 2);
    oracle += std::sqrt(s) / 7.0;
  }
  EXPECT_NEAR(canonical_consistency_loss({a}, {b}).item<double>(), oracle, 1e-12);
  EXPECT_THROW(canonical_consistency_loss({a}, {torch::zeros({1, 6, 3}, kF64)}), ShapeError);
  auto check = oracle::check_gradient([](const auto& x) { return canonical_consistency_loss({x[0]}, {x[1]}); },
                                       {a, b}, 24, 13);
  EXPECT_LT(check.max_relative_error, 1e-3);
}

TEST(Landmark, ClosedFormsWeightedOracleAndGradient) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(14);
  LossConfig cfg;
  auto l = uniform({1, 145, 2}, gen);
  EXPECT_EQ(landmark_loss(l, l, cfg).item<double>(), 0.0);
  auto moved = l.clone();
  moved.narrow(1, 0, 120) += torch::tensor({3.0, 4.0}, kF64);
  EXPECT_NEAR(landmark_loss(l, moved, cfg).item<double>(), 5.0, 1e-12);

  cfg.lambda_face = 1.0;
  cfg.lambda_mouth = 2.0;
  cfg.lambda_pupil = 4.0;
  auto m = uniform({1, 145, 2}, gen);
  double parts[3] = {0, 0, 0};
  for (int i = 0; i < 145; ++i) {
    const double d = std::hypot(l[0][i][0].item<double>() - m[0][i][0].item<double>(),
                                l[0][i][1].item<double>() - m[0][i][1].item<double>());
    if (i < 120) parts[0] += d / 120.0;
    else if (i < 140) parts[1] += d / 20.0;
    else parts[2] += d / 5.0;
  }
  EXPECT_NEAR(landmark_loss(l, m, cfg).item<double>(), parts[0] + 2 * parts[1] + 4 * parts[2], 1e-12);
  EXPECT_THROW(landmark_loss(l.narrow(1, 0, 140), m.narrow(1, 0, 140), cfg), ShapeError);
  auto check = oracle::check_gradient([&](const auto& x) { return landmark_loss(x[0], x[1], cfg); }, {l, m}, 24, 14);
  EXPECT_LT(check.max_relative_error, 1e-3);
}

TEST(TotalLoss, WeightedSumAndMissingTerms) {
  auto zero = torch::zeros({}, kF64);
  LossTerms terms{zero, zero, zero, zero, zero, zero, zero, zero};
  LossWeights weights;
  EXPECT_EQ(total_loss(terms, weights).item<double>(), 0.0);
  terms.expression = torch::tensor(0.5, kF64);
  weights.expression = 2.0;
  EXPECT_DOUBLE_EQ(total_loss(terms, weights).item<double>(), 1.0);
  terms.landmark.reset();
  try {
    total_loss(terms, weights);
    FAIL() << "expected InvalidArgument";
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("landmark"), std::string::npos);
  }
}

TEST(TotalLoss, ParameterGradient) {
  nets::NetConfig cfg;
  cfg.num_keypoints = 5;
  cfg.expr_dim = 16;
  cfg.decoder_hidden = 16;
  nets::ExpressionDecoder decoder(cfg);
  decoder->to(torch::kFloat64);
  decoder->eval();
  auto gen = at::make_generator<at::CPUGeneratorImpl>(15);
  nets::ExpressionLatent f{uniform({2, 16}, gen)};
  geometry::KeypointSet pc{uniform({2, 5, 3}, gen) * 0.5};
  LossConfig lc;
  auto loss = [&] {
    auto delta = decoder(f, pc);
    geometry::KeypointSet posed{pc.points + delta};
    auto proj = posed.points.narrow(-1, 0, 2);
    LossTerms t;
    t.perceptual = proj.pow(2).mean();
    t.gan = torch::zeros({}, kF64);
    t.equivariance = equivariance_loss(proj, proj * 1.05, geometry::AugmentTransform{0.1, 1.0, {0.0, 0.0}});
    t.keypoint_prior = keypoint_prior_loss(posed.points, lc.distance_threshold, lc.depth_target);
    t.deformation_prior = deformation_prior_loss(delta);
    t.expression = torch::zeros({}, kF64);
    t.canonical = canonical_consistency_loss(pc, posed);
    t.landmark = torch::zeros({}, kF64);
    return total_loss(t, lc.weights);
  };
  auto check = oracle::check_parameter_gradient(loss, decoder->parameters(), 24, 15, 1e-6);
  EXPECT_GE(check.points, 20);
  EXPECT_LT(check.max_relative_error, 1e-3);
}

TEST(LossConfig, Validation) {
  LossConfig c;
  EXPECT_NO_THROW(c.validate());
  c.distance_threshold = 0.0;
  EXPECT_THROW(c.validate(), InvalidArgument);
  c = LossConfig{};
  c.weights.gan = -1.0;
  EXPECT_THROW(c.validate(), InvalidArgument);
}
