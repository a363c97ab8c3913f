#include "mmfa/losses.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>

#include "mmfa/error.hpp"

namespace mmfa::losses {

namespace F = torch::nn::functional;

void LossConfig::validate() const {
  const double ws[] = {weights.perceptual,   weights.gan,        weights.equivariance, weights.keypoint_prior,
                       weights.deformation_prior, weights.expression, weights.canonical,    weights.landmark,
                       feature_matching,     lambda_face,        lambda_mouth,         lambda_pupil};
  for (double w : ws) {
    if (!(w >= 0.0)) throw InvalidArgument("loss weights must be nonnegative");
  }
  if (!(distance_threshold > 0.0)) throw InvalidArgument("distance threshold D_t must be positive");
  if (pyramid_depth < 1) throw InvalidArgument("pyramid_depth must be at least 1");
}

RandomConvExtractorImpl::RandomConvExtractorImpl(uint64_t seed, std::vector<int64_t> channels) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  int64_t in = 3;
  for (size_t i = 0; i < channels.size(); ++i) {
    auto conv = register_module(
        "conv" + std::to_string(i),
        torch::nn::Conv2d(torch::nn::Conv2dOptions(in, channels[i], 3).stride(i == 0 ? 1 : 2).padding(1)));
    torch::NoGradGuard no_grad;
    const double fan_in = static_cast<double>(in * 9);
    conv->weight.normal_(0.0, std::sqrt(2.0 / fan_in), gen);
    conv->bias.zero_();
    conv->weight.set_requires_grad(false);
    conv->bias.set_requires_grad(false);
    convs_.push_back(conv);
    in = channels[i];
  }
}

std::vector<torch::Tensor> RandomConvExtractorImpl::forward(const torch::Tensor& images) {
  std::vector<torch::Tensor> feats{images};
  auto x = images;
  for (auto& conv : convs_) {
    x = torch::relu(conv(x));
    feats.push_back(x);
  }
  return feats;
}

MultiScalePerceptualLoss::MultiScalePerceptualLoss(int64_t pyramid_depth, bool identity_term)
    : pyramid_depth_(pyramid_depth) {
  if (pyramid_depth < 1) throw InvalidArgument("pyramid_depth must be at least 1");
  pyramid_module_ = RandomConvExtractor(0x5eed1ULL, std::vector<int64_t>{16, 32, 64});
  pyramid_ = [m = pyramid_module_](const torch::Tensor& x) mutable { return m->forward(x); };
  if (identity_term) {
    identity_module_ = RandomConvExtractor(0x5eed2ULL, std::vector<int64_t>{32, 64, 64, 128});
    identity_ = [m = identity_module_](const torch::Tensor& x) mutable {
      auto feats = m->forward(x);
      feats.erase(feats.begin());  // the pixel term is already in the pyramid
      return feats;
    };
  }
}

MultiScalePerceptualLoss::MultiScalePerceptualLoss(FeatureFn pyramid, std::optional<FeatureFn> identity,
                                                   int64_t pyramid_depth)
    : pyramid_(std::move(pyramid)), identity_(std::move(identity)), pyramid_depth_(pyramid_depth) {
  if (pyramid_depth < 1) throw InvalidArgument("pyramid_depth must be at least 1");
}

void MultiScalePerceptualLoss::to(torch::Dtype dtype) {
  if (pyramid_module_) pyramid_module_->to(dtype);
  if (identity_module_) identity_module_->to(dtype);
}

namespace {

torch::Tensor feature_distance(const std::vector<torch::Tensor>& a, const std::vector<torch::Tensor>& b) {
  torch::Tensor total = torch::zeros({}, a.front().options());
  for (size_t i = 0; i < a.size(); ++i) total = total + (a[i] - b[i]).abs().mean();
  return total;
}

}  // namespace

torch::Tensor MultiScalePerceptualLoss::single_scale(const torch::Tensor& generated, const torch::Tensor& truth) const {
  if (generated.sizes() != truth.sizes()) throw ShapeError("perceptual loss: image sizes differ");
  torch::Tensor total = torch::zeros({}, generated.options());
  auto g = generated;
  auto t = truth;
  for (int64_t level = 0; level < pyramid_depth_; ++level) {
    if (level > 0) {
      if (g.size(-1) < 2) break;
      g = F::avg_pool2d(g, F::AvgPool2dFuncOptions(2));
      t = F::avg_pool2d(t, F::AvgPool2dFuncOptions(2));
    }
    total = total + feature_distance(pyramid_(g), pyramid_(t));
  }
  return total;
}

torch::Tensor MultiScalePerceptualLoss::operator()(const nets::GeneratorOutput& generated,
                                                   std::span<const torch::Tensor> truth) const {
  if (generated.images.size() != truth.size()) throw ShapeError("perceptual loss: scale count mismatch");
  torch::Tensor total = torch::zeros({}, generated.full().options());
  for (size_t i = 0; i < truth.size(); ++i) {
    if (generated.images[i].sizes() != truth[i].sizes()) {
      throw ShapeError("perceptual loss: scale " + std::to_string(i) + " size mismatch");
    }
    total = total + single_scale(generated.images[i], truth[i]);
  }
  if (identity_) {
    total = total + feature_distance((*identity_)(generated.full()), (*identity_)(truth.back()));
  }
  return total;
}

std::vector<torch::Tensor> image_pyramid(const torch::Tensor& image, std::span<const int64_t> sizes) {
  std::vector<torch::Tensor> out;
  for (auto s : sizes) {
    if (s == image.size(-1)) {
      out.push_back(image);
    } else {
      out.push_back(F::adaptive_avg_pool2d(image, F::AdaptiveAvgPool2dFuncOptions({s, s})));
    }
  }
  return out;
}

GanLosses gan_losses(const nets::DiscriminatorOutput& real, const nets::DiscriminatorOutput& fake) {
  if (real.logits.sizes() != fake.logits.sizes() || real.features.size() != fake.features.size()) {
    throw ShapeError("GAN losses: discriminator outputs differ in shape");
  }
  GanLosses out;
  out.discriminator = 0.5 * ((real.logits - 1.0).pow(2).mean() + fake.logits.pow(2).mean());
  out.generator = (fake.logits - 1.0).pow(2).mean();
  torch::Tensor fm = torch::zeros({}, fake.logits.options());
  for (size_t i = 0; i < real.features.size(); ++i) {
    if (real.features[i].sizes() != fake.features[i].sizes()) throw ShapeError("GAN losses: feature shape mismatch");
    fm = fm + (fake.features[i] - real.features[i].detach()).abs().mean();
  }
  out.feature_matching = real.features.empty() ? fm : fm / static_cast<double>(real.features.size());
  return out;
}

GanLosses gan_losses(nets::Discriminator& discriminator, const torch::Tensor& real, const torch::Tensor& fake) {
  if (real.sizes() != fake.sizes()) throw ShapeError("GAN losses: real and fake images differ in shape");
  auto real_out = discriminator->forward(real);
  auto fake_out = discriminator->forward(fake);
  auto fake_detached = discriminator->forward(fake.detach());
  auto g = gan_losses(real_out, fake_out);
  g.discriminator = gan_losses(real_out, fake_detached).discriminator;
  return g;
}

torch::Tensor equivariance_loss(const torch::Tensor& keypoints, const torch::Tensor& transformed_keypoints,
                                std::span<const geometry::AugmentTransform> transforms) {
  if (keypoints.dim() != 3 || keypoints.size(-1) != 2 || keypoints.sizes() != transformed_keypoints.sizes()) {
    throw ShapeError("equivariance loss expects two [B, K, 2] keypoint sets");
  }
  auto back = geometry::invert_augment_points(transformed_keypoints, transforms);
  return (keypoints - back).abs().sum({1, 2}).mean();
}

torch::Tensor equivariance_loss(const torch::Tensor& keypoints, const torch::Tensor& transformed_keypoints,
                                const geometry::AugmentTransform& transform) {
  std::vector<geometry::AugmentTransform> ts(static_cast<size_t>(keypoints.size(0)), transform);
  return equivariance_loss(keypoints, transformed_keypoints, ts);
}

torch::Tensor keypoint_prior_loss(const torch::Tensor& keypoints, double distance_threshold, double depth_target) {
  if (keypoints.dim() != 3 || keypoints.size(-1) != 3) throw ShapeError("keypoint prior expects [B, K, 3]");
  const auto k = keypoints.size(1);
  auto diff = keypoints.unsqueeze(2) - keypoints.unsqueeze(1);
  auto sq = diff.pow(2).sum(-1);
  auto hinge = torch::relu(distance_threshold - sq);
  auto upper = torch::triu(torch::ones({k, k}, keypoints.options()), 1);
  auto spread = (hinge * upper).sum({1, 2});
  auto depth = (keypoints.select(-1, 2).mean(1) - depth_target).abs();
  return (spread + depth).mean();
}

torch::Tensor deformation_prior_loss(const torch::Tensor& deformation) { return deformation.abs().mean(); }

torch::Tensor expression_consistency_loss(const nets::ExpressionLatent& a, const nets::ExpressionLatent& b) {
  if (a.values.sizes() != b.values.sizes() || a.values.dim() != 2) {
    throw ShapeError("expression consistency expects two [B, E] latents of equal shape");
  }
  auto na = a.values.norm(2, 1);
  auto nb = b.values.norm(2, 1);
  {
    torch::NoGradGuard no_grad;
    if (!(torch::min(na.min(), nb.min()).item<double>() > 1e-8)) {
      throw InvalidArgument("expression latent has (near) zero norm");
    }
  }
  auto cosine = (a.values * b.values).sum(1) / (na * nb);
  return (1.0 - cosine).mean();
}

torch::Tensor canonical_consistency_loss(const geometry::KeypointSet& a, const geometry::KeypointSet& b) {
  if (a.points.sizes() != b.points.sizes()) throw ShapeError("canonical consistency: keypoint sets differ in shape");
  return torch::linalg_vector_norm(a.points - b.points, 2, -1).mean();
}

torch::Tensor landmark_loss(const torch::Tensor& generated, const torch::Tensor& driving, const LossConfig& config) {
  if (generated.dim() != 3 || generated.size(1) != face::kLandmarkCount || generated.size(2) != 2 ||
      generated.sizes() != driving.sizes()) {
    throw ShapeError("landmark loss expects two [B, 145, 2] landmark sets");
  }
  auto part = [](const torch::Tensor& a, const torch::Tensor& b) {
    return torch::linalg_vector_norm(a - b, 2, -1).mean();
  };
  return config.lambda_face * part(face::face_part(generated), face::face_part(driving)) +
         config.lambda_mouth * part(face::mouth_part(generated), face::mouth_part(driving)) +
         config.lambda_pupil * part(face::pupil_part(generated), face::pupil_part(driving));
}

torch::Tensor total_loss(const LossTerms& terms, const LossWeights& weights) {
  const std::pair<const char*, std::pair<const std::optional<torch::Tensor>*, double>> parts[] = {
      {"perceptual", {&terms.perceptual, weights.perceptual}},
      {"gan", {&terms.gan, weights.gan}},
      {"equivariance", {&terms.equivariance, weights.equivariance}},
      {"keypoint_prior", {&terms.keypoint_prior, weights.keypoint_prior}},
      {"deformation_prior", {&terms.deformation_prior, weights.deformation_prior}},
      {"expression", {&terms.expression, weights.expression}},
      {"canonical", {&terms.canonical, weights.canonical}},
      {"landmark", {&terms.landmark, weights.landmark}},
  };
  torch::Tensor total;
  for (const auto& [name, entry] : parts) {
    const auto& [term, weight] = entry;
    if (!term->has_value() || !(*term)->defined()) {
      throw InvalidArgument(std::string("missing loss component '") + name + "'; pass an explicit zero to disable it");
    }
    auto weighted = weight * (**term);
    total = total.defined() ? total + weighted : weighted;
  }
  return total;
}

}  // namespace mmfa::losses
