#include "mmfa/expr_vae.hpp"

#include <string>

#include "mmfa/error.hpp"

namespace mmfa::vae {

namespace nn = torch::nn;

void VaeConfig::validate() const {
  if (feature_dim <= 0 || latent_dim <= 0 || hidden <= 0 || discriminator_hidden <= 0) {
    throw InvalidArgument("VAE dimensions must be positive");
  }
}

namespace {

void check_width(const torch::Tensor& t, int64_t width, const char* what) {
  if (t.dim() != 2 || t.size(1) != width) {
    throw ShapeError(std::string(what) + " must be [B, " + std::to_string(width) + "]");
  }
}

nn::LeakyReLU leaky() { return nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)); }

}  // namespace

LatentEncoderImpl::LatentEncoderImpl(const VaeConfig& config) : config_(config) {
  config_.validate();
  const auto h = config.hidden;
  body_ = register_module("body", nn::Sequential(nn::Linear(config.feature_dim, h), leaky(), nn::Linear(h, h), leaky(),
                                                 nn::Linear(h, 2 * config.latent_dim)));
}

GaussianParams LatentEncoderImpl::forward(const nets::ExpressionLatent& features) {
  check_width(features.values, config_.feature_dim, "expression feature");
  auto out = body_->forward(features.values);
  auto mu = out.narrow(1, 0, config_.latent_dim);
  auto log_sigma = out.narrow(1, config_.latent_dim, config_.latent_dim);
  return {mu, torch::exp(log_sigma)};
}

LatentDecoderImpl::LatentDecoderImpl(const VaeConfig& config) : config_(config) {
  config_.validate();
  const auto h = config.hidden;
  body_ = register_module("body", nn::Sequential(nn::Linear(config.latent_dim, h), leaky(), nn::Linear(h, h), leaky(),
                                                 nn::Linear(h, config.feature_dim)));
}

nets::ExpressionLatent LatentDecoderImpl::forward(const LatentCode& code) {
  check_width(code.z, config_.latent_dim, "latent code");
  return {body_->forward(code.z)};
}

FeatureDiscriminatorImpl::FeatureDiscriminatorImpl(const VaeConfig& config) : config_(config) {
  config_.validate();
  const auto h = config.discriminator_hidden;
  body_ = register_module("body", nn::Sequential(nn::Linear(config.feature_dim, h), leaky(), nn::Linear(h, h),
                                                 leaky(), nn::Linear(h, 1)));
}

torch::Tensor FeatureDiscriminatorImpl::forward(const torch::Tensor& features) {
  check_width(features, config_.feature_dim, "discriminator input");
  return body_->forward(features).squeeze(1);
}

ExpressionVaeImpl::ExpressionVaeImpl(const VaeConfig& config) : config_(config) {
  encoder = register_module("encoder", LatentEncoder(config));
  decoder = register_module("decoder", LatentDecoder(config));
  discriminator = register_module("discriminator", FeatureDiscriminator(config));
  feature_mean = register_buffer("feature_mean", torch::zeros({config.feature_dim}));
  feature_scale = register_buffer("feature_scale", torch::ones({config.feature_dim}));
}

void ExpressionVaeImpl::fit_feature_statistics(const torch::Tensor& features) {
  check_width(features, config_.feature_dim, "expression feature");
  if (features.size(0) < 2) throw InvalidArgument("feature statistics need at least two feature vectors");
  torch::NoGradGuard no_grad;
  auto f = features.to(feature_mean.dtype());
  feature_mean.copy_(f.mean(0));
  feature_scale.copy_(f.std(0, /*unbiased=*/false).clamp_min(1e-6));
}

torch::Tensor ExpressionVaeImpl::standardize(const torch::Tensor& features) const {
  check_width(features, config_.feature_dim, "expression feature");
  return (features - feature_mean) / feature_scale;
}

torch::Tensor ExpressionVaeImpl::destandardize(const torch::Tensor& standardized) const {
  check_width(standardized, config_.feature_dim, "standardized feature");
  return standardized * feature_scale + feature_mean;
}

GaussianParams encode_latent(ExpressionVae& vae, const nets::ExpressionLatent& features) {
  return vae->encoder->forward({vae->standardize(features.values)});
}

nets::ExpressionLatent decode_latent(ExpressionVae& vae, const LatentCode& code) {
  return {vae->destandardize(vae->decoder->forward(code).values)};
}

LatentCode reparameterize(const GaussianParams& g, const torch::Tensor& epsilon) {
  if (g.mu.sizes() != g.sigma.sizes() || g.mu.sizes() != epsilon.sizes()) {
    throw ShapeError("reparameterize: mu, sigma and epsilon must share a shape");
  }
  return {g.mu + g.sigma * epsilon};
}

torch::Tensor kl_to_standard_normal(const GaussianParams& g) {
  if (g.mu.sizes() != g.sigma.sizes() || g.mu.dim() != 2) throw ShapeError("KL expects [B, d_z] mu and sigma");
  {
    torch::NoGradGuard no_grad;
    if (!(g.sigma.min().item<double>() > 0.0)) throw InvalidArgument("KL requires sigma > 0");
  }
  auto var = g.sigma.pow(2);
  return (0.5 * (g.mu.pow(2) + var - 1.0 - torch::log(var)).sum(1)).mean();
}

VaeLossTerms vae_loss(const nets::ExpressionLatent& features, const nets::ExpressionLatent& reconstruction,
                      const GaussianParams& g, FeatureDiscriminator* discriminator, const VaeWeights& weights) {
  if (features.values.sizes() != reconstruction.values.sizes()) {
    throw ShapeError("VAE loss: feature and reconstruction shapes differ");
  }
  VaeLossTerms out;
  out.reconstruction = (features.values - reconstruction.values).pow(2).mean();
  out.kl = kl_to_standard_normal(g);
  if (weights.adversarial > 0.0) {
    if (discriminator == nullptr || discriminator->is_empty()) {
      throw InvalidArgument("VAE loss: adversarial weight > 0 requires a feature discriminator");
    }
    out.adversarial = ((*discriminator)->forward(reconstruction.values) - 1.0).pow(2).mean();
  } else {
    out.adversarial = torch::zeros({}, features.values.options());
  }
  out.total = weights.reconstruction * out.reconstruction + weights.kl * out.kl + weights.adversarial * out.adversarial;
  return out;
}

torch::Tensor feature_discriminator_loss(FeatureDiscriminator& discriminator, const torch::Tensor& real,
                                         const torch::Tensor& fake) {
  auto r = discriminator->forward(real.detach());
  auto f = discriminator->forward(fake.detach());
  return 0.5 * ((r - 1.0).pow(2).mean() + f.pow(2).mean());
}

LatentCode interpolate(const LatentCode& from, const LatentCode& to, double alpha) {
  if (from.z.sizes() != to.z.sizes()) throw ShapeError("interpolate: latent codes differ in shape");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InvalidArgument("interpolate: alpha must lie in [0, 1]");
  if (alpha == 0.0) return {from.z.clone()};
  if (alpha == 1.0) return {to.z.clone()};
  return {from.z + alpha * (to.z - from.z)};
}

CollapseReport collapse_diagnostics(const GaussianParams& batch, double threshold) {
  if (batch.mu.dim() != 2 || batch.mu.sizes() != batch.sigma.sizes()) {
    throw ShapeError("collapse diagnostics expect [B, d_z] mu and sigma");
  }
  if (batch.mu.size(0) < 2) throw InvalidArgument("collapse diagnostics need a batch of at least 2");
  torch::NoGradGuard no_grad;
  CollapseReport r;
  r.threshold = threshold;
  r.sigma_mean = batch.sigma.mean(0);
  r.mu_variance = batch.mu.var(0, /*unbiased=*/false);
  r.active_units = (r.mu_variance > threshold).sum().item<int64_t>();
  r.collapsed = r.active_units == 0;
  return r;
}

}  // namespace mmfa::vae
