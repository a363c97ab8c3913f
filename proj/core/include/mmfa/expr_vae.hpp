#pragma once

// Gaussian latent space over expression features f_delta. The encoder maps a
// feature to N(mu, diag(sigma^2)), the decoder maps z back to a feature, and a
// small feature discriminator supplies the adversarial term that counters
// posterior collapse. Encoder, decoder and discriminator all work on features
// standardized per dimension with statistics stored in the VAE.

#include <torch/torch.h>

#include "mmfa/nets.hpp"

namespace mmfa::vae {

struct VaeConfig {
  int64_t feature_dim = 256;  // must equal NetConfig::expr_dim
  int64_t latent_dim = 64;
  int64_t hidden = 256;
  int64_t discriminator_hidden = 128;

  void validate() const;
};

struct VaeWeights {
  double reconstruction = 1.0;  // lambda_f
  double kl = 0.01;             // lambda_kl
  double adversarial = 0.1;     // lambda_adv
};

// mu and sigma are [B, d_z]; sigma > 0.
struct GaussianParams {
  torch::Tensor mu;
  torch::Tensor sigma;
};

struct LatentCode {
  torch::Tensor z;  // [B, d_z]
};

class LatentEncoderImpl : public torch::nn::Module {
 public:
  explicit LatentEncoderImpl(const VaeConfig& config);
  GaussianParams forward(const nets::ExpressionLatent& features);

 private:
  VaeConfig config_;
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(LatentEncoder);

class LatentDecoderImpl : public torch::nn::Module {
 public:
  explicit LatentDecoderImpl(const VaeConfig& config);
  nets::ExpressionLatent forward(const LatentCode& code);

 private:
  VaeConfig config_;
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(LatentDecoder);

// Three fully connected layers, one least-squares logit per feature vector.
class FeatureDiscriminatorImpl : public torch::nn::Module {
 public:
  explicit FeatureDiscriminatorImpl(const VaeConfig& config);
  torch::Tensor forward(const torch::Tensor& features);

 private:
  VaeConfig config_;
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(FeatureDiscriminator);

class ExpressionVaeImpl : public torch::nn::Module {
 public:
  explicit ExpressionVaeImpl(const VaeConfig& config);

  const VaeConfig& config() const { return config_; }
  LatentEncoder encoder{nullptr};
  LatentDecoder decoder{nullptr};
  FeatureDiscriminator discriminator{nullptr};

  // Identity (mean 0, scale 1) until fitted; scale > 0.
  torch::Tensor feature_mean;   // [feature_dim]
  torch::Tensor feature_scale;  // [feature_dim]

  // Sets mean and standard deviation from [N, feature_dim] features, N >= 2.
  // Dimensions with (near) zero spread keep a floor scale of 1e-6.
  void fit_feature_statistics(const torch::Tensor& features);
  torch::Tensor standardize(const torch::Tensor& features) const;
  torch::Tensor destandardize(const torch::Tensor& standardized) const;

 private:
  VaeConfig config_;
};
TORCH_MODULE(ExpressionVae);

// Raw features in, raw features out; standardization happens inside.
GaussianParams encode_latent(ExpressionVae& vae, const nets::ExpressionLatent& features);
nets::ExpressionLatent decode_latent(ExpressionVae& vae, const LatentCode& code);

// z = mu + sigma * epsilon.
LatentCode reparameterize(const GaussianParams& g, const torch::Tensor& epsilon);

// 1/2 sum_i (mu_i^2 + sigma_i^2 - 1 - ln sigma_i^2) per sample, batch mean.
torch::Tensor kl_to_standard_normal(const GaussianParams& g);

struct VaeLossTerms {
  torch::Tensor reconstruction;  // mean squared error
  torch::Tensor kl;
  torch::Tensor adversarial;     // generator side, (D(f_hat) - 1)^2
  torch::Tensor total;
};

// `discriminator` may be null only when weights.adversarial == 0.
VaeLossTerms vae_loss(const nets::ExpressionLatent& features, const nets::ExpressionLatent& reconstruction,
                      const GaussianParams& g, FeatureDiscriminator* discriminator, const VaeWeights& weights);

// 1/2 [(D(real) - 1)^2 + D(fake)^2]; the fake side is detached.
torch::Tensor feature_discriminator_loss(FeatureDiscriminator& discriminator, const torch::Tensor& real,
                                         const torch::Tensor& fake);

// z_S + alpha (z_D - z_S), alpha in [0, 1].
LatentCode interpolate(const LatentCode& from, const LatentCode& to, double alpha);

struct CollapseReport {
  torch::Tensor sigma_mean;   // [d_z]
  torch::Tensor mu_variance;  // [d_z]
  int64_t active_units = 0;   // dims with Var(mu) > threshold
  double threshold = 0.01;
  bool collapsed = false;     // active_units == 0
};

CollapseReport collapse_diagnostics(const GaussianParams& batch, double threshold = 0.01);

}  // namespace mmfa::vae
