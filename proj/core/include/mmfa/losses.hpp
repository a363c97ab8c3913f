#pragma once

// Training objectives. All functions are pure and differentiable; batched
// inputs are reduced with a mean over the batch.

#include <torch/torch.h>

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "mmfa/geometry.hpp"
#include "mmfa/nets.hpp"

namespace mmfa::losses {

// Weights of the eight terms of the total objective.
struct LossWeights {
  double perceptual = 1.0;
  double gan = 1.0;
  double equivariance = 1.0;
  double keypoint_prior = 1.0;
  double deformation_prior = 1.0;
  double expression = 1.0;
  double canonical = 1.0;
  double landmark = 1.0;
};

struct LossConfig {
  LossWeights weights;
  double feature_matching = 1.0;  // weight of feature matching inside the GAN term
  double lambda_face = 1.0;
  double lambda_mouth = 1.0;
  double lambda_pupil = 1.0;
  double distance_threshold = 0.1;  // D_t, on squared distances
  double depth_target = 0.33;       // z_t
  int64_t pyramid_depth = 2;        // downsampling levels per generator scale
  bool identity_term = true;        // extra extractor at full resolution only

  void validate() const;
};

// Maps images [B, 3, H, W] to a list of feature maps. A pretrained extractor
// can be dropped in through this signature.
using FeatureFn = std::function<std::vector<torch::Tensor>(const torch::Tensor&)>;

// Frozen convolutional stack with seeded random weights. Features are the
// input itself followed by each ReLU activation.
class RandomConvExtractorImpl : public torch::nn::Module {
 public:
  RandomConvExtractorImpl(uint64_t seed, std::vector<int64_t> channels);
  std::vector<torch::Tensor> forward(const torch::Tensor& images);

 private:
  std::vector<torch::nn::Conv2d> convs_;
};
TORCH_MODULE(RandomConvExtractor);

class MultiScalePerceptualLoss {
 public:
  explicit MultiScalePerceptualLoss(int64_t pyramid_depth = 2, bool identity_term = true);
  MultiScalePerceptualLoss(FeatureFn pyramid, std::optional<FeatureFn> identity, int64_t pyramid_depth);

  // Sum over scales of the per-scale perceptual distance; `truth` holds one
  // image per generator scale, coarsest first.
  torch::Tensor operator()(const nets::GeneratorOutput& generated, std::span<const torch::Tensor> truth) const;

  // Perceptual distance of a single image pair (pyramid of features).
  torch::Tensor single_scale(const torch::Tensor& generated, const torch::Tensor& truth) const;

  // Moves the default extractors to a dtype (used by float64 gradient checks).
  void to(torch::Dtype dtype);

 private:
  RandomConvExtractor pyramid_module_{nullptr};
  RandomConvExtractor identity_module_{nullptr};
  FeatureFn pyramid_;
  std::optional<FeatureFn> identity_;
  int64_t pyramid_depth_;
};

// Area-downsampled copies of `image` at each size.
std::vector<torch::Tensor> image_pyramid(const torch::Tensor& image, std::span<const int64_t> sizes);

struct GanLosses {
  torch::Tensor discriminator;
  torch::Tensor generator;
  torch::Tensor feature_matching;
};

// Least-squares GAN losses from discriminator outputs. The caller decides
// what is detached; real features are detached for feature matching.
GanLosses gan_losses(const nets::DiscriminatorOutput& real, const nets::DiscriminatorOutput& fake);
// Runs the discriminator: the discriminator loss sees a detached fake.
GanLosses gan_losses(nets::Discriminator& discriminator, const torch::Tensor& real, const torch::Tensor& fake);

// sum_k |p_X^k - T^-1(p_T(X)^k)|_1 on 2D projections [B, K, 2].
torch::Tensor equivariance_loss(const torch::Tensor& keypoints, const torch::Tensor& transformed_keypoints,
                                std::span<const geometry::AugmentTransform> transforms);
torch::Tensor equivariance_loss(const torch::Tensor& keypoints, const torch::Tensor& transformed_keypoints,
                                const geometry::AugmentTransform& transform);

// sum_{i<j} max(0, D_t - |p_i - p_j|^2) + |mean_k z_k - z_t|.
torch::Tensor keypoint_prior_loss(const torch::Tensor& keypoints, double distance_threshold, double depth_target);

// mean |delta|.
torch::Tensor deformation_prior_loss(const torch::Tensor& deformation);

// 1 - cos(f1, f2). Throws InvalidArgument when a vector has norm <= 1e-8.
torch::Tensor expression_consistency_loss(const nets::ExpressionLatent& a, const nets::ExpressionLatent& b);

// Mean per-keypoint Euclidean distance between canonical sets.
torch::Tensor canonical_consistency_loss(const geometry::KeypointSet& a, const geometry::KeypointSet& b);

// Weighted mean per-point distances over the face / mouth / pupil partitions.
torch::Tensor landmark_loss(const torch::Tensor& generated, const torch::Tensor& driving, const LossConfig& config);

// Every component must be present; use an explicit zero to disable one.
struct LossTerms {
  std::optional<torch::Tensor> perceptual;
  std::optional<torch::Tensor> gan;
  std::optional<torch::Tensor> equivariance;
  std::optional<torch::Tensor> keypoint_prior;
  std::optional<torch::Tensor> deformation_prior;
  std::optional<torch::Tensor> expression;
  std::optional<torch::Tensor> canonical;
  std::optional<torch::Tensor> landmark;
};

torch::Tensor total_loss(const LossTerms& terms, const LossWeights& weights);

}  // namespace mmfa::losses
