#pragma once

// Learnable blocks of the animation model. Every network takes internal
// images in [-1, 1], shaped [B, 3, S, S] with S = NetConfig::image_size.

#include <torch/torch.h>

#include <memory>
#include <string>
#include <vector>

#include "mmfa/face_model.hpp"
#include "mmfa/geometry.hpp"

namespace mmfa::nets {

enum class JacobianMode { kRotation, kIdentity };

struct NetConfig {
  int64_t image_size = 64;
  int64_t num_keypoints = 20;
  int64_t expr_dim = 256;
  int64_t volume_channels = 32;
  int64_t volume_depth = 16;
  int64_t base_width = 32;
  int64_t motion_channels = 4;    // compressed volume fed to the dense motion net
  int64_t motion_hidden = 32;
  int64_t decoder_hidden = 256;
  double heatmap_sigma = 0.1;
  double keypoint_temperature = 0.1;
  bool use_occlusion = true;
  JacobianMode jacobian = JacobianMode::kRotation;

  // Spatial size of the appearance volume (H' = W').
  int64_t volume_size() const { return image_size / 4; }
  // Generator output sizes, successive doublings ending at image_size.
  std::vector<int64_t> generator_scales() const { return {image_size / 4, image_size / 2, image_size}; }

  // Throws InvalidArgument on unsupported values.
  void validate() const;
};

struct ExpressionLatent {
  torch::Tensor values;  // [B, expr_dim]
};

// Images at every generator scale, coarsest first, values in [-1, 1].
struct GeneratorOutput {
  std::vector<torch::Tensor> images;

  const torch::Tensor& full() const { return images.back(); }
};

struct DiscriminatorOutput {
  std::vector<torch::Tensor> features;
  torch::Tensor logits;
};

struct AffineOutput {
  torch::Tensor scale;        // [B], positive
  torch::Tensor translation;  // [B, 2], in [-1, 1]
};

// f = exp(ln(2) * tanh(pre)), so f lies in (1/2, 2).
torch::Tensor positive_scale(const torch::Tensor& pre_activation);

// Throws ShapeError unless `images` is [B, 3, S, S] for the configured S.
void check_images(const torch::Tensor& images, const NetConfig& config);

class KeypointDetectorImpl : public torch::nn::Module {
 public:
  explicit KeypointDetectorImpl(const NetConfig& config);
  geometry::KeypointSet forward(const torch::Tensor& images);

 private:
  NetConfig config_;
  torch::nn::Sequential encoder_{nullptr};
  torch::nn::Conv2d lift_{nullptr};
  torch::nn::Conv3d heatmap_{nullptr};
  int64_t lifted_channels_ = 8;
};
TORCH_MODULE(KeypointDetector);

class AffineEstimatorImpl : public torch::nn::Module {
 public:
  explicit AffineEstimatorImpl(const NetConfig& config);
  AffineOutput forward(const torch::Tensor& images);

 private:
  NetConfig config_;
  torch::nn::Sequential features_{nullptr};
  torch::nn::Sequential head_{nullptr};
};
TORCH_MODULE(AffineEstimator);

class ExpressionEncoderImpl : public torch::nn::Module {
 public:
  explicit ExpressionEncoderImpl(const NetConfig& config);
  ExpressionLatent forward(const torch::Tensor& images);

 private:
  NetConfig config_;
  torch::nn::Sequential features_{nullptr};
  torch::nn::Linear project_{nullptr};
};
TORCH_MODULE(ExpressionEncoder);

// delta = D_e(f_delta, p_C): fully connected with batch norm, linear output.
class ExpressionDecoderImpl : public torch::nn::Module {
 public:
  explicit ExpressionDecoderImpl(const NetConfig& config);
  torch::Tensor forward(const ExpressionLatent& latent, const geometry::KeypointSet& canonical);

 private:
  NetConfig config_;
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(ExpressionDecoder);

class AppearanceEncoderImpl : public torch::nn::Module {
 public:
  explicit AppearanceEncoderImpl(const NetConfig& config);
  // [B, C, D, H', W'] feature volume.
  torch::Tensor forward(const torch::Tensor& images);

 private:
  NetConfig config_;
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(AppearanceEncoder);

// Inputs assembled for the dense motion network.
struct MotionInputs {
  torch::Tensor candidates;  // [B, K+1, D, H, W, 3]; 0 is the identity flow
  torch::Tensor heatmaps;    // [B, K+1, D, H, W]; G(p_D) - G(p_S), 0 for background
  torch::Tensor deformed;    // [B, K+1, c, D, H, W]
};

struct MotionPrediction {
  MotionInputs inputs;
  torch::Tensor masks;      // [B, K+1, D, H, W], softmax over K+1
  torch::Tensor occlusion;  // [B, 1, H, W], in [0, 1]
};

// Gaussian heatmaps exp(-|z - p|^2 / (2 sigma^2)) on a grid [S..., 3] for
// keypoints [B, K, 3] -> [B, K, S...].
torch::Tensor keypoint_heatmaps(const torch::Tensor& grid, const torch::Tensor& keypoints, double sigma);

class DenseMotionNetImpl : public torch::nn::Module {
 public:
  explicit DenseMotionNetImpl(const NetConfig& config);

  MotionInputs assemble(const torch::Tensor& volume, const geometry::KeypointSet& source,
                        const geometry::KeypointSet& driving, const torch::Tensor& jacobian);
  MotionPrediction forward(const torch::Tensor& volume, const geometry::KeypointSet& source,
                           const geometry::KeypointSet& driving, const torch::Tensor& jacobian);

 private:
  NetConfig config_;
  torch::nn::Conv3d compress_{nullptr};
  torch::nn::Sequential hourglass_{nullptr};
  torch::nn::Conv3d mask_head_{nullptr};
  torch::nn::Conv2d occlusion_head_{nullptr};
};
TORCH_MODULE(DenseMotionNet);

class GeneratorImpl : public torch::nn::Module {
 public:
  explicit GeneratorImpl(const NetConfig& config);
  GeneratorOutput forward(const torch::Tensor& warped_volume);

 private:
  NetConfig config_;
  torch::nn::Sequential stem_{nullptr};
  std::vector<torch::nn::Sequential> blocks_;
  std::vector<torch::nn::Sequential> to_image_;
  std::vector<torch::nn::Sequential> upsample_;
};
TORCH_MODULE(Generator);

class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(const NetConfig& config);
  DiscriminatorOutput forward(const torch::Tensor& images);

 private:
  NetConfig config_;
  std::vector<torch::nn::Sequential> blocks_;
  torch::nn::Conv2d logits_{nullptr};
};
TORCH_MODULE(Discriminator);

// Head rotation source. The pretrained pose network is replaced by this
// interface; `oracle` reads synthetic ground truth, `fixed` returns identity.
class PoseProvider {
 public:
  virtual ~PoseProvider() = default;
  virtual std::string name() const = 0;
  // [B, 3, 3] rotations for internal images [B, 3, S, S].
  virtual torch::Tensor rotations(const torch::Tensor& images, const face::MetaList& meta) const = 0;
};

class OraclePoseProvider final : public PoseProvider {
 public:
  std::string name() const override { return "oracle"; }
  torch::Tensor rotations(const torch::Tensor& images, const face::MetaList& meta) const override;
};

class FixedPoseProvider final : public PoseProvider {
 public:
  std::string name() const override { return "fixed"; }
  torch::Tensor rotations(const torch::Tensor& images, const face::MetaList& meta) const override;
};

// `oracle` when metadata is present, `fixed` otherwise.
class MetadataOrFixedPoseProvider final : public PoseProvider {
 public:
  std::string name() const override { return "auto"; }
  torch::Tensor rotations(const torch::Tensor& images, const face::MetaList& meta) const override;
};

std::shared_ptr<PoseProvider> make_pose_provider(const std::string& name);

// 145-point landmark source, [B, 145, 2] in normalized coordinates.
class LandmarkProvider {
 public:
  virtual ~LandmarkProvider() = default;
  virtual std::string name() const = 0;
  virtual bool differentiable() const = 0;
  virtual torch::Tensor detect(const torch::Tensor& images, const face::MetaList& meta) const = 0;
};

class OracleLandmarkProvider final : public LandmarkProvider {
 public:
  std::string name() const override { return "oracle"; }
  bool differentiable() const override { return false; }
  torch::Tensor detect(const torch::Tensor& images, const face::MetaList& meta) const override;
};

// Differentiable detector for the procedural faces: soft color assignment to
// the region prototypes, then first and second moments of each region.
class MomentLandmarkProvider final : public LandmarkProvider {
 public:
  explicit MomentLandmarkProvider(double temperature = 0.005, double split_sharpness = 0.01)
      : temperature_(temperature), split_sharpness_(split_sharpness) {}
  std::string name() const override { return "moments"; }
  bool differentiable() const override { return true; }
  torch::Tensor detect(const torch::Tensor& images, const face::MetaList& meta) const override;

  // Soft region weights [B, 5, H, W] for images in [-1, 1].
  torch::Tensor region_weights(const torch::Tensor& images) const;

 private:
  double temperature_;
  double split_sharpness_;
};

std::shared_ptr<LandmarkProvider> make_landmark_provider(const std::string& name);

}  // namespace mmfa::nets
