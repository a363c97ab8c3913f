#pragma once

// The assembled animation model: per-frame motion analysis, keypoint
// composition and flow-based generation, plus the discriminator used in
// training.

#include <torch/torch.h>

#include <vector>

#include "mmfa/geometry.hpp"
#include "mmfa/nets.hpp"

namespace mmfa::model {

// Everything estimated from one frame.
struct FrameAnalysis {
  geometry::KeypointSet canonical;  // p_C
  nets::AffineOutput affine;        // f, t
  nets::ExpressionLatent expression;
  torch::Tensor rotation;           // [B, 3, 3]
};

struct Synthesis {
  nets::GeneratorOutput output;
  nets::MotionPrediction motion;
  geometry::FlowField flow;
};

class AnimationModelImpl : public torch::nn::Module {
 public:
  explicit AnimationModelImpl(const nets::NetConfig& config);

  const nets::NetConfig& config() const { return config_; }

  // `rotations` comes from a pose provider.
  FrameAnalysis analyze(const torch::Tensor& images, const torch::Tensor& rotations);

  // delta = D_e(f_delta, p_C).
  torch::Tensor deformation(const nets::ExpressionLatent& expression, const geometry::KeypointSet& canonical);

  // Warps the source appearance volume from source to driving keypoints and
  // decodes it. Rotations give the per-keypoint Jacobian R_S R_D^T.
  Synthesis synthesize(const torch::Tensor& source_images, const geometry::KeypointSet& source_keypoints,
                       const geometry::KeypointSet& driving_keypoints, const torch::Tensor& source_rotation,
                       const torch::Tensor& driving_rotation);

  torch::Tensor jacobian(const torch::Tensor& source_rotation, const torch::Tensor& driving_rotation) const;

  // Every trainable parameter except the discriminator's.
  std::vector<torch::Tensor> generator_parameters();
  std::vector<torch::Tensor> discriminator_parameters();

  nets::KeypointDetector detector{nullptr};
  nets::AffineEstimator affine{nullptr};
  nets::ExpressionEncoder expression_encoder{nullptr};
  nets::ExpressionDecoder expression_decoder{nullptr};
  nets::AppearanceEncoder appearance{nullptr};
  nets::DenseMotionNet motion{nullptr};
  nets::Generator generator{nullptr};
  nets::Discriminator discriminator{nullptr};

 private:
  nets::NetConfig config_;
};
TORCH_MODULE(AnimationModel);

// Motion parameters of a frame with deformation `delta`.
geometry::MotionParams motion_params(const FrameAnalysis& frame, const torch::Tensor& delta);

}  // namespace mmfa::model
